"""Contact-aware shape-spectrum augmentation.

A source sequence is moved onto a replacement object of the same category.
Source contacts are transferred through a surface correspondence, the new
object starts from the source object's per-frame pose, and its trajectory is
then refined under a five-term objective (contact, normal alignment,
collision, initialization anchor, acceleration).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .core import DEFAULT_SKELETON, HOISequence, Skeleton
from .geometry import ObjectGeometry, ToyBodySDF, make_object, rot6d_to_matrix, rot6d_to_matrix_torch
from .metrics import CONTACT_GAMMA, contact_events, joint_object_distances, penetration, prf
from .synthetic import CONTACT_THRESHOLD, GeneratorConfig, generate_sequence

log = logging.getLogger(__name__)

TERMS = ("con", "normal", "colli", "init", "acc")
COLLI_MARGIN = 0.002


class DegenerateAABB(ValueError):
    pass


@dataclass
class AugWeights:
    lam_con: float = 1.0
    lam_normal: float = 0.1
    lam_colli: float = 1.0
    lam_init: float = 0.01
    lam_acc: float = 0.1

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("augmentation weights must be non-negative")

    def of(self, term: str) -> float:
        return getattr(self, f"lam_{term}")


# --------------------------------------------------------------------------
# correspondence
# --------------------------------------------------------------------------


class CorrespondenceMap:
    """Normalized-AABB coordinate transfer from a source to a target surface.

    A point's per-axis position inside the source box is reused inside the
    target box, so corners map to corners. Target normals are re-estimated
    from the nearest target surface sample. Subclass and override
    :meth:`map_points` to plug in a learned correspondence.
    """

    def __init__(self, src: ObjectGeometry, tgt: ObjectGeometry):
        if len(src.points) == 0 or len(tgt.points) == 0:
            raise ValueError("correspondence needs non-empty point clouds")
        if src.category != tgt.category:
            raise ValueError(f"category mismatch: {src.category} vs {tgt.category}")
        self.src, self.tgt = src, tgt
        self.src_lo, self.src_hi = src.aabb()
        self.tgt_lo, self.tgt_hi = tgt.aabb()
        for lo, hi, who in ((self.src_lo, self.src_hi, "source"), (self.tgt_lo, self.tgt_hi, "target")):
            if np.any(hi - lo <= 1e-12):
                raise DegenerateAABB(f"{who} AABB has a zero-extent axis")

    def map_points(self, pts) -> np.ndarray:
        u = (np.asarray(pts, dtype=np.float64) - self.src_lo) / (self.src_hi - self.src_lo)
        return self.tgt_lo + u * (self.tgt_hi - self.tgt_lo)

    def target_normals(self, mapped) -> np.ndarray:
        _, idx = kernels.min_dist_argmin(np.asarray(mapped, dtype=np.float64).reshape(-1, 3), self.tgt.points)
        return self.tgt.normals[idx]

    def __call__(self, pts) -> np.ndarray:
        return self.map_points(pts)


def build_correspondence(src: ObjectGeometry, tgt: ObjectGeometry) -> CorrespondenceMap:
    return CorrespondenceMap(src, tgt)


# --------------------------------------------------------------------------
# contacts
# --------------------------------------------------------------------------


@dataclass
class ContactSet:
    """Labelled (frame, joint) contacts with their source-surface anchors.

    ``offset`` is the joint position relative to its anchor vertex, in the
    object's local frame; ``src_world_normal`` is the anchor normal rotated
    by the source pose at that frame.
    """

    frame: np.ndarray
    joint: np.ndarray
    src_point: np.ndarray
    src_normal: np.ndarray
    offset: np.ndarray
    src_world_normal: np.ndarray

    def __len__(self) -> int:
        return len(self.frame)


def extract_contacts(seq: HOISequence, geom: ObjectGeometry, threshold: float = CONTACT_THRESHOLD) -> ContactSet:
    R = rot6d_to_matrix(seq.obj_rot6d)  # (T, 3, 3)
    joints = seq.joints()
    local = np.einsum("tji,tnj->tni", R, joints - seq.obj_trans[:, None, :])  # joints in object frame
    frames, js, idxs = [], [], []
    for t in range(seq.T):
        d, idx = kernels.min_dist_argmin(local[t], geom.points)
        hit = np.nonzero(d < threshold)[0]
        frames.extend([t] * len(hit))
        js.extend(hit.tolist())
        idxs.extend(idx[hit].tolist())
    f = np.asarray(frames, dtype=np.int64)
    j = np.asarray(js, dtype=np.int64)
    i = np.asarray(idxs, dtype=np.int64)
    p = geom.points[i].reshape(-1, 3)
    n = geom.normals[i].reshape(-1, 3)
    off = local[f, j] - p if len(f) else np.zeros((0, 3))
    wn = np.einsum("nij,nj->ni", R[f], n) if len(f) else np.zeros((0, 3))
    return ContactSet(f, j, p, n, off.reshape(-1, 3), wn.reshape(-1, 3))


def transfer_init(seq: HOISequence, cmap: CorrespondenceMap) -> tuple[np.ndarray, np.ndarray]:
    """Initial trajectory for the new object: the source per-frame pose."""
    return seq.obj_trans.copy(), seq.obj_rot6d.copy()


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


class AugObjective:
    """Differentiable five-term objective over (translation, 6D rotation[, joints]).

    Every term is zero when the target equals the source, the trajectory
    equals its initialization and the source keeps at least ``colli_margin``
    clearance from the body. The collision term measures depth below that
    margin: a plain relu(-sdf) leaves vertices grazing just inside the body
    because of the kink at zero.
    """

    def __init__(
        self,
        seq: HOISequence,
        cmap: CorrespondenceMap,
        contacts: ContactSet,
        weights: AugWeights,
        init: tuple[np.ndarray, np.ndarray] | None = None,
        body: ToyBodySDF | None = None,
        skel: Skeleton = DEFAULT_SKELETON,
        colli_margin: float = COLLI_MARGIN,
    ):
        if colli_margin < 0:
            raise ValueError("colli_margin must be non-negative")
        self.weights = weights
        self.colli_margin = colli_margin
        self.body = body or ToyBodySDF.from_skeleton(skel)
        dt = torch.float64
        tau0, r60 = init if init is not None else transfer_init(seq, cmap)
        self.tau0 = torch.as_tensor(tau0, dtype=dt)
        self.r60 = torch.as_tensor(r60, dtype=dt)
        self.joints0 = torch.as_tensor(seq.joints(), dtype=dt)
        self.verts = torch.as_tensor(cmap.tgt.points, dtype=dt)
        q = cmap.map_points(contacts.src_point) if len(contacts) else np.zeros((0, 3))
        nq = cmap.target_normals(q) if len(contacts) else np.zeros((0, 3))
        self.frame = torch.as_tensor(contacts.frame)
        self.joint = torch.as_tensor(contacts.joint)
        self.q = torch.as_tensor(q, dtype=dt)
        self.nq = torch.as_tensor(nq, dtype=dt)
        self.offset = torch.as_tensor(contacts.offset, dtype=dt)
        self.src_wn = torch.as_tensor(contacts.src_world_normal, dtype=dt)

    def terms(self, tau: torch.Tensor, r6: torch.Tensor, joints: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        joints = self.joints0 if joints is None else joints
        R = rot6d_to_matrix_torch(r6)
        zero = tau.sum() * 0.0
        if len(self.frame):
            Rf = R[self.frame]
            anchor = torch.einsum("nij,nj->ni", Rf, self.q + self.offset) + tau[self.frame]
            l_con = ((joints[self.frame, self.joint] - anchor) ** 2).sum()
            wn = torch.einsum("nij,nj->ni", Rf, self.nq)
            cos = (wn * self.src_wn).sum(-1) / (wn.norm(dim=-1) * self.src_wn.norm(dim=-1)).clamp_min(1e-12)
            l_normal = (1.0 - cos).sum()
        else:
            l_con = l_normal = zero
        posed = torch.einsum("tij,nj->tni", R, self.verts) + tau[:, None, :]
        l_colli = torch.relu(self.colli_margin - self.body.sdf_torch(posed, joints)).sum()
        l_init = ((tau - self.tau0) ** 2).sum() + ((r6 - self.r60) ** 2).sum()
        if joints is not self.joints0:
            l_init = l_init + ((joints - self.joints0) ** 2).sum()
        dtau = tau - self.tau0
        dr6 = r6 - self.r60
        if tau.shape[0] >= 3:
            l_acc = ((dtau[2:] - 2 * dtau[1:-1] + dtau[:-2]) ** 2).sum() + ((dr6[2:] - 2 * dr6[1:-1] + dr6[:-2]) ** 2).sum()
        else:
            l_acc = zero
        return {"con": l_con, "normal": l_normal, "colli": l_colli, "init": l_init, "acc": l_acc}

    def total(self, terms: dict[str, torch.Tensor]) -> torch.Tensor:
        return sum(self.weights.of(k) * terms[k] for k in TERMS)

    def __call__(self, tau, r6, joints=None) -> tuple[torch.Tensor, dict[str, float]]:
        t = self.terms(tau, r6, joints)
        return self.total(t), {k: float(v.detach()) for k, v in t.items()}


def aug_objective(seq, tau, r6, cmap, contacts, weights, joints=None, init=None, colli_margin=COLLI_MARGIN):
    """Total objective and per-term (unweighted) values at a given trajectory."""
    obj = AugObjective(seq, cmap, contacts, weights, init, colli_margin=colli_margin)
    dt = torch.float64
    j = None if joints is None else torch.as_tensor(joints, dtype=dt)
    total, parts = obj(torch.as_tensor(tau, dtype=dt), torch.as_tensor(r6, dtype=dt), j)
    return float(total), parts


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


@dataclass
class OptimizeReport:
    initial: dict[str, float]
    final: dict[str, float]
    initial_total: float
    final_total: float
    iterations: int
    status: str = "ok"
    history: list[float] = field(default_factory=list)


class _NonFinite(Exception):
    pass


def optimize(
    seq: HOISequence,
    cmap: CorrespondenceMap,
    contacts: ContactSet,
    weights: AugWeights | None = None,
    iters: int = 500,
    optimize_human: bool = False,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    method: str = "lbfgs",
    gtol: float = 1e-10,
    colli_margin: float = COLLI_MARGIN,
) -> tuple[HOISequence, OptimizeReport]:
    """Refine the new object's trajectory (and optionally the joints).

    ``method="lbfgs"`` uses limited-memory BFGS (gradient information only,
    line search with a sufficient-decrease condition). ``method="gd"`` is
    plain gradient descent with Armijo backtracking; it is much slower on
    this problem. Both are monotone, so the final objective never exceeds
    the initial one. A non-finite objective stops the run and the last
    finite iterate is returned with ``status="nonfinite"``.
    """
    if method not in ("lbfgs", "gd"):
        raise ValueError(f"unknown optimizer {method!r}")
    weights = weights or AugWeights()
    obj = AugObjective(seq, cmap, contacts, weights, init, colli_margin=colli_margin)
    n_b = seq.body_joints.shape[1]
    params = [obj.tau0.clone(), obj.r60.clone()]
    if optimize_human:
        params.append(obj.joints0.clone())
    shapes = [p.shape for p in params]
    sizes = [p.numel() for p in params]

    def unflat(x) -> list[torch.Tensor]:
        parts = torch.split(torch.as_tensor(x, dtype=torch.float64), sizes)
        return [v.reshape(s) for v, s in zip(parts, shapes)]

    def evaluate(ps, need_grad: bool = True):
        ps = [p.detach().clone().requires_grad_(need_grad) for p in ps]
        with torch.set_grad_enabled(need_grad):
            terms = obj.terms(*ps)
            f = obj.total(terms)
            grads = torch.autograd.grad(f, ps) if need_grad else None
        return float(f.detach()), {k: float(v.detach()) for k, v in terms.items()}, grads

    f0, parts0, grads = evaluate(params)
    report = OptimizeReport(parts0, parts0, f0, f0, 0, history=[f0])
    if not np.isfinite(f0):
        report.status = "nonfinite"
        log.warning("augmentation objective is non-finite at initialization")
        return seq, report
    best = {"x": torch.cat([p.flatten() for p in params]).numpy(), "f": f0, "parts": parts0}

    if method == "lbfgs":
        from scipy.optimize import minimize

        def fun(x):
            f, parts, g = evaluate(unflat(x))
            if not np.isfinite(f):
                raise _NonFinite
            if f < best["f"]:
                best.update(x=np.array(x), f=f, parts=parts)
            return f, torch.cat([v.flatten() for v in g]).numpy()

        def record(_x):
            report.history.append(best["f"])

        try:
            res = minimize(fun, best["x"], jac=True, method="L-BFGS-B", callback=record,
                           options={"maxiter": iters, "gtol": gtol, "ftol": 1e-15, "maxcor": 20})
            report.iterations = int(res.nit)
        except _NonFinite:
            report.status = "nonfinite"
            report.iterations = len(report.history) - 1
    else:
        step, armijo, f = 1e-2, 1e-4, f0
        for it in range(1, iters + 1):
            gnorm2 = sum(float((g**2).sum()) for g in grads)
            if gnorm2 <= gtol**2:
                break
            while step >= 1e-14:
                cand = [p - step * g for p, g in zip(params, grads)]
                f_new, _, _ = evaluate(cand, False)
                if not np.isfinite(f_new):
                    step *= 0.5
                    continue
                if f_new <= f - armijo * step * gnorm2:
                    break
                step *= 0.5
            if step < 1e-14:
                report.status = "stalled"
                break
            params = cand
            f, parts, grads = evaluate(params)
            best.update(x=torch.cat([p.flatten() for p in params]).numpy(), f=f, parts=parts)
            report.history.append(f)
            report.iterations = it
            step *= 2.0

    report.final = best["parts"]
    report.final_total = best["f"]
    ps = unflat(best["x"])
    kw = {"obj_trans": ps[0].numpy().copy(), "obj_rot6d": ps[1].numpy().copy()}
    if optimize_human:
        J = ps[2].numpy()
        kw.update(body_joints=J[:, :n_b].copy(), hand_joints=J[:, n_b:].copy())
    return replace(seq, **kw), report


# --------------------------------------------------------------------------
# quality and demo
# --------------------------------------------------------------------------


QUALITY_COLUMNS = ("pene", "floating", "c_prec", "c_rec", "c_f1")


def floating_fraction(seq: HOISequence, geom, contacts: ContactSet, gamma: float = CONTACT_GAMMA) -> float:
    """Fraction of contact-labelled frames whose closest labelled joint is farther than ``gamma``."""
    if len(contacts) == 0:
        return 0.0
    d = joint_object_distances(seq, geom)
    frames = np.unique(contacts.frame)
    floating = 0
    for t in frames:
        js = contacts.joint[contacts.frame == t]
        floating += bool(d[t, js].min() > gamma)
    return float(floating / len(frames))


def quality(aug: HOISequence, tgt: ObjectGeometry, src_seq: HOISequence, src: ObjectGeometry, contacts: ContactSet) -> dict[str, float]:
    _, frac = penetration(aug, tgt)
    # augmented contacts against the new object, reference contacts against the source object
    p, r, f = prf(contact_events(aug, tgt), contact_events(src_seq, src))
    return {"pene": frac, "floating": floating_fraction(aug, tgt, contacts), "c_prec": p, "c_rec": r, "c_f1": f}


def augment(
    seq: HOISequence,
    src: ObjectGeometry,
    tgt: ObjectGeometry,
    weights: AugWeights | None = None,
    iters: int = 500,
    optimize_human: bool = False,
    method: str = "lbfgs",
    colli_margin: float = COLLI_MARGIN,
) -> tuple[HOISequence, OptimizeReport, dict[str, float]]:
    cmap = build_correspondence(src, tgt)
    contacts = extract_contacts(seq, src)
    out, report = optimize(seq, cmap, contacts, weights, iters, optimize_human, method=method, colli_margin=colli_margin)
    return out, report, quality(out, tgt, seq, src, contacts)


def write_quality_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].keys()) if rows else ["job", *QUALITY_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path


DEMO_SEED = 314
DEMO_BOX = (0.3, 0.34, 0.26)
DEMO_SCALE = 1.5


def demo_scene(seed: int = DEMO_SEED, scale: float = DEMO_SCALE):
    """Push sequence on a box plus a target box stretched along the push axis.

    Both hands touch the near face, so the stretched box can be matched by
    translating it away from the agent. Returns (sequence, source, target).
    """
    rng = np.random.default_rng([seed, 0])
    cfg = GeneratorConfig()
    src = make_object("demo_box", "box", "box", DEMO_BOX, cfg.n_points, rng, n_basis=64)
    out = generate_sequence(src, "push", rng, cfg)
    seq = HOISequence(
        out["body_joints"], out["hand_joints"], out["hand_angles"], out["obj_trans"], out["obj_rot6d"], cfg.fps
    )
    R0 = rot6d_to_matrix(seq.obj_rot6d[0])
    push_local = R0.T @ (seq.obj_trans[-1] - seq.obj_trans[0])
    axis = int(np.argmax(np.abs(push_local)))
    factors = np.ones(3)
    factors[axis] = scale
    tgt = src.scaled(factors, name="demo_box_stretched")
    return seq, src, tgt
