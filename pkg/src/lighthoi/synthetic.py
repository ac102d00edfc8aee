"""Deterministic toy human-object interaction corpus.

A kinematic stick agent walks up to a parametric object, grasps it, performs
one of four tasks and lets go. Phases per sequence: approach, reach,
manipulate, release. During manipulation the hands are rigidly attached to
two object surface points, offset 2 cm along the surface normal, so the
emitted contact labels follow from geometry alone.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .core import DEFAULT_SKELETON, HOIDataset, Skeleton
from .geometry import (
    BPS_MAX_POINTS,
    ObjectLibrary,
    apply_pose,
    make_object,
    matrix_to_rot6d,
    yaw_matrix,
)

log = logging.getLogger(__name__)

TASKS = ("pick_up", "push", "lift_carry", "rotate")
PHASES = ("approach", "reach", "manipulate", "release")
CATEGORIES = ("box", "cylinder", "ellipsoid")

CONTACT_THRESHOLD = 0.03
GROUND_CONTACT_HEIGHT = 0.05
HAND_OFFSET = 0.02
FOOT_HEIGHT = 0.03
MAX_REACH_WIDTH = 0.8


@dataclass
class GeneratorConfig:
    n_sequences: int = 576
    T: int = 60
    fps: float = 30.0
    seed: int = 0
    tasks: tuple = TASKS
    objects_per_category: int = 4
    n_points: int = 512
    n_basis: int = BPS_MAX_POINTS
    box_dims: tuple = ((0.22, 0.45), (0.22, 0.45), (0.18, 0.4))
    cylinder_dims: tuple = ((0.09, 0.18), (0.2, 0.45))
    ellipsoid_dims: tuple = ((0.1, 0.22), (0.1, 0.22), (0.09, 0.2))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


# --------------------------------------------------------------------------
# object library
# --------------------------------------------------------------------------


def build_library(cfg: GeneratorConfig) -> ObjectLibrary:
    rng = np.random.default_rng([cfg.seed, 1])
    objs = []
    for cat in CATEGORIES:
        for i in range(cfg.objects_per_category):
            if cat == "box":
                params = [rng.uniform(*r) for r in cfg.box_dims]
            elif cat == "cylinder":
                params = [rng.uniform(*r) for r in cfg.cylinder_dims]
            else:
                params = [rng.uniform(*r) for r in cfg.ellipsoid_dims]
            objs.append(make_object(f"{cat}_{i}", cat, cat, params, cfg.n_points, rng, cfg.n_basis))
    return ObjectLibrary(objs)


# --------------------------------------------------------------------------
# kinematics helpers
# --------------------------------------------------------------------------


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _plan_feet(pelvis_xy, heading, T):
    """Stepping feet that stay planted unless lifted above the contact height.

    Horizontal travel happens only while the foot is above 5 cm, so grounded
    frames never slide.
    """
    swing_len = 6
    lateral = (0.12, -0.12)

    def nominal(f, t):
        t = min(t, T - 1)
        return pelvis_xy[t] + _rot2(heading[t]) @ np.array([0.0, lateral[f]])

    feet = np.zeros((T, 2, 3))
    stance = [nominal(0, 0), nominal(1, 0)]
    swing = [None, None]  # (start_t, from_xy, to_xy)
    for t in range(T):
        for f in range(2):
            if swing[f] is None and swing[1 - f] is None:
                if np.linalg.norm(nominal(f, t + 3) - stance[f]) > 0.08:
                    swing[f] = (t, stance[f].copy(), nominal(f, t + swing_len))
        for f in range(2):
            if swing[f] is None:
                feet[t, f, :2] = stance[f]
                feet[t, f, 2] = FOOT_HEIGHT
                continue
            t0, a, b = swing[f]
            u = (t - t0) / swing_len
            s = _smoothstep((u - 0.2) / 0.6)
            feet[t, f, :2] = a + (b - a) * s
            feet[t, f, 2] = FOOT_HEIGHT + 0.1 * np.sin(np.pi * u)
            if t - t0 >= swing_len:
                stance[f] = b.copy()
                swing[f] = None
                feet[t, f, :2] = b
                feet[t, f, 2] = FOOT_HEIGHT
    return feet


def _grasp_vertices(obj, R_obj, trans, hand_dirs, tip_dir):
    """Pick palm and tip vertices whose normals face the requested directions."""
    pts_w = apply_pose(obj.points, trans, matrix_to_rot6d(R_obj))
    nrm_w = obj.normals @ R_obj.T
    centre = trans
    out = []
    for d in hand_dirs:
        facing = nrm_w @ d
        ok = facing > 0.75 * facing.max()
        # prefer vertices near the support point at the object's mid height
        target = centre + d * 1.0
        score = np.where(ok, np.linalg.norm(pts_w - target, axis=1), np.inf)
        score += 3.0 * np.abs(pts_w[:, 2] - centre[2])
        palm = int(np.argmin(score))
        tip_target = pts_w[palm] + 0.06 * tip_dir
        tip_score = np.where(ok, np.linalg.norm(pts_w - tip_target, axis=1), np.inf)
        tip_score[palm] = np.inf
        tip = int(np.argmin(tip_score))
        out.append((palm, tip))
    return out


# --------------------------------------------------------------------------
# single sequence
# --------------------------------------------------------------------------


def generate_sequence(obj, task: str, rng: np.random.Generator, cfg: GeneratorConfig, skel: Skeleton = DEFAULT_SKELETON):
    T = cfg.T
    lo, hi = obj.aabb()
    half = (hi - lo) / 2

    # phase boundaries, drawn in 60-frame units and scaled to T
    f = T / 60.0
    a, r, m = int(rng.integers(12, 17)), int(rng.integers(8, 11)), int(rng.integers(22, 27))
    if f == 1.0:
        a_end, r_end = a, a + r
        m_end = min(T - 8, r_end + m)
    else:
        a_end = max(1, round(a * f))
        r_end = a_end + max(1, round(r * f))
        m_end = min(T - max(1, round(8 * f)), r_end + max(1, round(m * f)))
    phase = np.zeros(T, dtype=np.int64)
    phase[a_end:r_end] = 1
    phase[r_end:m_end] = 2
    phase[m_end:] = 3

    # object placement; approach along a lateral face normal
    psi = rng.uniform(-np.pi, np.pi)
    R0 = yaw_matrix(psi)
    face = int(rng.integers(4))
    local_dir = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]][face], dtype=np.float64)
    u = R0 @ local_dir  # from object towards agent
    support = float(np.abs(local_dir) @ half)
    lateral_extent = float(np.abs(np.array([-local_dir[1], local_dir[0], 0.0])) @ half)
    if task != "push" and 2 * lateral_extent > MAX_REACH_WIDTH:
        return None
    obj_xy = rng.uniform(-0.5, 0.5, size=2)
    obj_z = -lo[2]
    base_trans = np.array([obj_xy[0], obj_xy[1], obj_z])

    heading_vec = -u[:2] / np.linalg.norm(u[:2])
    heading = np.arctan2(heading_vec[1], heading_vec[0])
    h3 = np.array([heading_vec[0], heading_vec[1], 0.0])
    l3 = np.array([-heading_vec[1], heading_vec[0], 0.0])
    stand = obj_xy + u[:2] * (support + 0.3)
    start = stand + u[:2] * rng.uniform(0.3, 0.6) + l3[:2] * rng.uniform(-0.15, 0.15)

    # object trajectory
    obj_R = np.repeat(R0[None], T, axis=0)
    obj_t = np.repeat(base_trans[None], T, axis=0)
    pelvis_xy = np.zeros((T, 2))
    sign = rng.choice([-1.0, 1.0])
    travel = rng.uniform(0.3, 0.5)
    lift = rng.uniform(0.15, 0.3)
    for t in range(T):
        if t < a_end:
            pelvis_xy[t] = start + (stand - start) * _smoothstep(t / max(a_end - 1, 1))
        else:
            pelvis_xy[t] = stand
        if phase[t] < 2 and t < r_end:
            continue
        v = _smoothstep((min(t, m_end - 1) - r_end) / max(m_end - 1 - r_end, 1))
        if task == "pick_up":
            obj_t[t, 2] = obj_z + lift * np.sin(np.pi * v)
        elif task == "push":
            obj_t[t, :2] = obj_xy + heading_vec * travel * v
            pelvis_xy[t] = stand + heading_vec * travel * v
        elif task == "lift_carry":
            up = _smoothstep(v / 0.3) - _smoothstep((v - 0.7) / 0.3)
            mv = _smoothstep((v - 0.3) / 0.4)
            obj_t[t, 2] = obj_z + lift * up
            obj_t[t, :2] = obj_xy + heading_vec * travel * mv
            pelvis_xy[t] = stand + heading_vec * travel * mv
        elif task == "rotate":
            obj_R[t] = yaw_matrix(sign * np.pi / 2 * v) @ R0

    # grasp points
    if task == "push":
        near = u
        picks = _grasp_vertices(obj, R0, base_trans, [near + 0.6 * l3, near - 0.6 * l3], np.array([0.0, 0.0, 1.0]))
    else:
        picks = _grasp_vertices(obj, R0, base_trans, [l3, -l3], h3)
    idx = [picks[0][0], picks[0][1], picks[1][0], picks[1][1]]  # l_palm, l_tip, r_palm, r_tip
    local_pts = obj.points[idx]
    local_nrm = obj.normals[idx]

    attach = np.einsum("tij,nj->tni", obj_R, local_pts + HAND_OFFSET * local_nrm) + obj_t[:, None, :]
    pre = np.einsum("tij,nj->tni", obj_R, local_pts + 0.14 * local_nrm) + obj_t[:, None, :]

    # rest hand pose relative to pelvis
    pelvis_z_stand = 0.9
    hand_rest_local = np.array([[0.08, 0.22, -0.05], [0.1, 0.22, -0.13], [0.08, -0.22, -0.05], [0.1, -0.22, -0.13]])

    hands = np.zeros((T, 4, 3))
    for t in range(T):
        Rh = yaw_matrix(heading)
        rest = np.array([pelvis_xy[t][0], pelvis_xy[t][1], pelvis_z_stand]) + hand_rest_local @ Rh.T
        if phase[t] == 0:
            hands[t] = rest
        elif phase[t] == 1:
            w = (t - a_end + 1) / (r_end - a_end)
            if w < 0.6:
                hands[t] = rest + (pre[t] - rest) * _smoothstep(w / 0.6)
            else:
                hands[t] = pre[t] + (attach[t] - pre[t]) * _smoothstep((w - 0.6) / 0.4)
        elif phase[t] == 2:
            hands[t] = attach[t]
        else:
            w = (t - m_end + 1) / (T - m_end)
            # back off along the normal first, then return to rest
            back = np.einsum("ij,nj->ni", obj_R[m_end - 1], local_pts + 0.14 * local_nrm) + obj_t[m_end - 1]
            last = attach[m_end - 1]
            if w < 0.4:
                hands[t] = last + (back - last) * _smoothstep(w / 0.4)
            else:
                hands[t] = back + (rest - back) * _smoothstep((w - 0.4) / 0.6)

    # squat towards low hands
    palm_z = hands[:, [0, 2], 2].mean(axis=1)
    pelvis_z = np.clip(0.5 + palm_z, 0.6, pelvis_z_stand)
    pelvis = np.concatenate([pelvis_xy, pelvis_z[:, None]], axis=1)

    heads = np.full(T, heading)
    feet = _plan_feet(pelvis_xy, heads, T)

    Rh = yaw_matrix(heading)
    lean = 0.1 * (pelvis_z_stand - pelvis_z) / 0.3
    chest = pelvis + np.array([0.0, 0.0, 0.35]) + (lean[:, None] * h3)
    shoulders = chest[:, None, :] + np.array([[0.0, 0.18, 0.05], [0.0, -0.18, 0.05]]) @ Rh.T
    palms = hands[:, [0, 2]]
    elbows = (shoulders + palms) / 2 + np.stack([l3, -l3])[None] * 0.08 + np.array([0.0, 0.0, -0.05])
    hips = pelvis[:, None, :] + np.array([[0.0, 0.1, -0.05], [0.0, -0.1, -0.05]]) @ Rh.T
    knees = (hips + feet) / 2 + h3 * 0.1

    body = np.stack([pelvis, chest, elbows[:, 0], elbows[:, 1], knees[:, 0], knees[:, 1], feet[:, 0], feet[:, 1]], axis=1)

    closed = np.isin(phase, [2]).astype(float)
    grip = np.convolve(np.pad(closed, 2, mode="edge"), np.ones(5) / 5, mode="valid")
    hand_angles = np.stack([0.2 + 0.5 * grip, 0.3 + 0.9 * grip, 0.2 + 0.5 * grip, 0.3 + 0.9 * grip], axis=1)

    return {
        "body_joints": body,
        "hand_joints": hands,
        "hand_angles": hand_angles,
        "obj_trans": obj_t,
        "obj_rot6d": matrix_to_rot6d(obj_R),
        "phase": phase,
    }


def contact_labels(joints, obj_points, obj_trans, obj_rot6d, threshold: float = CONTACT_THRESHOLD):
    """(T, J) boolean labels: joint within ``threshold`` of any posed vertex."""
    verts = apply_pose(obj_points, obj_trans, obj_rot6d)
    return kernels.frame_min_dist(joints, verts) < threshold


def foot_contact_labels(body_joints, skel: Skeleton = DEFAULT_SKELETON, height: float = GROUND_CONTACT_HEIGHT):
    return body_joints[:, list(skel.foot_index), 2] < height


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------


def generate(cfg: GeneratorConfig, skel: Skeleton = DEFAULT_SKELETON) -> tuple[HOIDataset, ObjectLibrary]:
    library = build_library(cfg)
    task_ids = [TASKS.index(t) for t in cfg.tasks]
    cols = {k: [] for k in ("body_joints", "hand_joints", "hand_angles", "obj_trans", "obj_rot6d", "phase")}
    cols.update(contact_labels=[], foot_contact=[], task_label=[], object_id=[])
    i = 0
    attempts = 0
    while len(cols["task_label"]) < cfg.n_sequences:
        rng = np.random.default_rng([cfg.seed, 2, i])
        i += 1
        attempts += 1
        if attempts > 20 * cfg.n_sequences:
            raise RuntimeError("generator could not produce enough feasible sequences")
        oid = int(rng.integers(len(library)))
        task = int(task_ids[int(rng.integers(len(task_ids)))])
        seq = generate_sequence(library[oid], TASKS[task], rng, cfg, skel)
        if seq is None:
            log.warning("skipping infeasible sequence %d (object %s, task %s)", i - 1, library[oid].name, TASKS[task])
            continue
        joints = np.concatenate([seq["body_joints"], seq["hand_joints"]], axis=1)
        for k in ("body_joints", "hand_joints", "hand_angles", "obj_trans", "obj_rot6d", "phase"):
            cols[k].append(seq[k])
        cols["contact_labels"].append(
            contact_labels(joints, library[oid].points, seq["obj_trans"], seq["obj_rot6d"])
        )
        cols["foot_contact"].append(foot_contact_labels(seq["body_joints"], skel))
        cols["task_label"].append(task)
        cols["object_id"].append(oid)
    arrays = {k: np.asarray(v) for k, v in cols.items()}
    for k in ("body_joints", "hand_joints", "hand_angles", "obj_trans", "obj_rot6d"):
        arrays[k] = arrays[k].astype(np.float64)
    arrays["task_label"] = arrays["task_label"].astype(np.int64)
    arrays["object_id"] = arrays["object_id"].astype(np.int64)
    meta = {
        "kind": "hoi_dataset",
        "fps": cfg.fps,
        "generator_seed": cfg.seed,
        "generator": cfg.to_dict(),
        "tasks": list(TASKS),
        "phases": list(PHASES),
        "skeleton": {"body": list(skel.body_names), "hand": list(skel.hand_names), "foot_index": list(skel.foot_index)},
        "objects": [o.name for o in library],
    }
    return HOIDataset(arrays, meta), library


def split(dataset: HOIDataset, library: ObjectLibrary | None, ratios=(0.9, 0.1), mode: str = "by_sequence", seed: int = 0):
    """Deterministic train/test (or more) split.

    ``by_object`` and ``by_category`` keep every object (or category) on one
    side only.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or len(ratios) < 2 or not np.isclose(ratios.sum(), 1.0) or np.any(ratios < 0):
        raise ValueError("ratios must be non-negative and sum to 1")
    rng = np.random.default_rng([seed, 3])
    n = len(dataset)
    if mode == "by_sequence":
        units = np.arange(n)
        unit_of = np.arange(n)
    elif mode == "by_object":
        units = np.unique(dataset.arrays["object_id"])
        unit_of = dataset.arrays["object_id"]
    elif mode == "by_category":
        if library is None:
            raise ValueError("category split needs the object library")
        cats = np.array([library[o].category for o in dataset.arrays["object_id"]])
        units = np.array(sorted(set(cats)))
        if len(units) < len(ratios):
            raise ValueError(f"need at least {len(ratios)} categories, have {len(units)}")
        unit_of = cats
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    order = units[rng.permutation(len(units))]
    counts = np.floor(ratios * len(units)).astype(int)
    counts[0] += len(units) - counts.sum()
    if mode != "by_sequence":
        # every split gets at least one unit when possible
        for j in range(1, len(counts)):
            if counts[j] == 0 and counts[0] > 1:
                counts[j] += 1
                counts[0] -= 1
    bounds = np.concatenate([[0], np.cumsum(counts)])
    out = []
    for j in range(len(ratios)):
        chosen = set(order[bounds[j] : bounds[j + 1]].tolist())
        idx = [i for i in range(n) if (unit_of[i].item() if hasattr(unit_of[i], "item") else unit_of[i]) in chosen]
        out.append(dataset.subset(np.array(idx, dtype=np.int64)))
    return out
