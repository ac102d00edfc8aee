"""Composite training objective and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DEFAULT_SKELETON, GridLayout, HOIDataset, Skeleton
from .denoiser import ConditionBundle, DenoiserConfig, drop_condition
from .geometry import ObjectLibrary, apply_pose_torch, min_dist_torch
from .model import LightModel, Normalizer, build_model, save_checkpoint
from .schedule import NoiseSchedule, corrupt, sample_training_levels
from .synthetic import TASKS

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lam_fs: float = 1.0
    lam_v: float = 0.02
    lam_cont: float = 0.1
    lam_pv: float = 1.0
    lam_otv: float = 1.0
    lam_orv: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)


# --------------------------------------------------------------------------
# unpacking model-space grids into kinematic tensors
# --------------------------------------------------------------------------


def split_grid(x: torch.Tensor, layout: GridLayout) -> dict[str, torch.Tensor]:
    """Physical-space grid (..., T, C) -> named kinematic tensors."""
    s = layout.slices()
    jb, jh = layout.n_body, layout.n_hand
    body = x[..., s["body"]].unflatten(-1, (jb, 3))
    hand = x[..., s["hand"]]
    obj = x[..., s["object"]]
    return {
        "body": body,
        "hand": hand[..., : 3 * jh].unflatten(-1, (jh, 3)),
        "hand_angles": hand[..., 3 * jh :],
        "trans": obj[..., :3],
        "rot6d": obj[..., 3:],
        "joints": torch.cat([body, hand[..., : 3 * jh].unflatten(-1, (jh, 3))], dim=-2),
    }


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _check_len(x: torch.Tensor, axis: int = -3):
    if x.shape[axis] < 2:
        raise ValueError("velocity-based losses need at least 2 frames")


def loss_df(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).mean()


def _batch_sum(x: torch.Tensor, event_dims: int) -> torch.Tensor:
    """Sum over the trailing ``event_dims`` axes and average any batch axes."""
    s = x.sum(dim=tuple(range(-event_dims, 0))) if event_dims else x
    return s.mean() if s.dim() else s


def loss_foot_skating(pred_feet: torch.Tensor, gt_feet: torch.Tensor, foot_contact: torch.Tensor) -> torch.Tensor:
    """Sum over t >= 1 and feet of c[t, f] * ||dpred - dgt||^2.

    Inputs are (..., T, F, 3) positions and (..., T, F) contact labels.
    """
    _check_len(pred_feet)
    dp = pred_feet[..., 1:, :, :] - pred_feet[..., :-1, :, :]
    dg = gt_feet[..., 1:, :, :] - gt_feet[..., :-1, :, :]
    c = foot_contact[..., 1:, :].to(pred_feet.dtype)
    return _batch_sum(c * ((dp - dg) ** 2).sum(-1), 2)


def _diff_sq(p: torch.Tensor, g: torch.Tensor, time_axis: int) -> torch.Tensor:
    dp = p.diff(dim=time_axis)
    dg = g.diff(dim=time_axis)
    return (dp - dg) ** 2


def loss_velocity(pred: dict, gt: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted first-difference matching of joints, object translation and rotation."""
    _check_len(pred["joints"])
    lj = _batch_sum(_diff_sq(pred["joints"], gt["joints"], -3), 3)
    lt = _batch_sum(_diff_sq(pred["trans"], gt["trans"], -2), 2)
    lr = _batch_sum(_diff_sq(pred["rot6d"], gt["rot6d"], -2), 2)
    return weights.lam_pv * lj + weights.lam_otv * lt + weights.lam_orv * lr


def loss_contact(
    pred_joints: torch.Tensor,
    gt_verts: torch.Tensor,
    joint_contact: torch.Tensor,
    ref_joints: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sum of squared joint-to-vertex distances over labelled (t, j) pairs.

    ``pred_joints`` (..., T, J, 3), ``gt_verts`` (..., T, V, 3), labels
    (..., T, J). Only labelled pairs are evaluated. With ``ref_joints`` the
    penalty is (d(pred) - d(ref))^2, i.e. distance in excess of the
    reference joint's own clearance, instead of d(pred)^2.
    """
    if gt_verts.shape[-2] == 0:
        raise ValueError("object vertex set is empty")
    lead = pred_joints.shape[:-2]
    pj = pred_joints.reshape(-1, pred_joints.shape[-2], 3)
    gv = gt_verts.reshape(-1, gt_verts.shape[-2], 3)
    lab = joint_contact.reshape(-1, joint_contact.shape[-1]).bool()
    frame, joint = torch.nonzero(lab, as_tuple=True)
    if frame.numel() == 0:
        return pred_joints.sum() * 0.0
    d = min_dist_torch(pj[frame, joint][:, None, :], gv[frame])[:, 0]
    if ref_joints is not None:
        rj = ref_joints.reshape(-1, ref_joints.shape[-2], 3)[frame, joint]
        with torch.no_grad():
            d_ref = min_dist_torch(rj[:, None, :], gv[frame])[:, 0]
        d = d - d_ref
    total = (d**2).sum()
    n_batch = int(np.prod(lead[:-1])) if len(lead) > 1 else 1
    return total / n_batch


def total_loss(
    pred_model: torch.Tensor,
    gt_model: torch.Tensor,
    batch: dict,
    model: LightModel,
    weights: LossWeights,
) -> dict[str, torch.Tensor]:
    """L = L_DF + L_reg. Regularizers act on the decoded clean prediction."""
    ldf = loss_df(pred_model, gt_model)
    if weights.lam_fs == 0 and weights.lam_v == 0 and weights.lam_cont == 0:
        zero = ldf * 0.0
        return {"total": ldf, "df": ldf, "fs": zero, "v": zero, "cont": zero}
    pred = split_grid(model.normalizer.decode(pred_model), model.layout)
    gt = split_grid(model.normalizer.decode(gt_model), model.layout)
    feet = list(model.skeleton.foot_index)
    lfs = loss_foot_skating(pred["body"][..., feet, :], gt["body"][..., feet, :], batch["foot_contact"])
    lv = loss_velocity(pred, gt, weights)
    verts = apply_pose_torch(batch["obj_points"][:, None], gt["trans"], gt["rot6d"])
    # measured against the GT joint's own clearance so the term vanishes at pred == gt
    lc = loss_contact(pred["joints"], verts, batch["contact_labels"], gt["joints"])
    total = ldf + weights.lam_fs * lfs + weights.lam_v * lv + weights.lam_cont * lc
    return {"total": total, "df": ldf, "fs": lfs, "v": lv, "cont": lc}


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------


class TrainingData:
    """Model-space tensors for a dataset + object library."""

    def __init__(self, dataset: HOIDataset, library: ObjectLibrary, normalizer: Normalizer, layout: GridLayout, dtype=torch.float32):
        self.dataset = dataset
        self.layout = layout
        self.grids = torch.as_tensor(normalizer.encode(dataset.grids(layout)), dtype=dtype)
        self.labels = torch.as_tensor(dataset.arrays["task_label"], dtype=torch.long)
        oid = dataset.arrays["object_id"]
        self.geometry = torch.as_tensor(library.features()[oid], dtype=dtype)
        self.obj_points = torch.as_tensor(library.points()[oid], dtype=dtype)
        self.contact_labels = torch.as_tensor(dataset.arrays["contact_labels"])
        self.foot_contact = torch.as_tensor(dataset.arrays["foot_contact"])

    def __len__(self):
        return self.grids.shape[0]

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return {
            "x0": self.grids[idx],
            "cond": ConditionBundle.make(self.labels[idx], self.geometry[idx]),
            "obj_points": self.obj_points[idx],
            "contact_labels": self.contact_labels[idx],
            "foot_contact": self.foot_contact[idx],
        }


class NonFiniteLoss(RuntimeError):
    pass


class Trainer:
    def __init__(self, model: LightModel, data: TrainingData, cfg: TrainConfig):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 11])
        self.noise = torch.Generator().manual_seed(cfg.seed * 1_000_003 + 17)
        self.opt = torch.optim.Adam(model.denoiser.parameters(), lr=cfg.lr)
        self.step_count = 0
        self.history: list[dict] = []

    def train_step(self, batch: dict | None = None) -> dict[str, float]:
        m = self.model
        m.denoiser.train()
        if batch is None:
            idx = self.rng.integers(0, len(self.data), size=self.cfg.batch_size)
            batch = self.data.batch(idx)
        x0 = batch["x0"]
        B = x0.shape[0]
        lam = sample_training_levels(self.rng, m.K, size=B)
        eps = torch.randn(x0.shape, generator=self.noise, dtype=x0.dtype)
        x_lam = corrupt(x0, lam, eps, m.schedule, m.layout)
        cond = drop_condition(batch["cond"], self.rng, m.denoiser.cfg.condition_dropout_prob)
        pred = m.denoiser(x_lam, torch.as_tensor(lam), cond)
        losses = total_loss(pred, x0, batch, m, self.cfg.weights)
        self.step_count += 1
        out = {k: float(v.detach()) for k, v in losses.items()}
        out["step"] = self.step_count
        if not math.isfinite(out["total"]):
            self.opt.zero_grad(set_to_none=True)
            log.error("non-finite loss at step %d: %s", self.step_count, out)
            raise NonFiniteLoss(f"non-finite loss at step {self.step_count}")
        self.opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        self.opt.step()
        self.history.append(out)
        return out

    def fit(self, steps: int | None = None, out_dir: Path | None = None, progress=None) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        writer = None
        fh = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            fh = open(out_dir / "loss_log.csv", "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=["step", "total", "df", "fs", "v", "cont"])
            writer.writeheader()
        try:
            for _ in range(steps):
                rec = self.train_step()
                if writer:
                    writer.writerow({k: rec[k] for k in writer.fieldnames})
                if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
                    log.info("step %d loss %.5f (df %.5f)", rec["step"], rec["total"], rec["df"])
                    if progress:
                        progress(rec)
                if out_dir is not None and self.cfg.checkpoint_every and rec["step"] % self.cfg.checkpoint_every == 0:
                    save_checkpoint(self.model, out_dir / f"checkpoint_{rec['step']:06d}.pt")
        finally:
            if fh:
                fh.close()
        self.model.denoiser.eval()
        return self.history


def make_model_for(
    dataset: HOIDataset,
    library: ObjectLibrary,
    cfg: DenoiserConfig,
    K: int = 100,
    schedule_family: str = "cosine",
    seed: int = 0,
    skeleton: Skeleton = DEFAULT_SKELETON,
) -> LightModel:
    layout = GridLayout.for_skeleton(skeleton)
    norm = Normalizer.fit(dataset.grids(layout))
    geom_dim = library.features().shape[1]
    return build_model(
        cfg, layout, TASKS, geom_dim, NoiseSchedule(K, schedule_family), norm, skeleton,
        library[0].n_basis, seed,
    )
