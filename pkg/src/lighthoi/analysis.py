"""Guidance-direction diagnostics.

At every guided step of the staged pass we collect four grid-shaped
directions per sample:

* ``g_light``: merged-input prediction minus conditional prediction
* ``g_cfg``: conditional minus null prediction
* ``g_gt``: ground-truth clean grid minus the current staged state
* ``pen``: descent direction of the penetration depth-sum, evaluated at the
  conditional clean prediction

and report mean cosine similarities of the two guidance directions against
``g_gt`` and ``pen``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import binomtest

from .denoiser import ConditionBundle
from .geometry import ToyBodySDF, apply_pose_torch
from .sampler import GuidanceConfig, NoiseSource, Sampler, UniformTrajectory
from .schedule import RangeError
from .training import split_grid

PAIRS = (("cfg", "gt"), ("light", "gt"), ("cfg", "pen"), ("light", "pen"))


def cosine(a, b) -> np.ndarray:
    """Row-wise cosine of (B, ...) arrays; NaN where either row has zero norm."""
    a = torch.as_tensor(a, dtype=torch.float64).flatten(1)
    b = torch.as_tensor(b, dtype=torch.float64).flatten(1)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    out = (a * b).sum(1) / (na * nb)
    out = torch.where((na == 0) | (nb == 0), torch.full_like(out, float("nan")), out)
    return out.clamp(-1.0, 1.0).numpy()


def penetration_loss(grid, model, obj_points: torch.Tensor, body: ToyBodySDF) -> torch.Tensor:
    """Per-sample sum over frames and vertices of relu(-sdf) on a normalized grid (B, T, C)."""
    parts = split_grid(model.normalizer.decode(grid), model.layout)
    verts = apply_pose_torch(obj_points[:, None].to(grid.dtype), parts["trans"], parts["rot6d"])
    sdf = body.sdf_torch(verts, parts["joints"])
    return torch.relu(-sdf).sum(dim=(-2, -1))


def penetration_grad(grid, model, obj_points, body: ToyBodySDF | None = None) -> torch.Tensor:
    """Gradient of the per-sample penetration depth-sum w.r.t. the normalized grid."""
    body = body or ToyBodySDF.from_skeleton(model.skeleton)
    x = torch.as_tensor(grid).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = penetration_loss(x, model, torch.as_tensor(obj_points), body).sum()
        (g,) = torch.autograd.grad(loss, x)
    return g


@dataclass
class DirectionRecord:
    """Directions and cosines for one guided step over a batch of samples."""

    k: int
    sample_ids: np.ndarray
    cosines: dict[str, np.ndarray]
    vectors: dict[str, torch.Tensor] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for i, s in enumerate(self.sample_ids):
            row = {"sample": int(s), "k": self.k}
            for name, v in self.cosines.items():
                row[name] = float(v[i])
            out.append(row)
        return out


def _key(a: str, b: str) -> str:
    return f"{a}_{b}"


def directions_at_step(
    sampler: Sampler,
    x_S,
    traj: UniformTrajectory,
    gt_grid,
    cond: ConditionBundle,
    cfg: GuidanceConfig,
    k: int,
    obj_points,
    body: ToyBodySDF | None = None,
    sample_ids=None,
    keep_vectors: bool = False,
) -> tuple[DirectionRecord, dict]:
    """Directions at staged step k; also returns the raw predictions."""
    if not (cfg.delta <= k <= sampler.K) or k < 1:
        raise RangeError(f"step {k} outside the guidance window [{max(cfg.delta, 1)}, {sampler.K}]")
    model = sampler.predict
    with torch.no_grad():
        preds = sampler.staged_predictions(x_S, k, cond, _force_guided(cfg), traj)
        null = preds["null"] if preds["null"] is not None else sampler.predict(x_S, np.full(3, k), cond.as_null())
    vec = {
        "light": preds["merged"] - preds["cond"],
        "cfg": preds["cond"] - null,
        "gt": torch.as_tensor(gt_grid, dtype=x_S.dtype) - x_S,
        "pen": -penetration_grad(preds["cond"], model, obj_points, body),
    }
    cos = {_key(a, b): cosine(vec[a], vec[b]) for a, b in PAIRS}
    ids = np.arange(x_S.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    rec = DirectionRecord(k, ids, cos, vec if keep_vectors else {})
    return rec, preds


def _force_guided(cfg: GuidanceConfig) -> GuidanceConfig:
    # the merged forward is needed even if omega2 = 0
    if cfg.omega2 != 0:
        return cfg
    return GuidanceConfig(cfg.omega1, 1.0, cfg.delta, cfg.partition, cfg.m1_source)


def analyze_batch(
    sampler: Sampler,
    noise: NoiseSource,
    cond: ConditionBundle,
    gt_grids,
    obj_points,
    cfg: GuidanceConfig,
    body: ToyBodySDF | None = None,
    sample_ids=None,
) -> list[DirectionRecord]:
    """Run the uniform pass, then the staged pass recording every guided step."""
    cfg.check(sampler.K)
    traj = sampler.run_uniform(noise, cond, cfg.omega1)
    x = traj.init_noise.clone()
    records = []
    for k in range(sampler.K, 0, -1):
        eps = noise.step(k)
        if k - cfg.delta >= 0:
            rec, preds = directions_at_step(sampler, x, traj, gt_grids, cond, cfg, k, obj_points, body, sample_ids)
            records.append(rec)
            x_tilde = preds["guided"] if cfg.omega2 != 0 else preds["cfg"]
            with torch.no_grad():
                x = sampler._renoise(x_tilde, x, k, eps)
        else:
            with torch.no_grad():
                _, x = sampler.staged_step(x, k, cond, cfg, None, eps)
    return records


def records_to_rows(records) -> list[dict]:
    return [r for rec in records for r in rec.rows()]


def mean_similarities(records) -> dict[str, float]:
    """Means of the four cosines over all (step, sample) entries, ignoring absent ones."""
    rows = records_to_rows(records) if records and isinstance(records[0], DirectionRecord) else list(records)
    if not rows:
        raise ValueError("no direction records")
    out = {}
    for a, b in PAIRS:
        key = _key(a, b)
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            raise ValueError(f"every {key} cosine is undefined")
        out[key] = float(vals.mean())
    out["delta_gt"] = out["light_gt"] - out["cfg_gt"]
    out["delta_pen"] = out["light_pen"] - out["cfg_pen"]
    return out


def per_sample_means(rows, key: str) -> dict[int, float]:
    acc: dict[int, list[float]] = {}
    for r in rows:
        v = r[key]
        if not math.isnan(v):
            acc.setdefault(r["sample"], []).append(v)
    return {s: float(np.mean(v)) for s, v in acc.items()}


def sign_test(rows, a: str = "light_pen", b: str = "cfg_pen") -> dict:
    """One-sided sign test that per-sample mean(a) exceeds mean(b)."""
    ma, mb = per_sample_means(rows, a), per_sample_means(rows, b)
    common = sorted(set(ma) & set(mb))
    diffs = np.array([ma[s] - mb[s] for s in common])
    nz = diffs[diffs != 0]
    n_pos = int((nz > 0).sum())
    p = float(binomtest(n_pos, len(nz), 0.5, alternative="greater").pvalue) if len(nz) else 1.0
    return {"n_samples": len(common), "n_positive": n_pos, "n_nonzero": int(len(nz)), "p_value": p}


def write_outputs(records, out_dir) -> dict:
    """JSON-ready summary plus a per-(sample, step) CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = records_to_rows(records)
    with open(out_dir / "directions.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sample", "k"] + [_key(a, b) for a, b in PAIRS])
        w.writeheader()
        w.writerows(rows)
    summary = mean_similarities(rows)
    summary["sign_test_pen"] = sign_test(rows)
    return summary
