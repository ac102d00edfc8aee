"""Plausibility metrics: contact ratio, penetration, foot skating, contact P/R/F1."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .core import DEFAULT_SKELETON, HOISequence, Skeleton
from .geometry import ObjectGeometry, ToyBodySDF, apply_pose

CONTACT_GAMMA = 0.05
FSR_EPS = 0.025
FSR_HEIGHT = 0.05


@dataclass
class MetricReport:
    contact: float
    penetration_depth: float
    penetration_fraction: float
    fsr: float
    c_prec: float
    c_rec: float
    c_f1: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def mean(cls, reports) -> "MetricReport":
        reports = list(reports)
        return cls(**{c: float(np.mean([getattr(r, c) for r in reports])) for c in cls.columns()})


def _points(geom) -> np.ndarray:
    pts = geom.points if isinstance(geom, ObjectGeometry) else np.asarray(geom)
    if pts.reshape(-1, 3).shape[0] == 0:
        raise ValueError("object point cloud is empty")
    return pts


def posed_vertices(seq: HOISequence, geom) -> np.ndarray:
    return apply_pose(_points(geom), seq.obj_trans, seq.obj_rot6d)


def joint_object_distances(seq: HOISequence, geom) -> np.ndarray:
    """(T, J) minimum joint-to-vertex distances."""
    return kernels.frame_min_dist(seq.joints(), posed_vertices(seq, geom))


def contact_ratio(seq: HOISequence, geom, gamma: float = CONTACT_GAMMA) -> float:
    return float(np.mean(joint_object_distances(seq, geom) < gamma))


def penetration(seq: HOISequence, geom, body: ToyBodySDF | None = None) -> tuple[float, float]:
    """Mean per-frame summed penetration depth and mean penetrating-vertex fraction."""
    body = body or ToyBodySDF.from_skeleton()
    sdf = body.sdf_frames(posed_vertices(seq, geom), seq.joints())
    depth = np.abs(np.minimum(sdf, 0.0)).sum(axis=1).mean()
    frac = (sdf < 0).mean(axis=1).mean()
    return float(depth), float(frac)


def foot_skating_ratio(
    seq: HOISequence,
    eps: float = FSR_EPS,
    height_thresh: float = FSR_HEIGHT,
    skel: Skeleton = DEFAULT_SKELETON,
) -> float:
    """Fraction of grounded foot-frames whose horizontal speed is at least ``eps``.

    Lower is better. A foot-frame (t >= 1, f) is grounded when the foot is
    below ``height_thresh`` at frame t.
    """
    if seq.T < 2:
        raise ValueError("foot skating needs at least 2 frames")
    feet = seq.body_joints[:, list(skel.foot_index)]
    grounded = feet[1:, :, 2] < height_thresh
    speed = np.linalg.norm(feet[1:, :, :2] - feet[:-1, :, :2], axis=-1) * seq.fps
    n = grounded.sum()
    if n == 0:
        return 0.0
    return float((grounded & (speed >= eps)).sum() / n)


def contact_events(seq: HOISequence, geom, gamma: float = CONTACT_GAMMA, joint_wise: bool = False) -> np.ndarray:
    close = joint_object_distances(seq, geom) < gamma
    return close if joint_wise else close.any(axis=1)


def prf(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    tp = float((pred & ref).sum())
    prec = tp / pred.sum() if pred.sum() else 0.0
    rec = tp / ref.sum() if ref.sum() else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return float(prec), float(rec), float(f1)


def contact_prf(gen: HOISequence, gt: HOISequence, geom, gamma: float = CONTACT_GAMMA, joint_wise: bool = False):
    if gen.T != gt.T:
        raise ValueError(f"sequence lengths differ: {gen.T} vs {gt.T}")
    return prf(contact_events(gen, geom, gamma, joint_wise), contact_events(gt, geom, gamma, joint_wise))


def evaluate_sequence(
    gen: HOISequence,
    gt: HOISequence,
    geom,
    body: ToyBodySDF | None = None,
    skel: Skeleton = DEFAULT_SKELETON,
) -> MetricReport:
    depth, frac = penetration(gen, geom, body)
    p, r, f = contact_prf(gen, gt, geom)
    return MetricReport(
        contact=contact_ratio(gen, geom),
        penetration_depth=depth,
        penetration_fraction=frac,
        fsr=foot_skating_ratio(gen, skel=skel),
        c_prec=p,
        c_rec=r,
        c_f1=f,
    )


def evaluate_many(gens, gts, geoms, body=None, skel=DEFAULT_SKELETON) -> list[MetricReport]:
    return [evaluate_sequence(g, t, o, body, skel) for g, t, o in zip(gens, gts, geoms)]
