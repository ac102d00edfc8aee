"""Cumulative noise schedule, per-modality corruption and level sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .core import GridLayout


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityNoiseLevels:
    lam_b: int
    lam_h: int
    lam_o: int

    def as_array(self) -> np.ndarray:
        return np.array([self.lam_b, self.lam_h, self.lam_o], dtype=np.int64)

    @classmethod
    def uniform(cls, k: int) -> "ModalityNoiseLevels":
        return cls(k, k, k)

    def __sub__(self, other) -> "ModalityNoiseLevels":
        o = other.as_array() if isinstance(other, ModalityNoiseLevels) else np.broadcast_to(other, (3,))
        return ModalityNoiseLevels(*(int(v) for v in self.as_array() - o))


class NoiseSchedule:
    """Table of cumulative signal fractions alpha_bar(0..K).

    ``family`` is ``"cosine"`` (default) or ``"linear"`` (linear beta).
    """

    def __init__(self, K: int = 100, family: str = "cosine", s: float = 0.008):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.K = int(K)
        self.family = family
        if family == "cosine":
            t = np.arange(K + 1) / K
            f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
            ab = f / f[0]
            betas = np.clip(1 - ab[1:] / ab[:-1], 0, 0.999)
            ab = np.concatenate([[1.0], np.cumprod(1 - betas)])
        elif family == "linear":
            betas = np.linspace(1e-4 * 1000 / K, 0.02 * 1000 / K, K)
            ab = np.concatenate([[1.0], np.cumprod(1 - np.clip(betas, 0, 0.999))])
        else:
            raise ValueError(f"unknown schedule family {family!r}")
        # keep the last level below 1e-3 but strictly positive and below its neighbour
        ab[-1] = min(ab[-1], 5e-4)
        if K > 1:
            ab[-1] = max(ab[-1], min(1e-6, 0.5 * ab[-2]))
        if not np.all(ab > 0):
            raise ValueError(f"{family} schedule underflows at K={K}")
        self.alpha_bar = ab
        self.alpha_bar.setflags(write=False)
        self.sqrt_ab = np.sqrt(ab)
        self.sqrt_1mab = np.sqrt(1.0 - ab)

    def table_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.alpha_bar).tobytes()).hexdigest()[:16]

    def descriptor(self) -> dict:
        return {"family": self.family, "K": self.K, "table_hash": self.table_hash()}

    @classmethod
    def from_descriptor(cls, d: dict) -> "NoiseSchedule":
        sch = cls(d["K"], d["family"])
        if "table_hash" in d and d["table_hash"] != sch.table_hash():
            raise ValueError("schedule table hash mismatch on reload")
        return sch

    def snr(self) -> np.ndarray:
        """ab / (1 - ab); infinite at k = 0."""
        with np.errstate(divide="ignore"):
            return self.alpha_bar / (1.0 - self.alpha_bar)

    def check_levels(self, lam) -> np.ndarray:
        arr = lam.as_array() if isinstance(lam, ModalityNoiseLevels) else np.asarray(lam)
        if arr.shape[-1] != 3:
            raise RangeError(f"noise levels need 3 entries, got shape {arr.shape}")
        if np.any(arr < 0) or np.any(arr > self.K):
            raise RangeError(f"noise levels {arr.tolist()} outside [0, {self.K}]")
        return arr.astype(np.int64)


def _coefficients(schedule: NoiseSchedule, lam, layout: GridLayout, like):
    """Per-channel sqrt(ab) and sqrt(1-ab) for levels of shape (3,) or (B, 3)."""
    lam = schedule.check_levels(lam)
    mi = layout.modality_index()
    a = schedule.sqrt_ab[lam][..., mi]
    b = schedule.sqrt_1mab[lam][..., mi]
    if isinstance(like, torch.Tensor):
        a = torch.as_tensor(a, dtype=like.dtype)
        b = torch.as_tensor(b, dtype=like.dtype)
    # broadcast over the frame axis
    if a.ndim == 2:
        a, b = a[:, None, :], b[:, None, :]
    return a, b


def corrupt(x0, lam, eps, schedule: NoiseSchedule, layout: GridLayout | None = None):
    """x(lam) = sqrt(ab(lam_m)) * x0 + sqrt(1 - ab(lam_m)) * eps per modality channel.

    ``x0`` and ``eps`` are (T, C) or (B, T, C) arrays/tensors; ``lam`` is a
    :class:`ModalityNoiseLevels`, a length-3 vector or a (B, 3) batch.
    """
    layout = layout or GridLayout()
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    a, b = _coefficients(schedule, lam, layout, x0)
    return a * x0 + b * eps


def renoise(x0_pred, lam_minus_1, eps, schedule: NoiseSchedule, layout: GridLayout | None = None):
    """Push a clean prediction back to level lam-1; same formula as :func:`corrupt`."""
    return corrupt(x0_pred, lam_minus_1, eps, schedule, layout)


def sample_training_levels(rng: np.random.Generator, K: int, size: int | None = None):
    """Independent uniform levels on {0..K} for body, hand and object."""
    if size is None:
        return ModalityNoiseLevels(*(int(v) for v in rng.integers(0, K + 1, size=3)))
    return rng.integers(0, K + 1, size=(size, 3))
