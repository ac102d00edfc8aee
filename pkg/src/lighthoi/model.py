"""Model bundle (denoiser + schedule + normalizer) and checkpoint I/O."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core import DEFAULT_SKELETON, GridLayout, Skeleton
from .denoiser import ConditionBundle, Denoiser, DenoiserConfig
from .schedule import NoiseSchedule

CHECKPOINT_FORMAT = 1
STD_FLOOR = 0.05


class Normalizer:
    """Per-channel standardization between physical and model space."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, grids: np.ndarray, floor: float = STD_FLOOR) -> "Normalizer":
        flat = grids.reshape(-1, grids.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), floor))

    def _pair(self, x):
        if isinstance(x, torch.Tensor):
            return torch.as_tensor(self.mean, dtype=x.dtype), torch.as_tensor(self.std, dtype=x.dtype)
        return self.mean, self.std

    def encode(self, x):
        m, s = self._pair(x)
        return (x - m) / s

    def decode(self, x):
        m, s = self._pair(x)
        return x * s + m

    def state(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class LightModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    normalizer: Normalizer
    layout: GridLayout
    vocabulary: list[str]
    skeleton: Skeleton = DEFAULT_SKELETON
    n_basis: int = 1024

    @property
    def K(self) -> int:
        return self.schedule.K

    def __call__(self, x, lam, cond: ConditionBundle):
        return self.denoiser(x, lam, cond)

    def eval(self) -> "LightModel":
        self.denoiser.eval()
        return self


def build_model(
    cfg: DenoiserConfig,
    layout: GridLayout,
    vocabulary,
    geometry_dim: int,
    schedule: NoiseSchedule,
    normalizer: Normalizer,
    skeleton: Skeleton = DEFAULT_SKELETON,
    n_basis: int = 1024,
    seed: int = 0,
) -> LightModel:
    torch.manual_seed(seed)
    den = Denoiser(cfg, layout, len(vocabulary), geometry_dim, schedule.K)
    return LightModel(den, schedule, normalizer, layout, list(vocabulary), skeleton, n_basis)


def save_checkpoint(model: LightModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "denoiser_config": model.denoiser.cfg.to_dict(),
        "layout": {"n_body": model.layout.n_body, "n_hand": model.layout.n_hand},
        "skeleton": asdict(model.skeleton),
        "schedule": model.schedule.descriptor(),
        "vocabulary": list(model.vocabulary),
        "normalizer": model.normalizer.state(),
        "geometry_dim": model.denoiser.geom_mlp[0].in_features,
        "n_basis": model.n_basis,
        "state_dict": model.denoiser.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> LightModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    cfg = DenoiserConfig(**payload["denoiser_config"])
    layout = GridLayout(**payload["layout"])
    sk = payload["skeleton"]
    skeleton = Skeleton(**{k: tuple(v) if isinstance(v, list) else v for k, v in sk.items()})
    schedule = NoiseSchedule.from_descriptor(payload["schedule"])
    den = Denoiser(cfg, layout, len(payload["vocabulary"]), payload["geometry_dim"], schedule.K)
    den.load_state_dict(payload["state_dict"])
    den.eval()
    norm = Normalizer(payload["normalizer"]["mean"], payload["normalizer"]["std"])
    return LightModel(den, schedule, norm, layout, payload["vocabulary"], skeleton, payload["n_basis"])
