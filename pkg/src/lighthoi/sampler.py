"""Two-pass inference: uniform-schedule CFG sampling, then a staged pass with
pace-induced guidance.

All states live in the model's normalized grid space with shape (B, T, C).
The predictor is any callable ``predict(x, lam, cond) -> x0_hat``; a
:class:`~lighthoi.model.LightModel` qualifies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import GridLayout, HOISequence, ModalityPartition, unpack, validate_partition
from .denoiser import ConditionBundle
from .schedule import NoiseSchedule, RangeError, corrupt

RENOISE_MODES = ("fresh", "posterior")
# "staged": x_S carries its own m1 channels through the guided update.
# "uniform": after each step the m1 channels of x_S are overwritten with the
# recorded uniform state, so only m2 is produced by the staged pass.
M1_SOURCES = ("staged", "uniform")


class NonFiniteState(RuntimeError):
    pass


@dataclass
class GuidanceConfig:
    omega1: float = 0.5
    omega2: float = 3.0
    delta: int = 50
    partition: ModalityPartition = field(default_factory=lambda: ModalityPartition.parse("bh|o"))
    m1_source: str = "staged"

    def __post_init__(self):
        if self.m1_source not in M1_SOURCES:
            raise ValueError(f"m1_source must be one of {M1_SOURCES}")
        if isinstance(self.partition, str):
            self.partition = ModalityPartition.parse(self.partition)
        validate_partition(self.partition)
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("guidance weights must be non-negative")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    def check(self, K: int) -> "GuidanceConfig":
        if self.delta > K:
            raise ValueError(f"delta={self.delta} exceeds K={K}")
        return self

    def level_vector(self, k: int) -> np.ndarray:
        """lambda' = (k - delta on m1, k on m2) in (body, hand, object) order."""
        m1 = self.partition.mask()
        return np.where(m1, k - self.delta, k).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "omega1": self.omega1,
            "omega2": self.omega2,
            "delta": self.delta,
            "partition": str(self.partition),
            "m1_source": self.m1_source,
        }


class NoiseSource:
    """Seed-derived Gaussian draws shared by both passes.

    Each sample in a batch has its own seed, so a sample's noise does not
    depend on which batch it lands in. The draw for step ``k`` (the one that
    re-noises to level k-1) comes from a generator keyed on ``(seed, k)``.
    """

    INIT = -1

    def __init__(self, seeds, shape: tuple[int, int], dtype=torch.float32):
        self.seeds = [int(s) for s in np.atleast_1d(seeds)]
        self.shape = tuple(shape)
        self.dtype = dtype

    def _draw(self, tag: int) -> torch.Tensor:
        arr = np.stack([np.random.default_rng([s, 7, tag + 1]).standard_normal(self.shape) for s in self.seeds])
        return torch.as_tensor(arr, dtype=self.dtype)

    def initial(self) -> torch.Tensor:
        return self._draw(self.INIT)

    def step(self, k: int) -> torch.Tensor:
        return self._draw(int(k))


@dataclass
class UniformTrajectory:
    """Recorded uniform-pass states ``states[k] = x_U(k)`` for k = 0..K."""

    states: torch.Tensor  # (K+1, B, T, C)
    init_noise: torch.Tensor

    @property
    def K(self) -> int:
        return self.states.shape[0] - 1

    def __len__(self) -> int:
        return self.states.shape[0]

    def at(self, k: int) -> torch.Tensor:
        if not 0 <= k <= self.K:
            raise RangeError(f"trajectory level {k} outside [0, {self.K}]")
        return self.states[k]

    @property
    def final(self) -> torch.Tensor:
        return self.states[0]


def _check_finite(x: torch.Tensor, what: str, k: int):
    if not torch.isfinite(x).all():
        raise NonFiniteState(f"non-finite {what} at step {k}")


class Sampler:
    """Uniform and staged sampling loops over a fixed predictor and schedule.

    ``renoise_mode="fresh"`` re-corrupts the prediction at level k-1 with a
    fresh draw. ``"posterior"`` instead draws from the Gaussian posterior
    q(x_{k-1} | x_k, x0_hat) (ancestral DDPM step) using the same draw.
    """

    def __init__(self, predict, schedule: NoiseSchedule, layout: GridLayout, renoise_mode: str = "fresh"):
        if renoise_mode not in RENOISE_MODES:
            raise ValueError(f"renoise_mode must be one of {RENOISE_MODES}")
        self.predict = predict
        self.schedule = schedule
        self.layout = layout
        self.renoise_mode = renoise_mode

    @classmethod
    def for_model(cls, model, renoise_mode: str = "fresh") -> "Sampler":
        return cls(model, model.schedule, model.layout, renoise_mode)

    @property
    def K(self) -> int:
        return self.schedule.K

    # -- single steps ------------------------------------------------------

    def _renoise(self, x_tilde, x_k, k: int, eps):
        if self.renoise_mode == "fresh" or k == 1:
            return corrupt(x_tilde, np.full(3, k - 1), eps, self.schedule, self.layout)
        ab = self.schedule.alpha_bar
        beta = 1.0 - ab[k] / ab[k - 1]
        c0 = np.sqrt(ab[k - 1]) * beta / (1.0 - ab[k])
        ck = np.sqrt(ab[k] / ab[k - 1]) * (1.0 - ab[k - 1]) / (1.0 - ab[k])
        var = beta * (1.0 - ab[k - 1]) / (1.0 - ab[k])
        return c0 * x_tilde + ck * x_k + float(np.sqrt(var)) * eps

    def cfg_predictions(self, x, lam, cond: ConditionBundle, omega1: float):
        """Conditional and null forwards plus their CFG combination."""
        c = self.predict(x, lam, cond)
        if omega1 == 0:
            return c, c, None
        n = self.predict(x, lam, cond.as_null())
        return c + omega1 * (c - n), c, n

    def uniform_step(self, x, k: int, cond: ConditionBundle, omega1: float, eps):
        if k < 1:
            raise RangeError("uniform_step needs k >= 1")
        x_tilde, _, _ = self.cfg_predictions(x, np.full(3, k), cond, omega1)
        return x_tilde, self._renoise(x_tilde, x, k, eps)

    @torch.no_grad()
    def run_uniform(self, noise: NoiseSource, cond: ConditionBundle, omega1: float) -> UniformTrajectory:
        x = noise.initial()
        states = [None] * (self.K + 1)
        states[self.K] = x
        for k in range(self.K, 0, -1):
            _, x = self.uniform_step(x, k, cond, omega1, noise.step(k))
            _check_finite(x, "uniform state", k)
            states[k - 1] = x
        return UniformTrajectory(torch.stack(states), states[self.K])

    def staged_merge(self, traj_state_m1, x_S, k: int, cfg: GuidanceConfig):
        """Build (x'_S, lambda'): m1 channels from x_U(k - delta), m2 from x_S(k).

        ``traj_state_m1`` is either a :class:`UniformTrajectory` or the
        uniform state at level k - delta.
        """
        if k - cfg.delta < 0:
            raise RangeError(f"k - delta = {k - cfg.delta} < 0; take the unguided branch")
        src = traj_state_m1.at(k - cfg.delta) if isinstance(traj_state_m1, UniformTrajectory) else traj_state_m1
        mask = torch.as_tensor(self.layout.channel_mask(cfg.partition.m1))
        x_prime = torch.where(mask, src, x_S)
        return x_prime, cfg.level_vector(k)

    def staged_predictions(self, x_S, k: int, cond: ConditionBundle, cfg: GuidanceConfig, traj_state_m1=None):
        """All model outputs the guided update needs at step k.

        Returns a dict with ``cond``, ``null`` (None when omega1 = 0),
        ``cfg`` (the CFG combination), ``merged`` (None outside the guidance
        window or when omega2 = 0) and ``guided`` (the final x_tilde).
        """
        x_cfg, c, n = self.cfg_predictions(x_S, np.full(3, k), cond, cfg.omega1)
        out = {"cond": c, "null": n, "cfg": x_cfg, "merged": None, "guided": x_cfg}
        if cfg.omega2 != 0 and k - cfg.delta >= 0:
            if traj_state_m1 is None:
                raise ValueError("guided step needs the uniform trajectory")
            x_prime, lam_prime = self.staged_merge(traj_state_m1, x_S, k, cfg)
            g = self.predict(x_prime, lam_prime, cond)
            out["merged"] = g
            out["guided"] = x_cfg + cfg.omega2 * (g - c)
        return out

    def staged_step(self, x_S, k: int, cond: ConditionBundle, cfg: GuidanceConfig, traj_state_m1, eps):
        if k < 1:
            raise RangeError("staged_step needs k >= 1")
        x_tilde = self.staged_predictions(x_S, k, cond, cfg, traj_state_m1)["guided"]
        return x_tilde, self._renoise(x_tilde, x_S, k, eps)

    # -- full runs ---------------------------------------------------------

    @torch.no_grad()
    def staged_pass(self, traj: UniformTrajectory, noise: NoiseSource, cond: ConditionBundle, cfg: GuidanceConfig) -> torch.Tensor:
        cfg.check(self.K)
        x = traj.init_noise.clone()
        follow = cfg.m1_source == "uniform" and cfg.omega2 != 0
        mask = torch.as_tensor(self.layout.channel_mask(cfg.partition.m1))
        for k in range(self.K, 0, -1):
            src = traj if k - cfg.delta >= 0 else None
            _, x = self.staged_step(x, k, cond, cfg, src, noise.step(k))
            if follow:
                x = torch.where(mask, traj.at(k - 1), x)
            _check_finite(x, "staged state", k)
        return x

    @torch.no_grad()
    def _streaming(self, noise: NoiseSource, cond: ConditionBundle, cfg: GuidanceConfig) -> torch.Tensor:
        # the uniform pass runs ahead of the staged one; only the states still
        # needed are kept (one, or delta of them when m1 follows the uniform pass)
        guided = cfg.omega2 != 0
        follow = cfg.m1_source == "uniform" and guided
        mask = torch.as_tensor(self.layout.channel_mask(cfg.partition.m1))
        x_u = noise.initial()
        k_u = self.K
        kept = {k_u: x_u}
        x = x_u.clone()
        for k in range(self.K, 0, -1):
            need = k - cfg.delta if guided and k - cfg.delta >= 0 else None
            if follow:
                need = k - 1 if need is None else min(need, k - 1)
            while need is not None and k_u > need:
                _, x_u = self.uniform_step(x_u, k_u, cond, cfg.omega1, noise.step(k_u))
                _check_finite(x_u, "uniform state", k_u)
                k_u -= 1
                kept[k_u] = x_u
            src = kept[k - cfg.delta] if guided and k - cfg.delta >= 0 else None
            _, x = self.staged_step(x, k, cond, cfg, src, noise.step(k))
            if follow:
                x = torch.where(mask, kept[k - 1], x)
            _check_finite(x, "staged state", k)
            for lvl in [lvl for lvl in kept if lvl >= k - 1 and lvl != k_u]:
                del kept[lvl]
        return x

    def run_light(
        self,
        noise: NoiseSource,
        cond: ConditionBundle,
        cfg: GuidanceConfig,
        traj: UniformTrajectory | None = None,
        streaming: bool = False,
    ) -> torch.Tensor:
        """Uniform pass (recorded) then the staged pass; returns x_S(0).

        Pass ``traj`` to reuse an already recorded uniform pass for the same
        noise and condition. ``streaming`` keeps O(1) uniform states instead
        of K+1 and gives bit-identical results.
        """
        cfg.check(self.K)
        if streaming:
            return self._streaming(noise, cond, cfg)
        if traj is None:
            traj = self.run_uniform(noise, cond, cfg.omega1)
        return self.staged_pass(traj, noise, cond, cfg)


# --------------------------------------------------------------------------
# batched convenience
# --------------------------------------------------------------------------


def decode_sequences(model, grids, fps: float) -> list[HOISequence]:
    """Normalized grids (B, T, C) -> physical HOISequences."""
    arr = model.normalizer.decode(np.asarray(grids, dtype=np.float64))
    return [unpack(g, model.layout, fps) for g in arr]


def sample_batched(
    model,
    cond: ConditionBundle,
    seeds,
    T: int,
    cfgs: dict[str, GuidanceConfig],
    batch_size: int = 64,
    renoise_mode: str = "fresh",
) -> dict[str, np.ndarray]:
    """Run several guidance configs on shared seeds, reusing the uniform pass.

    All configs must share omega1. Configs with omega2 = 0 return the
    uniform-pass sample directly (they are identical by construction).
    Returns normalized grids keyed like ``cfgs``.
    """
    omegas = {c.omega1 for c in cfgs.values()}
    if len(omegas) != 1:
        raise ValueError("configs sharing a uniform pass must share omega1")
    omega1 = omegas.pop()
    sampler = Sampler.for_model(model, renoise_mode)
    seeds = np.asarray(seeds)
    out = {name: [] for name in cfgs}
    for lo in range(0, len(seeds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(seeds)))
        noise = NoiseSource(seeds[idx], (T, model.layout.n_channels))
        c = cond.index(torch.as_tensor(idx))
        traj = sampler.run_uniform(noise, c, omega1)
        for name, g in cfgs.items():
            x = traj.final if g.omega2 == 0 else sampler.staged_pass(traj, noise, c, g)
            out[name].append(x.numpy())
        del traj
    return {k: np.concatenate(v) for k, v in out.items()}
