"""Object geometry encoding, 6D rotations, rigid poses and the toy body SDF."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .core import DEFAULT_SKELETON, Skeleton, save_bundle, load_bundle

BPS_SEED = 20240917
BPS_MAX_POINTS = 1024
BPS_NORM_RADIUS = 0.95


class DegenerateRotationError(ValueError):
    pass


# --------------------------------------------------------------------------
# rotations and poses
# --------------------------------------------------------------------------


def rot6d_to_matrix(r6, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt decode of (..., 6) into rotation matrices (..., 3, 3).

    The 6 numbers are the first two columns of the matrix.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise DegenerateRotationError("first 6D column has zero length")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < eps * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateRotationError("6D columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_to_matrix_torch(r6: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    # norms are clamped instead of raising: this runs on raw network outputs inside losses
    a1, a2 = r6[..., :3], r6[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(eps)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / u2.norm(dim=-1, keepdim=True).clamp_min(eps)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def yaw_matrix(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack(
        [np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2
    )


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def apply_pose(points, trans, rot6d) -> np.ndarray:
    """Pose canonical points: R p + t.

    ``trans`` (..., 3) and ``rot6d`` (..., 6) may carry leading frame/batch
    axes; the result has shape (..., N, 3).
    """
    R = rot6d_to_matrix(rot6d)
    points = np.asarray(points, dtype=np.float64)
    return np.einsum("...ij,nj->...ni", R, points) + np.asarray(trans, dtype=np.float64)[..., None, :]


def apply_pose_torch(points: torch.Tensor, trans: torch.Tensor, rot6d: torch.Tensor) -> torch.Tensor:
    """Differentiable :func:`apply_pose`; ``points`` is (N, 3) or (..., N, 3)."""
    R = rot6d_to_matrix_torch(rot6d)
    if points.dim() == 2:
        posed = torch.einsum("...ij,nj->...ni", R, points)
    else:
        posed = torch.einsum("...ij,...nj->...ni", R, points)
    return posed + trans.unsqueeze(-2)


def point_to_set_distance(j, V) -> float:
    V = np.asarray(V, dtype=np.float64).reshape(-1, 3)
    if V.shape[0] == 0:
        raise ValueError("empty point set")
    return float(kernels.min_dist(np.asarray(j, dtype=np.float64).reshape(1, 3), V)[0])


def min_dist_torch(queries: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Differentiable min distance from (..., Q, 3) queries to (..., V, 3) points."""
    d2 = ((queries.unsqueeze(-2) - points.unsqueeze(-3)) ** 2).sum(-1)
    return d2.min(dim=-1).values.clamp_min(1e-18).sqrt()


# --------------------------------------------------------------------------
# BPS
# --------------------------------------------------------------------------


def generate_basis(n: int = BPS_MAX_POINTS, seed: int = BPS_SEED) -> np.ndarray:
    """Uniform samples in the unit ball from a fixed seed."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / 3.0)
    return d * r[:, None]


@lru_cache(maxsize=None)
def _basis_asset() -> np.ndarray:
    ref = resources.files("lighthoi") / "assets" / "bps_basis.npy"
    try:
        with resources.as_file(ref) as p:
            arr = np.load(p)
    except FileNotFoundError:  # pragma: no cover - asset ships with the package
        arr = generate_basis()
    arr.setflags(write=False)
    return arr


def basis_points(n: int = BPS_MAX_POINTS) -> np.ndarray:
    if not 1 <= n <= BPS_MAX_POINTS:
        raise ValueError(f"basis size must be in [1, {BPS_MAX_POINTS}], got {n}")
    return _basis_asset()[:n]


def bps_encode(points, n_basis: int = BPS_MAX_POINTS, basis: np.ndarray | None = None):
    """Return (bps_raw, bps_norm, scale) for a point cloud."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise ValueError("cannot encode an empty point cloud")
    basis = basis_points(n_basis) if basis is None else np.asarray(basis, dtype=np.float64)
    centroid = points.mean(axis=0)
    scale = float(np.linalg.norm(points - centroid, axis=1).max())
    raw = kernels.min_dist(basis, points)
    if scale > 0:
        normed = centroid + (points - centroid) * (BPS_NORM_RADIUS / scale)
    else:
        normed = points
    return raw, kernels.min_dist(basis, normed), scale


# --------------------------------------------------------------------------
# parametric shapes
# --------------------------------------------------------------------------


def sample_box(dims, n: int, rng: np.random.Generator):
    """Area-weighted surface samples of an axis-aligned box centred at 0."""
    h = np.asarray(dims, dtype=np.float64) / 2
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) * 2 - 1) * h
    normals = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * h[axis]
    normals[np.arange(n), axis] = sign
    return pts, normals


def sample_cylinder(radius: float, height: float, n: int, rng: np.random.Generator):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.random(n) * 2 * np.pi
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    s = part == 0
    pts[s] = np.stack([radius * np.cos(theta[s]), radius * np.sin(theta[s]), (rng.random(s.sum()) - 0.5) * height], -1)
    normals[s] = np.stack([np.cos(theta[s]), np.sin(theta[s]), np.zeros(s.sum())], -1)
    for k, zsign in ((1, 1.0), (2, -1.0)):
        c = part == k
        r = radius * np.sqrt(rng.random(c.sum()))
        pts[c] = np.stack([r * np.cos(theta[c]), r * np.sin(theta[c]), np.full(c.sum(), zsign * height / 2)], -1)
        normals[c] = [0.0, 0.0, zsign]
    return pts, normals


def sample_ellipsoid(axes, n: int, rng: np.random.Generator):
    a = np.asarray(axes, dtype=np.float64)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * a
    normals = pts / a**2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pts, normals


def shape_points(kind: str, params, n: int, rng: np.random.Generator):
    if kind == "box":
        return sample_box(params, n, rng)
    if kind == "cylinder":
        return sample_cylinder(params[0], params[1], n, rng)
    if kind == "ellipsoid":
        return sample_ellipsoid(params, n, rng)
    raise ValueError(f"unknown shape family {kind!r}")


@dataclass
class ObjectGeometry:
    name: str
    category: str
    points: np.ndarray
    normals: np.ndarray
    params: tuple = ()
    n_basis: int = BPS_MAX_POINTS
    bps_raw: np.ndarray = field(init=False, repr=False)
    bps_norm: np.ndarray = field(init=False, repr=False)
    scale: float = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.bps_raw, self.bps_norm, self.scale = bps_encode(self.points, self.n_basis)

    def feature(self) -> np.ndarray:
        """Geometry vector fed to the condition MLP: raw BPS, normalized BPS, scale."""
        return np.concatenate([self.bps_raw, self.bps_norm, [self.scale]])

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def scaled(self, factors, name: str | None = None) -> "ObjectGeometry":
        """Per-axis scaled copy about the AABB centre, normals re-derived."""
        f = np.broadcast_to(np.asarray(factors, dtype=np.float64), (3,))
        lo, hi = self.aabb()
        c = (lo + hi) / 2
        n = self.normals / f
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return ObjectGeometry(name or f"{self.name}_scaled", self.category, c + (self.points - c) * f, n, self.params, self.n_basis)


def make_object(name, category, kind, params, n_points, rng, n_basis=BPS_MAX_POINTS) -> ObjectGeometry:
    pts, normals = shape_points(kind, params, n_points, rng)
    return ObjectGeometry(name, category, pts, normals, (kind, *map(float, np.atleast_1d(params))), n_basis)


class ObjectLibrary:
    """Named objects with point clouds, normals and category tags."""

    def __init__(self, objects: list[ObjectGeometry], basis_seed: int = BPS_SEED):
        self.objects = list(objects)
        self.basis_seed = basis_seed

    def __len__(self):
        return len(self.objects)

    def __getitem__(self, i) -> ObjectGeometry:
        return self.objects[i]

    @property
    def categories(self) -> list[str]:
        return sorted({o.category for o in self.objects})

    def by_category(self, category: str) -> list[int]:
        return [i for i, o in enumerate(self.objects) if o.category == category]

    def features(self) -> np.ndarray:
        return np.stack([o.feature() for o in self.objects])

    def points(self) -> np.ndarray:
        """(n_objects, N, 3); all objects share the point count."""
        return np.stack([o.points for o in self.objects])

    def save(self, path):
        arrays = {}
        for i, o in enumerate(self.objects):
            arrays[f"points_{i:03d}"] = o.points
            arrays[f"normals_{i:03d}"] = o.normals
        meta = {
            "kind": "object_library",
            "basis_seed": self.basis_seed,
            "n_basis": self.objects[0].n_basis if self.objects else BPS_MAX_POINTS,
            "objects": [{"name": o.name, "category": o.category, "params": list(o.params)} for o in self.objects],
        }
        return save_bundle(path, arrays, meta)

    @classmethod
    def load(cls, path, n_basis: int | None = None) -> "ObjectLibrary":
        arrays, meta = load_bundle(path)
        nb = n_basis or meta.get("n_basis", BPS_MAX_POINTS)
        objs = [
            ObjectGeometry(m["name"], m["category"], arrays[f"points_{i:03d}"], arrays[f"normals_{i:03d}"], tuple(m["params"]), nb)
            for i, m in enumerate(meta["objects"])
        ]
        return cls(objs, meta.get("basis_seed", BPS_SEED))


# --------------------------------------------------------------------------
# toy body SDF
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyBodySDF:
    """Spheres on joints plus optional capsules between joint pairs."""

    radii: tuple[float, ...]
    capsules: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        if any(r <= 0 for r in self.radii) or any(c[2] <= 0 for c in self.capsules):
            raise ValueError("primitive radii must be positive")

    @classmethod
    def from_skeleton(cls, skel: Skeleton = DEFAULT_SKELETON, capsules=()) -> "ToyBodySDF":
        return cls(tuple(float(r) for r in skel.radii()), tuple(capsules))

    def sdf(self, queries, joints) -> np.ndarray:
        """Signed distance of (Q, 3) queries to the body posed at (J, 3) joints."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        joints = np.asarray(joints, dtype=np.float64)
        d = kernels.spheres_sdf(queries, joints, np.asarray(self.radii))
        if self.capsules:
            ia = [c[0] for c in self.capsules]
            ib = [c[1] for c in self.capsules]
            r = np.array([c[2] for c in self.capsules])
            d = np.minimum(d, kernels.capsules_sdf(queries, joints[ia], joints[ib], r))
        return d

    def sdf_frames(self, verts, joints) -> np.ndarray:
        """(T, V) signed distances for per-frame vertices (T, V, 3) and joints (T, J, 3)."""
        if not self.capsules:
            return kernels.frame_spheres_sdf(verts, joints, np.asarray(self.radii))
        return np.stack([self.sdf(v, j) for v, j in zip(verts, joints)])

    def sdf_torch(self, queries: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
        """Differentiable SDF; queries (..., Q, 3), joints (..., J, 3) -> (..., Q)."""
        r = torch.as_tensor(self.radii, dtype=queries.dtype)
        d = (queries.unsqueeze(-2) - joints.unsqueeze(-3)).norm(dim=-1) - r
        d = d.min(dim=-1).values
        if self.capsules:
            ia = [c[0] for c in self.capsules]
            ib = [c[1] for c in self.capsules]
            rc = torch.as_tensor([c[2] for c in self.capsules], dtype=queries.dtype)
            a, b = joints[..., ia, :], joints[..., ib, :]
            ab = (b - a).unsqueeze(-3)
            pa = queries.unsqueeze(-2) - a.unsqueeze(-3)
            h = ((pa * ab).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-12)).clamp(0, 1)
            dc = (pa - h.unsqueeze(-1) * ab).norm(dim=-1) - rc
            d = torch.minimum(d, dc.min(dim=-1).values)
        return d


def body_sdf(query, body: ToyBodySDF, joints) -> float:
    return float(body.sdf(np.asarray(query).reshape(1, 3), joints)[0])


def body_sdf_grad(query, body: ToyBodySDF, joints) -> np.ndarray:
    q = torch.tensor(np.asarray(query, dtype=np.float64).reshape(1, 3), requires_grad=True)
    d = body.sdf_torch(q, torch.as_tensor(np.asarray(joints, dtype=np.float64)))
    d.sum().backward()
    return q.grad.numpy().reshape(3)


def write_basis_asset(path: Path | None = None) -> Path:
    path = path or Path(__file__).parent / "assets" / "bps_basis.npy"
    np.save(path, generate_basis())
    (path.with_suffix(".json")).write_text(json.dumps({"seed": BPS_SEED, "n": BPS_MAX_POINTS}) + "\n")
    return path
