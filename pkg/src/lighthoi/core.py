"""HOI sequence data model, modality partitions, the token grid and the
on-disk dataset container."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

MODALITIES = ("body", "hand", "object")
_SHORT = {"b": "body", "h": "hand", "o": "object"}
_LONG_TO_SHORT = {v: k for k, v in _SHORT.items()}

DATASET_ARRAYS = (
    "body_joints",
    "hand_joints",
    "hand_angles",
    "obj_trans",
    "obj_rot6d",
    "contact_labels",
    "foot_contact",
    "task_label",
    "object_id",
)
CONTAINER_VERSION = 1


class ShapeError(ValueError):
    pass


class PartitionError(ValueError):
    pass


# --------------------------------------------------------------------------
# skeleton
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Skeleton:
    """Toy skeleton layout.

    The foot index set always has four entries; with only two foot joints
    each one is listed twice, standing in for ankle and toe.
    """

    body_names: tuple[str, ...] = (
        "pelvis",
        "chest",
        "l_elbow",
        "r_elbow",
        "l_knee",
        "r_knee",
        "l_foot",
        "r_foot",
    )
    hand_names: tuple[str, ...] = ("l_palm", "l_tip", "r_palm", "r_tip")
    foot_index: tuple[int, ...] = (6, 6, 7, 7)
    body_radius: float = 0.05
    hand_radius: float = 0.015

    @property
    def n_body(self) -> int:
        return len(self.body_names)

    @property
    def n_hand(self) -> int:
        return len(self.hand_names)

    @property
    def n_joints(self) -> int:
        return self.n_body + self.n_hand

    def radii(self) -> np.ndarray:
        return np.concatenate(
            [np.full(self.n_body, self.body_radius), np.full(self.n_hand, self.hand_radius)]
        )


DEFAULT_SKELETON = Skeleton()


# --------------------------------------------------------------------------
# partitions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModalityPartition:
    m1: frozenset
    m2: frozenset

    @classmethod
    def parse(cls, text: str) -> "ModalityPartition":
        """Parse ``"bh|o"`` style strings (short or comma-separated long names)."""
        try:
            left, right = text.split("|")
        except ValueError as exc:
            raise PartitionError(f"partition must look like 'bh|o', got {text!r}") from exc
        p = cls(_parse_side(left), _parse_side(right))
        validate_partition(p)
        return p

    def __str__(self) -> str:
        side = lambda s: "".join(_LONG_TO_SHORT[m] for m in MODALITIES if m in s)
        return f"{side(self.m1)}|{side(self.m2)}"

    def mask(self) -> np.ndarray:
        """Boolean (3,) mask, true for modalities in m1."""
        return np.array([m in self.m1 for m in MODALITIES])


def _parse_side(text: str) -> frozenset:
    text = text.strip()
    if "," in text or text in MODALITIES:
        names = [t.strip() for t in text.split(",") if t.strip()]
    else:
        names = []
        for ch in text:
            if ch not in _SHORT:
                raise PartitionError(f"unknown modality code {ch!r}")
            names.append(_SHORT[ch])
    for n in names:
        if n not in MODALITIES:
            raise PartitionError(f"unknown modality {n!r}")
    return frozenset(names)


def validate_partition(p: ModalityPartition) -> ModalityPartition:
    m1, m2 = frozenset(p.m1), frozenset(p.m2)
    universe = frozenset(MODALITIES)
    if not m1 or not m2:
        raise PartitionError("both sides of a partition must be non-empty")
    if not (m1 | m2) <= universe:
        raise PartitionError(f"unknown modalities in {sorted(m1 | m2)}")
    if m1 & m2:
        raise PartitionError(f"partition sides overlap on {sorted(m1 & m2)}")
    if m1 | m2 != universe:
        raise PartitionError(f"partition does not cover {sorted(universe - (m1 | m2))}")
    return p


def all_partitions() -> list[ModalityPartition]:
    out = []
    for r in (1, 2):
        for combo in combinations(MODALITIES, r):
            m1 = frozenset(combo)
            out.append(ModalityPartition(m1, frozenset(MODALITIES) - m1))
    return out


# --------------------------------------------------------------------------
# sequences and grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HOISequence:
    body_joints: np.ndarray  # (T, Jb, 3)
    hand_joints: np.ndarray  # (T, Jh, 3)
    hand_angles: np.ndarray  # (T, Jh)
    obj_trans: np.ndarray  # (T, 3)
    obj_rot6d: np.ndarray  # (T, 6)
    fps: float = 30.0

    def __post_init__(self):
        T = self.body_joints.shape[0]
        if T < 2:
            raise ShapeError("sequence needs at least 2 frames")
        shapes = {
            "body_joints": (self.body_joints, 3),
            "hand_joints": (self.hand_joints, 3),
        }
        for name, (arr, last) in shapes.items():
            if arr.ndim != 3 or arr.shape[0] != T or arr.shape[2] != last:
                raise ShapeError(f"{name} has shape {arr.shape}")
        if self.hand_angles.shape != self.hand_joints.shape[:2]:
            raise ShapeError(f"hand_angles has shape {self.hand_angles.shape}")
        if self.obj_trans.shape != (T, 3):
            raise ShapeError(f"obj_trans has shape {self.obj_trans.shape}")
        if self.obj_rot6d.shape != (T, 6):
            raise ShapeError(f"obj_rot6d has shape {self.obj_rot6d.shape}")

    @property
    def T(self) -> int:
        return self.body_joints.shape[0]

    def joints(self) -> np.ndarray:
        """All joint positions, body then hand, (T, Jb+Jh, 3)."""
        return np.concatenate([self.body_joints, self.hand_joints], axis=1)

    def validate(self) -> "HOISequence":
        for name in ("body_joints", "hand_joints", "hand_angles", "obj_trans", "obj_rot6d"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"{name} contains non-finite values")
        return self

    def equals(self, other: "HOISequence") -> bool:
        return self.fps == other.fps and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("body_joints", "hand_joints", "hand_angles", "obj_trans", "obj_rot6d")
        )


@dataclass(frozen=True)
class GridLayout:
    """Channel layout of the per-frame token triple.

    Body channel is the flattened body joints, hand channel the flattened
    hand joints followed by the hand angles, object channel translation
    followed by the 6D rotation.
    """

    n_body: int = DEFAULT_SKELETON.n_body
    n_hand: int = DEFAULT_SKELETON.n_hand

    @property
    def widths(self) -> tuple[int, int, int]:
        return (3 * self.n_body, 4 * self.n_hand, 9)

    @property
    def n_channels(self) -> int:
        return sum(self.widths)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, w in zip(MODALITIES, self.widths):
            out[name] = slice(start, start + w)
            start += w
        return out

    def modality_index(self) -> np.ndarray:
        """(C,) integer modality id of every channel."""
        return np.repeat(np.arange(3), self.widths)

    def channel_mask(self, modalities) -> np.ndarray:
        mods = set(modalities)
        return np.isin(self.modality_index(), [i for i, m in enumerate(MODALITIES) if m in mods])

    @classmethod
    def for_skeleton(cls, skel: Skeleton) -> "GridLayout":
        return cls(skel.n_body, skel.n_hand)


@dataclass(frozen=True)
class TokenGrid:
    """Per-frame (body, hand, object) tokens stored as one (T, C) array."""

    data: np.ndarray
    layout: GridLayout = field(default_factory=GridLayout)
    fps: float = 30.0

    def channel(self, modality: str) -> np.ndarray:
        return self.data[..., self.layout.slices()[modality]]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.data.shape[-2], 3)


def pack(seq: HOISequence, layout: GridLayout | None = None) -> TokenGrid:
    layout = layout or GridLayout(seq.body_joints.shape[1], seq.hand_joints.shape[1])
    if seq.body_joints.shape[1] != layout.n_body or seq.hand_joints.shape[1] != layout.n_hand:
        raise ShapeError(
            f"sequence has {seq.body_joints.shape[1]} body / {seq.hand_joints.shape[1]} hand joints, "
            f"layout expects {layout.n_body} / {layout.n_hand}"
        )
    seq.validate()
    T = seq.T
    data = np.concatenate(
        [
            seq.body_joints.reshape(T, -1),
            seq.hand_joints.reshape(T, -1),
            seq.hand_angles,
            seq.obj_trans,
            seq.obj_rot6d,
        ],
        axis=1,
    )
    return TokenGrid(data, layout, seq.fps)


def unpack(grid: TokenGrid | np.ndarray, layout: GridLayout | None = None, fps: float | None = None) -> HOISequence:
    if isinstance(grid, TokenGrid):
        layout = layout or grid.layout
        fps = grid.fps if fps is None else fps
        data = grid.data
    else:
        data = np.asarray(grid)
        layout = layout or GridLayout()
    fps = 30.0 if fps is None else fps
    if data.ndim != 2 or data.shape[1] != layout.n_channels:
        raise ShapeError(f"grid of shape {data.shape} does not match {layout.n_channels} channels")
    T = data.shape[0]
    jb, jh = layout.n_body, layout.n_hand
    s = layout.slices()
    hand = data[:, s["hand"]]
    obj = data[:, s["object"]]
    return HOISequence(
        body_joints=data[:, s["body"]].reshape(T, jb, 3).copy(),
        hand_joints=hand[:, : 3 * jh].reshape(T, jh, 3).copy(),
        hand_angles=hand[:, 3 * jh :].copy(),
        obj_trans=obj[:, :3].copy(),
        obj_rot6d=obj[:, 3:].copy(),
        fps=float(fps),
    )


def stack_grids(seqs, layout: GridLayout | None = None) -> np.ndarray:
    return np.stack([pack(s, layout).data for s in seqs])


# --------------------------------------------------------------------------
# dataset container
# --------------------------------------------------------------------------


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # fixed timestamps so identical content gives identical bytes
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def save_bundle(path, arrays: dict[str, np.ndarray], meta: dict) -> tuple[Path, Path]:
    """Write ``<path>.npz`` plus a ``<path>.json`` sidecar."""
    path = Path(path)
    npz = path.with_suffix(".npz")
    side = path.with_suffix(".json")
    npz.parent.mkdir(parents=True, exist_ok=True)
    _write_npz(npz, arrays)
    meta = dict(meta)
    meta.setdefault("container_version", CONTAINER_VERSION)
    meta["shapes"] = {k: list(v.shape) for k, v in sorted(arrays.items())}
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return npz, side


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("container_version", CONTAINER_VERSION) != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {meta['container_version']!r}")
    return arrays, meta


@dataclass
class HOIDataset:
    """Batch of equal-length sequences plus labels, as stored on disk."""

    arrays: dict[str, np.ndarray]
    meta: dict

    def __post_init__(self):
        missing = [k for k in DATASET_ARRAYS if k not in self.arrays]
        if missing:
            raise ShapeError(f"dataset is missing arrays {missing}")

    def __len__(self) -> int:
        return int(self.arrays["body_joints"].shape[0])

    @property
    def fps(self) -> float:
        return float(self.meta.get("fps", 30.0))

    def sequence(self, i: int) -> HOISequence:
        a = self.arrays
        return HOISequence(
            a["body_joints"][i], a["hand_joints"][i], a["hand_angles"][i],
            a["obj_trans"][i], a["obj_rot6d"][i], self.fps,
        )

    def sequences(self):
        return [self.sequence(i) for i in range(len(self))]

    def grids(self, layout: GridLayout | None = None) -> np.ndarray:
        a = self.arrays
        n, T = a["body_joints"].shape[:2]
        return np.concatenate(
            [
                a["body_joints"].reshape(n, T, -1),
                a["hand_joints"].reshape(n, T, -1),
                a["hand_angles"],
                a["obj_trans"],
                a["obj_rot6d"],
            ],
            axis=2,
        )

    def subset(self, idx) -> "HOIDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return HOIDataset({k: v[idx] for k, v in self.arrays.items()}, dict(self.meta))

    def save(self, path):
        return save_bundle(path, self.arrays, self.meta)

    @classmethod
    def load(cls, path) -> "HOIDataset":
        arrays, meta = load_bundle(path)
        return cls(arrays, meta)
