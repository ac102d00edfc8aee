import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lighthoi.core import (
    CONTAINER_VERSION,
    GridLayout,
    HOIDataset,
    HOISequence,
    ModalityPartition,
    PartitionError,
    ShapeError,
    all_partitions,
    pack,
    unpack,
    validate_partition,
)

from conftest import random_sequence


def test_pack_widths_small_case():
    seq = HOISequence(
        np.arange(12.0).reshape(2, 2, 3),
        np.ones((2, 1, 3)),
        np.full((2, 1), 0.5),
        np.zeros((2, 3)),
        np.tile([1.0, 0, 0, 0, 1, 0], (2, 1)),
    )
    g = pack(seq)
    assert g.shape == (2, 3)
    assert g.layout.widths == (6, 4, 9)
    assert g.data.shape == (2, 19)
    np.testing.assert_array_equal(g.channel("body")[1], np.arange(6.0, 12.0))
    np.testing.assert_array_equal(g.channel("hand")[0], [1, 1, 1, 0.5])
    assert unpack(g).equals(seq)


def test_round_trip_100_random(rng):
    for _ in range(100):
        s = random_sequence(rng, T=int(rng.integers(2, 8)))
        assert unpack(pack(s)).equals(s)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_unpack_pack_bytes(T, jb, jh, seed):
    layout = GridLayout(jb, jh)
    data = np.random.default_rng(seed).normal(size=(T, layout.n_channels))
    again = pack(unpack(data, layout), layout).data
    assert again.tobytes() == data.tobytes()


def test_nan_rejected(rng):
    s = random_sequence(rng)
    s.body_joints[1, 0, 2] = np.nan
    with pytest.raises(ShapeError):
        pack(s)


def test_layout_mismatch_rejected(rng):
    with pytest.raises(ShapeError):
        pack(random_sequence(rng, jb=3), GridLayout(4, 2))
    with pytest.raises(ShapeError):
        unpack(np.zeros((3, 10)), GridLayout(3, 2))


def test_zero_grid_unpacks_to_zero_sequence():
    s = unpack(np.zeros((3, GridLayout().n_channels)))
    assert not s.obj_rot6d.any() and not s.body_joints.any()


def test_short_sequence_rejected():
    with pytest.raises(ShapeError):
        HOISequence(np.zeros((1, 2, 3)), np.zeros((1, 1, 3)), np.zeros((1, 1)), np.zeros((1, 3)), np.zeros((1, 6)))


def test_exactly_six_partitions():
    parts = all_partitions()
    assert len(parts) == 6
    assert len({str(p) for p in parts}) == 6
    for p in parts:
        validate_partition(p)


def test_partition_examples():
    assert ModalityPartition.parse("bh|o").m1 == {"body", "hand"}
    assert ModalityPartition.parse("o|bh").m2 == {"body", "hand"}
    assert str(ModalityPartition.parse("body,hand|object")) == "bh|o"
    with pytest.raises(PartitionError):
        validate_partition(ModalityPartition(frozenset({"body"}), frozenset({"body", "object"})))


@pytest.mark.parametrize("m1", [(), ("body", "hand", "object")])
def test_improper_subsets_rejected(m1):
    m1 = frozenset(m1)
    with pytest.raises(PartitionError):
        validate_partition(ModalityPartition(m1, frozenset({"body", "hand", "object"}) - m1))


def test_non_cover_rejected():
    with pytest.raises(PartitionError):
        ModalityPartition.parse("b|o")


def _dataset(rng, n=3, T=4):
    seqs = [random_sequence(rng, T=T, jb=8, jh=4) for _ in range(n)]
    arrays = {k: np.stack([getattr(s, k) for s in seqs]) for k in ("body_joints", "hand_joints", "hand_angles", "obj_trans", "obj_rot6d")}
    arrays.update(
        contact_labels=np.zeros((n, T, 12), bool),
        foot_contact=np.ones((n, T, 4), bool),
        task_label=np.arange(n),
        object_id=np.zeros(n, np.int64),
    )
    return HOIDataset(arrays, {"fps": 30.0, "seed": 1})


def test_container_round_trip_and_bytes(tmp_path, rng):
    ds = _dataset(rng)
    ds.save(tmp_path / "a")
    ds.save(tmp_path / "b")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = HOIDataset.load(tmp_path / "a")
    for k, v in ds.arrays.items():
        np.testing.assert_array_equal(back.arrays[k], v)
    meta = json.loads((tmp_path / "a.json").read_text())
    assert meta["container_version"] == CONTAINER_VERSION
    assert back.sequence(1).equals(ds.sequence(1))


def test_container_missing_array(rng):
    ds = _dataset(rng)
    del ds.arrays["foot_contact"]
    with pytest.raises(ShapeError):
        HOIDataset(ds.arrays, ds.meta)


def test_container_version_checked(tmp_path, rng):
    ds = _dataset(rng)
    ds.save(tmp_path / "a")
    meta = json.loads((tmp_path / "a.json").read_text())
    meta["container_version"] = 99
    (tmp_path / "a.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="container version"):
        HOIDataset.load(tmp_path / "a")
