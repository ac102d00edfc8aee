import numpy as np
import pytest
from dataclasses import replace

from lighthoi.augmentation import (
    AugWeights,
    CorrespondenceMap,
    DegenerateAABB,
    QUALITY_COLUMNS,
    aug_objective,
    augment,
    build_correspondence,
    demo_scene,
    extract_contacts,
    optimize,
    transfer_init,
    write_quality_csv,
)
from lighthoi.geometry import ObjectGeometry, matrix_to_rot6d, rot6d_to_matrix
from lighthoi.metrics import joint_object_distances
from lighthoi.synthetic import CONTACT_THRESHOLD


@pytest.fixture(scope="module")
def scene():
    seq, src, tgt = demo_scene()
    return seq, src, tgt, extract_contacts(seq, src)


def _yaw(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# -- correspondence -----------------------------------------------------------


def test_identity_correspondence(scene):
    _, src, _, _ = scene
    cmap = build_correspondence(src, src)
    np.testing.assert_allclose(cmap(src.points), src.points, atol=1e-12)


def test_scaled_correspondence_and_corners(scene):
    _, src, _, _ = scene
    big = src.scaled(2.0)
    cmap = CorrespondenceMap(src, big)
    lo, hi = src.aabb()
    c = (lo + hi) / 2
    pts = src.points[:20]
    np.testing.assert_allclose(cmap(pts), c + 2 * (pts - c), atol=1e-12)
    tlo, thi = big.aabb()
    np.testing.assert_allclose(cmap(np.stack([lo, hi])), np.stack([tlo, thi]), atol=1e-12)
    corner = np.array([lo[0], hi[1], lo[2]])
    np.testing.assert_allclose(cmap(corner), [tlo[0], thi[1], tlo[2]], atol=1e-12)


def test_correspondence_errors(scene):
    _, src, _, _ = scene
    other = ObjectGeometry("x", "sphere", src.points, src.normals, n_basis=src.n_basis)
    with pytest.raises(ValueError):
        CorrespondenceMap(src, other)
    flat = src.points.copy()
    flat[:, 2] = 0.0
    with pytest.raises(DegenerateAABB):
        CorrespondenceMap(src, ObjectGeometry("f", src.category, flat, src.normals, n_basis=src.n_basis))


def test_transfer_init_copies_source_pose(scene):
    seq, src, tgt, _ = scene
    tau, r6 = transfer_init(seq, build_correspondence(src, tgt))
    np.testing.assert_array_equal(tau, seq.obj_trans)
    np.testing.assert_array_equal(r6, seq.obj_rot6d)
    tau[0] += 1.0
    assert not np.array_equal(tau, seq.obj_trans)


def test_extract_contacts(scene):
    seq, src, _, c = scene
    assert len(c) > 0
    d = joint_object_distances(seq, src)
    assert np.all(d[c.frame, c.joint] < CONTACT_THRESHOLD)
    assert np.all(np.linalg.norm(c.offset, axis=1) < CONTACT_THRESHOLD)
    np.testing.assert_allclose(np.linalg.norm(c.src_world_normal, axis=1), 1.0, atol=1e-9)


# -- objective ----------------------------------------------------------------


def test_objective_zero_at_identity(scene):
    seq, src, _, c = scene
    _, parts = aug_objective(seq, seq.obj_trans, seq.obj_rot6d, build_correspondence(src, src), c, AugWeights())
    for k, v in parts.items():
        assert v == pytest.approx(0.0, abs=1e-20), k


def test_objective_constant_offset(scene):
    seq, src, _, c = scene
    off = np.array([0.01, -0.02, 0.005])
    _, parts = aug_objective(seq, seq.obj_trans + off, seq.obj_rot6d, build_correspondence(src, src), c, AugWeights())
    assert parts["init"] == pytest.approx(seq.T * off @ off, rel=1e-12)
    assert parts["con"] == pytest.approx(len(c) * off @ off, rel=1e-9)
    assert parts["acc"] == pytest.approx(0.0, abs=1e-24)
    assert parts["normal"] == pytest.approx(0.0, abs=1e-12)


def test_objective_jump_has_acceleration(scene):
    seq, src, _, c = scene
    tau = seq.obj_trans.copy()
    tau[seq.T // 2 :] += np.array([0.0, 0.0, 0.05])
    _, parts = aug_objective(seq, tau, seq.obj_rot6d, build_correspondence(src, src), c, AugWeights())
    # a step of height h contributes two second differences of size h
    assert parts["acc"] == pytest.approx(2 * 0.05**2, rel=1e-9)


def test_objective_rigid_invariance(scene, rng):
    seq, src, tgt, c = scene
    Rw, tw = _yaw(0.7), np.array([0.3, -1.2, 0.0])
    tau = seq.obj_trans + rng.normal(scale=0.01, size=seq.obj_trans.shape)
    r6 = seq.obj_rot6d + rng.normal(scale=0.01, size=seq.obj_rot6d.shape)
    R = rot6d_to_matrix(r6)

    def move(p):
        return p @ Rw.T + tw

    seq2 = replace(seq, body_joints=move(seq.body_joints), hand_joints=move(seq.hand_joints),
                   obj_trans=move(seq.obj_trans), obj_rot6d=matrix_to_rot6d(Rw @ rot6d_to_matrix(seq.obj_rot6d)))
    c2 = extract_contacts(seq2, src)
    cm = build_correspondence(src, tgt)
    _, a = aug_objective(seq, tau, matrix_to_rot6d(R), cm, c, AugWeights())
    _, b = aug_objective(seq2, move(tau), matrix_to_rot6d(Rw @ R), cm, c2, AugWeights())
    for k in a:
        assert b[k] == pytest.approx(a[k], rel=1e-7, abs=1e-12), k


def test_weights_validation():
    with pytest.raises(ValueError):
        AugWeights(lam_con=-1.0)


# -- optimization -------------------------------------------------------------


def test_identity_is_fixed_point(scene):
    seq, src, _, _ = scene
    out, rep, q = augment(seq, src, src)
    assert np.abs(out.obj_trans - seq.obj_trans).max() < 1e-3
    assert np.abs(out.obj_rot6d - seq.obj_rot6d).max() < 1e-3
    assert rep.final_total <= rep.initial_total
    assert set(q) == set(QUALITY_COLUMNS)


@pytest.mark.parametrize("method", ["lbfgs", "gd"])
def test_descent_contract(scene, method):
    seq, src, tgt, c = scene
    out, rep = optimize(seq, build_correspondence(src, tgt), c, iters=15, method=method)
    assert rep.final_total <= rep.initial_total
    assert np.all(np.diff(rep.history) <= 1e-12)
    assert rep.final["con"] < rep.initial["con"]
    # joints untouched unless asked
    np.testing.assert_array_equal(out.body_joints, seq.body_joints)


def test_optimize_human_moves_joints(scene):
    seq, src, tgt, c = scene
    out, rep = optimize(seq, build_correspondence(src, tgt), c, iters=10, optimize_human=True)
    assert rep.final_total <= rep.initial_total
    assert not np.array_equal(out.body_joints, seq.body_joints) or not np.array_equal(out.hand_joints, seq.hand_joints)


def test_optimize_rejects_unknown_method(scene):
    seq, src, tgt, c = scene
    with pytest.raises(ValueError):
        optimize(seq, build_correspondence(src, tgt), c, method="adam")


def test_quality_csv(tmp_path):
    rows = [{"job": 0, **{k: 0.5 for k in QUALITY_COLUMNS}}]
    p = write_quality_csv(rows, tmp_path / "q" / "quality.csv")
    assert p.read_text().splitlines()[0] == "job," + ",".join(QUALITY_COLUMNS)


def test_init_contact_residual_is_shape_deviation(scene):
    # at the transferred initialization each contact is off by exactly the local
    # displacement between its source point and the corresponded target point
    seq, src, tgt, c = scene
    cmap = build_correspondence(src, tgt)
    tau, r6 = transfer_init(seq, cmap)
    _, parts = aug_objective(seq, tau, r6, cmap, c, AugWeights())
    dev = cmap(c.src_point) - c.src_point
    assert parts["con"] == pytest.approx(float((dev**2).sum()), rel=1e-9)
    assert parts["con"] > 0
