import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lighthoi.geometry import (
    BPS_SEED,
    DegenerateRotationError,
    ObjectLibrary,
    ToyBodySDF,
    apply_pose,
    apply_pose_torch,
    basis_points,
    body_sdf,
    body_sdf_grad,
    bps_encode,
    generate_basis,
    make_object,
    matrix_to_rot6d,
    point_to_set_distance,
    random_rotations,
    rot6d_to_matrix,
    rot6d_to_matrix_torch,
)


def brute_min(q, V):
    return min(float(np.sqrt(((q - v) ** 2).sum())) for v in V)


def test_basis_asset_matches_seed():
    b = basis_points()
    np.testing.assert_array_equal(b, generate_basis(1024, BPS_SEED))
    assert np.all(np.linalg.norm(b, axis=1) <= 1.0)
    np.testing.assert_array_equal(basis_points(64), b[:64])
    with pytest.raises(ValueError):
        basis_points(0)


def test_bps_single_point_closed_form():
    raw, norm, scale = bps_encode(np.zeros((1, 3)), basis=np.array([[1.0, 0, 0], [0, 0.5, 0]]))
    np.testing.assert_allclose(raw, [1.0, 0.5])
    assert scale == 0.0


def test_bps_fixed_point_at_095(rng):
    pts = rng.normal(size=(200, 3))
    c = pts.mean(0)
    pts = c + (pts - c) * 0.95 / np.linalg.norm(pts - c, axis=1).max()
    raw, norm, scale = bps_encode(pts, 64)
    assert abs(scale - 0.95) < 1e-12
    np.testing.assert_allclose(raw, norm, atol=1e-12)


def test_bps_against_brute_force(rng):
    basis = basis_points(32)
    for _ in range(50):
        pts = rng.normal(size=(int(rng.integers(1, 40)), 3)) * rng.uniform(0.1, 2)
        raw, norm, scale = bps_encode(pts, basis=basis)
        np.testing.assert_allclose(raw, [brute_min(b, pts) for b in basis], atol=1e-6)
        c = pts.mean(0)
        if scale > 0:
            normed = c + (pts - c) * 0.95 / scale
            assert abs(np.linalg.norm(normed - c, axis=1).max() - 0.95) < 1e-6
            np.testing.assert_allclose(norm, [brute_min(b, normed) for b in basis], atol=1e-6)


def test_bps_empty_rejected():
    with pytest.raises(ValueError):
        bps_encode(np.zeros((0, 3)))


def test_bps_rotation_equivariance(rng):
    pts, basis = rng.normal(size=(50, 3)), basis_points(64)
    R = random_rotations(1, rng)[0]
    a, _, _ = bps_encode(pts, basis=basis)
    b, _, _ = bps_encode(pts @ R.T, basis=basis @ R.T)
    np.testing.assert_allclose(a, b, atol=1e-12)
    c, _, _ = bps_encode(pts @ R.T, basis=basis)
    assert not np.allclose(a, c)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 50.0), st.integers(0, 2**31))
def test_scale_homogeneous(alpha, seed):
    pts = np.random.default_rng(seed).normal(size=(20, 3))
    s1 = bps_encode(pts, 8)[2]
    s2 = bps_encode(alpha * pts, 8)[2]
    assert s2 == pytest.approx(alpha * s1, rel=1e-12)


def test_rot6d_identity_and_degenerate():
    np.testing.assert_array_equal(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])
    # the differentiable variant stays finite instead of raising
    assert torch.isfinite(rot6d_to_matrix_torch(torch.tensor([0.0, 0, 0, 0, 1, 0]))).all()


def test_rot6d_round_trip(rng):
    R = random_rotations(1000, rng)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-6)
    r6 = rng.normal(size=(100, 6))
    M = rot6d_to_matrix(r6)
    np.testing.assert_allclose(M @ np.swapaxes(M, -1, -2), np.broadcast_to(np.eye(3), M.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(M), 1.0, atol=1e-12)
    np.testing.assert_allclose(rot6d_to_matrix_torch(torch.as_tensor(r6)).numpy(), M, atol=1e-12)


def test_point_to_set_distance(rng):
    assert point_to_set_distance([0, 0, 0], [[0, 0, 0.03]]) == pytest.approx(0.03, abs=1e-15)
    for _ in range(100):
        j, V = rng.normal(size=3), rng.normal(size=(int(rng.integers(1, 30)), 3))
        assert abs(point_to_set_distance(j, V) - brute_min(j, V)) < 1e-9
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    assert point_to_set_distance([0.5, 0.5, 0.5], cube) > 0
    with pytest.raises(ValueError):
        point_to_set_distance([0, 0, 0], np.zeros((0, 3)))


def test_apply_pose_cases(rng):
    pts = rng.normal(size=(10, 3))
    np.testing.assert_array_equal(apply_pose(pts, np.zeros(3), [1, 0, 0, 0, 1, 0]), pts)
    moved = apply_pose(pts, [1, 2, 3], [1, 0, 0, 0, 1, 0])
    np.testing.assert_allclose(moved.mean(0) - pts.mean(0), [1, 2, 3], atol=1e-12)


def test_apply_pose_composition(rng):
    pts = rng.normal(size=(10, 3))
    for _ in range(20):
        R1, R2 = random_rotations(2, rng)
        t1, t2 = rng.normal(size=(2, 3))
        once = apply_pose(apply_pose(pts, t1, matrix_to_rot6d(R1)), t2, matrix_to_rot6d(R2))
        composed = apply_pose(pts, R2 @ t1 + t2, matrix_to_rot6d(R2 @ R1))
        np.testing.assert_allclose(once, composed, atol=1e-9)
        tp = apply_pose_torch(torch.as_tensor(pts), torch.as_tensor(t1), torch.as_tensor(matrix_to_rot6d(R1)))
        np.testing.assert_allclose(tp.numpy(), apply_pose(pts, t1, matrix_to_rot6d(R1)), atol=1e-12)


def test_sdf_sphere_cases():
    body = ToyBodySDF((0.1,))
    j = np.zeros((1, 3))
    assert body_sdf([0, 0, 0], body, j) == pytest.approx(-0.1)
    assert body_sdf([0.3, 0, 0], body, j) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        ToyBodySDF((0.0,))


def test_sdf_capsule_case():
    body = ToyBodySDF((0.01, 0.01), capsules=((0, 1, 0.1),))
    j = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    assert body_sdf([0.5, 0.3, 0], body, j) == pytest.approx(0.2)
    assert body_sdf([0.5, 0.0, 0], body, j) == pytest.approx(-0.1)


def test_sdf_gradient_fd(rng):
    body = ToyBodySDF((0.05, 0.08, 0.03), capsules=((0, 2, 0.04),))
    joints = rng.normal(size=(3, 3)) * 0.3
    h = 1e-6
    for _ in range(20):
        q = rng.normal(size=3) * 0.4
        g = body_sdf_grad(q, body, joints)
        fd = np.array([(body_sdf(q + h * e, body, joints) - body_sdf(q - h * e, body, joints)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(g, fd, atol=1e-4)


def test_sdf_lipschitz(rng):
    body = ToyBodySDF((0.05, 0.1, 0.02, 0.07), capsules=((0, 1, 0.03),))
    joints = rng.normal(size=(4, 3)) * 0.5
    a, b = rng.normal(size=(2, 500, 3))
    da, db = body.sdf(a, joints), body.sdf(b, joints)
    assert np.all(np.abs(da - db) <= np.linalg.norm(a - b, axis=1) + 1e-12)


def test_sdf_torch_matches_numpy(rng):
    body = ToyBodySDF((0.05, 0.1, 0.02), capsules=((0, 1, 0.03),))
    joints = rng.normal(size=(3, 3))
    q = rng.normal(size=(40, 3))
    np.testing.assert_allclose(body.sdf_torch(torch.as_tensor(q), torch.as_tensor(joints)).numpy(), body.sdf(q, joints), atol=1e-12)
    verts = rng.normal(size=(4, 40, 3))
    J = rng.normal(size=(4, 3, 3))
    np.testing.assert_allclose(body.sdf_frames(verts, J), np.stack([body.sdf(v, j) for v, j in zip(verts, J)]))


def test_library_round_trip(tmp_path, rng):
    objs = [make_object(f"box_{i}", "box", "box", (0.2, 0.3, 0.4), 64, rng, n_basis=16) for i in range(2)]
    lib = ObjectLibrary(objs)
    lib.save(tmp_path / "lib")
    back = ObjectLibrary.load(tmp_path / "lib")
    assert len(back) == 2 and back.categories == ["box"]
    np.testing.assert_array_equal(back.features(), lib.features())
    assert back.load(tmp_path / "lib", n_basis=8).features().shape == (2, 17)


def test_scaled_object(rng):
    o = make_object("cyl", "cylinder", "cylinder", (0.1, 0.3), 128, rng, n_basis=16)
    s = o.scaled(2.0)
    assert s.scale == pytest.approx(2 * o.scale)
    np.testing.assert_allclose(np.linalg.norm(s.normals, axis=1), 1.0)
