import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lemonmap.geom import (Pose, SpatialIndex, compose, pca_principal_axis, pose_error,
                           radius_search, relative, se3_exp, se3_log, so3_exp, so3_log,
                           umeyama_align)

from conftest import random_pose

vec6 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=6, max_size=6).map(np.array)


@given(vec6)
@settings(max_examples=50, deadline=None)
def test_exp_log_roundtrip(xi):
    xi = xi.copy()
    n = np.linalg.norm(xi[:3])
    if n > 3.0:  # keep the angle inside (-pi, pi)
        xi[:3] *= 3.0 / n
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-8)


def test_so3_small_angle():
    w = np.array([1e-9, -2e-9, 5e-10])
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-15)


def test_compose_identity_and_inverse(rng):
    T = random_pose(rng)
    np.testing.assert_allclose((Pose.identity() @ T).matrix(), T.matrix(), atol=0)
    np.testing.assert_allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_compose_matches_matrix_product(rng):
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_compose_keeps_rotation_orthonormal(rng):
    T = Pose.identity()
    step = random_pose(rng, 0.1, 0.5)
    for _ in range(5000):
        T = T @ step
    R = T.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3), [np.nan, 0, 0])


def test_relative_and_error(rng):
    a, b = random_pose(rng), random_pose(rng)
    np.testing.assert_allclose((a @ relative(a, b)).matrix(), b.matrix(), atol=1e-12)
    dt, dr = pose_error(a, a)
    assert dt < 1e-12 and dr < 1e-6


def test_isometry(rng):
    for _ in range(20):
        T = random_pose(rng)
        p, q = rng.normal(size=(2, 3)) * 5
        tp, tq = T.transform_points(np.stack([p, q]))
        assert abs(np.linalg.norm(tp - tq) - np.linalg.norm(p - q)) < 1e-9


def test_metadata_from_right_operand():
    a = Pose.identity(1, 2, 3.0)
    b = Pose.identity(4, 5, 6.0)
    assert (a @ b).key == (4, 5) and (a @ b).timestamp == 6.0


def test_radius_search_examples():
    idx = SpatialIndex(np.zeros((1, 3)), ids=[7])
    assert radius_search(idx, [0, 0, 0], 1.0) == [7]
    g = np.stack(np.meshgrid(*[np.arange(3.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    idx = SpatialIndex(g)
    hits = radius_search(idx, [1, 1, 1], 1.05)
    brute = sorted(int(i) for i in np.flatnonzero(np.linalg.norm(g - 1, axis=1) <= 1.05))
    assert hits == brute and len(hits) == 7
    assert radius_search(idx, [0.5, 0.5, 0.5], 0.1) == []
    assert radius_search(SpatialIndex(np.zeros((0, 3))), [0, 0, 0], 1.0) == []
    with pytest.raises(ValueError):
        radius_search(idx, [0, 0, 0], 0.0)


def test_radius_search_brute_force():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-10, 10, (1000, 3))
    ids = rng.permutation(5000)[:1000]
    idx = SpatialIndex(pts, ids)
    for _ in range(100):
        c, r = rng.uniform(-10, 10, 3), rng.uniform(0.5, 5)
        brute = sorted(int(ids[i]) for i in np.flatnonzero(np.linalg.norm(pts - c, axis=1) <= r))
        assert idx.radius_search(c, r) == brute


def test_pca_examples():
    axis, lam = pca_principal_axis([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    np.testing.assert_allclose(axis, [1, 0, 0])
    assert lam[1] == 0 and lam[2] == 0
    th = np.linspace(0, 2 * np.pi, 360, endpoint=False)
    circle = np.column_stack([np.cos(th), np.sin(th), np.zeros_like(th)])
    axis, lam = pca_principal_axis(circle)
    ref = np.sort(np.linalg.eigvalsh(np.cov(circle.T, bias=True)))[::-1]
    np.testing.assert_allclose(lam, ref, atol=1e-12)
    assert abs(axis[2]) < 1e-12 and lam[2] < 1e-15
    axis, _ = pca_principal_axis([[1, 1, 1], [2, 3, 1]])
    np.testing.assert_allclose(axis, np.array([1, 2, 0]) / np.sqrt(5), atol=1e-12)
    with pytest.raises(ValueError, match="degenerate point set"):
        pca_principal_axis([[1, 2, 3]] * 4)


def test_pca_rigid_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pts = rng.normal(size=(40, 3)) * [5, 2, 0.5]
        T = random_pose(rng)
        a, _ = pca_principal_axis(pts)
        b, _ = pca_principal_axis(T.transform_points(pts))
        ra = T.rotation @ a
        # the sign rule is applied in each frame separately
        assert min(np.linalg.norm(b - ra), np.linalg.norm(b + ra)) < 1e-6
        ra = ra if ra.sum() >= 0 else -ra
        np.testing.assert_allclose(b, ra, atol=1e-6)


def _traj(rng, n=30):
    return [Pose(np.eye(3), rng.normal(size=3) * 5) for _ in range(n)]


def test_umeyama_identity_and_recovery(rng):
    est = _traj(rng)
    S = umeyama_align(est, est)
    np.testing.assert_allclose(S.matrix(), np.eye(4), atol=1e-9)
    T = random_pose(rng)
    gt = [T @ p for p in est]
    np.testing.assert_allclose(umeyama_align(est, gt).matrix(), T.matrix(), atol=1e-9)


def test_umeyama_noisy_residual():
    sigma = 0.01
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        est = _traj(rng)
        T = random_pose(rng)
        gt = [Pose(np.eye(3), (T @ p).translation + rng.normal(scale=sigma, size=3)) for p in est]
        S = umeyama_align(est, gt)
        res = np.array([g.translation - (S @ e).translation for e, g in zip(est, gt)])
        worst = max(worst, float(np.sqrt((res ** 2).sum(1).mean())))
    assert worst <= 3 * sigma


def test_umeyama_errors():
    line = [Pose(np.eye(3), [i, 0, 0]) for i in range(5)]
    with pytest.raises(ValueError, match="alignment ill-conditioned"):
        umeyama_align(line, line)
    with pytest.raises(ValueError):
        umeyama_align(line[:2], line[:2])
