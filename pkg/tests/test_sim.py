import numpy as np
import pytest

from lemonmap.geom import Pose
from lemonmap.sim import (DriftModel, SessionSpec, generate_loop_candidates, generate_session,
                          generate_world, inject_drift, simulate_scan)


def _same_world(a, b):
    return len(a) == len(b) and all(
        np.array_equal(p.normal, q.normal) and p.offset == q.offset and np.array_equal(p.polygon, q.polygon)
        for p, q in zip(a, b))


@pytest.mark.parametrize("kind", ["corridor", "courtyard", "garage"])
def test_world_planes_consistent(kind):
    w = generate_world(kind, 50.0 if kind == "courtyard" else 20.0, seed=3)
    assert len(w) >= 6
    for p in w:
        assert abs(np.linalg.norm(p.normal) - 1) < 1e-12
        assert np.abs(p.distance(p.polygon)).max() < 1e-9
    assert _same_world(w, generate_world(kind, 50.0 if kind == "courtyard" else 20.0, seed=3))


def test_world_errors():
    with pytest.raises(ValueError):
        generate_world("corridor", 0.0)
    with pytest.raises(ValueError):
        generate_world("cave", 10.0)


def test_noiseless_scan_lies_on_planes():
    w = generate_world("garage", 30.0, 0)
    pose = Pose.exp(np.array([0, 0, 0.4, 2.5, 2.5, 1.2]))
    cloud = simulate_scan(w, pose, rays=2000, sigma=0.0, seed=1)
    assert len(cloud) > 0
    pts = pose.transform_points(cloud.points)
    d = np.min(np.abs(np.stack([p.distance(pts) for p in w])), axis=0)
    assert d.max() < 1e-9
    # labels name the plane each point came from
    own = np.array([abs(w.planes[l].distance(x[None])[0]) for x, l in zip(pts, cloud.labels)])
    assert own.max() < 1e-9


def test_scan_noise_rms():
    w = generate_world("garage", 30.0, 0)
    pose = Pose.exp(np.array([0, 0, 0.0, 2.5, 2.5, 1.2]))
    cloud = simulate_scan(w, pose, rays=10_000, sigma=0.01, seed=2)
    pts = pose.transform_points(cloud.points)
    d = np.array([w.planes[l].distance(x[None])[0] for x, l in zip(pts, cloud.labels)])
    # the noise is isotropic, so the plane-normal component has std sigma
    rms = float(np.sqrt(np.mean(d ** 2)))
    assert 0.008 <= rms <= 0.012


def test_single_ray_and_invalid():
    w = generate_world("corridor", 20.0, 0)
    c = simulate_scan(w, Pose.exp(np.array([0, 0, 0, 5, 0, 1.5])), rays=1, sigma=0.0)
    assert len(c) in (0, 1)
    with pytest.raises(ValueError):
        simulate_scan(w, Pose.identity(), rays=0)
    far = simulate_scan(w, Pose.exp(np.array([0, 0, 0, 0, 0, 500])), rays=50, max_range=10)
    assert len(far) == 0


def _line(n, step=1.0):
    return [Pose(np.eye(3), [step * i, 0, 0], 0, i) for i in range(n)]


def test_drift_zero_model_is_identity():
    gt = _line(20)
    out = inject_drift(gt, DriftModel(), seed=0)
    for a, b in zip(gt, out):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_drift_z_bias_integrates():
    out = inject_drift(_line(101), DriftModel(z_bias=0.01), seed=0)
    assert abs(out[-1].translation[2] - 1.0) < 1e-9
    np.testing.assert_allclose(out[0].matrix(), np.eye(4))


def test_drift_rotation_bounded():
    th = np.linspace(0, 2 * np.pi, 101)
    r = 100 / (2 * np.pi)
    gt = [Pose(Pose.exp(np.array([0, 0, t + np.pi / 2, 0, 0, 0])).rotation,
               [r * np.cos(t), r * np.sin(t), 0], 0, i) for i, t in enumerate(th)]
    out = inject_drift(gt, DriftModel(rotation_rate=1e-3), seed=4)
    err = np.linalg.norm(out[-1].translation - gt[-1].translation)
    assert 0 < err < 100


def test_drift_grows_with_path_length():
    med = []
    for n in (20, 80):
        errs = [np.linalg.norm(inject_drift(_line(n), DriftModel(2e-3, 5e-3), seed=s)[-1].translation
                               - [n - 1, 0, 0]) for s in range(20)]
        med.append(np.median(errs))
    assert med[1] > med[0]


def test_drift_needs_two_poses():
    with pytest.raises(ValueError):
        inject_drift(_line(1), DriftModel())


@pytest.fixture(scope="module")
def corridor_bundle():
    spec = SessionSpec(robot_count=2, world_kind="corridor", world_extent=30.0, rays=600,
                       false_loop_ratio=0.2, rng_seed=5)
    return generate_session(spec)


def test_session_invariants(corridor_bundle):
    b = corridor_bundle
    for r in b.robots:
        np.testing.assert_allclose(r.odom[0].matrix(), np.eye(4))
        assert len(r.odom) == len(r.gt) == len(r.scans)
        assert [p.key for p in r.odom] == [(r.robot_id, i) for i in range(len(r))]
    assert any(l.is_inter and l.gt_valid for l in b.loops)


def test_candidates_ratio_and_noise(corridor_bundle):
    b = corridor_bundle
    true = [l for l in b.loops if l.gt_valid]
    false = [l for l in b.loops if not l.gt_valid]
    assert len(false) == round(0.2 / 0.8 * len(true))
    for l in true:
        ga, gb = b.gt_pose(l.key_a), b.gt_pose(l.key_b)
        assert np.linalg.norm(ga.translation - gb.translation) <= 2.0
        if not l.is_inter:
            assert abs(l.idx_a - l.idx_b) > 20
        dt = (ga.inverse() @ gb).inverse() @ l.rel_transform
        assert np.linalg.norm(dt.translation) <= 0.2 + 1e-9
        assert np.degrees(np.arccos(np.clip((np.trace(dt.rotation) - 1) / 2, -1, 1))) <= 2.0 + 1e-9
    for l in false:
        assert np.linalg.norm(b.gt_pose(l.key_a).translation - b.gt_pose(l.key_b).translation) >= 10


def test_candidates_zero_false_ratio(corridor_bundle):
    loops = generate_loop_candidates(corridor_bundle, 2.0, 0.0, seed=1)
    assert loops and all(l.gt_valid for l in loops)


def test_inter_robot_candidate_brute_force(corridor_bundle):
    b = corridor_bundle
    pa = np.array([p.translation for p in b.robot(0).gt])
    pb = np.array([p.translation for p in b.robot(1).gt])
    brute = (np.linalg.norm(pa[:, None] - pb[None], axis=2) <= 2.0).any()
    assert brute
    assert any(l.is_inter for l in generate_loop_candidates(b, 2.0, 0.0, seed=0))


def test_no_overlap_error():
    spec = SessionSpec(robot_count=1, world_kind="corridor", world_extent=20.0, rays=50,
                       waypoints=(((1.0, 0.0), (10.0, 0.0)),), false_loop_ratio=0.0)
    with pytest.raises(ValueError, match="no overlap in sessions"):
        generate_session(spec)


def test_session_deterministic():
    spec = SessionSpec(robot_count=2, world_kind="corridor", world_extent=20.0, rays=200, rng_seed=9)
    a, b = generate_session(spec), generate_session(spec)
    for ra, rb in zip(a.robots, b.robots):
        for x, y in zip(ra.scans, rb.scans):
            assert np.array_equal(x.points, y.points)
        for x, y in zip(ra.odom, rb.odom):
            assert np.array_equal(x.matrix(), y.matrix())
    assert [(l.key_a, l.key_b, l.rel_transform.matrix().tobytes()) for l in a.loops] == \
        [(l.key_a, l.key_b, l.rel_transform.matrix().tobytes()) for l in b.loops]


def test_spec_validation():
    with pytest.raises(ValueError):
        SessionSpec(sigma=-1)
    with pytest.raises(ValueError):
        SessionSpec(false_loop_ratio=1.0)
