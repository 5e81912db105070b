import numpy as np
import pytest

from conftest import nlls_oracle, recall_scene, square_graph, straight_odom
from lemonmap import io
from lemonmap.geom import PointCloud, Pose, hat, relative
from lemonmap.loops import LoopClosure
from lemonmap.pgo import (GraphEdge, LPGOWeights, PoseGraph, build_fpgo, build_lpgo,
                          fpgo_with_recall, optimize_graph, registration_covariance,
                          registration_information, sparsify_ba_constraints, voxel_overlap)

def test_square_matches_dense_oracle():
    for seed in range(3):
        g, init, edges = square_graph(seed)
        res = optimize_graph(g)
        ref = nlls_oracle(init, edges)
        assert res.converged
        for k, T in ref.items():
            assert np.abs(T.matrix() - res.poses[k].matrix()).max() < 1e-6
        assert np.array_equal(res.poses[(0, 0)].matrix(), init[(0, 0)].matrix())


def test_zero_residual_graph():
    rng = np.random.default_rng(1)
    poses = {(0, i): Pose.exp(rng.normal(size=6), robot_id=0, seq_index=i) for i in range(6)}
    edges = [GraphEdge("odometry", (0, i), (0, i + 1), relative(poses[(0, i)], poses[(0, i + 1)]),
                       np.eye(6)) for i in range(5)]
    edges.append(GraphEdge("loop", (0, 0), (0, 5), relative(poses[(0, 0)], poses[(0, 5)]), np.eye(6)))
    res = optimize_graph(PoseGraph(poses, edges, (0, 0)))
    for k in poses:
        assert np.abs(res.poses[k].matrix() - poses[k].matrix()).max() < 1e-9


def test_cost_non_increasing_and_permutation_invariant():
    g, init, edges = square_graph(5)
    costs = [optimize_graph(g, max_iter=k).cost for k in range(1, 8)]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    rng = np.random.default_rng(0)
    perm = [edges[i] for i in rng.permutation(len(edges))]
    a = optimize_graph(g).poses
    b = optimize_graph(PoseGraph(init, perm, (0, 0))).poses
    for k in a:
        assert np.array_equal(a[k].matrix(), b[k].matrix())


def test_edge_validation():
    with pytest.raises(ValueError):
        GraphEdge("odometry", (0, 0), (0, 0), Pose.identity(), np.eye(6))
    with pytest.raises(ValueError):
        GraphEdge("odometry", (0, 0), (0, 1), Pose.identity(), -np.eye(6))
    with pytest.raises(ValueError):
        GraphEdge("gps", (0, 0), (0, 1), Pose.identity(), np.eye(6))


def test_fpgo_counts_and_errors():
    odom = {0: straight_odom(6)}
    g = build_fpgo(odom, [])
    assert len(g.edges) == 5
    res = optimize_graph(g)
    for k, p in g.nodes.items():
        assert np.allclose(res.poses[k].matrix(), p.matrix())
    odom = {0: straight_odom(6), 1: straight_odom(4, 1)}
    loop = LoopClosure(0, 0, 2, 1, 1, Pose(np.eye(3), [0, 1, 0]), status="accepted")
    g = build_fpgo(odom, [loop])
    assert len(g.edges) == 5 + 3 + 1 and len(g.components()) == 1
    # robot 1 placed from the loop transform
    np.testing.assert_allclose(g.nodes[(1, 1)].translation, [2, 1, 0])
    with pytest.raises(ValueError, match=r"\[1\]"):
        build_fpgo(odom, [])


def test_fpgo_bundle_connected(bundle):
    usable = [l.transition("accepted") for l in bundle.loops if l.gt_valid]
    odom = {r.robot_id: r.odom for r in bundle.robots}
    g = build_fpgo(odom, usable)
    assert len(g.components()) == 1
    assert g.edge_counts()["loop"] == len(usable)
    assert g.anchor == (0, 0)


def test_fpgo_with_recall_passes():
    odom, loops = recall_scene()
    poses, out, trace = fpgo_with_recall(odom, loops)
    assert trace.passes == 2 and trace.counts == [1, 2]
    assert [l.status for l in out] == ["accepted", "recalled", "rejected"]
    poses, out, trace = fpgo_with_recall(odom, loops[:1])
    assert trace.passes == 1
    _, _, trace = fpgo_with_recall(odom, loops, recall=False)
    assert trace.passes == 1


def test_recall_loop_set_monotone_and_capped(bundle):
    odom = {r.robot_id: r.odom for r in bundle.robots}
    loops = [l.transition("accepted" if l.gt_valid and i % 3 else "rejected")
             for i, l in enumerate(bundle.loops)]
    _, out, trace = fpgo_with_recall(odom, loops, max_passes=10)
    assert trace.passes <= 10
    assert trace.counts == sorted(trace.counts)
    assert not any(l.status == "recalled" and not l.gt_valid for l in out)


def test_registration_information_examples():
    Om = registration_information(np.zeros((1, 3)))
    assert np.linalg.matrix_rank(Om) == 3 and np.linalg.eigvalsh(Om)[0] == 0
    rng = np.random.default_rng(0)
    # points on the three unit planes x=1, y=1, z=1
    P = np.vstack([np.column_stack([np.ones(20), rng.uniform(-1, 1, (20, 2))]),
                   np.column_stack([rng.uniform(-1, 1, 20), np.ones(20), rng.uniform(-1, 1, 20)]),
                   np.column_stack([rng.uniform(-1, 1, (20, 2)), np.ones(20)])])
    J = np.vstack([np.block([[-hat(p), np.zeros((3, 3))], [np.zeros((3, 3)), np.eye(3)]])
                   for p in P])
    np.testing.assert_allclose(registration_information(P), J.T @ J, atol=1e-9)
    assert np.linalg.eigvalsh(J.T @ J)[0] > 0


def test_registration_covariance_plane_and_sparse():
    rng = np.random.default_rng(1)
    plane = np.column_stack([rng.uniform(-3, 3, (400, 2)), np.zeros(400)])
    cloud = PointCloud(plane)
    Om, lam = registration_covariance(cloud, cloud, Pose.identity())
    # rotation about the plane normal is only weakly seen next to the
    # in-plane tilts; the information stays symmetric PSD
    assert np.allclose(Om, Om.T) and np.linalg.eigvalsh(Om)[0] >= -1e-9
    few = PointCloud(plane[:5])
    Om, lam = registration_covariance(few, few, Pose.identity())
    assert lam == 0.0 and not Om.any()


def test_voxel_overlap_bounds():
    a = np.random.default_rng(0).uniform(0, 5, (500, 3))
    assert voxel_overlap(a, a) == 1.0
    assert voxel_overlap(a, a + 100) == 0.0
    assert voxel_overlap(a, np.zeros((0, 3))) == 0.0


def _window(seed=0):
    from lemonmap.sim import generate_world, simulate_scan
    w = generate_world("garage", 30.0, 0)
    rng = np.random.default_rng(seed)
    poses, scans = {}, {}
    for k in range(12):
        rid, i = k % 3, k // 3
        p = Pose.exp(np.array([0, 0, rng.uniform(-np.pi, np.pi), 2.5 + 2.0 * i + rng.normal(0, 0.3),
                               2.5 + rng.normal(0, 0.3), 1.2]), robot_id=rid, seq_index=i)
        poses[(rid, i)] = p
        scans[(rid, i)] = simulate_scan(w, p, rays=600, sigma=0.01, seed=k)
    return poses, scans


def test_sparsify_matches_pairwise_rules():
    poses, scans = _window()
    for literal in (False, True):
        verdicts = sparsify_ba_constraints(poses, scans, lambda_thresh=50.0, sim_thresh=0.3,
                                           literal_lambda_rule=literal)
        keys = sorted(poses)
        assert len(verdicts) == len(keys) * (len(keys) - 1) // 2
        for v in verdicts:
            a, b = v.node_a, v.node_b
            T_ab = relative(poses[a], poses[b])
            _, lam = registration_covariance(scans[a], scans[b], T_ab)
            sim = voxel_overlap(poses[a].transform_points(scans[a].points),
                                poses[b].transform_points(scans[b].points))
            if a[0] != b[0]:
                keep = sim >= 0.3 and sim > 0
            elif lam == 0:
                keep = False
            else:
                keep = lam <= 50.0 if literal else lam >= 50.0
            assert v.retained == keep and v.lambda_min == lam and v.descriptor_sim == sim
            np.testing.assert_allclose(v.measurement.matrix(), T_ab.matrix())
            assert v.lambda_min >= -1e-9


def test_sparsify_identical_and_disjoint():
    poses, scans = _window()
    k = (0, 0)
    twin = {k: poses[k], (0, 1): poses[k].with_meta(0, 1)}
    v, = sparsify_ba_constraints(twin, {k: scans[k], (0, 1): scans[k]})
    assert v.retained
    far = {k: poses[k], (1, 0): Pose(poses[k].rotation, poses[k].translation + [500, 0, 0], 1, 0)}
    v, = sparsify_ba_constraints(far, {k: scans[k], (1, 0): scans[k]})
    assert not v.retained and v.descriptor_sim == 0


def test_lpgo_weights_and_degenerate_case():
    odom = {0: straight_odom(6), 1: straight_odom(4, 1)}
    loop = LoopClosure(0, 0, 2, 1, 1, Pose(np.eye(3), [0.1, 1, 0]), status="accepted")
    fp = build_fpgo(odom, [loop])
    fpgo = optimize_graph(fp).poses
    g = build_lpgo(odom, fpgo, [loop], [], [])
    assert all(np.array_equal(e.information, np.eye(6)) for e in g.edges)
    lp = optimize_graph(g).poses
    for k in fpgo:
        assert np.abs(lp[k].matrix() - fpgo[k].matrix()).max() < 1e-9
    w = LPGOWeights()
    g = build_lpgo(odom, fpgo, [loop], [(0, 2), (0, 3)], [])
    wts = {(e.node_a, e.node_b): e.information[0, 0] for e in g.edges if e.kind == "odometry"}
    assert wts[((0, 1), (0, 2))] == w.w_high and wts[((0, 2), (0, 3))] == w.w_mid
    assert wts[((0, 3), (0, 4))] == w.w_high and wts[((0, 0), (0, 1))] == w.w_low


def test_g2o_roundtrip(tmp_path):
    g, _, _ = square_graph(2)
    io.write_g2o(tmp_path / "g.g2o", g)
    h = io.read_g2o(tmp_path / "g.g2o")
    assert h.anchor == g.anchor and sorted(h.nodes) == sorted(g.nodes)
    for k in g.nodes:
        np.testing.assert_allclose(h.nodes[k].matrix(), g.nodes[k].matrix(), atol=1e-12)
    for a, b in zip(g.edges, h.edges):
        assert (a.kind, a.node_a, a.node_b) == (b.kind, b.node_a, b.node_b)
        np.testing.assert_allclose(a.information, b.information, atol=1e-12)
        np.testing.assert_allclose(a.measurement.matrix(), b.measurement.matrix(), atol=1e-12)


def test_registration_information_rank_analysis():
    # with point-to-point blocks a single plane still pins every direction;
    # the rank drops only when the correspondences are collinear through the
    # origin (rotation about that line is unseen)
    rng = np.random.default_rng(2)
    line = np.outer(rng.uniform(-3, 3, 50), [1.0, 2.0, 0.5])
    lam = np.linalg.eigvalsh(registration_information(line))
    assert lam[0] < 1e-9 * lam[-1]
    plane = np.column_stack([rng.uniform(-3, 3, (50, 2)), np.zeros(50)])
    assert np.linalg.eigvalsh(registration_information(plane))[0] > 1.0
