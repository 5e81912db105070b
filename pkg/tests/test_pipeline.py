import numpy as np
import pytest

from lemonmap.config import PipelineConfig, config_from_dict
from lemonmap.geom import Pose, pose_error
from lemonmap.pipeline import (VARIANTS, load_session, offset_robots, run_pipeline,
                               save_session)
from lemonmap.sim import generate_session

SMALL = {"sim": {"robot_count": 2, "world_kind": "corridor", "world_extent": 20.0, "rays": 800},
         "metrics": {"map_voxel": 0.2}}


def small_config(**run) -> PipelineConfig:
    return config_from_dict({**SMALL, "run": {"seed": 1, **run}})


@pytest.fixture(scope="module")
def small_bundle():
    return generate_session(small_config().sim.session_spec(1))


def _same(a, b, tol=0.0):
    assert set(a) == set(b)
    for k in a:
        if tol == 0.0:
            assert np.array_equal(a[k].matrix(), b[k].matrix()), k
        else:
            np.testing.assert_allclose(a[k].matrix(), b[k].matrix(), atol=tol)


def test_session_roundtrip(tmp_path, small_bundle):
    save_session(small_bundle, tmp_path / "s")
    for r in small_bundle.robots:
        d = tmp_path / "s" / f"robot_{r.robot_id}"
        assert (d / "gt.tum").exists() and (d / "odom.tum").exists()
        assert len(list(d.glob("scan_*.ply"))) == len(r.scans)
    back = load_session(tmp_path / "s")
    assert back.keys() == small_bundle.keys()
    for k in back.keys():
        np.testing.assert_allclose(back.gt_pose(k).matrix(), small_bundle.gt_pose(k).matrix(),
                                   atol=1e-12)
        np.testing.assert_array_equal(back.scan(k).points, small_bundle.scan(k).points)
    assert [(l.id, l.key_a, l.key_b, l.gt_valid) for l in back.loops] == \
           [(l.id, l.key_a, l.key_b, l.gt_valid) for l in small_bundle.loops]
    assert len(back.world) == len(small_bundle.world)


def test_load_session_errors(tmp_path, small_bundle):
    with pytest.raises(FileNotFoundError):
        load_session(tmp_path / "missing")
    save_session(small_bundle, tmp_path / "s")
    gt = tmp_path / "s" / "robot_0" / "gt.tum"
    gt.write_text("\n".join(gt.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(ValueError, match="differ in length"):
        load_session(tmp_path / "s")


def test_stage_fpgo_only(small_bundle):
    res = run_pipeline(small_config(stage="fpgo_only"), small_bundle, with_map_metrics=False)
    assert list(res.reports) == ["FPGO"]
    assert not res.windows


def test_full_run_has_three_variants(small_bundle):
    res = run_pipeline(small_config(), small_bundle)
    assert tuple(res.reports) == VARIANTS
    assert all(res.reports[v].mme is not None for v in VARIANTS)
    assert res.windows and not any(w.failed for w in res.windows)
    assert res.optimized


def test_resume_matches_in_memory(tmp_path, small_bundle):
    cfg = small_config()
    mem = run_pipeline(cfg, small_bundle, out_dir=tmp_path, with_map_metrics=False)
    again = run_pipeline(cfg, small_bundle, out_dir=tmp_path, resume=True, with_map_metrics=False)
    for v in VARIANTS:
        _same(mem.variants[v], again.variants[v])
    assert [l.status for l in mem.loops] == [l.status for l in again.loops]


def test_resume_needs_out_dir(small_bundle):
    with pytest.raises(ValueError):
        run_pipeline(small_config(), small_bundle, resume=True)


def test_offset_robots():
    poses = {(r, i): Pose(np.eye(3), [i, r, 0.0], r, i) for r in range(3) for i in range(4)}
    assert offset_robots(poses, 0.0, 0.0, 0) == poses
    out = offset_robots(poses, 2.0, 0.3, 0)
    for k, p in poses.items():
        dt, dr = pose_error(out[k], p)
        if k[0] == 0:
            assert out[k] is p
        else:
            assert np.degrees(dr) == pytest.approx(2.0, abs=1e-9)
            assert out[k].key == k
    # every pose of one robot moves by the same rigid transform
    T = out[(1, 0)] @ poses[(1, 0)].inverse()
    for i in range(4):
        np.testing.assert_allclose((T @ poses[(1, i)]).matrix(), out[(1, i)].matrix(), atol=1e-12)
