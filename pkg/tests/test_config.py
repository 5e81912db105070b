import pytest

from lemonmap.config import ConfigError, PipelineConfig, config_from_dict, load_config


def test_defaults_are_complete():
    cfg = PipelineConfig()
    d = cfg.to_dict()
    assert set(d) == {"sim", "loops", "window", "graph", "metrics", "run"}
    assert cfg.run.stage == "full" and cfg.window.D >= 1
    assert config_from_dict(d) == cfg


def test_partial_override(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text('[window]\nD = 2\nradius = 10\n[run]\nstage = "fpgo_only"\n'
                 'inject_offset = [2, 0.3]\n')
    cfg = load_config(f)
    assert cfg.window.D == 2 and cfg.window.radius == 10.0
    assert isinstance(cfg.window.radius, float)
    assert cfg.run.stage == "fpgo_only" and cfg.run.inject_offset == (2.0, 0.3)
    assert cfg.loops == PipelineConfig().loops


@pytest.mark.parametrize("d,msg", [
    ({"nope": {}}, "unknown section"),
    ({"window": {"DD": 1}}, "unknown key window.DD"),
    ({"window": {"D": 1.5}}, "integer"),
    ({"window": {"radius": "x"}}, "number"),
    ({"window": {"prealign": 1}}, "boolean"),
    ({"run": {"stage": "everything"}}, "unknown stage"),
    ({"window": {"D": 0}}, "D >= 1"),
    ({"window": {"radius": -1.0}}, "radius"),
    ({"loops": {"recall_mode": "x"}}, "recall_mode"),
    ({"window": 3}, "table"),
])
def test_rejects(d, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(d)


def test_bad_toml_names_file(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("[window\n")
    with pytest.raises(ConfigError, match="c.toml"):
        load_config(f)


def test_params_mapping():
    cfg = PipelineConfig()
    lp = cfg.loops.params(7)
    assert lp.seed == 7 and lp.max_correction_rot == pytest.approx(5.0 * 3.141592653589793 / 180)
    bp = cfg.window.ba_params()
    assert bp.rounds == cfg.window.rounds and bp.null_tol == cfg.window.null_tol
    assert cfg.sim.session_spec(3).rng_seed == 3
    assert cfg.with_run(seed=9).run.seed == 9
