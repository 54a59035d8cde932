import pytest

from touchgate.config import Config, ConfigError, load_config, parse_config


def test_roundtrip_through_file(tmp_path):
    cfg = Config(d_model=96, lr=0.0005, freeze_slow=False, tasks="zipper,stamp")
    path = str(tmp_path / "run.cfg")
    cfg.write(path)
    loaded = load_config(path)
    assert loaded == cfg
    assert loaded.config_hash() == cfg.config_hash()


def test_hash_changes_with_any_field():
    base = Config().config_hash()
    assert Config(seed=1).config_hash() != base
    assert Config(lambda_gate=0.02).config_hash() != base
    assert Config(tactile_format="marker2d").config_hash() != base


def test_hash_stable_across_processes():
    # sha256 of the canonical rendering, not Python's salted hash()
    a = Config(gate_threshold=0.5)
    b = Config(gate_threshold=0.5)
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 16


def test_parse_comments_and_blanks():
    cfg = parse_config("""
# comment line
seed = 7   # trailing comment

d_model=128
""")
    assert cfg.seed == 7 and cfg.d_model == 128


def test_parse_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("not_a_knob = 3")


def test_parse_bad_types_rejected():
    with pytest.raises(ConfigError, match="expected an int"):
        parse_config("seed = banana")
    with pytest.raises(ConfigError, match="expected a float"):
        parse_config("lr = fast")
    with pytest.raises(ConfigError, match="expected a boolean"):
        parse_config("freeze_slow = maybe")


def test_parse_missing_equals_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("seed 7")


def test_bool_spellings():
    assert parse_config("freeze_slow = TRUE").freeze_slow is True
    assert parse_config("freeze_slow = 0").freeze_slow is False


def test_overrides_applied_after_file(tmp_path):
    path = str(tmp_path / "run.cfg")
    Config(seed=3).write(path)
    cfg = load_config(path, overrides={"seed": 9, "eval_episodes": 2})
    assert cfg.seed == 9 and cfg.eval_episodes == 2
    with pytest.raises(ConfigError):
        load_config(path, overrides={"bogus": 1})


def test_task_lists():
    cfg = Config(tasks=" zipper , stamp ", eval_tasks="wipe")
    assert cfg.task_list() == ["zipper", "stamp"]
    assert cfg.eval_task_list() == ["wipe"]


def test_sim_config_mirrors_knobs():
    cfg = Config(sim_k_n=55.0, sim_d_jam=0.04, grid=16)
    sc = cfg.sim_config()
    assert sc.k_n == 55.0 and sc.d_jam == 0.04 and sc.grid == 16
