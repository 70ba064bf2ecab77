import pytest

from vapaad.config import ConfigError, RunConfig, load_run_config, parse_ini


def test_defaults_round_trip_through_ini(tmp_path):
    cfg = RunConfig()
    p = tmp_path / "c.ini"
    p.write_text(cfg.to_ini())
    assert load_run_config(p).to_dict() == cfg.to_dict()


def test_desk_preset_and_precedence(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nsteps = 7\nlr = 0.01\n[model]\nkernels = 3x3, 1, 5\n")
    cfg = load_run_config(p, desk_scale=True, overrides={"train": {"steps": 9}})
    assert cfg.model.frame_size == (32, 32) and cfg.model.filters == [8, 8, 8]
    assert cfg.model.kernels == [[3, 3], [1, 1], [5, 5]]
    assert cfg.train.steps == 9 and cfg.train.lr == 0.01
    assert cfg.data.downscale == 2


def test_single_frame_size_and_bools():
    d = parse_ini("[model]\nframe_size = 16\nstop_grad = yes\n[output]\nrecord_wall_time = off\n")
    assert d["model"]["frame_size"] == [16, 16]
    assert d["model"]["stop_grad"] is True and d["output"]["record_wall_time"] is False


@pytest.mark.parametrize("text", [
    "[modle]\nblocks = 1\n",
    "[model]\nblockz = 1\n",
    "[train]\nsteps = many\n",
    "[model]\nstop_grad = maybe\n",
    "not an ini",
    "[train]\nbatch_size = 0\n",
    "[train]\nloss_mode = gan\n",
    "[model]\nblocks = 2\n",
])
def test_bad_configs(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "nope.ini")


def test_from_dict_unknown_section():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"extra": {}})
