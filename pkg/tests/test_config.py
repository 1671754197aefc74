import pytest

from fiberinfer.config import ConfigError, RunConfig, env_overrides, read_config_file, resolve


def test_defaults_validate():
    cfg = resolve({}, None, {})
    assert cfg == RunConfig()
    assert cfg.Q == 5000 and cfg.B == 1000 and cfg.alpha == 0.05 and cfg.sigma_e == 0.062
    assert cfg.method_list == ["lfi", "mle1", "mle2", "prior_mean"]


def test_precedence_cli_env_file_default(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nQ = 100\nB = 7  # trailing comment\nseed = 3\n\nsigma_e = 0.01\n")
    env = {"FIBERINFER_B": "8", "FIBERINFER_SEED": "4", "UNRELATED": "x"}
    cfg = resolve({"seed": "5", "Q": None}, f, env)
    assert cfg.Q == 100  # file
    assert cfg.B == 8  # env beats file
    assert cfg.seed == 5  # cli beats env
    assert cfg.sigma_e == 0.01
    assert cfg.alpha == 0.05  # default


def test_env_keys_case_insensitive():
    assert env_overrides({"FIBERINFER_q": "12", "FIBERINFER_N_BINS": "50"}) == {"Q": 12, "n_bins": 50}


def test_paper_scale_training_config_accepted():
    cfg = resolve({"iterations": "50000", "batch_size": "7500", "lr": "1e-5"}, None, {})
    assert (cfg.iterations, cfg.batch_size, cfg.lr) == (50000, 7500, 1e-5)


@pytest.mark.parametrize(
    "cli",
    [
        {"Q": "0"},
        {"alpha": "1.5"},
        {"n_fibers": "4"},
        {"sigma_e": "-0.1"},
        {"lr_schedule": "step"},
        {"methods": "lfi,csd"},
        {"iterations": "2.5"},
        {"seed": "abc"},
        {"threads": "0"},
    ],
)
def test_invalid_values_rejected(cli):
    with pytest.raises(ConfigError):
        resolve(cli, None, {})


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("Q 100\n")
    with pytest.raises(ConfigError, match="key = value"):
        read_config_file(bad)
    bad.write_text("nonsense = 1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        read_config_file(bad)
    with pytest.raises(ConfigError):
        env_overrides({"FIBERINFER_NOPE": "1"})


def test_int_fields_accept_scientific_notation():
    assert resolve({"prior_draws": "1e6"}, None, {}).prior_draws == 10**6
