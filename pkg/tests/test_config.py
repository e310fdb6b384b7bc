import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdslam.config import ConfigError, RunConfig, default_config_text, load_config


def test_default_text_round_trip():
    text = default_config_text()
    cfg = RunConfig.from_toml(text)
    assert cfg.to_toml() == text
    assert cfg.validate() == []


@settings(max_examples=40, deadline=None)
@given(
    window=st.integers(2, 60),
    horizon=st.integers(1, 40),
    sigma=st.floats(1e-3, 1.0),
    kind=st.sampled_from(["none", "cvm", "mlp", "gat-det", "gat-stoch"]),
    epochs=st.integers(1, 100),
    hidden=st.lists(st.integers(1, 64), min_size=1, max_size=3),
    n_train=st.integers(1, 6000),
)
def test_round_trip_is_identity(window, horizon, sigma, kind, epochs, hidden, n_train):
    cfg = RunConfig()
    cfg.slam.window = window
    cfg.slam.horizon = horizon
    cfg.prior.sigma_sto = sigma
    cfg.prior.kind = kind
    cfg.train.hyper.epochs = epochs
    cfg.train.hyper.head_hidden = tuple(hidden)
    cfg.dataset.n_train = n_train
    back = RunConfig.from_toml(cfg.to_toml())
    assert back.to_dict() == cfg.to_dict()
    assert back.to_toml() == cfg.to_toml()


def test_partial_document_uses_defaults():
    cfg = RunConfig.from_toml("[slam]\nwindow = 12\n")
    assert cfg.slam.window == 12
    assert cfg.slam.horizon == RunConfig().slam.horizon


def test_paper_scale_split_accepted():
    cfg = RunConfig.from_toml("[dataset]\nn_train = 5500\nn_test = 500\n")
    assert cfg.validate() == []


@pytest.mark.parametrize(
    "text, field",
    [
        ("[sim]\nped_count_range = [0, 5]\n", "sim.ped_count_range"),
        ("[slam]\nwindow = 1\n", "slam.window"),
        ("[prior]\nsigma_sto = -1.0\n", "prior.sigma_sto"),
        ("[prior]\nkind = \"rnn\"\n", "prior.kind"),
        ("[train]\nhistory_len = 5\n", "train.history_len"),
        ("[slam.solver]\nmax_iterations = 0\n", "slam.solver.max_iterations"),
        ("jobs = 0\n", "jobs"),
    ],
)
def test_validation_names_the_field(text, field):
    errs = RunConfig.from_toml(text).validate()
    assert any(e.startswith(field) for e in errs), errs


def test_unknown_keys_and_bad_toml():
    with pytest.raises(ConfigError) as err:
        RunConfig.from_toml("[slam]\nwindw = 3\n")
    assert err.value.errors == ["slam.windw: unknown key"]
    with pytest.raises(ConfigError):
        RunConfig.from_toml("[nonsense]\n")
    with pytest.raises(ConfigError):
        RunConfig.from_toml("[slam\n")


def test_check_raises_with_all_errors():
    cfg = RunConfig.from_toml("jobs = 0\n[slam]\nwindow = 1\n")
    with pytest.raises(ConfigError) as err:
        cfg.check()
    assert len(err.value.errors) == 2


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[metrics]\ncrowd_radius = 2.5\n")
    assert load_config(p).metrics.crowd_radius == 2.5
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_settings_reflect_sections():
    cfg = RunConfig.from_toml("[slam]\nwindow = 7\nhorizon = 9\n[prior]\nsigma_nn = 0.3\n")
    s = cfg.slam.settings()
    assert (s.window, s.horizon) == (7, 9)
    assert cfg.prior.prior_config("cvm").sigma_nn == 0.3
