import numpy as np
import pytest

from crowdslam.simulator import SimConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def short_config(**kw) -> SimConfig:
    base = dict(episode_length=40, ped_count_range=(2, 5))
    base.update(kw)
    return SimConfig(**base)


def noiseless_config(**kw) -> SimConfig:
    return short_config(sigma_range=0.0, sigma_bearing=0.0, sigma_v=0.0, sigma_omega=0.0, **kw)


@pytest.fixture(scope="session")
def trained_weights():
    """Small MLP and GAT fitted to a few simulated episodes (seconds, not minutes)."""
    from crowdslam.dataset import extract_scenes
    from crowdslam.neuralnet import TrainHyper, train_predictor
    from crowdslam.simulator import run_episode

    cfg = short_config(episode_length=80, ped_count_range=(3, 6))
    scenes = [s for k in range(8) for s in extract_scenes(run_episode(cfg, seed=100 + k))]
    hyper = TrainHyper(epochs=15, latent=16, hist_hidden=(32,), head_hidden=(32,), batch_size=32)
    mlp, _ = train_predictor("mlp", scenes, hyper, seed=0)
    gat, _ = train_predictor("gat", scenes, hyper, seed=0)
    return {"mlp": mlp, "gat-det": gat, "gat-stoch": gat}


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
