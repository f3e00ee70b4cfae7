import numpy as np
import pytest

from noda.envs import Pendulum, collect_random
from noda.orchestrator import run_model_training, split_dataset


@pytest.fixture(scope="session")
def pendulum_data():
    data = collect_random(Pendulum(), 12_000, seed=101)
    return split_dataset(data, 10_000)


@pytest.fixture(scope="session")
def trained_pendulum(pendulum_data):
    """A NODA model trained briefly on random-policy pendulum transitions."""
    train, test = pendulum_data
    model, curves = run_model_training(train, test, "noda", batches=1500, batch_size=200, lr=1e-3,
                                       seed=0, latent_dim=4, hidden=32, tau=0.05, time_scale=0.05,
                                       eval_every=500)
    return model, curves


def random_batch(env, n, seed):
    rng = np.random.default_rng(seed)
    d = collect_random(env, n, seed=int(rng.integers(2 ** 31)), episode_len=50)
    return d


ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def criteria(request):
    """Records one pass/fail line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
