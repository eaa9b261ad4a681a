import pytest

from pmisim.config import ExperimentConfig, Scenario
from pmisim.rl import A2cConfig


def make_config(**updates) -> ExperimentConfig:
    """One site, three cells, three UEs per cell and short episodes."""
    fields = dict(
        scenario=Scenario(num_sites=1, ues_per_cell=3),
        rl=A2cConfig(hidden=[16]),
        ttis_per_episode=4,
        episodes=2,
        eval_episodes=2,
        log_every=1,
        smoothing_window=2,
    )
    fields.update(updates)
    return ExperimentConfig(**fields)


@pytest.fixture
def small_config():
    return make_config()
