import numpy as np
import pytest

from config import EnvConfig, RunConfig, TrainConfig
from core.scan_env import preprocess_dataset, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_env():
    return EnvConfig(segments=4, samples_per_segment=5, height=16, width=16)


@pytest.fixture
def tiny_train():
    return TrainConfig(
        iterations=20, batch_size=2, hidden_size=6, gen_channels=(2, 4), gen_res_blocks=1,
        replay_capacity=20, seed=3, eval_limit=2,
    )


@pytest.fixture
def tiny_run(tiny_env, tiny_train):
    return RunConfig(env=tiny_env, train=tiny_train, synth_count=12)


@pytest.fixture
def tiny_images():
    return preprocess_dataset(synth_dataset(4, 16, 16, seed=5))


def write_tiny_config(path, iterations=12, seed=3, extra=""):
    """Config file for CLI runs small enough to finish in seconds"""
    path.write_text(
        "# tiny end-to-end run\n"
        f"iterations = {iterations}\n"
        "batch_size = 2\n"
        "hidden_size = 6\n"
        "gen_channels = 2,4\n"
        "gen_res_blocks = 1\n"
        "replay_capacity = 20\n"
        f"seed = {seed}\n"
        "segments = 4\n"
        "samples_per_segment = 5\n"
        "height = 16\n"
        "width = 16\n"
        "synth_count = 10\n"
        + extra,
        encoding="utf-8",
    )
    return path


@pytest.fixture
def config_writer():
    return write_tiny_config
