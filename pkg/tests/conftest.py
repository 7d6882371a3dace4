import numpy as np
import pytest

from paad.fieldsim import WorldConfig, run_episode
from paad.model import default_config


def small_config(**kw):
    """A shrunken model that keeps every code path but runs fast in 64-bit checks."""
    base = dict(lidar_len=64, lidar_hidden=16, image_h=24, image_w=32, conv_filters=(2, 3, 4),
                bev_size=16)
    base.update(kw)
    return default_config(**base)


def random_batch(cfg, rng, B=3):
    return dict(images=rng.random((B,) + cfg.image_shape),
                lidar=rng.random((B, cfg.lidar_len)),
                paths=(rng.random((B,) + cfg.path_shape) > 0.8).astype(float),
                labels=(rng.random((B, cfg.horizon)) > 0.5).astype(float))


def randomize_biases(model, rng, scale=0.2):
    # zero biases put many ReLUs exactly on their kink for binary inputs
    for n in model.params.names():
        if n.endswith(".b"):
            v = model.params.values[n]
            v[:] = rng.uniform(-scale, scale, v.shape)


@pytest.fixture(scope="session")
def short_episode():
    return run_episode(WorldConfig(seed=7), 60)


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE: dict[str, str] = {}


def record_acceptance(key: str, passed: bool, detail: str) -> None:
    line = f"{key} {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
