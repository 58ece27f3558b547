import numpy as np
import pytest

from diffq.calibration import assign_groups, generate_calibration, split_validation
from diffq.diffusion import NoiseSchedule, TrainConfig, make_dataset, train_fp


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.linear(20)


@pytest.fixture(scope="session")
def small_fp(schedule):
    """A briefly trained 2-D denoiser; shared by the quantizer and pipeline tests."""
    data = make_dataset("gmm", 1024, seed=0)
    cfg = TrainConfig(iters=400, batch=128, hidden=16, depth=3, emb_dim=8, seed=0)
    return train_fp(data, schedule, cfg).model


@pytest.fixture(scope="session")
def small_calib(small_fp, schedule):
    cs = generate_calibration(small_fp, schedule, 40, interval=2, seed=0)
    return assign_groups(split_validation(cs, 0.1, seed=1), 5)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
