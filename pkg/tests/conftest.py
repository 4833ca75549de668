import sys

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


def smooth_field(rng, dims, sigma, amp):
    """Periodic-smoothed random vector field with max vector norm ``amp``."""
    v = rng.standard_normal((3,) + tuple(dims))
    v = np.stack([gaussian_filter(v[c], sigma, mode="wrap") for c in range(3)])
    return v * (amp / np.sqrt((v * v).sum(0)).max())


def smooth_image(rng, dims, sigma=1.0):
    I = gaussian_filter(rng.random(dims), sigma)
    return (I - I.min()) / (I.max() - I.min())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
