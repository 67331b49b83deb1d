import re

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from flowgauge.image import pixel_grid, sample


def textured(shape, seed=0, sigma=1.0):
    """Smoothed white noise stretched to [0.1, 0.9]."""
    f = gaussian_filter(np.random.default_rng(seed).random(shape), sigma)
    f = (f - f.min()) / (f.max() - f.min())
    return 0.1 + 0.8 * f


def translate(img, dx, dy):
    """``out(x, y) = img(x - dx, y - dy)`` with bilinear sampling and clamped borders."""
    xs, ys = pixel_grid(img.shape)
    return sample(img, xs - dx, ys - dy)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Lines collected by the acceptance tests and echoed in the terminal summary.
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    def report(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"{criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(re.match(r"S(\d+)", s).group(1)), s)):
            terminalreporter.write_line(line)
