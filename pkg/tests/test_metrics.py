import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pnoma import metrics
from pnoma.numcore import ContractError


def test_psnr_examples(rng):
    x = rng.uniform(size=(3, 8, 8))
    assert metrics.psnr(x, x) == math.inf and metrics.psnr_for_csv(math.inf) == 100.0
    assert metrics.psnr(np.zeros((3, 4, 4)), np.ones((3, 4, 4))) == 0.0
    # MSE = A^2/10 with A = 2: error of +-sqrt(0.4) in every pixel
    e = math.sqrt(0.4) * np.where(rng.uniform(size=(3, 4, 4)) > 0.5, 1.0, -1.0)
    assert metrics.psnr(np.zeros_like(e), e, A=2.0) == pytest.approx(10.0, abs=1e-12)


def test_ssim_constant_images():
    a, b = np.full((3, 16, 16), 0.2), np.full((3, 16, 16), 0.8)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * 0.2 * 0.8 + c1) * c2 / ((0.2 ** 2 + 0.8 ** 2 + c1) * c2)
    assert metrics.ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_hand_computed_global():
    x = np.array([[0.0, 1.0], [0.5, 0.5]])
    y = np.array([[0.25, 0.75], [0.5, 0.0]])
    mx, my = 0.5, 0.375
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    cov = np.mean((x - mx) * (y - my))
    c1, c2 = 1e-4, 9e-4
    expected = (2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    assert metrics.ssim(x, y) == pytest.approx(expected, abs=1e-12)


def test_ssim_sliding_window_matches_loop(rng):
    x, y = rng.uniform(size=(1, 40, 36)), rng.uniform(size=(1, 40, 36))
    vals = []
    for i in range(40 - 7):
        for j in range(36 - 7):
            vals.append(metrics.ssim(x[:, i:i + 8, j:j + 8], y[:, i:i + 8, j:j + 8], window=None))
    assert metrics.ssim(x, y) == pytest.approx(np.mean(vals), abs=1e-9)


def test_ssim_identity_and_symmetry_on_random_pairs():
    g = np.random.default_rng(99)
    for _ in range(100):
        x, y = g.uniform(size=(3, 16, 16)), g.uniform(size=(3, 16, 16))
        assert metrics.ssim(x, x) == 1.0
        assert abs(metrics.ssim(x, y) - metrics.ssim(y, x)) < 1e-12
        assert -1 <= metrics.ssim(x, y) <= 1


def test_scale_bound_matches_pyramid():
    for f in range(1, 17):
        side, count = 16, 0
        while side >= f:
            count += 1
            side //= 2
        assert metrics.max_ms_ssim_scales(16, f) == count


def test_ms_ssim_properties(rng):
    x, y = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
    for scales in range(1, 6):
        assert metrics.ms_ssim(x, x, weights=metrics.MS_SSIM_WEIGHTS[:scales]) == 1.0
    assert metrics.ms_ssim(x, y, weights=(1.0,), filter_size=11) == pytest.approx(
        metrics.ssim(x, y, window=11), abs=1e-12)
    with pytest.raises(ContractError, match="at most 1 scales"):
        metrics.ms_ssim(x, y, weights=(0.5, 0.5), filter_size=11)


def _global_ssim(a, b):
    ma, mb = a.mean(), b.mean()
    cov = np.mean((a - ma) * (b - mb))
    return ((2 * ma * mb + 1e-4) * (2 * cov + 9e-4)
            / ((ma ** 2 + mb ** 2 + 1e-4) * (a.var() + b.var() + 9e-4)))


def test_ms_ssim_hand_computed_two_scales(rng):
    # 8x8 with a 4x4 filter: sliding windows at full size, one global window after pooling
    x = rng.uniform(size=(1, 8, 8))
    y = np.clip(0.8 * x + 0.1 + 0.05 * rng.standard_normal(x.shape), 0, 1)
    s1 = np.mean([_global_ssim(x[0, i:i + 4, j:j + 4], y[0, i:i + 4, j:j + 4])
                  for i in range(5) for j in range(5)])
    pool = lambda a: a.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    s2 = _global_ssim(pool(x[0]), pool(y[0]))
    assert s1 > 0 and s2 > 0
    w1, w2 = 0.3, 0.5
    expected = (s1 ** w1 * s2 ** w2) ** (1 / (w1 + w2))
    assert metrics.ms_ssim(x, y, weights=(w1, w2), filter_size=4) == pytest.approx(expected, abs=1e-12)


def test_ms_ssim_negative_scale_clips_to_zero(rng):
    x = rng.uniform(size=(1, 8, 8))
    assert metrics.ms_ssim(x, 1 - x, weights=(0.5, 0.5), filter_size=4) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_psnr_symmetric_and_ssim_bounded(seed):
    g = np.random.default_rng(seed)
    x, y = g.uniform(size=(3, 8, 8)), g.uniform(size=(3, 8, 8))
    assert metrics.psnr(x, y) == metrics.psnr(y, x)
    assert metrics.ssim(x, y) <= 1.0
