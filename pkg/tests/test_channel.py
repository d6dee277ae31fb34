import numpy as np
import pytest

from pnoma import numcore as nc
from pnoma.channel import (ChannelKind, ChannelRealization, ComplexVector, DegenerateInputError,
                           PowerBudget, power_normalize, sample_gains, sigma_to_snr, snr_to_sigma,
                           transmit)
from pnoma.numcore import ContractError, RngStream, Tensor


def cv(z):
    return ComplexVector.from_complex(np.atleast_2d(z))


def test_snr_conversions():
    assert snr_to_sigma(0.0, 1.0) == 1.0
    assert snr_to_sigma(10.0, 1.0) == pytest.approx(0.1, rel=1e-15)
    for s in (-5.0, 0.0, 7.3, 20.0):
        assert sigma_to_snr(snr_to_sigma(s, 2.0), 2.0) == pytest.approx(s, abs=1e-12)
    with pytest.raises(ContractError):
        snr_to_sigma(3.0, 0.0)


def test_power_budget():
    b = PowerBudget(p_bar=1.0, n_users=16, k=128)
    assert b.p_tx * 16 == 1.0


def test_power_normalize_examples(rng):
    z = power_normalize(cv([1 + 0j, 0, 0, 0]), 4, 1.0)
    np.testing.assert_allclose(z.to_complex(), [[2, 0, 0, 0]])
    ok = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    ok *= np.sqrt(8 / np.sum(np.abs(ok) ** 2))
    np.testing.assert_allclose(power_normalize(cv(ok), 8, 1.0).to_complex()[0], ok, rtol=1e-14)
    raw = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    out = power_normalize(cv(raw), 64, 1 / 16).to_complex()[0]
    assert np.sum(np.abs(out) ** 2) / 64 == pytest.approx(0.0625, rel=1e-12)
    # direction preserved
    assert np.allclose(out / np.linalg.norm(out), raw / np.linalg.norm(raw))


def test_power_normalize_zero_raises():
    with pytest.raises(DegenerateInputError):
        power_normalize(cv(np.zeros(4, dtype=complex)), 4, 1.0)


def test_power_normalize_is_differentiable(rng):
    re = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    im = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    w = rng.standard_normal((2, 6))
    def build():
        z = power_normalize(ComplexVector(re, im), 6, 0.5)
        return nc.sum(nc.mul(nc.add(z.re, nc.mul(z.im, 0.3)), w))
    assert nc.grad_check(build, {"re": re, "im": im}).passed


def test_gains():
    np.testing.assert_array_equal(sample_gains("awgn", 4, RngStream(0, 1)), np.ones(4))
    h = sample_gains(ChannelKind.RAYLEIGH, 100_000, RngStream(0, 1))
    assert abs(np.mean(np.abs(h) ** 2) - 1) < 0.02
    assert abs(np.var(h.real) - 0.5) < 0.01
    np.testing.assert_array_equal(h, sample_gains("rayleigh", 100_000, RngStream(0, 1)))


def test_awgn_requires_unit_gains():
    with pytest.raises(ContractError):
        ChannelRealization(np.array([[2.0 + 0j]]), np.array([0.0]), np.array([10.0]), ChannelKind.AWGN)


def realization(h, sigma):
    h = np.atleast_2d(np.asarray(h, dtype=complex))
    kind = ChannelKind.AWGN if np.all(h == 1) else ChannelKind.RAYLEIGH
    return ChannelRealization(h, np.atleast_1d(sigma).astype(float), np.zeros(h.shape[0]), kind)


def test_transmit_examples(rng):
    z = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    y = transmit([cv(z)], realization([1.0], 0.0), stream=RngStream(0, 3))
    np.testing.assert_array_equal(y.to_complex()[0], z)
    y = transmit([cv(z), cv(-z)], realization([1.0, 1.0], 0.0), stream=RngStream(0, 3))
    np.testing.assert_allclose(y.to_complex(), 0, atol=0)
    y = transmit([cv(np.zeros(4096, complex))], realization([1.0], 1.0), stream=RngStream(0, 3))
    assert abs(np.mean(np.abs(y.to_complex()) ** 2) - 1) < 0.05


def test_transmit_applies_complex_gains(rng):
    z1 = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    z2 = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    h = np.array([0.3 - 1.2j, -0.7 + 0.4j])
    y = transmit([cv(z1), cv(z2)], realization(h, 0.0), stream=RngStream(0, 3))
    np.testing.assert_allclose(y.to_complex()[0], h[0] * z1 + h[1] * z2, atol=1e-14)


def test_transmit_linear_given_noise(rng):
    z = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    noise = (rng.standard_normal((1, 16)), rng.standard_normal((1, 16)))
    real = realization([0.5 + 0.5j], 0.3)
    base = transmit([cv(z)], real, noise=noise).to_complex() - (noise[0] + 1j * noise[1])
    scaled = transmit([cv(2.5 * z)], real, noise=noise).to_complex() - (noise[0] + 1j * noise[1])
    np.testing.assert_allclose(scaled, 2.5 * base, atol=1e-13)


def test_received_power_monte_carlo():
    # E[(1/k)||y||^2] = sum |h_i|^2 p_tx + sigma^2
    stream = RngStream(5, 9)
    g = stream.generator
    k, trials, p_tx, sigma = 256, 400, 0.5, 0.7
    vals = []
    for _ in range(trials):
        zs = [power_normalize(cv(g.standard_normal(k) + 1j * g.standard_normal(k)), k, p_tx) for _ in range(2)]
        h = sample_gains("rayleigh", 2, stream, batch=1)
        y = transmit(zs, ChannelRealization(h, np.array([sigma]), np.zeros(1), "rayleigh"), stream=stream)
        expected = np.sum(np.abs(h) ** 2) * p_tx + sigma ** 2
        vals.append(np.mean(np.abs(y.to_complex()) ** 2) - expected)
    vals = np.array(vals)
    assert abs(vals.mean()) < 3 * vals.std() / np.sqrt(trials)


def test_transmit_shape_mismatch():
    with pytest.raises(ContractError):
        transmit([cv(np.ones(4)), cv(np.ones(5))], realization([1, 1], 0.0), stream=RngStream(0, 1))
