from fractions import Fraction

import numpy as np
import pytest

from pnoma import numcore as nc
from pnoma.channel import ChannelKind, ChannelRealization
from pnoma.model import SystemConfig, count_params, decode, encode, forward_system, init_params
from pnoma.numcore import ContractError, RngStream, Tensor
from pnoma.projection import double, init_single_user, initial_codebook


def awgn(batch, n, sigma=0.0, snr=10.0):
    return ChannelRealization(np.ones((batch, n), complex), np.full(batch, sigma), np.full(batch, snr),
                              ChannelKind.AWGN)


@pytest.fixture
def cfg():
    return SystemConfig()


@pytest.fixture
def params(cfg):
    return init_params(cfg, RngStream(0, 1))


def test_sizes(cfg):
    assert cfg.m == 8 and cfg.latent_hw == (4, 4)
    assert cfg.k == 128
    assert cfg.with_users(4).k == 4 * 8 * 16 == 4 * 3 * 16 * 16 * Fraction(1, 6)


def test_non_integer_m_rejected():
    with pytest.raises(ContractError, match="not a positive integer"):
        SystemConfig(rho_bar="1/7")


def test_roundtrip_dict(cfg):
    assert SystemConfig.from_dict(cfg.to_dict()) == cfg


def test_param_count(cfg, params):
    assert count_params(params) == 31_251
    assert count_params(params, "enc.") + count_params(params, "dec.") == count_params(params)


def test_encode_decode_shapes_and_determinism(cfg, params, rng):
    x = rng.uniform(size=(2, 3, 16, 16))
    h = np.ones(2, complex)
    lat = encode(x, h, [5.0, 15.0], params, cfg)
    assert lat.shape == (2, 16, 4, 4)
    np.testing.assert_array_equal(lat.data, encode(x, h, [5.0, 15.0], params, cfg).data)
    out = decode(lat, h, [5.0, 15.0], params, cfg)
    assert out.shape == x.shape and out.data.min() >= 0 and out.data.max() <= 1
    np.testing.assert_array_equal(out.data, decode(lat, h, [5.0, 15.0], params, cfg).data)


def test_encode_rejects_bad_input(cfg, params):
    with pytest.raises(ContractError):
        encode(np.full((1, 3, 16, 16), 1.5), np.ones(1), [0.0], params, cfg)
    with pytest.raises(ContractError):
        encode(np.zeros((1, 3, 8, 8)), np.ones(1), [0.0], params, cfg)
    with pytest.raises(ContractError):
        decode(np.zeros((1, 4, 4, 4)), np.ones(1), [0.0], params, cfg)


def test_snr_conditioning_matters(cfg, params, rng):
    x = rng.uniform(size=(1, 3, 16, 16))
    a = encode(x, np.ones(1), [0.0], params, cfg).data
    b = encode(x, np.ones(1), [20.0], params, cfg).data
    assert not np.allclose(a, b)


def test_single_user_reduces_to_point_to_point(cfg, params, rng):
    x = rng.uniform(size=(2, 3, 16, 16))
    out = forward_system([x], init_single_user(cfg.m), params, cfg, awgn(2, 1), noise=(np.zeros((2, 128)),) * 2)
    lat = encode(x, np.ones(2), [10.0] * 2, params, cfg).data.reshape(2, -1)
    scale = np.sqrt(128 * 1.0 / np.sum(lat ** 2, axis=1, keepdims=True))
    y = (lat * scale).reshape(2, 16, 4, 4)
    ref = decode(y, np.ones(2), [10.0] * 2, params, cfg).data
    np.testing.assert_allclose(out.x_hat[0].data, ref, atol=1e-12)


def test_power_constraint(cfg, params, rng):
    for n in (1, 2, 4):
        c = cfg.with_users(n)
        cb = initial_codebook(n, c.m, RngStream(n, 6))
        xs = [rng.uniform(size=(3, 3, 16, 16)) for _ in range(n)]
        real = ChannelRealization(rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n)),
                                  np.full(3, 0.5), np.full(3, 3.0), ChannelKind.RAYLEIGH)
        out = forward_system(xs, cb, params, c, real, stream=RngStream(0, 3))
        for z in out.z:
            np.testing.assert_allclose(np.sum(np.abs(z.to_complex()) ** 2, axis=1) / c.k, 1.0 / n, rtol=1e-12)


def test_zero_interference_after_doubling(cfg, params, rng):
    c2 = cfg.with_users(2)
    cb = double(init_single_user(cfg.m), RngStream(4, 6))
    x1, x2 = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
    zero = (np.zeros((2, c2.k)),) * 2
    out = forward_system([x1, x2], cb, params, c2, awgn(2, 2), noise=zero)
    out_b = forward_system([x1, rng.uniform(size=x2.shape)], cb, params, c2, awgn(2, 2), noise=zero)
    assert np.max(np.abs(out.x_hat[0].data - out_b.x_hat[0].data)) < 1e-9
    parent = forward_system([x1], init_single_user(cfg.m), params, cfg, awgn(2, 1),
                            noise=(np.zeros((2, cfg.k)),) * 2)
    assert np.max(np.abs(out.x_hat[0].data - parent.x_hat[0].data)) < 1e-9


def test_inactive_users_send_zero(cfg, params, rng):
    c2 = cfg.with_users(2)
    cb = double(init_single_user(cfg.m), RngStream(4, 6))
    xs = [rng.uniform(size=(1, 3, 16, 16)) for _ in range(2)]
    out = forward_system(xs, cb, params, c2, awgn(1, 2), noise=(np.zeros((1, c2.k)),) * 2, active=[1])
    assert out.x_hat[0] is None and np.all(out.z[0].to_complex() == 0)
    with pytest.raises(ContractError):
        forward_system(xs, cb, params, c2, awgn(1, 2), stream=RngStream(0, 1), active=[])


def test_perfect_sic_and_tdma_configs():
    sic = SystemConfig.perfect_sic(4, "1/6", p_bar=1.0)
    assert sic.n == 1 and sic.p_tx == 0.25 and sic.m == 32
    tdma = SystemConfig.tdma("1/6")
    assert tdma.n == 1 and tdma.p_tx == 1.0


def test_pipeline_gradients_small(rng):
    c = SystemConfig(n=2, rho_bar="1/12", width=8, height=8, filters=3)
    params = init_params(c, RngStream(2, 1))
    cb = initial_codebook(2, c.m, RngStream(2, 6))
    xs = [rng.uniform(size=(1, 3, 8, 8)) for _ in range(2)]
    noise = (0.1 * rng.standard_normal((1, c.k)), 0.1 * rng.standard_normal((1, c.k)))
    real = awgn(1, 2, sigma=0.1)
    def build():
        out = forward_system(xs, cb, params, c, real, noise=noise)
        return nc.add(*[nc.l2sq(nc.add(o, nc.mul(Tensor(x), -1.0))) for o, x in zip(out.x_hat, xs)])
    ps = {**params, **cb.trainable_tensors()}
    report = nc.grad_check(build, ps)
    assert report.passed, report.max_rel_error
