"""Complex multiple-access channel: SNR arithmetic, power normalization, y = sum_i h_i z_i + n.

Complex vectors are carried as a pair of real tensors. A leading batch axis is
allowed everywhere: ``re`` and ``im`` have shape ``(batch, k)`` and each row is
an independent channel use.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ContractError, RngStream, Tensor


class DegenerateInputError(ValueError):
    """Power normalization was asked to scale an all-zero vector."""


class ChannelKind(str, enum.Enum):
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"


@dataclass
class ComplexVector:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ContractError(f"re/im shape mismatch {self.re.shape} vs {self.im.shape}")

    @property
    def k(self) -> int:
        return self.re.shape[-1]

    def to_complex(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @classmethod
    def from_complex(cls, z, requires_grad: bool = False) -> "ComplexVector":
        z = np.asarray(z, dtype=np.complex128)
        return cls(Tensor(z.real, requires_grad), Tensor(z.imag, requires_grad))

    @classmethod
    def zeros(cls, shape) -> "ComplexVector":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class PowerBudget:
    """Per-user power bookkeeping; ``p_tx * n_users == p_bar``."""

    p_bar: float
    n_users: int
    k: int

    def __post_init__(self):
        if self.k <= 0 or self.n_users < 1 or self.p_bar <= 0:
            raise ContractError("power budget needs k > 0, n_users >= 1, p_bar > 0")

    @property
    def p_tx(self) -> float:
        return self.p_bar / self.n_users


@dataclass
class ChannelRealization:
    """One draw of the channel state for a batch of channel uses.

    ``gains`` is complex with shape ``(batch, n_users)``; ``sigma`` is the noise
    standard deviation per complex dimension, one per row. ``snr_db`` is the
    value fed to the networks as side information; it is kept separately so a
    noiseless run (sigma = 0) can still be conditioned on a finite SNR.
    """

    gains: np.ndarray
    sigma: np.ndarray
    snr_db: np.ndarray
    kind: ChannelKind = ChannelKind.AWGN

    def __post_init__(self):
        self.gains = np.atleast_2d(np.asarray(self.gains, dtype=np.complex128))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        self.snr_db = np.atleast_1d(np.asarray(self.snr_db, dtype=np.float64))
        if np.any(self.sigma < 0):
            raise ContractError("sigma must be non-negative")
        if self.kind == ChannelKind.AWGN and not np.all(self.gains == 1):
            raise ContractError("AWGN realizations must have unit gains")

    @property
    def batch(self) -> int:
        return self.gains.shape[0]

    @property
    def n_users(self) -> int:
        return self.gains.shape[1]

    def row(self, i: int) -> "ChannelRealization":
        return ChannelRealization(self.gains[i:i + 1], self.sigma[i:i + 1],
                                  self.snr_db[i:i + 1], self.kind)


def snr_to_sigma(snr_db, p: float = 1.0):
    """Noise variance sigma^2 for an SNR of ``10 log10(p / sigma^2)``."""
    if p <= 0:
        raise ContractError(f"reference power must be positive, got {p}")
    return p / np.power(10.0, np.asarray(snr_db, dtype=np.float64) / 10.0)


def sigma_to_snr(sigma2, p: float = 1.0):
    if p <= 0:
        raise ContractError(f"reference power must be positive, got {p}")
    return 10.0 * np.log10(p / np.asarray(sigma2, dtype=np.float64))


def power_normalize(z_raw: ComplexVector, k: int, p_tx: float) -> ComplexVector:
    """Scale each row so that ``(1/k) ||z||^2 == p_tx``; the scale is differentiated through."""
    if z_raw.k != k:
        raise ContractError(f"expected {k} symbols per row, got {z_raw.k}")
    energy_re = nc.l2sq(z_raw.re, axis=-1, keepdims=True)
    energy = nc.add(energy_re, nc.l2sq(z_raw.im, axis=-1, keepdims=True))
    if np.any(energy.data == 0):
        raise DegenerateInputError("cannot power-normalize an all-zero transmit vector")
    scale = nc.mul(nc.power(energy, -0.5), math.sqrt(k * p_tx))
    return ComplexVector(nc.mul(z_raw.re, scale), nc.mul(z_raw.im, scale))


def sample_gains(kind: ChannelKind | str, n_users: int, stream: RngStream,
                 batch: int | None = None) -> np.ndarray:
    """Unit gains for AWGN, i.i.d. CN(0, 1) for Rayleigh. Shape ``(n_users,)`` or ``(batch, n_users)``."""
    kind = ChannelKind(kind)
    if n_users < 1:
        raise ContractError("n_users must be >= 1")
    shape = (n_users,) if batch is None else (batch, n_users)
    if kind == ChannelKind.AWGN:
        return np.ones(shape, dtype=np.complex128)
    re = stream.generator.standard_normal(shape)
    im = stream.generator.standard_normal(shape)
    return (re + 1j * im) * math.sqrt(0.5)


def draw_noise(sigma: np.ndarray, k: int, stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Complex noise with variance sigma^2 per complex dimension, one row per sigma."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    scale = (sigma / math.sqrt(2.0))[:, None]
    re = nc.sample_gaussian(stream, (sigma.size, k)).data * scale
    im = nc.sample_gaussian(stream, (sigma.size, k)).data * scale
    return re, im


def transmit(z_list: list[ComplexVector], realization: ChannelRealization,
             stream: RngStream | None = None,
             noise: tuple[np.ndarray, np.ndarray] | None = None) -> ComplexVector:
    """Superpose the users' signals through their gains and add complex Gaussian noise.

    Noise comes from ``noise`` when given, otherwise it is drawn from ``stream``.
    Gradients flow to every ``z_i``; the noise is a constant.
    """
    if len(z_list) != realization.n_users:
        raise ContractError(f"{len(z_list)} signals but {realization.n_users} gains")
    k = z_list[0].k
    if any(z.k != k or z.re.shape != z_list[0].re.shape for z in z_list):
        raise ContractError("all transmitted vectors must share the same shape")
    batch = z_list[0].re.shape[0] if z_list[0].re.data.ndim > 1 else 1
    if realization.batch != batch:
        raise ContractError(f"realization has {realization.batch} rows, signals have {batch}")
    if noise is None:
        if stream is None:
            raise ContractError("transmit needs either a noise stream or explicit noise")
        noise = draw_noise(realization.sigma, k, stream)
    n_re, n_im = noise
    n_re = n_re.reshape(z_list[0].re.shape)
    n_im = n_im.reshape(z_list[0].re.shape)

    y_re: Tensor = Tensor(n_re)
    y_im: Tensor = Tensor(n_im)
    for i, z in enumerate(z_list):
        h = realization.gains[:, i]
        a = h.real.reshape(-1, 1) if z.re.data.ndim > 1 else float(h.real[0])
        b = h.imag.reshape(-1, 1) if z.re.data.ndim > 1 else float(h.imag[0])
        # (a + ib)(re + i im) = (a re - b im) + i(a im + b re)
        y_re = nc.add(y_re, nc.add(nc.mul(z.re, a), nc.mul(z.im, -b)))
        y_im = nc.add(y_im, nc.add(nc.mul(z.im, a), nc.mul(z.re, b)))
    return ComplexVector(y_re, y_im)
