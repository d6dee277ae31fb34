"""Shared convolutional encoder/decoder and the end-to-end multi-user forward pass."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np

from . import numcore as nc
from .channel import ChannelRealization, ComplexVector, power_normalize, transmit
from .numcore import ContractError, RngStream, Tensor
from .projection import CodebookState, apply_dec, apply_enc

LEAKY_SLOPE = 0.1
KERNEL = 3


def parse_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(value).limit_denominator(10**6)


@dataclass(frozen=True)
class SystemConfig:
    """Channel/bandwidth setup; ``k``, ``m`` and the latent grid are derived from it.

    ``tx_power`` overrides the per-user transmit power (default ``p_bar / n``);
    it exists so a Perfect-SIC row, which is a one-user system with a reduced
    power budget, can be written as a plain configuration.
    """

    n: int = 1
    rho_bar: Fraction = Fraction(1, 6)
    p_bar: float = 1.0
    width: int = 16
    height: int = 16
    c_in: int = 3
    stages: int = 2
    filters: int = 32
    tx_power: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "rho_bar", parse_fraction(self.rho_bar))
        if self.n < 1 or self.n & (self.n - 1):
            raise ContractError(f"n must be a power of two, got {self.n}")
        if self.rho_bar <= 0 or self.p_bar <= 0:
            raise ContractError("rho_bar and p_bar must be positive")
        if self.stages < 1 or self.filters < 1:
            raise ContractError("stages and filters must be >= 1")
        scale = 2 ** self.stages
        if self.width % scale or self.height % scale:
            raise ContractError(f"image size {self.width}x{self.height} not divisible by {scale}")
        m = self.c_in * self.rho_bar * 4 ** self.stages
        if m.denominator != 1 or m < 1:
            raise ContractError(
                f"m = {self.c_in}*rho_bar*4^{self.stages} = {m} is not a positive integer; "
                f"choose rho_bar so that m is integral")
        if self.tx_power is not None and self.tx_power <= 0:
            raise ContractError("tx_power must be positive")

    @property
    def m(self) -> int:
        return int(self.c_in * self.rho_bar * 4 ** self.stages)

    @property
    def latent_hw(self) -> tuple[int, int]:
        s = 2 ** self.stages
        return self.height // s, self.width // s

    @property
    def k(self) -> int:
        h, w = self.latent_hw
        k = self.n * self.m * h * w
        assert Fraction(k) == self.n * self.c_in * self.width * self.height * self.rho_bar
        return k

    @property
    def p_tx(self) -> float:
        return self.tx_power if self.tx_power is not None else self.p_bar / self.n

    def with_users(self, n: int) -> "SystemConfig":
        return replace(self, n=n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho_bar"] = str(self.rho_bar)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        return cls(**d)

    @classmethod
    def tdma(cls, rho_bar, **kw) -> "SystemConfig":
        """Point-to-point baseline: one user, per-user bandwidth and full power."""
        return cls(n=1, rho_bar=rho_bar, **kw)

    @classmethod
    def perfect_sic(cls, n_users: int, rho_bar, p_bar: float = 1.0, **kw) -> "SystemConfig":
        """Interference-free bound: a single user on the whole band with ``p_bar / n_users`` power."""
        return cls(n=1, rho_bar=parse_fraction(rho_bar) * n_users, p_bar=p_bar,
                   tx_power=p_bar / n_users, **kw)


COND_CHANNELS = 3


def init_params(config: SystemConfig, stream: RngStream) -> dict[str, Tensor]:
    """He-normal conv weights, zero biases. One encoder and one decoder, shared by all users."""
    f, m = config.filters, config.m
    shapes: list[tuple[str, tuple[int, ...], int]] = []
    cin = config.c_in + COND_CHANNELS
    for s in range(config.stages):
        shapes.append((f"enc.down{s}", (f, cin, KERNEL, KERNEL), cin))
        cin = f
    shapes.append(("enc.out", (2 * m, f, KERNEL, KERNEL), f))
    shapes.append(("dec.in", (f, 2 * m + COND_CHANNELS, KERNEL, KERNEL), 2 * m + COND_CHANNELS))
    for s in range(config.stages):
        cout = config.c_in if s == config.stages - 1 else f
        # transposed conv weights are (in, out, k, k)
        shapes.append((f"dec.up{s}", (f, cout, KERNEL, KERNEL), f))

    params: dict[str, Tensor] = {}
    for name, shape, fan_in in shapes:
        std = math.sqrt(2.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in * KERNEL * KERNEL))
        params[name + ".w"] = Tensor(stream.generator.standard_normal(shape) * std, True, name + ".w")
        nbias = shape[1] if name.startswith("dec.up") else shape[0]
        params[name + ".b"] = Tensor(np.zeros(nbias), True, name + ".b")
    return params


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return int(np.sum([t.size for name, t in params.items()
                       if name.startswith(prefix) and t.requires_grad], dtype=np.int64))


def _conditioning(h: np.ndarray, snr_db: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h = np.asarray(h, dtype=np.complex128).reshape(-1)
    snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64).reshape(-1), h.shape)
    feats = np.stack([h.real, h.imag, snr / 20.0], axis=1)
    return np.broadcast_to(feats[:, :, None, None], (h.size, COND_CHANNELS) + hw).copy()


def _as_images(x, config: SystemConfig) -> Tensor:
    x = nc.as_tensor(x)
    if x.data.ndim == 3:
        x = nc.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (config.c_in, config.height, config.width):
        raise ContractError(f"image batch has shape {x.shape}, expected "
                            f"(B, {config.c_in}, {config.height}, {config.width})")
    if np.any(x.data < 0) or np.any(x.data > 1):
        raise ContractError("image values must lie in [0, 1]")
    return x


def encode(x, h, snr_db, params: dict[str, Tensor], config: SystemConfig) -> Tensor:
    """Image batch ``(B, C, H, W)`` -> latent ``(B, 2m, H', W')``.

    Channels ``[0, m)`` hold real parts and ``[m, 2m)`` imaginary parts.
    """
    x = _as_images(x, config)
    cond = _conditioning(h, snr_db, (config.height, config.width))
    if cond.shape[0] != x.shape[0]:
        raise ContractError(f"{cond.shape[0]} gains for a batch of {x.shape[0]}")
    a = nc.concat([x, Tensor(cond)], axis=1)
    for s in range(config.stages):
        a = nc.conv2d(a, params[f"enc.down{s}.w"], params[f"enc.down{s}.b"], stride=2, padding=1)
        a = nc.leaky_relu(a, LEAKY_SLOPE)
    return nc.conv2d(a, params["enc.out.w"], params["enc.out.b"], stride=1, padding=1)


def decode(y, h, snr_db, params: dict[str, Tensor], config: SystemConfig) -> Tensor:
    """Projected receive tensor ``(B, 2m, H', W')`` -> image batch in ``[0, 1]``."""
    y = nc.as_tensor(y)
    hh, ww = config.latent_hw
    if y.data.ndim != 4 or y.shape[1:] != (2 * config.m, hh, ww):
        raise ContractError(f"decoder input has shape {y.shape}, expected (B, {2 * config.m}, {hh}, {ww})")
    cond = _conditioning(h, snr_db, (hh, ww))
    a = nc.concat([y, Tensor(cond)], axis=1)
    a = nc.leaky_relu(nc.conv2d(a, params["dec.in.w"], params["dec.in.b"], stride=1, padding=1),
                      LEAKY_SLOPE)
    for s in range(config.stages):
        a = nc.conv_transpose2d(a, params[f"dec.up{s}.w"], params[f"dec.up{s}.b"],
                                stride=2, padding=1, output_padding=1)
        a = nc.sigmoid(a) if s == config.stages - 1 else nc.leaky_relu(a, LEAKY_SLOPE)
    return a


@dataclass
class SystemOutput:
    x_hat: list[Tensor | None]
    z: list[ComplexVector]
    y: ComplexVector


def _to_complex_vector(proj: Tensor, nm: int) -> ComplexVector:
    b = proj.shape[0]
    re = nc.reshape(nc.take(proj, 0, nm, axis=1), (b, -1))
    im = nc.reshape(nc.take(proj, nm, 2 * nm, axis=1), (b, -1))
    return ComplexVector(re, im)


def _to_image_form(y: ComplexVector, nm: int, hw: tuple[int, int]) -> Tensor:
    b = y.re.shape[0]
    shape = (b, nm) + hw
    return nc.concat([nc.reshape(y.re, shape), nc.reshape(y.im, shape)], axis=1)


def forward_system(x_list, codebook: CodebookState, params: dict[str, Tensor],
                   config: SystemConfig, realization: ChannelRealization,
                   stream: RngStream | None = None, noise=None,
                   active=None) -> SystemOutput:
    """Encode, project, normalize, superpose over the MAC, then de-project and decode per user.

    ``active`` restricts which users transmit; silent users send an exact zero
    vector and get no reconstruction (``None`` in ``x_hat``).
    """
    n = config.n
    if len(x_list) != n or codebook.n != n:
        raise ContractError(f"system configured for {n} users, got {len(x_list)} images "
                            f"and a {codebook.n}-user codebook")
    if codebook.m != config.m:
        raise ContractError(f"codebook m={codebook.m} but config m={config.m}")
    active = list(range(n)) if active is None else sorted(set(active))
    if not active or any(i < 0 or i >= n for i in active):
        raise ContractError(f"active users must be a non-empty subset of 0..{n - 1}")
    nm = n * config.m
    hw = config.latent_hw

    z_list: list[ComplexVector] = []
    batch = None
    for i, x in enumerate(x_list):
        if i not in active:
            z_list.append(None)
            continue
        latent = encode(x, realization.gains[:, i], realization.snr_db, params, config)
        batch = latent.shape[0]
        z_raw = _to_complex_vector(apply_enc(latent, codebook.pairs[i]), nm)
        z_list.append(power_normalize(z_raw, config.k, config.p_tx))
    z_list = [ComplexVector.zeros((batch, config.k)) if z is None else z for z in z_list]

    y = transmit(z_list, realization, stream=stream, noise=noise)
    y_img = _to_image_form(y, nm, hw)
    x_hat: list[Tensor | None] = [None] * n
    for i in active:
        y_i = apply_dec(y_img, codebook.pairs[i])
        x_hat[i] = decode(y_i, realization.gains[:, i], realization.snr_db, params, config)
    return SystemOutput(x_hat, z_list, y)
