"""User-specific projection codebook.

Each user owns an encoder-side matrix (complex ``m x nm``) and a receiver-side
matrix (complex ``nm x m``). They are stored as *realified* real matrices so a
latent row vector laid out as ``(re | im)`` is projected with a single real
matmul. After training the stored matrices are general real-linear maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ContractError, RngStream, Tensor

QR_DIAGONAL_FLOOR = 1e-12


@dataclass
class ComplexMatrix:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise ContractError(f"re/im shape mismatch {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, m) -> "ComplexMatrix":
        m = np.asarray(m, dtype=np.complex128)
        return cls(m.real.copy(), m.imag.copy())

    def conj_t(self) -> "ComplexMatrix":
        return ComplexMatrix(self.re.T.copy(), -self.im.T)


def realify(p: ComplexMatrix | np.ndarray) -> np.ndarray:
    """Real ``2r x 2c`` block form ``[[A, B], [-B, A]]`` of ``P = A + iB``.

    For a complex row vector ``z = u + iv``, ``(u | v) @ realify(P)`` equals
    ``(Re(zP) | Im(zP))``.
    """
    if not isinstance(p, ComplexMatrix):
        p = ComplexMatrix.from_complex(p)
    a, b = p.re, p.im
    return np.block([[a, b], [-b, a]])


def complexify(m: np.ndarray) -> ComplexMatrix:
    """Inverse of :func:`realify` for matrices that have the block structure."""
    r, c = m.shape[0] // 2, m.shape[1] // 2
    return ComplexMatrix(m[:r, :c], m[:r, c:])


def sample_haar_unitary(dim: int, stream: RngStream) -> ComplexMatrix:
    """Haar-distributed unitary via QR of a complex Gaussian matrix with phase correction.

    Columns of Q are multiplied by the phases of diag(R), which makes the
    factorization unique and the result uniform on U(dim).
    """
    if dim < 1:
        raise ContractError("dim must be >= 1")
    scale = np.sqrt(0.5 / dim)
    while True:
        g = stream.generator.standard_normal((dim, dim, 2)) * scale
        m = g[..., 0] + 1j * g[..., 1]
        q, r = np.linalg.qr(m)
        diag = np.diagonal(r)
        if np.min(np.abs(diag)) < QR_DIAGONAL_FLOOR:
            continue
        return ComplexMatrix.from_complex(q * (diag / np.abs(diag))[None, :])


@dataclass
class ProjectionPair:
    enc: Tensor  # (2m, 2nm)
    dec: Tensor  # (2nm, 2m)
    m: int
    n: int

    def __post_init__(self):
        if self.enc.shape != (2 * self.m, 2 * self.n * self.m):
            raise ContractError(f"enc matrix has shape {self.enc.shape}, "
                                f"expected {(2 * self.m, 2 * self.n * self.m)}")
        if self.dec.shape != (2 * self.n * self.m, 2 * self.m):
            raise ContractError(f"dec matrix has shape {self.dec.shape}")

    @property
    def trainable(self) -> bool:
        return self.enc.requires_grad


@dataclass
class CodebookState:
    n: int
    m: int
    pairs: list[ProjectionPair] = field(default_factory=list)

    def __post_init__(self):
        if self.n < 1 or self.n & (self.n - 1):
            raise ContractError(f"user count must be a power of two, got {self.n}")
        if len(self.pairs) != self.n:
            raise ContractError(f"expected {self.n} projection pairs, got {len(self.pairs)}")
        if any(p.m != self.m or p.n != self.n for p in self.pairs):
            raise ContractError("all projection pairs must share (m, n)")

    def trainable_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, pair in enumerate(self.pairs):
            if pair.trainable:
                out[f"proj.enc.{i}"] = pair.enc
                out[f"proj.dec.{i}"] = pair.dec
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, pair in enumerate(self.pairs):
            out[f"proj.enc.{i}"] = pair.enc
            out[f"proj.dec.{i}"] = pair.dec
        return out

    def trainable_count(self) -> int:
        return int(np.sum([t.size for t in self.trainable_tensors().values()]))

    def copy(self) -> "CodebookState":
        pairs = [ProjectionPair(Tensor(p.enc.data.copy(), p.trainable),
                                Tensor(p.dec.data.copy(), p.trainable), p.m, p.n)
                 for p in self.pairs]
        return CodebookState(self.n, self.m, pairs)


def init_single_user(m: int) -> CodebookState:
    """Identity projections for one user; frozen so they add no trainable parameters."""
    if m < 1:
        raise ContractError("m must be >= 1")
    eye = np.eye(2 * m)
    return CodebookState(1, m, [ProjectionPair(Tensor(eye), Tensor(eye.copy()), m, 1)])


def double(state: CodebookState, stream: RngStream) -> CodebookState:
    """Double the user count while keeping the two descendant groups mutually orthogonal.

    A Haar unitary ``Q`` of size ``n*m`` is split by rows into ``K1, K2``. User
    ``i`` keeps its parent's matrices composed with ``K1``; user ``i + n/2``
    gets the parent's matrices composed with ``K2``.
    """
    n = 2 * state.n
    m = state.m
    q = sample_haar_unitary(n * m, stream).to_complex()
    half = n * m // 2
    k1, k2 = q[:half], q[half:]
    r_k1, r_k2 = realify(k1), realify(k2)
    r_k1h, r_k2h = realify(k1.conj().T), realify(k2.conj().T)

    first, second = [], []
    for pair in state.pairs:
        enc_old, dec_old = pair.enc.data, pair.dec.data
        first.append(ProjectionPair(Tensor(enc_old @ r_k1, True), Tensor(r_k1h @ dec_old, True), m, n))
        second.append(ProjectionPair(Tensor(enc_old @ r_k2, True), Tensor(r_k2h @ dec_old, True), m, n))
    return CodebookState(n, m, first + second)


def initial_codebook(n: int, m: int, stream: RngStream) -> CodebookState:
    """Orthogonal codebook for ``n`` users built by repeated doubling from the identity."""
    state = init_single_user(m)
    while state.n < n:
        state = double(state, stream.child(state.n * 2))
    return state


def _project(x: Tensor, matrix: Tensor, expected: int) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != expected:
        raise ContractError(f"expected (B, {expected}, H, W) input, got {x.shape}")
    if matrix.shape[0] != expected:
        raise ContractError(f"projection matrix {matrix.shape} does not take {expected} channels")
    moved = nc.permute(x, (0, 2, 3, 1))
    return nc.permute(nc.matmul(moved, matrix), (0, 3, 1, 2))


def apply_enc(latent: Tensor, pair: ProjectionPair) -> Tensor:
    """Per spatial position, right-multiply the ``2m`` channel vector by the encoder matrix."""
    return _project(latent, pair.enc, 2 * pair.m)


def apply_dec(received: Tensor, pair: ProjectionPair) -> Tensor:
    return _project(received, pair.dec, 2 * pair.n * pair.m)


def projection_param_count(n: int, m: int) -> int:
    if n < 1 or n & (n - 1):
        raise ContractError(f"user count must be a power of two, got {n}")
    return 0 if n == 1 else 8 * n * n * m * m
