"""Evaluation sweeps, fairness and subset checks, filter angles, capacity curves, parameter reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import metrics
from .channel import ChannelKind
from .data import ImageDataset, TupleIndexSet, build_eval_tuples
from .model import count_params, encode
from .numcore import ContractError, RngStream
from .projection import apply_enc, projection_param_count
from .training import STREAM_EVAL_CHANNEL, STREAM_EVAL_TUPLES, TrainState, run_eval

METRICS_HEADER = ("model/snr", "test/psnr", "test/psnr_std", "test/ssim", "test/ssim_std",
                  "test/msssim", "test/msssim_std")
HISTOGRAM_HEADER = ("bin_low_deg", "bin_high_deg", "count")
CAPACITY_HEADER = ("n", "mac_capacity", "tdma_capacity")
CAPACITY_CONVENTIONS = ("fixed-per-user-power", "fixed-total-power")


def _fmt(x: float) -> str:
    return repr(float(x))


def config_hash(state: TrainState) -> str:
    blob = json.dumps({"system": state.system.to_dict(), "train": state.config.to_dict()},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsRow:
    snr_db: float
    n: int
    psnr: float
    psnr_std: float
    ssim: float
    ssim_std: float
    ms_ssim: float
    ms_ssim_std: float
    mse: float
    mse_std: float
    count: int
    config_hash: str
    per_user_psnr: tuple[float, ...] = ()

    def csv_fields(self) -> list[str]:
        return [_fmt(v) for v in (self.snr_db, self.psnr, self.psnr_std, self.ssim,
                                  self.ssim_std, self.ms_ssim, self.ms_ssim_std)]


def _aggregate(snr_db: float, res, state: TrainState) -> MetricsRow:
    psnr = np.minimum(res.psnr, metrics.PSNR_CAP_DB)
    mask = ~np.isnan(psnr)
    def stats(a):
        vals = a[mask]
        return float(np.mean(vals)), float(np.std(vals))
    per_user = tuple(float(np.mean(psnr[:, i])) if mask[:, i].all() else math.nan
                     for i in range(psnr.shape[1]))
    return MetricsRow(float(snr_db), state.system.n, *stats(psnr), *stats(res.ssim),
                      *stats(res.ms_ssim), *stats(res.mse), int(mask.sum()),
                      config_hash(state), per_user)


def default_eval_tuples(state: TrainState, dataset: ImageDataset) -> TupleIndexSet:
    n = state.system.n
    return build_eval_tuples(len(dataset), n, RngStream(state.config.seed, STREAM_EVAL_TUPLES).child(n))


def default_eval_stream(state: TrainState) -> RngStream:
    return RngStream(state.config.seed, STREAM_EVAL_CHANNEL)


def _fresh(stream: RngStream) -> RngStream:
    return RngStream.from_state(stream.get_state())


def evaluate(state: TrainState, dataset: ImageDataset, snr_list: Sequence[float],
             kind: ChannelKind | str | None = None, stream: RngStream | None = None,
             tuples: TupleIndexSet | None = None, threads: int = 1,
             noiseless: bool = False) -> list[MetricsRow]:
    """One row per SNR. Every SNR point replays the same stream, so noise shapes are shared."""
    stream = default_eval_stream(state) if stream is None else stream
    tuples = default_eval_tuples(state, dataset) if tuples is None else tuples
    rows = []
    for snr in snr_list:
        res = run_eval(state, dataset, tuples, _fresh(stream), snr_db=snr, noiseless=noiseless,
                       structural=True, threads=threads, kind=kind)
        rows.append(_aggregate(snr, res, state))
    return rows


def write_metrics_csv(rows: Iterable[MetricsRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())


@dataclass
class FairnessReport:
    snr_db: float
    per_user_psnr: list[float]
    max_gap: float


def fairness_report(state: TrainState, dataset: ImageDataset, snr_db: float,
                    stream: RngStream | None = None, tuples: TupleIndexSet | None = None,
                    noiseless: bool = False, kind=None) -> FairnessReport:
    if state.system.n < 2:
        raise ContractError("fairness needs at least two users")
    stream = default_eval_stream(state) if stream is None else stream
    tuples = default_eval_tuples(state, dataset) if tuples is None else tuples
    res = run_eval(state, dataset, tuples, _fresh(stream), snr_db=snr_db, noiseless=noiseless, kind=kind)
    per_user = np.mean(np.minimum(res.psnr, metrics.PSNR_CAP_DB), axis=0)
    gap = float(per_user.max() - per_user.min())
    return FairnessReport(float(snr_db), [float(v) for v in per_user], gap)


def subset_eval(state: TrainState, active: Sequence[int], dataset: ImageDataset, snr_db: float,
                stream: RngStream | None = None, tuples: TupleIndexSet | None = None,
                noiseless: bool = False, kind=None) -> MetricsRow:
    """Only users in ``active`` transmit; the rest send exact zeros and are not scored."""
    active = sorted(set(int(a) for a in active))
    if not active:
        raise ContractError("active user subset must be non-empty")
    stream = default_eval_stream(state) if stream is None else stream
    tuples = default_eval_tuples(state, dataset) if tuples is None else tuples
    res = run_eval(state, dataset, tuples, _fresh(stream), snr_db=snr_db, noiseless=noiseless,
                   active=active, structural=True, kind=kind)
    return _aggregate(snr_db, res, state)


# --------------------------------------------------------------------------
# Filter orthogonality
# --------------------------------------------------------------------------


@dataclass
class AngleMatrix:
    angles: np.ndarray  # (n*m, n*m) degrees
    labels: list[tuple[int, int]]  # (user, filter) per row
    zero_norm: list[tuple[int, int]]

    def block(self, u: int, v: int) -> np.ndarray:
        rows = [i for i, (a, _) in enumerate(self.labels) if a == u]
        cols = [i for i, (a, _) in enumerate(self.labels) if a == v]
        return self.angles[np.ix_(rows, cols)]


def filter_vectors(state: TrainState, probes, snr_db: float) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Real vectors of each user's filters after projection, before power normalization.

    Filter ``i`` of user ``u`` is the part of the projected signal that comes
    from latent channel ``i``: at every pixel, ``re_i * E[i] + im_i * E[m+i]``
    where ``E`` is the user's realified encoder matrix.
    """
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim == 3:
        probes = probes[None]
    b = probes.shape[0]
    m = state.system.m
    h = np.ones(b, dtype=np.complex128)
    latent = encode(probes, h, np.full(b, float(snr_db)), state.params, state.system).data
    vectors, labels = [], []
    for u, pair in enumerate(state.codebook.pairs):
        e = pair.enc.data
        for i in range(m):
            v = latent[:, i, :, :, None] * e[i] + latent[:, m + i, :, :, None] * e[m + i]
            vectors.append(v.reshape(-1))
            labels.append((u, i))
    return np.stack(vectors), labels


def angles_between(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise angles in degrees; rows with zero norm give NaN rows and columns."""
    gram = vectors @ vectors.T
    gram = 0.5 * (gram + gram.T)
    norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    bad = norms == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = gram / np.outer(norms, norms)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    np.fill_diagonal(ang, 0.0)
    ang[bad, :] = np.nan
    ang[:, bad] = np.nan
    return ang, bad


def orthogonality_angles(state: TrainState, probes, snr_db: float = 10.0) -> AngleMatrix:
    vectors, labels = filter_vectors(state, probes, snr_db)
    ang, bad = angles_between(vectors)
    return AngleMatrix(ang, labels, [labels[i] for i in np.flatnonzero(bad)])


def angle_histogram(angles: AngleMatrix, bin_deg: float = 5.0, cross_only: bool = False):
    """Counts of the upper-triangle angles in ``[lo, hi)`` bins over 0..180 (180 in the last bin)."""
    a = angles.angles
    iu = np.triu_indices(a.shape[0], k=1)
    vals = a[iu]
    if cross_only:
        users = np.array([u for u, _ in angles.labels])
        vals = vals[users[iu[0]] != users[iu[1]]]
    vals = vals[~np.isnan(vals)]
    edges = np.arange(0.0, 180.0 + bin_deg / 2, bin_deg)
    counts, _ = np.histogram(vals, bins=edges)
    return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def write_angle_csvs(angles: AngleMatrix, matrix_path, histogram_path, bin_deg: float = 5.0) -> None:
    names = [f"u{u}f{i}" for u, i in angles.labels]
    with open(matrix_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filter"] + names)
        for name, row in zip(names, angles.angles):
            w.writerow([name] + ["nan" if math.isnan(v) else _fmt(v) for v in row])
    with open(histogram_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTOGRAM_HEADER)
        for lo, hi, c in angle_histogram(angles, bin_deg):
            w.writerow([_fmt(lo), _fmt(hi), c])


# --------------------------------------------------------------------------
# Capacity and parameter accounting
# --------------------------------------------------------------------------


@dataclass
class CapacityRow:
    n: int
    mac: float
    tdma: float


def capacity_curves(n_max: int, p: float, sigma2: float,
                    convention: str = "fixed-per-user-power") -> list[CapacityRow]:
    """Sum capacity of the Gaussian MAC vs. time sharing, in multiples of the bandwidth.

    ``fixed-per-user-power``: every user keeps power ``p``, so the MAC sum rate is
    ``log2(1 + n p / sigma^2)`` while TDMA stays at ``log2(1 + p / sigma^2)``.
    ``fixed-total-power``: the ``n`` users share ``p``; both schemes reach
    ``log2(1 + p / sigma^2)``.
    """
    if n_max < 1 or p <= 0 or sigma2 <= 0:
        raise ContractError("need n_max >= 1, p > 0 and sigma2 > 0")
    if convention not in CAPACITY_CONVENTIONS:
        raise ContractError(f"unknown capacity convention {convention!r}; "
                            f"choose one of {', '.join(CAPACITY_CONVENTIONS)}")
    single = math.log2(1.0 + p / sigma2)
    rows = []
    for n in range(1, n_max + 1):
        mac = math.log2(1.0 + n * p / sigma2) if convention == CAPACITY_CONVENTIONS[0] else single
        rows.append(CapacityRow(n, mac, single))
    return rows


def write_capacity_csv(rows: Iterable[CapacityRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CAPACITY_HEADER)
        for r in rows:
            w.writerow([r.n, _fmt(r.mac), _fmt(r.tdma)])


@dataclass
class ParamReport:
    n: int
    m: int
    encoder: int
    decoder: int
    projections: int

    @property
    def total(self) -> int:
        return self.encoder + self.decoder + self.projections

    def rows(self) -> list[tuple[str, int]]:
        return [("encoder", self.encoder), ("decoder", self.decoder),
                ("projections", self.projections), ("total", self.total)]


def param_report(state: TrainState) -> ParamReport:
    enc = count_params(state.params, "enc.")
    dec = count_params(state.params, "dec.")
    proj = state.codebook.trainable_count()
    expected = projection_param_count(state.system.n, state.system.m)
    if proj != expected:
        raise ContractError(f"codebook has {proj} trainable scalars, expected {expected}")
    return ParamReport(state.system.n, state.system.m, enc, dec, proj)
