"""Loss, Adam, the epoch loop with early stopping, progressive user doubling, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from . import numcore as nc
from .channel import ChannelKind, ChannelRealization, draw_noise, sample_gains, snr_to_sigma
from .data import ImageDataset, TupleIndexSet, build_eval_tuples, build_train_tuples
from .model import SystemConfig, forward_system, init_params
from .numcore import ContractError, NumericError, RngStream, Tensor
from .projection import (CodebookState, ProjectionPair, double, initial_codebook,
                         sample_haar_unitary)

log = logging.getLogger(__name__)

# stream ids; every stochastic call site has its own
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_TRAIN_CHANNEL = 3
STREAM_VAL_CHANNEL = 4
STREAM_TRAIN_TUPLES = 5
STREAM_CODEBOOK = 6
STREAM_DATA = 7
STREAM_EVAL_CHANNEL = 8
STREAM_EVAL_TUPLES = 9

CHECKPOINT_FORMAT = "pnoma-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    snr_range_db: tuple[float, float] = (0.0, 20.0)
    delta_db: float = 1e-3
    patience: int = 10
    max_epochs: int = 1000
    tuple_multiplier: int = 3
    eval_batch_size: int = 64
    channel: str = "awgn"
    seed: int = 0

    def __post_init__(self):
        self.snr_range_db = tuple(float(v) for v in self.snr_range_db)
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ContractError("need lr > 0, batch_size >= 1, patience >= 1")
        if self.max_epochs < 1 or self.tuple_multiplier < 1 or self.eval_batch_size < 1:
            raise ContractError("max_epochs, tuple_multiplier and eval_batch_size must be >= 1")
        ChannelKind(self.channel)

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Desk-scale defaults used by the tests and the example configs."""
        base = dict(lr=1e-3, batch_size=8, max_epochs=60)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range_db"] = list(self.snr_range_db)
        return d


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainState:
    system: SystemConfig
    params: dict[str, Tensor]
    codebook: CodebookState
    config: TrainConfig
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_val_psnr: float = -math.inf
    since_improvement: int = 0
    streams: dict[str, RngStream] = field(default_factory=dict)

    def trainable(self) -> dict[str, Tensor]:
        out = {name: t for name, t in self.params.items() if t.requires_grad}
        out.update(self.codebook.trainable_tensors())
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.params, **self.codebook.named_tensors()}

    def stream(self, key: str, stream_id: int) -> RngStream:
        if key not in self.streams:
            self.streams[key] = RngStream(self.config.seed, stream_id)
        return self.streams[key]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors().items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        for name, t in self.named_tensors().items():
            t.data = snap[name].copy()


def new_state(system: SystemConfig, config: TrainConfig) -> TrainState:
    params = init_params(system, RngStream(config.seed, STREAM_INIT))
    codebook = initial_codebook(system.n, system.m, RngStream(config.seed, STREAM_CODEBOOK))
    return TrainState(system, params, codebook, config)


# --------------------------------------------------------------------------
# Loss and optimizer
# --------------------------------------------------------------------------


def loss(x_list: Sequence, x_hat_list: Sequence[Tensor]) -> Tensor:
    """Sum over users and batch rows of the per-image mean squared error."""
    if len(x_list) != len(x_hat_list):
        raise ContractError(f"{len(x_list)} targets vs {len(x_hat_list)} reconstructions")
    total: Tensor | None = None
    for x, x_hat in zip(x_list, x_hat_list):
        x = nc.as_tensor(x)
        if x.shape != x_hat.shape:
            raise ContractError(f"target {x.shape} vs reconstruction {x_hat.shape}")
        diff = nc.add(x_hat, nc.mul(x, -1.0))
        per_elem = 1.0 / (diff.size // diff.shape[0]) if diff.data.ndim == 4 else 1.0 / diff.size
        term = nc.mul(nc.l2sq(diff), per_elem)
        total = term if total is None else nc.add(total, term)
    return total


def adam_step(state: TrainState, gradients: Mapping[str, np.ndarray]) -> TrainState:
    """Bias-corrected Adam on every trainable tensor; frozen tensors are never touched."""
    cfg = state.config
    trainable = state.trainable()
    for name, g in gradients.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    state.adam.step += 1
    t = state.adam.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, tensor in trainable.items():
        g = gradients.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.adam.m.get(name)
        v = state.adam.v.get(name)
        if m is None or m.shape != g.shape:
            m, v = np.zeros_like(g), np.zeros_like(g)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.adam.m[name], state.adam.v[name] = m, v
        tensor.data = tensor.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# --------------------------------------------------------------------------
# Channel draws and forward passes over tuple batches
# --------------------------------------------------------------------------


def draw_realization(system: SystemConfig, kind, batch: int, stream: RngStream,
                     snr_db=None, snr_range=(0.0, 20.0), noiseless: bool = False):
    """SNR (fixed or uniform per row), gains, then noise, all from ``stream`` in that order."""
    kind = ChannelKind(kind)
    if snr_db is None:
        snr = stream.generator.uniform(snr_range[0], snr_range[1], size=batch)
    else:
        snr = np.full(batch, float(snr_db))
    gains = sample_gains(kind, system.n, stream, batch=batch)
    sigma = np.zeros(batch) if noiseless else np.sqrt(snr_to_sigma(snr, system.p_bar))
    realization = ChannelRealization(gains, sigma, snr, kind)
    noise = draw_noise(sigma, system.k, stream)
    return realization, noise


def gather(dataset: ImageDataset, rows: np.ndarray) -> list[np.ndarray]:
    return [dataset.images[rows[:, i]] for i in range(rows.shape[1])]


def _batches(total: int, size: int):
    for lo in range(0, total, size):
        yield slice(lo, min(lo + size, total))


def train_epoch(state: TrainState, dataset: ImageDataset, tuples: TupleIndexSet):
    """One shuffled pass over the tuple table; returns ``(state, epoch_loss, batch_losses)``."""
    cfg = state.config
    if tuples.n != state.system.n:
        raise ContractError(f"tuples are for {tuples.n} users, system has {state.system.n}")
    shuffle = state.stream("shuffle", STREAM_SHUFFLE)
    channel = state.stream("train_channel", STREAM_TRAIN_CHANNEL)
    order = shuffle.generator.permutation(tuples.T)
    batch_losses = []
    for sl in _batches(tuples.T, cfg.batch_size):
        rows = tuples.indices[order[sl]]
        x_list = gather(dataset, rows)
        realization, noise = draw_realization(state.system, cfg.channel, rows.shape[0], channel,
                                              snr_range=cfg.snr_range_db)
        for t in state.trainable().values():
            t.zero_grad()
        out = forward_system(x_list, state.codebook, state.params, state.system, realization,
                             noise=noise)
        batch_loss = loss(x_list, out.x_hat)
        nc.forward_backward(batch_loss)
        grads = {name: t.grad for name, t in state.trainable().items() if t.grad is not None}
        adam_step(state, grads)
        batch_losses.append(batch_loss.item())
    state.epoch += 1
    return state, float(np.sum(batch_losses)), batch_losses


@dataclass
class EvalResult:
    """Per-image metrics, arrays of shape ``(rows, n)``; NaN for users that did not transmit."""

    psnr: np.ndarray
    mse: np.ndarray
    ssim: np.ndarray | None = None
    ms_ssim: np.ndarray | None = None
    x_hat: list[np.ndarray] | None = None


def run_eval(state: TrainState, dataset: ImageDataset, tuples: TupleIndexSet, stream: RngStream,
             snr_db=None, noiseless: bool = False, active=None, structural: bool = False,
             keep_outputs: bool = False, threads: int = 1, kind=None) -> EvalResult:
    """Forward every evaluation tuple once and score each reconstruction.

    Channel draws are made sequentially before any compute, so results do not
    depend on ``threads``.
    """
    cfg = state.config
    kind = cfg.channel if kind is None else kind
    jobs = []
    for sl in _batches(tuples.T, cfg.eval_batch_size):
        rows = tuples.indices[sl]
        realization, noise = draw_realization(state.system, kind, rows.shape[0], stream,
                                              snr_db=snr_db, snr_range=cfg.snr_range_db,
                                              noiseless=noiseless)
        jobs.append((rows, realization, noise))

    n = state.system.n
    active_set = set(range(n)) if active is None else set(active)

    def compute(job):
        rows, realization, noise = job
        x_list = gather(dataset, rows)
        out = forward_system(x_list, state.codebook, state.params, state.system, realization,
                             noise=noise, active=active)
        b = rows.shape[0]
        res = {k: np.full((b, n), np.nan) for k in ("psnr", "mse", "ssim", "ms_ssim")}
        outputs = []
        for i in range(n):
            if i not in active_set:
                outputs.append(None)
                continue
            xh = out.x_hat[i].data
            outputs.append(xh)
            for r in range(b):
                res["mse"][r, i] = metrics.mse(x_list[i][r], xh[r])
                res["psnr"][r, i] = metrics.psnr(x_list[i][r], xh[r])
                if structural:
                    res["ssim"][r, i] = metrics.ssim(x_list[i][r], xh[r])
                    res["ms_ssim"][r, i] = metrics.ms_ssim_auto(x_list[i][r], xh[r])
        return res, outputs

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(compute, jobs))
    else:
        results = [compute(j) for j in jobs]

    cat = {k: np.concatenate([r[0][k] for r in results]) for k in ("psnr", "mse", "ssim", "ms_ssim")}
    x_hat = None
    if keep_outputs:
        x_hat = [None if i not in active_set else np.concatenate([r[1][i] for r in results])
                 for i in range(n)]
    return EvalResult(cat["psnr"], cat["mse"], cat["ssim"] if structural else None,
                      cat["ms_ssim"] if structural else None, x_hat)


def validate(state: TrainState, dataset: ImageDataset, tuples: TupleIndexSet) -> float:
    """Mean per-image PSNR at per-row random SNR; the channel stream is replayed on every call."""
    stream = RngStream(state.config.seed, STREAM_VAL_CHANNEL)
    res = run_eval(state, dataset, tuples, stream)
    return float(np.mean(np.minimum(res.psnr, metrics.PSNR_CAP_DB)))


# --------------------------------------------------------------------------
# Fit / progressive fine-tuning
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    state: TrainState
    history: list[dict]
    initial_val_psnr: float
    best_val_psnr: float
    stopped_early: bool


def fit(state: TrainState, train_ds: ImageDataset, val_ds: ImageDataset,
        train_tuples: TupleIndexSet, val_tuples: TupleIndexSet) -> FitResult:
    """Train until validation PSNR improves by less than ``delta_db`` for ``patience`` epochs.

    The returned state carries the parameters with the highest validation PSNR
    seen, including the starting point.
    """
    cfg = state.config
    initial = validate(state, val_ds, val_tuples)
    best_psnr, best_snap = initial, state.snapshot()
    best_adam = _copy_adam(state.adam)
    plateau_ref: float | None = None
    state.since_improvement = 0
    history: list[dict] = []
    stopped = False
    for _ in range(cfg.max_epochs):
        state, epoch_loss, _ = train_epoch(state, train_ds, train_tuples)
        val = validate(state, val_ds, val_tuples)
        history.append({"epoch": state.epoch, "train_loss": epoch_loss, "val_psnr": val})
        log.info("n=%d epoch %d loss %.6f val_psnr %.4f", state.system.n, state.epoch, epoch_loss, val)
        if val > best_psnr:
            best_psnr, best_snap = val, state.snapshot()
            best_adam = _copy_adam(state.adam)
        if plateau_ref is None or val - plateau_ref >= cfg.delta_db:
            plateau_ref = val
            state.since_improvement = 0
        else:
            state.since_improvement += 1
        if state.since_improvement >= cfg.patience:
            stopped = True
            break
    state.restore(best_snap)
    state.adam = best_adam
    state.best_val_psnr = best_psnr
    return FitResult(state, history, initial, best_psnr, stopped)


def _copy_adam(adam: AdamState) -> AdamState:
    return AdamState(adam.step, {k: v.copy() for k, v in adam.m.items()},
                     {k: v.copy() for k, v in adam.v.items()})


def tuples_for(state: TrainState, train_ds: ImageDataset, val_ds: ImageDataset):
    n, seed = state.system.n, state.config.seed
    train = build_train_tuples(len(train_ds), n, state.config.tuple_multiplier * len(train_ds),
                               RngStream(seed, STREAM_TRAIN_TUPLES).child(n))
    val = build_eval_tuples(len(val_ds), n, RngStream(seed, STREAM_EVAL_TUPLES).child(n))
    return train, val


def doubled_state(state: TrainState) -> TrainState:
    """Copy of ``state`` with twice the users; shared weights copied, optimizer moments reset."""
    n = 2 * state.system.n
    codebook = double(state.codebook, RngStream(state.config.seed, STREAM_CODEBOOK).child(n))
    params = {name: Tensor(t.data.copy(), t.requires_grad, t.name) for name, t in state.params.items()}
    child = TrainState(state.system.with_users(n), params, codebook, state.config)
    child.epoch = state.epoch
    child.streams = {k: RngStream.from_state(s.get_state()) for k, s in state.streams.items()}
    return child


def doubling_unitary(seed: int, n_child: int, m: int) -> np.ndarray:
    """The unitary that :func:`doubled_state` draws when growing to ``n_child`` users."""
    return sample_haar_unitary(n_child * m, RngStream(seed, STREAM_CODEBOOK).child(n_child)).to_complex()


def matched_parent_psnr(parent: TrainState, child: TrainState, dataset: ImageDataset,
                        tuples: TupleIndexSet) -> float:
    """Parent validation PSNR under the channel draws the child sees in :func:`validate`.

    Child user ``g * n_p + i`` descends from parent user ``i``. Each child row is
    split into its two groups; each group is sent through the parent with the
    child's SNR and gains and with the child's noise projected through the
    group's half of the doubling unitary, which is exactly what the group
    decoders see. Without interference the two figures coincide.
    """
    n_p, n_c, m = parent.system.n, child.system.n, child.system.m
    if n_c != 2 * n_p or parent.system.m != m:
        raise ContractError("child must have twice the parent's users and the same m")
    q = doubling_unitary(child.config.seed, n_c, m)
    halves = (q[:n_p * m], q[n_p * m:])
    stream = RngStream(child.config.seed, STREAM_VAL_CHANNEL)
    hh, ww = child.system.latent_hw
    scores = []
    for sl in _batches(tuples.T, child.config.eval_batch_size):
        rows = tuples.indices[sl]
        b = rows.shape[0]
        real_c, (nre, nim) = draw_realization(child.system, child.config.channel, b, stream,
                                              snr_range=child.config.snr_range_db)
        noise_c = (nre + 1j * nim).reshape(b, n_c * m, hh * ww).transpose(0, 2, 1)
        for g, k_g in enumerate(halves):
            users = slice(g * n_p, (g + 1) * n_p)
            noise_p = (noise_c @ k_g.conj().T).transpose(0, 2, 1).reshape(b, -1)
            real_p = ChannelRealization(real_c.gains[:, users], real_c.sigma, real_c.snr_db, real_c.kind)
            x_list = gather(dataset, rows[:, users])
            out = forward_system(x_list, parent.codebook, parent.params, parent.system, real_p,
                                 noise=(noise_p.real.copy(), noise_p.imag.copy()))
            for x, xh in zip(x_list, out.x_hat):
                scores.extend(min(metrics.psnr(x[r], xh.data[r]), metrics.PSNR_CAP_DB) for r in range(b))
    return float(np.mean(scores))


@dataclass
class StageResult:
    n: int
    parent_val_psnr: float
    matched_parent_val_psnr: float
    start_val_psnr: float
    final_val_psnr: float
    state: TrainState
    fit: FitResult
    checkpoint: Path | None = None


def progressive_finetune(base: TrainState, stages: int, train_ds: ImageDataset,
                         val_ds: ImageDataset, export_dir: str | os.PathLike | None = None,
                         parent_val_psnr: float | None = None) -> list[StageResult]:
    """Double the user count ``stages`` times, fine-tuning and exporting after each doubling."""
    if stages < 1:
        raise ContractError("stages must be >= 1")
    results = []
    state = base
    if parent_val_psnr is None:
        parent_val_psnr = validate(base, val_ds, tuples_for(base, train_ds, val_ds)[1])
    for _ in range(stages):
        child = doubled_state(state)
        train_t, val_t = tuples_for(child, train_ds, val_ds)
        matched = matched_parent_psnr(state, child, val_ds, val_t)
        fitted = fit(child, train_ds, val_ds, train_t, val_t)
        path = None
        if export_dir is not None:
            path = Path(export_dir) / f"n{child.system.n}"
            save_checkpoint(child, path)
        results.append(StageResult(child.system.n, parent_val_psnr, matched, fitted.initial_val_psnr,
                                   fitted.best_val_psnr, child, fitted, path))
        parent_val_psnr = fitted.best_val_psnr
        state = child
    return results


# --------------------------------------------------------------------------
# Checkpoints: manifest.json + params.bin (little-endian float64)
# --------------------------------------------------------------------------


def _float_or_none(x: float):
    return None if not math.isfinite(x) else x


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0

    def put(name, array, trainable):
        nonlocal offset
        arr = np.ascontiguousarray(array, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "trainable": bool(trainable)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    for name, t in state.named_tensors().items():
        put(name, t.data, t.requires_grad)
    for name in sorted(state.adam.m):
        put(f"adam.m.{name}", state.adam.m[name], False)
        put(f"adam.v.{name}", state.adam.v[name], False)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "n": state.system.n,
        "m": state.system.m,
        "system": state.system.to_dict(),
        "train_config": state.config.to_dict(),
        "training": {"epoch": state.epoch, "best_val_psnr": _float_or_none(state.best_val_psnr),
                     "since_improvement": state.since_improvement, "adam_step": state.adam.step},
        "rng": {k: s.get_state() for k, s in sorted(state.streams.items())},
        "tensors": entries,
        "total_bytes": offset,
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return path


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        blob = (path / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} manifest")
    if len(blob) != manifest.get("total_bytes"):
        raise CheckpointFormatError(f"{path}: params.bin has {len(blob)} bytes, "
                                    f"manifest expects {manifest.get('total_bytes')}")
    try:
        system = SystemConfig.from_dict(manifest["system"])
        config = TrainConfig(**manifest["train_config"])
        arrays = {}
        trainable = {}
        for e in manifest["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            end = e["offset"] + 8 * count
            if end > len(blob):
                raise CheckpointFormatError(f"{path}: tensor {e['name']} runs past end of params.bin")
            arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                              offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
            trainable[e["name"]] = e["trainable"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: corrupt manifest ({exc})") from exc
    if manifest["n"] != system.n or manifest["m"] != system.m:
        raise CheckpointFormatError(f"{path}: manifest n/m disagree with the system config")

    params = {name: Tensor(a, trainable[name], name) for name, a in arrays.items()
              if not name.startswith(("proj.", "adam."))}
    pairs = []
    for i in range(system.n):
        enc, dec = f"proj.enc.{i}", f"proj.dec.{i}"
        if enc not in arrays or dec not in arrays:
            raise CheckpointFormatError(f"{path}: missing projection pair {i}")
        pairs.append(ProjectionPair(Tensor(arrays[enc], trainable[enc]),
                                    Tensor(arrays[dec], trainable[dec]), system.m, system.n))
    codebook = CodebookState(system.n, system.m, pairs)
    adam = AdamState(manifest["training"]["adam_step"])
    for name, a in arrays.items():
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = a
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = a
    best = manifest["training"]["best_val_psnr"]
    state = TrainState(system, params, codebook, config, adam,
                       epoch=manifest["training"]["epoch"],
                       best_val_psnr=-math.inf if best is None else best,
                       since_improvement=manifest["training"]["since_improvement"],
                       streams={k: RngStream.from_state(s) for k, s in manifest["rng"].items()})
    return state
