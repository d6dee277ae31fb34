"""Command-line front end: ``pnoma {train,double,eval,fairness,subset,ortho,capacity,params}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema

from . import analysis
from .channel import DegenerateInputError
from .data import DataFormatError, ImageDataset, gen_synthetic, load_cifar10
from .model import SystemConfig
from .numcore import ContractError, NumericError, RngStream
from .training import (STREAM_DATA, CheckpointFormatError, TrainConfig, fit, load_checkpoint,
                       new_state, progressive_finetune, save_checkpoint, tuples_for, validate)

log = logging.getLogger("pnoma")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "PNOMA_SEED"
DEFAULT_SNRS = (0.0, 5.0, 10.0, 15.0, 20.0)

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "system": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": _pos_int,
                "rho_bar": {"oneOf": [{"type": "string", "pattern": r"^\s*\d+\s*(/\s*\d+\s*)?$"},
                                      _pos_num]},
                "p_bar": _pos_num,
                "width": _pos_int,
                "height": _pos_int,
                "c_in": _pos_int,
                "stages": _pos_int,
                "filters": _pos_int,
                "tx_power": _pos_num,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": _pos_num,
                "batch_size": _pos_int,
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": _pos_num,
                "snr_range_db": {"type": "array", "items": {"type": "number"},
                                 "minItems": 2, "maxItems": 2},
                "delta_db": {"type": "number", "minimum": 0},
                "patience": _pos_int,
                "max_epochs": _pos_int,
                "tuple_multiplier": _pos_int,
                "eval_batch_size": _pos_int,
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["synthetic", "cifar10"]},
                "path": {"type": "string"},
                "train_count": _pos_int,
                "val_count": _pos_int,
                "test_count": _pos_int,
            },
        },
        "channel": {"enum": ["awgn", "rayleigh"]},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "stages": _pos_int,
        "snr_db": {"type": "array", "items": {"type": "number"}, "minItems": 1},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    system: SystemConfig
    train: TrainConfig
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    channel: str = "awgn"
    seed: int = 0
    out: str = "runs"
    stages: int = 1
    snr_db: tuple[float, ...] = DEFAULT_SNRS


def load_config(path: str | os.PathLike, seed: int | None = None,
                channel: str | None = None) -> ExperimentConfig:
    """Read and schema-check a JSON experiment file.

    Seed precedence: ``seed`` argument, then ``PNOMA_SEED``, then the file.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    problems = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if problems:
        lines = [f"  {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in problems]
        raise ConfigError(f"{path}: config does not match schema\n" + "\n".join(lines))

    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    seed = int(doc.get("seed", 0)) if seed is None else seed
    channel = channel or doc.get("channel", "awgn")
    try:
        system = SystemConfig(**doc.get("system", {}))
        train_kw = dict(doc.get("train", {}))
        train = TrainConfig.toy(**train_kw, seed=seed, channel=channel)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig(system, train, doc.get("data", {"source": "synthetic"}), channel, seed,
                            doc.get("out", "runs"), doc.get("stages", 1),
                            tuple(doc.get("snr_db", DEFAULT_SNRS)))


SPLIT_CHILD = {"train": 0, "val": 1, "test": 2}
SPLIT_DEFAULT_COUNT = {"train": 64, "val": 32, "test": 32}


def load_split(exp: ExperimentConfig, split: str, system: SystemConfig | None = None) -> ImageDataset:
    system = system or exp.system
    src = exp.data.get("source", "synthetic")
    if src == "synthetic":
        count = exp.data.get(f"{split}_count", SPLIT_DEFAULT_COUNT[split])
        ds = gen_synthetic(count, system.width, system.height,
                           RngStream(exp.seed, STREAM_DATA).child(SPLIT_CHILD[split]), split)
    else:
        if "path" not in exp.data:
            raise ConfigError("data.path is required for cifar10")
        ds = load_cifar10(exp.data["path"], split, seed=exp.seed)
        limit = exp.data.get(f"{split}_count")
        if limit:
            ds = ImageDataset(ds.images[:limit], split, ds.source)
    if ds.shape != (system.c_in, system.height, system.width):
        raise ConfigError(f"{src} images are {ds.shape}, system expects "
                          f"{(system.c_in, system.height, system.width)}")
    return ds


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_svg(path: Path, series: dict[str, tuple[Sequence[float], Sequence[float]]],
              xlabel: str, ylabel: str, width: int = 480, height: int = 320) -> None:
    """Minimal line chart: one polyline per series, axis labels, min/max tick labels."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    ml, mr, mt, mb = 60, 20, 20, 50
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="15" y="{mt + ph / 2}" text-anchor="middle" '
           f'transform="rotate(-90 15 {mt + ph / 2})">{ylabel}</text>',
           f'<text x="{ml}" y="{mt + ph + 15}" font-size="10">{x0:.4g}</text>',
           f'<text x="{ml + pw}" y="{mt + ph + 15}" font-size="10" text-anchor="end">{x1:.4g}</text>',
           f'<text x="{ml - 4}" y="{mt + ph}" font-size="10" text-anchor="end">{y0:.4g}</text>',
           f'<text x="{ml - 4}" y="{mt + 10}" font-size="10" text-anchor="end">{y1:.4g}</text>']
    for idx, (name, (xs, ys)) in enumerate(series.items()):
        color = colors[idx % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" points="{coords}"><title>{name}</title></polyline>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 * (idx + 1)}" font-size="11" fill="{color}">{name}</text>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def _history_rows(history):
    return [[h["epoch"], repr(h["train_loss"]), repr(h["val_psnr"])] for h in history]


def _write_history(out: Path, name: str, history) -> None:
    write_rows(out / f"{name}.csv", ("epoch", "train_loss", "val_psnr"), _history_rows(history))
    write_svg(out / f"{name}.svg",
              {"val_psnr": ([h["epoch"] for h in history], [h["val_psnr"] for h in history])},
              "epoch", "validation PSNR (dB)")


def _parse_floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma separated list of numbers, got {text!r}") from exc


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma separated list of integers, got {text!r}") from exc


def _out_dir(args, exp: ExperimentConfig | None) -> Path:
    out = Path(args.out or (exp.out if exp else "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_config(args.config, seed=args.seed, channel=args.channel)


def _checkpoint(args, exp: ExperimentConfig | None = None):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    if not Path(args.checkpoint, "manifest.json").exists():
        raise CheckpointFormatError(f"no checkpoint at {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    if exp is not None:
        state.config = exp.train
    elif args.channel:
        state.config.channel = args.channel
    return state


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    exp = _experiment(args)
    out = _out_dir(args, exp)
    if args.checkpoint:
        state = _checkpoint(args, exp)
        if state.system != exp.system:
            raise ConfigError("checkpoint system does not match the config's system section")
    else:
        state = new_state(exp.system, exp.train)
    train_ds, val_ds = load_split(exp, "train"), load_split(exp, "val")
    train_t, val_t = tuples_for(state, train_ds, val_ds)
    result = fit(state, train_ds, val_ds, train_t, val_t)
    path = save_checkpoint(result.state, out / f"n{state.system.n}")
    _write_history(out, "history", result.history)
    print(f"n={state.system.n} best validation PSNR {result.best_val_psnr:.4f} dB -> {path}")
    return EXIT_OK


def cmd_double(args) -> int:
    exp = _experiment(args)
    parent = _checkpoint(args, exp)
    out = _out_dir(args, exp)
    stages = args.stages or exp.stages
    sys_cfg = parent.system
    train_ds, val_ds = load_split(exp, "train", sys_cfg), load_split(exp, "val", sys_cfg)
    parent_psnr = validate(parent, val_ds, tuples_for(parent, train_ds, val_ds)[1])
    results = progressive_finetune(parent, stages, train_ds, val_ds, export_dir=out,
                                   parent_val_psnr=parent_psnr)
    rows = []
    for r in results:
        _write_history(out, f"history_n{r.n}", r.fit.history)
        rows.append([r.n, repr(r.parent_val_psnr), repr(r.matched_parent_val_psnr),
                     repr(r.start_val_psnr), repr(r.final_val_psnr)])
        print(f"n={r.n} stage start {r.start_val_psnr:.4f} dB, final {r.final_val_psnr:.4f} dB -> {r.checkpoint}")
    write_rows(out / "stage_init.csv", ("n", "parent_val_psnr", "matched_parent_val_psnr",
                                        "stage_start_val_psnr", "final_val_psnr"), rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _experiment(args)
    state = _checkpoint(args, exp)
    out = _out_dir(args, exp)
    snrs = _parse_floats(args.snr) or list(exp.snr_db)
    test = load_split(exp, "test", state.system)
    rows = analysis.evaluate(state, test, snrs, threads=args.threads)
    analysis.write_metrics_csv(rows, out / "eval.csv")
    write_svg(out / "eval.svg", {f"n={state.system.n}": ([r.snr_db for r in rows], [r.psnr for r in rows])},
              "SNR (dB)", "PSNR (dB)")
    for r in rows:
        print(f"snr {r.snr_db:g} dB: PSNR {r.psnr:.4f} dB, SSIM {r.ssim:.4f}, MS-SSIM {r.ms_ssim:.4f}")
    return EXIT_OK


def cmd_fairness(args) -> int:
    exp = _experiment(args)
    state = _checkpoint(args, exp)
    out = _out_dir(args, exp)
    snrs = _parse_floats(args.snr) or list(exp.snr_db)
    test = load_split(exp, "test", state.system)
    rows, series = [], {}
    for snr in snrs:
        rep = analysis.fairness_report(state, test, snr)
        for u, p in enumerate(rep.per_user_psnr):
            rows.append([repr(float(snr)), u, repr(p), repr(rep.max_gap)])
            series.setdefault(f"user {u}", ([], []))
            series[f"user {u}"][0].append(snr)
            series[f"user {u}"][1].append(p)
        print(f"snr {snr:g} dB: max per-user gap {rep.max_gap:.4f} dB")
    write_rows(out / "fairness.csv", ("model/snr", "user", "test/psnr", "max_gap"), rows)
    write_svg(out / "fairness.svg", series, "SNR (dB)", "PSNR (dB)")
    return EXIT_OK


def cmd_subset(args) -> int:
    exp = _experiment(args)
    state = _checkpoint(args, exp)
    out = _out_dir(args, exp)
    if not args.active:
        raise ConfigError("--active is required for subset")
    active = _parse_ints(args.active)
    snrs = _parse_floats(args.snr) or list(exp.snr_db)
    test = load_split(exp, "test", state.system)
    rows = [analysis.subset_eval(state, active, test, snr) for snr in snrs]
    analysis.write_metrics_csv(rows, out / "subset.csv")
    write_svg(out / "subset.svg", {f"active {args.active}": (snrs, [r.psnr for r in rows])},
              "SNR (dB)", "PSNR (dB)")
    return EXIT_OK


def cmd_ortho(args) -> int:
    exp = _experiment(args)
    state = _checkpoint(args, exp)
    out = _out_dir(args, exp)
    snrs = _parse_floats(args.snr) or [10.0]
    test = load_split(exp, "test", state.system)
    angles = analysis.orthogonality_angles(state, test.images[:args.probes], snrs[0])
    analysis.write_angle_csvs(angles, out / "angles.csv", out / "angle_hist.csv")
    hist = analysis.angle_histogram(angles)
    write_svg(out / "angle_hist.svg", {"count": ([lo for lo, _, _ in hist], [c for _, _, c in hist])},
              "angle (deg)", "count")
    if angles.zero_norm:
        print(f"warning: zero-norm filters {angles.zero_norm} recorded as NaN", file=sys.stderr)
    return EXIT_OK


def cmd_capacity(args) -> int:
    out = _out_dir(args, None)
    rows = analysis.capacity_curves(args.n_max, args.p, args.sigma2, args.convention)
    analysis.write_capacity_csv(rows, out / "capacity.csv")
    ns = [r.n for r in rows]
    write_svg(out / "capacity.svg", {"MAC": (ns, [r.mac for r in rows]),
                                     "TDMA": (ns, [r.tdma for r in rows])},
              "number of users", "capacity (multiple of bandwidth)")
    return EXIT_OK


def cmd_params(args) -> int:
    state = _checkpoint(args)
    out = _out_dir(args, None)
    rep = analysis.param_report(state)
    write_rows(out / "params.csv", ("component", "trainable_parameters"), rep.rows())
    for name, count in rep.rows():
        print(f"{name:12s} {count}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "double": cmd_double, "eval": cmd_eval, "fairness": cmd_fairness,
    "subset": cmd_subset, "ortho": cmd_ortho, "capacity": cmd_capacity, "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnoma", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--checkpoint", help="checkpoint directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--snr", help="comma separated SNR list in dB")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--channel", choices=["awgn", "rayleigh"])
        p.add_argument("--threads", type=int, default=1)
        if name == "subset":
            p.add_argument("--active", help="comma separated user indices")
        if name == "double":
            p.add_argument("--stages", type=int, help="number of doublings")
        if name == "ortho":
            p.add_argument("--probes", type=int, default=8, help="number of probe images")
        if name == "capacity":
            p.add_argument("--n-max", type=int, default=16)
            p.add_argument("--p", type=float, default=1.0, help="per-user power")
            p.add_argument("--sigma2", type=float, default=1.0, help="noise variance")
            p.add_argument("--convention", default="fixed-per-user-power",
                           choices=list(analysis.CAPACITY_CONVENTIONS))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateInputError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
