"""Command-line interface: pretrain, cache-curvature, edit, seq-edit, sweep, verify.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 I/O or file
format problems, 3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import network as nw
from .curvature import KFAC, build_curvature, kind_of, model_layers
from .data import LabeledDataset, load_idx, synthetic_tasks
from .editor import EditConfig, edit_batch, edit_sequential
from .errors import CrispeError, ParseError, ValidationError
from .experiments import (
    HELDOUT_FRACTION,
    SWEEP_CONFIG,
    pretrain,
    sweep_gamma,
    sweep_metadata,
    write_csv,
)
from .fileformats import load_cache, load_checkpoint, save_cache, save_checkpoint
from .network import FeedForwardNet
from .verification import CHECKS, MUTATIONS, verify

log = logging.getLogger("crispe")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3
CURVATURE_KINDS = ("hessian", "gnh", "kfac", "ekfac", "actcov")
EXTRA_CONFIG_KEYS = {"curvature", "mc_samples", "empirical_fisher"}

# flag name -> EditConfig field
CONFIG_FLAGS = {
    "gamma": "gamma", "lr": "learning_rate", "steps": "max_steps", "batch_size": "batch_size",
    "early_stop": "early_stop_loss", "optimizer": "optimizer", "drift_threshold": "drift_threshold",
    "chunk_size": "chunk_size", "seed": "seed", "layers": "tracked_layers",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for I/O
        raise UsageError(f"{self.prog}: {message}")


def _layers(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--layers expects comma-separated integers, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser, base: EditConfig) -> None:
    g = p.add_argument_group("editing configuration (command line overrides --config)")
    g.add_argument("--config", type=Path, help="JSON file with EditConfig field names (default: none)")
    g.add_argument("--gamma", type=float, help=f"energy threshold in (0, 1) (default: {base.gamma})")
    g.add_argument("--lr", type=float, help=f"learning rate (default: {base.learning_rate})")
    g.add_argument("--steps", type=int, help=f"maximum epochs over the edit set (default: {base.max_steps})")
    g.add_argument("--batch-size", type=int, help=f"minibatch size (default: {base.batch_size})")
    g.add_argument("--early-stop", type=float,
                   help=f"stop once mean edit loss is below this (default: {base.early_stop_loss})")
    g.add_argument("--optimizer", choices=("sgd", "adam"), help=f"optimizer (default: {base.optimizer})")
    g.add_argument("--drift-threshold", type=float,
                   help=f"relative weight change that triggers a projector rebuild (default: {base.drift_threshold})")
    g.add_argument("--chunk-size", type=int, help=f"edits per sequential chunk (default: {base.chunk_size})")
    g.add_argument("--layers", type=_layers, help="comma-separated tracked layer indices (default: all layers)")
    g.add_argument("--seed", type=int, help=f"random seed (default: {base.seed})")
    g.add_argument("--refresh-kfac", action="store_true", default=None,
                   help=f"re-estimate K-FAC factors on drift (default: {base.refresh_kfac})")
    g.add_argument("--joint", action="store_true", default=None,
                   help=f"one dense projector across all tracked layers (default: {base.joint})")


def _add_curvature_flags(p: argparse.ArgumentParser, with_kind: bool = True) -> None:
    g = p.add_argument_group("curvature estimation")
    if with_kind:
        g.add_argument("--curvature", choices=CURVATURE_KINDS, help="curvature model (default: kfac)")
    g.add_argument("--mc-samples", type=int, help="sampled labels per input (default: 1)")
    g.add_argument("--empirical-fisher", action="store_true", default=None,
                   help="use the true labels instead of sampled ones (default: False)")
    g.add_argument("--cap-samples", type=int, default=1000,
                   help="capability examples used for curvature (default: 1000)")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data (synthetic task pair unless IDX files are given)")
    g.add_argument("--cap-idx", nargs=2, metavar=("IMAGES", "LABELS"), type=Path,
                   help="IDX files for the capability task (default: synthetic task A)")
    g.add_argument("--edit-idx", nargs=2, metavar=("IMAGES", "LABELS"), type=Path,
                   help="IDX files for the edit task (default: synthetic task B)")
    g.add_argument("--data-seed", type=int, default=0, help="seed for the synthetic tasks and splits (default: 0)")
    g.add_argument("--dim", type=int, default=40, help="synthetic feature dimension (default: 40)")
    g.add_argument("--classes", type=int, default=10, help="synthetic class count (default: 10)")
    g.add_argument("--n-per-task", type=int, default=6000, help="synthetic examples per task (default: 6000)")
    g.add_argument("--edit-samples", type=int, default=1000, help="edit examples used (default: 1000)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="crispe", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: False)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("pretrain", help="train an MLP on the capability task")
    p.add_argument("--out", type=Path, required=True, help="checkpoint to write (CRSP)")
    p.add_argument("--hidden", type=int, default=64, help="hidden width (default: 64)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default: 30)")
    p.add_argument("--lr", type=float, default=0.05, help="SGD learning rate (default: 0.05)")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size (default: 32)")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed (default: 0)")
    _add_data_flags(p)

    p = sub.add_parser("cache-curvature", help="estimate capability curvature and write a CRVC cache")
    p.add_argument("--checkpoint", type=Path, required=True, help="network checkpoint (CRSP)")
    p.add_argument("--out", type=Path, required=True, help="cache file to write (CRVC)")
    p.add_argument("--layers", type=_layers, help="comma-separated layer indices (default: all layers)")
    p.add_argument("--seed", type=int, default=0, help="label-sampling seed (default: 0)")
    p.add_argument("--config", type=Path, help="JSON file with curvature/mc_samples/empirical_fisher keys (default: none)")
    _add_curvature_flags(p)
    _add_data_flags(p)

    for name, help_text in (("edit", "batch edit (every gradient projected)"),
                            ("seq-edit", "sequential edit in chunks with streaming K-FAC factors")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", type=Path, required=True, help="network checkpoint (CRSP)")
        p.add_argument("--out", type=Path, help="edited checkpoint to write (default: none)")
        p.add_argument("--curvature-cache", type=Path, help="precomputed CRVC cache to reuse (default: none)")
        if name == "seq-edit":
            p.add_argument("--out-cache", type=Path, help="write the final aggregated factors (default: none)")
        _add_config_flags(p, EditConfig())
        _add_curvature_flags(p, with_kind=(name == "edit"))
        _add_data_flags(p)

    p = sub.add_parser("sweep", help="energy-threshold trade-off sweep to CSV")
    p.add_argument("--checkpoint", type=Path, required=True, help="pretrained checkpoint (CRSP)")
    p.add_argument("--out", type=Path, required=True, help="CSV file to write")
    p.add_argument("--kinds", default="kfac,ekfac,gnh,actcov,none",
                   help="comma-separated curvature kinds; 'none' is plain fine-tuning (default: kfac,ekfac,gnh,actcov,none)")
    p.add_argument("--k-grid", type=_floats, default=[0.1, 1.0, 2.0, 3.0, 5.0, 7.0],
                   help="exponents k with gamma = 1 - 10^-k (default: 0.1,1,2,3,5,7)")
    p.add_argument("--timing", action="store_true", help="fill wall_ms (makes the CSV nondeterministic) (default: False)")
    _add_config_flags(p, SWEEP_CONFIG)
    _add_curvature_flags(p, with_kind=False)
    _add_data_flags(p)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0, help="seed for the random instances (default: 0)")
    p.add_argument("--tolerance", type=float, help="replace every tolerance with this value (default: per check)")
    p.add_argument("--only", help="comma-separated check names (default: all)")
    p.add_argument("--mutation", choices=MUTATIONS, help=argparse.SUPPRESS)
    return parser


# ------------------------------------------------------------------ config


def _read_json(path: Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"config {path}: expected a JSON object")
    return data


def resolve_config(args: argparse.Namespace, base: EditConfig) -> tuple[EditConfig, dict[str, Any]]:
    """Merge defaults, the JSON config file and explicit flags, in that order."""
    fields = {f.name for f in dataclasses.fields(EditConfig)}
    values: dict[str, Any] = {}
    extras: dict[str, Any] = {"curvature": None, "mc_samples": 1, "empirical_fisher": False}
    if getattr(args, "config", None) is not None:
        for key, value in _read_json(args.config).items():
            if key in fields:
                values[key] = value
            elif key in EXTRA_CONFIG_KEYS:
                extras[key] = value
            else:
                raise ValidationError(f"config: unknown field {key!r}")
    for flag, name in CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    for flag in ("refresh_kfac", "joint"):
        if getattr(args, flag, None):
            values[flag] = True
    for key in EXTRA_CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            extras[key] = v
    if not isinstance(extras["mc_samples"], int) or extras["mc_samples"] < 1:
        raise ValidationError(f"mc_samples must be a positive integer, got {extras['mc_samples']!r}")
    if extras["curvature"] is not None and extras["curvature"] not in CURVATURE_KINDS:
        raise ValidationError(f"curvature must be one of {CURVATURE_KINDS}, got {extras['curvature']!r}")
    try:
        config = dataclasses.replace(base, **values)
    except TypeError as exc:
        raise ValidationError(f"config: {exc}") from exc
    return config, extras


# -------------------------------------------------------------------- data


def _tasks(args) -> tuple[LabeledDataset, LabeledDataset]:
    if args.cap_idx is None or args.edit_idx is None:
        A, B = synthetic_tasks(args.data_seed, args.n_per_task, args.dim, args.classes)
    if args.cap_idx is not None:
        A = load_idx(*args.cap_idx)
    if args.edit_idx is not None:
        B = load_idx(*args.edit_idx)
    return A, B


def _splits(args):
    A, B = _tasks(args)
    cap_train, cap_test = A.split(HELDOUT_FRACTION, args.data_seed)
    edit_train, edit_test = B.split(HELDOUT_FRACTION, args.data_seed)
    return cap_train, cap_test, edit_train, edit_test


def _curvature_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Separate streams for the initial estimate and drift refreshes.

    Keeping them apart makes an edit that loads a cached estimate follow
    exactly the same trajectory as one that computes it in process.
    """
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def _emit(obj: dict[str, Any]) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    for name in ("epochs", "hidden", "batch_size"):
        if getattr(args, name) < (0 if name == "epochs" else 1):
            raise ValidationError(f"{name} must be positive, got {getattr(args, name)}")
    if not args.lr > 0:
        raise ValidationError(f"lr must be positive, got {args.lr}")
    cap_train, cap_test, _, _ = _splits(args)
    net = FeedForwardNet.random([cap_train.dim, args.hidden, cap_train.n_classes], np.random.default_rng(args.seed))
    net, report = pretrain(net, cap_train, args.epochs, args.lr, args.batch_size, args.seed, cap_test)
    save_checkpoint(net, args.out)
    _emit({"train_acc": report.train_acc, "test_acc": report.test_acc, "epochs": report.epochs,
           "checkpoint": str(args.out)})
    return EXIT_OK


def cmd_cache_curvature(args) -> int:
    if args.config is not None:
        extras = _read_json(args.config)
        unknown = set(extras) - EXTRA_CONFIG_KEYS
        if unknown:
            raise ValidationError(f"config: unknown field {sorted(unknown)[0]!r}")
    else:
        extras = {}
    kind = args.curvature or extras.get("curvature", "kfac")
    mc = args.mc_samples or extras.get("mc_samples", 1)
    empirical = bool(args.empirical_fisher or extras.get("empirical_fisher", False))
    if kind not in CURVATURE_KINDS:
        raise ValidationError(f"curvature must be one of {CURVATURE_KINDS}, got {kind!r}")
    if mc < 1:
        raise ValidationError(f"mc_samples must be a positive integer, got {mc}")
    net = load_checkpoint(args.checkpoint)
    cap_train, _, _, _ = _splits(args)
    cap = cap_train.take(args.cap_samples)
    rng, _ = _curvature_rngs(args.seed)
    model = build_curvature(kind, net, cap.inputs, cap.labels, rng, args.layers, mc, empirical)
    save_cache(model, args.out, len(cap) * (mc if kind in ("kfac", "ekfac") else 1))
    _emit({"curvature": kind, "layers": list(model_layers(model)), "samples": len(cap), "cache": str(args.out)})
    return EXIT_OK


def cmd_edit(args) -> int:
    config, extras = resolve_config(args, EditConfig())
    net = load_checkpoint(args.checkpoint)
    cap_train, cap_test, edit_train, edit_test = _splits(args)
    cap = cap_train.take(args.cap_samples)
    edits = edit_train.take(args.edit_samples)
    rng, refresh_rng = _curvature_rngs(config.seed)
    kind = extras["curvature"]
    if args.curvature_cache is not None:
        model = load_cache(args.curvature_cache)
        if kind is not None and kind != kind_of(model):
            raise ValidationError(f"--curvature {kind} does not match the cached {kind_of(model)} model")
        kind = kind_of(model)
    else:
        kind = kind or "kfac"
        model = build_curvature(kind, net, cap.inputs, cap.labels, rng, config.tracked_layers,
                                extras["mc_samples"], extras["empirical_fisher"])
    layers = config.tracked_layers or model_layers(model)

    def refresh(current):
        return build_curvature(kind, current, cap.inputs, cap.labels, refresh_rng, layers,
                               extras["mc_samples"], extras["empirical_fisher"])

    edited, tel = edit_batch(net, edits.inputs, edits.labels, model, config, refresh=refresh)
    if args.out is not None:
        save_checkpoint(edited, args.out)
    _emit({
        "curvature": kind,
        "gamma": config.gamma,
        "steps": len(tel.steps),
        "stopped_early": tel.stopped_early,
        "rebuilds": tel.rebuild_count,
        "edit_loss": tel.epoch_losses[-1],
        "quad_form": tel.steps[-1].quad_form if tel.steps else 0.0,
        "cap_acc_before": nw.accuracy(net, cap_test.inputs, cap_test.labels),
        "cap_acc_after": nw.accuracy(edited, cap_test.inputs, cap_test.labels),
        "edit_acc_before": nw.accuracy(net, edit_test.inputs, edit_test.labels),
        "edit_acc_after": nw.accuracy(edited, edit_test.inputs, edit_test.labels),
    })
    return EXIT_OK


def cmd_seq_edit(args) -> int:
    config, extras = resolve_config(args, EditConfig())
    net = load_checkpoint(args.checkpoint)
    cap_train, cap_test, edit_train, _ = _splits(args)
    cap = cap_train.take(args.cap_samples)
    edits = edit_train.take(args.edit_samples)
    rng, _ = _curvature_rngs(config.seed)
    if args.curvature_cache is not None:
        model = load_cache(args.curvature_cache)
        if not isinstance(model, KFAC) or kind_of(model) != "kfac":
            raise ValidationError(f"sequential editing needs a kfac cache, got {kind_of(model)}")
    else:
        model = build_curvature("kfac", net, cap.inputs, cap.labels, rng, config.tracked_layers,
                                extras["mc_samples"], extras["empirical_fisher"])
    chunks = edits.chunks(config.chunk_size)
    nets, factors, tels = edit_sequential(net, [(c.inputs, c.labels) for c in chunks], model, config, rng,
                                          extras["mc_samples"], extras["empirical_fisher"])
    final = nets[-1]
    if args.out is not None:
        save_checkpoint(final, args.out)
    if args.out_cache is not None:
        save_cache(KFAC(factors), args.out_cache)
    _emit({
        "chunks": len(chunks),
        "chunk_acc_final": [nw.accuracy(final, c.inputs, c.labels) for c in chunks],
        "chunk_acc_when_edited": [nw.accuracy(n, c.inputs, c.labels) for n, c in zip(nets, chunks)],
        "cap_acc_before": nw.accuracy(net, cap_test.inputs, cap_test.labels),
        "cap_acc_after": nw.accuracy(final, cap_test.inputs, cap_test.labels),
        "factor_samples": factors.sample_count,
    })
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, extras = resolve_config(args, SWEEP_CONFIG)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    if not kinds or not args.k_grid:
        raise ValidationError("sweep needs at least one kind and one k value")
    for k in args.k_grid:
        if not k > 0:
            raise ValidationError(f"k values must be positive, got {k}")
    net = load_checkpoint(args.checkpoint)
    A, B = _tasks(args)
    records = sweep_gamma(net, A, B.take(int(round(args.edit_samples / (1 - HELDOUT_FRACTION)))), kinds,
                          args.k_grid, config=config, mc_samples=extras["mc_samples"],
                          cap_samples=args.cap_samples, split_seed=args.data_seed, seed=config.seed,
                          timing=args.timing,
                          on_record=lambda r: log.info("%s k=%g cap=%.3f edit=%.3f", r.curvature, r.k,
                                                       r.cap_acc, r.edit_acc))
    meta = sweep_metadata(config, mc_samples=extras["mc_samples"], data_seed=args.data_seed,
                          seed=config.seed)
    write_csv(records, args.out, meta)
    _emit({"rows": len(records), "csv": str(args.out)})
    return EXIT_OK


def cmd_verify(args) -> int:
    only = None
    if args.only:
        only = [s.strip() for s in args.only.split(",")]
        unknown = [s for s in only if s not in CHECKS]
        if unknown:
            raise ValidationError(f"unknown check {unknown[0]!r}")
    report = verify(args.seed, args.tolerance, args.mutation, only)
    print(report.format())
    return EXIT_OK if report.ok else EXIT_VERIFY


COMMANDS = {
    "pretrain": cmd_pretrain,
    "cache-curvature": cmd_cache_curvature,
    "edit": cmd_edit,
    "seq-edit": cmd_seq_edit,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CrispeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())
