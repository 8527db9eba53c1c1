"""Pretraining, the energy-threshold trade-off sweep, and sequential retention.

Every entry point is a pure function of its arguments and seeds: two calls
with the same inputs produce identical records and byte-identical CSV.
"""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import network as nw
from .curvature import HESSIAN_GUARD, build_curvature, kfac_estimate
from .data import LabeledDataset, synthetic_tasks
from .editor import EditConfig, edit_batch, edit_sequential
from .errors import SizeError, ValidationError
from .network import FeedForwardNet
from .projection import build_projector

CSV_HEADER = ("curvature", "gamma", "k", "cap_acc", "edit_acc", "retained_energy", "rebuilds", "wall_ms")
SWEEP_KINDS = ("hessian", "gnh", "kfac", "ekfac", "actcov", "none")
KIND_ALIASES = {"exact_hessian": "hessian", "activation_cov": "actcov", "ft": "none"}
HELDOUT_FRACTION = 1 / 6

# The sweep's optimizer is not pinned down by the reference protocol; SGD at
# this rate is the harness default and is written into every CSV header.
SWEEP_CONFIG = EditConfig(optimizer="sgd", learning_rate=0.05, max_steps=25, batch_size=32,
                          early_stop_loss=0.01, refresh_kfac=True)

# 50-example chunks need more than two minibatches per epoch to be learned
SEQUENTIAL_CONFIG = SWEEP_CONFIG.replace(batch_size=10, gamma=0.999, chunk_size=50, refresh_kfac=False)


def gamma_of(k: float) -> float:
    """Energy threshold ``1 - 10**-k``."""
    return 1.0 - 10.0 ** (-float(k))


def job_seed(kind: str, k: float, base_seed: int) -> int:
    """Stable per-job seed, independent of scheduling order and of ``PYTHONHASHSEED``."""
    digest = hashlib.sha256(f"{kind}|{float(k)!r}|{int(base_seed)}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class TradeoffRecord:
    curvature: str
    gamma: float
    k: float
    cap_acc: float
    edit_acc: float
    retained_energy: float
    rebuilds: int
    wall_ms: int = 0

    def __post_init__(self):
        for name in ("cap_acc", "edit_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v!r}")

    def row(self) -> list[str]:
        return [self.curvature, f"{self.gamma:.12g}", f"{self.k:g}", f"{self.cap_acc:.6f}",
                f"{self.edit_acc:.6f}", f"{self.retained_energy:.6f}", str(self.rebuilds), str(self.wall_ms)]


# ---------------------------------------------------------------- pretrain


@dataclass(frozen=True)
class PretrainReport:
    epochs: int
    train_acc: float
    test_acc: float | None


def pretrain(net: FeedForwardNet, dataset: LabeledDataset, epochs: int, lr: float,
             batch_size: int = 32, seed: int = 0, heldout: LabeledDataset | None = None
             ) -> tuple[FeedForwardNet, PretrainReport]:
    """Plain minibatch SGD on every layer, no early stopping."""
    if epochs < 0:
        raise ValidationError(f"epochs must be nonnegative, got {epochs}")
    if epochs == 0:
        trained = net.copy()
    else:
        cfg = EditConfig(optimizer="sgd", learning_rate=lr, max_steps=epochs, batch_size=batch_size,
                         early_stop_loss=0.0, seed=seed)
        trained, _ = edit_batch(net, dataset.inputs, dataset.labels, None, cfg)
    test = None if heldout is None else nw.accuracy(trained, heldout.inputs, heldout.labels)
    return trained, PretrainReport(epochs, nw.accuracy(trained, dataset.inputs, dataset.labels), test)


# ------------------------------------------------------------- desk task


@dataclass(frozen=True)
class DeskTask:
    """The synthetic capability/edit pair and the MLP trained on it."""

    seed: int = 0
    d: int = 40
    m: int = 10
    hidden: int = 64
    n_per_task: int = 6000
    sigma: float = 0.05
    overlap: float = 0.5
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    edit_examples: int = 1200  # before the held-out split


@dataclass
class PreparedTask:
    net0: FeedForwardNet
    cap_data: LabeledDataset   # whole capability task; split 1/6 with ``split_seed``
    edit_data: LabeledDataset  # edit pool; split 1/6 with ``split_seed``
    split_seed: int
    report: PretrainReport


def prepare_desk_task(task: DeskTask = DeskTask()) -> PreparedTask:
    A, B = synthetic_tasks(task.seed, task.n_per_task, task.d, task.m, task.sigma, task.overlap)
    train, test = A.split(HELDOUT_FRACTION, task.seed)
    net = FeedForwardNet.random([task.d, task.hidden, task.m], np.random.default_rng(task.seed))
    net0, report = pretrain(net, train, task.pretrain_epochs, task.pretrain_lr, seed=task.seed, heldout=test)
    return PreparedTask(net0, A, B.take(task.edit_examples), task.seed, report)


# ------------------------------------------------------------------- sweep


def _normalize_kind(kind: str) -> str:
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in SWEEP_KINDS:
        raise ValidationError(f"unknown curvature kind {kind!r}; choose from {SWEEP_KINDS}")
    return kind


def sweep_gamma(net0: FeedForwardNet, cap_data: LabeledDataset, edit_data: LabeledDataset,
                curvature_kinds: Sequence[str], k_grid: Sequence[float], *,
                config: EditConfig = SWEEP_CONFIG, mc_samples: int = 1, cap_samples: int = 1000,
                split_seed: int = 0, seed: int = 0, timing: bool = False,
                on_record: Callable[[TradeoffRecord], None] | None = None) -> list[TradeoffRecord]:
    """Edit ``net0`` once per (curvature kind, k) and record both accuracies.

    Curvature comes from the first ``cap_samples`` training examples of
    ``cap_data``; the edit uses the training part of ``edit_data``. Both
    accuracies are measured on the held-out sixth of each set. Projectors
    are rebuilt from curvature re-estimated at the current parameters
    whenever the tracked weights drift past ``config.drift_threshold``.
    The ``none`` kind is the unprojected fine-tuning control. ``wall_ms``
    is left at 0 unless ``timing`` is set, keeping the CSV deterministic.
    """
    kinds = [_normalize_kind(k) for k in curvature_kinds]
    if "hessian" in kinds and net0.n_params > HESSIAN_GUARD:
        raise SizeError(f"exact Hessian needs p <= {HESSIAN_GUARD}, network has {net0.n_params} parameters")
    cap_train, cap_test = cap_data.split(HELDOUT_FRACTION, split_seed)
    edit_train, edit_test = edit_data.split(HELDOUT_FRACTION, split_seed)
    cap_set = cap_train.take(cap_samples)
    records = []
    for kind in kinds:
        for k in k_grid:
            gamma = gamma_of(k)
            s = job_seed(kind, k, seed)
            rng = np.random.default_rng(s)
            cfg = config.replace(gamma=gamma, seed=s, joint=config.joint or kind == "hessian")
            start = time.perf_counter()
            if kind == "none":
                edited, tel = edit_batch(net0, edit_train.inputs, edit_train.labels, None, cfg)
                retained = 0.0
            else:
                def refresh(net, kind=kind, rng=rng):
                    return build_curvature(kind, net, cap_set.inputs, cap_set.labels, rng,
                                           cfg.tracked_layers, mc_samples)
                model = refresh(net0)
                cache = build_projector(model, gamma, cfg.joint)
                retained = float(np.mean(list(cache.retained_energy().values())))
                edited, tel = edit_batch(net0, edit_train.inputs, edit_train.labels, model, cfg,
                                         refresh=refresh, projector=cache)
            wall = int(round(1000 * (time.perf_counter() - start))) if timing else 0
            rec = TradeoffRecord(kind, gamma, float(k), nw.accuracy(edited, cap_test.inputs, cap_test.labels),
                                 nw.accuracy(edited, edit_test.inputs, edit_test.labels), retained,
                                 tel.rebuild_count, wall)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return records


def sweep_metadata(config: EditConfig, **extra) -> dict[str, object]:
    meta: dict[str, object] = {"optimizer": config.optimizer, "lr": config.learning_rate,
                               "epochs": config.max_steps, "batch_size": config.batch_size,
                               "early_stop": config.early_stop_loss, "drift": config.drift_threshold,
                               "refresh_kfac": config.refresh_kfac}
    meta.update(extra)
    return meta


def write_csv(records: Iterable[TradeoffRecord], out: str | Path | TextIO,
              metadata: dict[str, object] | None = None) -> None:
    """Schema-stable CSV; an optional leading ``#`` line carries run metadata."""
    buf = io.StringIO()
    if metadata:
        buf.write("# " + " ".join(f"{k}={metadata[k]}" for k in sorted(metadata)) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    if isinstance(out, (str, Path)):
        Path(out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        out.write(buf.getvalue())


def read_csv(path: str | Path) -> tuple[dict[str, str], list[TradeoffRecord]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta: dict[str, str] = {}
    if lines and lines[0].startswith("#"):
        for item in lines.pop(0)[1:].split():
            key, _, value = item.partition("=")
            meta[key] = value
    rows = list(csv.reader(lines))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValidationError(f"unexpected CSV header {rows[0] if rows else None}")
    recs = [TradeoffRecord(r[0], float(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]),
                           int(r[6]), int(r[7])) for r in rows[1:]]
    return meta, recs


# ------------------------------------------------------ matched comparisons


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    cap_acc: float
    edit_acc: float


def finetune_trajectory(net0: FeedForwardNet, edit_train: LabeledDataset, cap_test: LabeledDataset,
                        edit_test: LabeledDataset, config: EditConfig) -> list[TrajectoryPoint]:
    """Both accuracies after every step of unprojected fine-tuning (step 0 included)."""
    points = [TrajectoryPoint(0, nw.accuracy(net0, cap_test.inputs, cap_test.labels),
                              nw.accuracy(net0, edit_test.inputs, edit_test.labels))]

    def record(step, net):
        points.append(TrajectoryPoint(step, nw.accuracy(net, cap_test.inputs, cap_test.labels),
                                      nw.accuracy(net, edit_test.inputs, edit_test.labels)))

    edit_batch(net0, edit_train.inputs, edit_train.labels, None, config, on_step=record)
    return points


def matched_ft_point(trajectory: Sequence[TrajectoryPoint], edit_acc: float,
                     tol: float = 0.03) -> TrajectoryPoint | None:
    """Fine-tuning reference at a matched edit accuracy.

    The end of the fine-tuning run (same protocol as the projected run) is
    the reference when its edit accuracy is within ``tol``; otherwise the
    latest checkpoint that is. ``None`` when the run never gets within
    ``tol``.
    """
    for p in reversed(trajectory):
        if abs(p.edit_acc - edit_acc) <= tol:
            return p
    return None


def frontier_cap(records: Sequence[TradeoffRecord], edit_acc: float, tol: float = 0.03) -> float | None:
    """Best capability accuracy among ``records`` reaching at least ``edit_acc - tol`` edit accuracy."""
    caps = [r.cap_acc for r in records if r.edit_acc >= edit_acc - tol]
    return max(caps) if caps else None


@dataclass
class TradeoffResult:
    task: PretrainReport
    records: list[TradeoffRecord]
    trajectory: list[TrajectoryPoint]
    kfac_gain: float | None           # K-FAC cap minus matched FT cap at the test threshold
    ft_reference: TrajectoryPoint | None
    dominance: list[tuple[float, float, float | None]] = field(default_factory=list)  # (edit, actcov cap, gnh cap)

    @property
    def kfac_ok(self) -> bool:
        return self.kfac_gain is not None and self.kfac_gain >= 0.10

    @property
    def dominance_ok(self) -> bool:
        return len(self.dominance) == 3 and all(g is not None and g >= a - 0.02 for _, a, g in self.dominance)


def tradeoff_experiment(task: DeskTask = DeskTask(), kfac_k: float = 1.0,
                        compare_k: Sequence[float] = (1.0, 2.0, 3.0), mc_samples: int = 1,
                        config: EditConfig = SWEEP_CONFIG, seed: int = 0,
                        prepared: PreparedTask | None = None) -> TradeoffResult:
    """K-FAC vs matched fine-tuning at one threshold, and GNH vs activation covariance.

    The dominance check pairs each activation-covariance point with the
    best GNH point that reaches the same edit accuracy (within 0.03).
    """
    prep = prepared if prepared is not None else prepare_desk_task(task)
    cap_train, cap_test = prep.cap_data.split(HELDOUT_FRACTION, prep.split_seed)
    edit_train, edit_test = prep.edit_data.split(HELDOUT_FRACTION, prep.split_seed)
    kw = dict(config=config, mc_samples=mc_samples, split_seed=prep.split_seed, seed=seed)
    kfac = sweep_gamma(prep.net0, prep.cap_data, prep.edit_data, ["kfac"], [kfac_k], **kw)
    curves = sweep_gamma(prep.net0, prep.cap_data, prep.edit_data, ["gnh", "actcov"], list(compare_k), **kw)
    ft_cfg = config.replace(seed=job_seed("none", kfac_k, seed))
    traj = finetune_trajectory(prep.net0, edit_train, cap_test, edit_test, ft_cfg)
    ref = matched_ft_point(traj, kfac[0].edit_acc)
    gain = None if ref is None else kfac[0].cap_acc - ref.cap_acc
    gnh = [r for r in curves if r.curvature == "gnh"]
    act = [r for r in curves if r.curvature == "actcov"]
    dominance = [(r.edit_acc, r.cap_acc, frontier_cap(gnh, r.edit_acc)) for r in act]
    return TradeoffResult(prep.report, kfac + curves, traj, gain, ref, dominance)


# -------------------------------------------------------------- sequential


@dataclass
class SequentialResult:
    chunk1_after_chunk1: float
    chunk1_final: float
    cap_final: float
    ft_cap_final: float
    ft_chunk1_final: float
    chunk_edit_acc: list[float]  # accuracy on each chunk's edits after the final chunk

    @property
    def retention_ok(self) -> bool:
        return self.chunk1_final >= 0.8 * self.chunk1_after_chunk1

    @property
    def capability_ok(self) -> bool:
        return self.cap_final >= self.ft_cap_final + 0.10


def sequential_experiment(task: DeskTask = DeskTask(), n_chunks: int = 5, chunk_size: int = 50,
                          config: EditConfig | None = None, mc_samples: int = 1, cap_samples: int = 1000,
                          seed: int = 0, prepared: PreparedTask | None = None) -> SequentialResult:
    """Projected sequential editing vs unprojected sequential fine-tuning on the same chunks."""
    prep = prepared if prepared is not None else prepare_desk_task(task)
    cfg = config if config is not None else SEQUENTIAL_CONFIG.replace(chunk_size=chunk_size)
    cap_train, cap_test = prep.cap_data.split(HELDOUT_FRACTION, prep.split_seed)
    edit_train, _ = prep.edit_data.split(HELDOUT_FRACTION, prep.split_seed)
    edits = edit_train.take(n_chunks * chunk_size)
    if len(edits) < n_chunks * chunk_size:
        raise ValidationError(f"need {n_chunks * chunk_size} edit examples, have {len(edits)}")
    chunks = edits.chunks(chunk_size)
    pairs = [(c.inputs, c.labels) for c in chunks]
    rng = np.random.default_rng(job_seed("sequential", chunk_size, seed))
    cap_set = cap_train.take(cap_samples)
    initial = kfac_estimate(prep.net0, cap_set.inputs, rng, mc_samples=mc_samples)
    nets, _, _ = edit_sequential(prep.net0, pairs, initial, cfg.replace(seed=seed), rng, mc_samples)

    ft = prep.net0
    for i, (X, y) in enumerate(pairs):
        ft, _ = edit_batch(ft, X, y, None, cfg.replace(seed=seed + i))

    def acc(net, d):
        return nw.accuracy(net, d.inputs, d.labels)

    return SequentialResult(acc(nets[0], chunks[0]), acc(nets[-1], chunks[0]), acc(nets[-1], cap_test),
                            acc(ft, cap_test), acc(ft, chunks[0]), [acc(nets[-1], c) for c in chunks])
