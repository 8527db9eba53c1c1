"""Projected fine-tuning loops for batch and sequential editing."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network as nw
from .curvature import (
    EKFAC,
    KFAC,
    CurvatureModel,
    KfacFactors,
    aggregate_factors,
    kfac_estimate,
    kind_of,
    model_layers,
    quadratic_form,
)
from .errors import DimensionError, ValidationError
from .network import FeedForwardNet
from .projection import ProjectorCache, build_projector, project_all

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass
class EditConfig:
    """Editing hyperparameters; defaults follow the reference LLM setup."""

    gamma: float = 0.9
    learning_rate: float = 5e-4
    max_steps: int = 25
    batch_size: int = 32
    early_stop_loss: float = 0.01
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tracked_layers: tuple[int, ...] | None = None
    drift_threshold: float = 0.25
    chunk_size: int = 100
    double_projection: bool = True
    joint: bool = False
    refresh_kfac: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tracked_layers is not None:
            self.tracked_layers = tuple(int(l) for l in self.tracked_layers)
        self.validate()

    def validate(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ValidationError(f"gamma must lie in (0, 1), got {self.gamma!r}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not self.drift_threshold > 0:
            raise ValidationError(f"drift_threshold must be positive, got {self.drift_threshold!r}")
        if self.max_steps < 0:
            raise ValidationError(f"max_steps must be nonnegative, got {self.max_steps!r}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be at least 1, got {self.batch_size!r}")
        if self.chunk_size < 1:
            raise ValidationError(f"chunk_size must be at least 1, got {self.chunk_size!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.early_stop_loss < 0:
            raise ValidationError(f"early_stop_loss must be nonnegative, got {self.early_stop_loss!r}")

    def replace(self, **changes) -> "EditConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class StepRecord:
    step: int
    epoch: int
    edit_loss: float
    quad_form: float
    delta_sq_norm: float
    proj_fraction: dict[int, float]


@dataclass
class EditTelemetry:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    rebuilds: list[int] = field(default_factory=list)
    lam_gamma: dict[int, float] = field(default_factory=dict)
    stopped_early: bool = False

    @property
    def rebuild_count(self) -> int:
        return len(self.rebuilds)


# --------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    kind: str
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(state: OptimizerState, grads: dict[int, np.ndarray], config: EditConfig,
                   project: Callable[[dict[int, np.ndarray]], dict[int, np.ndarray]] | None = None
                   ) -> dict[int, np.ndarray]:
    """Parameter deltas from already-projected gradients.

    For Adam the update is projected a second time through ``project``
    when given, since elementwise rescaling can leave the subspace.
    """
    lr = config.learning_rate
    if state.kind == "sgd":
        return {l: -lr * g for l, g in grads.items()}
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for l, g in grads.items():
        m = state.m.get(l)
        v = state.v.get(l)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[l], state.v[l] = m, v
        out[l] = -lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    if project is not None:
        out = project(out)
    return out


def drift_check(theta_now: np.ndarray, theta_ref: np.ndarray, threshold: float) -> bool:
    """True iff the relative L2 change exceeds ``threshold``."""
    theta_now = np.asarray(theta_now)
    theta_ref = np.asarray(theta_ref)
    if theta_now.shape != theta_ref.shape:
        raise DimensionError(f"parameter shapes differ: {theta_now.shape} vs {theta_ref.shape}")
    ref = float(np.linalg.norm(theta_ref))
    change = float(np.linalg.norm(theta_now - theta_ref))
    if ref == 0.0:
        return change > 0.0
    return change / ref > threshold


def _refreshes_on_drift(model: CurvatureModel, config: EditConfig) -> bool:
    if isinstance(model, (KFAC, EKFAC)):
        return config.refresh_kfac
    return True


# -------------------------------------------------------------- batch edit


def edit_batch(net: FeedForwardNet, X: np.ndarray, y: np.ndarray, curvature: CurvatureModel | None,
               config: EditConfig,
               refresh: Callable[[FeedForwardNet], CurvatureModel] | None = None,
               projector: ProjectorCache | None = None,
               on_step: Callable[[int, FeedForwardNet], None] | None = None,
               ) -> tuple[FeedForwardNet, EditTelemetry]:
    """Fine-tune the tracked layers with every gradient projected first.

    Runs up to ``config.max_steps`` epochs of shuffled minibatches and
    stops at an epoch boundary once the mean edit loss falls below
    ``config.early_stop_loss``. When ``refresh`` is given, drift beyond
    ``config.drift_threshold`` since the last build re-estimates the
    curvature at the current parameters (K-FAC kinds only with
    ``config.refresh_kfac``). A prebuilt ``projector`` may be supplied to
    skip the initial eigendecompositions.

    With ``curvature=None`` gradients are used unprojected (plain
    fine-tuning of ``config.tracked_layers``, or of every layer).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValidationError("edit set is empty")
    if len(X) != len(y):
        raise DimensionError(f"{len(X)} edit inputs but {len(y)} labels")
    if curvature is None:
        layers = tuple(sorted(config.tracked_layers)) if config.tracked_layers is not None \
            else tuple(range(len(net.layers)))
    else:
        layers = model_layers(curvature)
    if config.tracked_layers is not None and tuple(sorted(config.tracked_layers)) != tuple(layers):
        raise ValidationError(
            f"tracked layers {config.tracked_layers} do not match curvature layers {layers}")
    for l in layers:
        if not 0 <= l < len(net.layers):
            raise ValidationError(f"curvature layer {l} is not a layer of the network")

    net = net.copy()
    theta0 = net.flat_params(layers)
    theta_ref = theta0.copy()
    cache: ProjectorCache | None = None
    if curvature is not None:
        cache = projector if projector is not None else build_projector(curvature, config.gamma, config.joint)
        if cache.layers != tuple(layers):
            raise ValidationError("projector layers do not match curvature layers")
    telemetry = EditTelemetry(lam_gamma={} if cache is None else
                              {l: cache.block_for(l).lam_gamma for l in layers})
    state = OptimizerState(config.optimizer)
    rng = np.random.default_rng(config.seed)
    model_now = curvature
    can_refresh = curvature is not None and refresh is not None and _refreshes_on_drift(curvature, config)

    def project(grads):
        return grads if cache is None else project_all(cache, grads)

    def mean_loss() -> float:
        return float(np.mean(nw.cross_entropy(nw.forward(net, X), y)))

    step = 0
    n = len(X)
    for epoch in range(config.max_steps):
        loss = mean_loss()
        telemetry.epoch_losses.append(loss)
        if loss < config.early_stop_loss:
            telemetry.stopped_early = True
            break
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            trace = nw.forward(net, X[idx])
            batch_loss = float(np.mean(nw.cross_entropy(trace, y[idx])))
            grads = dict(zip(layers, nw.backward(net, trace, y[idx], layers)))
            proj = project(grads)
            second = project if (cache is not None and config.double_projection
                                 and config.optimizer == "adam") else None
            deltas = optimizer_step(state, proj, config, second)
            for l in layers:
                net.layers[l].W = net.layers[l].W + deltas[l]
            step += 1

            theta = net.flat_params(layers)
            d = theta - theta0
            delta_mats = nw.unflatten(d, [net.layers[l].W.shape for l in layers])
            fractions = {}
            for l in layers:
                gn = float(np.linalg.norm(grads[l]))
                fractions[l] = float(np.linalg.norm(proj[l])) / gn if gn > 0 else 0.0
            quad = 0.0 if curvature is None else quadratic_form(curvature, delta_mats)
            telemetry.steps.append(StepRecord(step, epoch, batch_loss, quad, float(d @ d), fractions))
            if on_step is not None:
                on_step(step, net)

            if can_refresh and drift_check(theta, theta_ref, config.drift_threshold):
                model_now = refresh(net)
                cache = build_projector(model_now, config.gamma, config.joint)
                theta_ref = theta.copy()
                telemetry.rebuilds.append(step)
                log.debug("rebuilt %s projector at step %d", kind_of(model_now), step)
    else:
        telemetry.epoch_losses.append(mean_loss())
    return net, telemetry


# --------------------------------------------------------- sequential edit


def edit_sequential(net: FeedForwardNet, chunks: Sequence[tuple[np.ndarray, np.ndarray]],
                    initial: KFAC | KfacFactors, config: EditConfig, rng: np.random.Generator,
                    mc_samples: int = 1, empirical_fisher: bool = False,
                    ) -> tuple[list[FeedForwardNet], KfacFactors, list[EditTelemetry]]:
    """Edit chunk by chunk, folding each chunk into the running K-FAC factors.

    Before chunk ``k`` the projector is built from the accumulated factors
    (capability data plus chunks ``1..k-1``); after editing, factors
    estimated on chunk ``k`` at the edited parameters are merged in by
    sample count. Optimizer moments restart with every chunk.
    """
    if not chunks:
        raise ValidationError("no edit chunks given")
    acc = (initial.factors if isinstance(initial, KFAC) else initial).copy()
    layers = tuple(sorted(acc.layers))
    nets: list[FeedForwardNet] = []
    telemetries: list[EditTelemetry] = []
    current = net.copy()
    for k, (Xc, yc) in enumerate(chunks):
        if len(Xc) == 0:
            nets.append(current.copy())
            telemetries.append(EditTelemetry())
            continue
        cfg = config.replace(seed=config.seed + k, tracked_layers=layers)
        current, tel = edit_batch(current, Xc, yc, KFAC(acc), cfg)
        labels = np.asarray(yc) if empirical_fisher else None
        chunk_factors = kfac_estimate(current, Xc, rng, layers, mc_samples, labels).factors
        acc = aggregate_factors(acc, chunk_factors)
        nets.append(current.copy())
        telemetries.append(tel)
    return nets, acc, telemetries
