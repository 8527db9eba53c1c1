"""Little-endian binary formats for checkpoints and curvature caches.

Checkpoint (``CRSP``)::

    magic "CRSP" | version u32 | layer count u32
    per layer: d_out u32 | d_in u32 | activation code u32 | W (d_out*d_in f64, column-major)

Curvature cache (``CRVC``)::

    magic "CRVC" | version u32 | layer count u32 | flags u32 | kind u32
    per layer: index u32 | d_in u32 | d_out u32 | sample_count u64 |
               A (d_in^2 f64, column-major) | S (d_out^2 f64, column-major)
    if flags & EKFAC: per layer lam_star (d_out x d_in) | U_out | U_in | lam_out | lam_in
    if flags & DENSE: dim u32 | C (dim^2 f64, column-major)

Dense kinds (GNH, Hessian) write zero A/S blocks and carry the matrix in
the dense section. Activation-covariance caches store ``S = I``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .curvature import (
    EKFAC,
    GNH,
    KFAC,
    ActivationCov,
    CurvatureModel,
    EkfacLayer,
    ExactHessian,
    KfacFactors,
    LayerFactors,
)
from .errors import ParseError, ValidationError
from .network import ACTIVATIONS, FeedForwardNet, Layer

CHECKPOINT_MAGIC = b"CRSP"
CACHE_MAGIC = b"CRVC"
VERSION = 1

FLAG_EKFAC = 1
FLAG_DENSE = 2
KIND_CODES = {"kfac": 0, "ekfac": 1, "actcov": 2, "gnh": 3, "hessian": 4}
KIND_BY_CODE = {v: k for k, v in KIND_CODES.items()}


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated file while reading {what}: need {n} bytes, "
                             f"{len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * count, what)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return np.ascontiguousarray(arr.reshape(shape, order="F")) if len(shape) > 1 else arr.reshape(shape)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ParseError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def _f64(a: np.ndarray) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes(order="F")


# --------------------------------------------------------------- checkpoint


def checkpoint_bytes(net: FeedForwardNet) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<III", layer.d_out, layer.d_in, ACTIVATIONS.index(layer.activation)))
        parts.append(_f64(layer.W))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> FeedForwardNet:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    count = r.u32("layer count")
    layers = []
    for i in range(count):
        at = r.pos
        d_out, d_in, code = r.u32("d_out"), r.u32("d_in"), r.u32("activation")
        if code >= len(ACTIVATIONS):
            raise ParseError(f"layer {i}: unknown activation code {code}", at + 8)
        layers.append(Layer(r.f64((d_out, d_in), f"layer {i} weights"), ACTIVATIONS[code]))
    r.done()
    try:
        return FeedForwardNet(layers)
    except ValidationError as exc:
        raise ParseError(f"inconsistent checkpoint: {exc}") from exc


def save_checkpoint(net: FeedForwardNet, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path: str | Path) -> FeedForwardNet:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ----------------------------------------------------------- curvature cache


def cache_bytes(model: CurvatureModel, sample_count: int = 0) -> bytes:
    """Serialize a curvature model; ``sample_count`` is used for dense and actcov kinds."""
    if isinstance(model, EKFAC):
        kind, factors = "ekfac", model.factors
    elif isinstance(model, KFAC):
        kind, factors = "kfac", model.factors
    elif isinstance(model, ActivationCov):
        kind = "actcov"
        factors = KfacFactors({l: LayerFactors(A, np.eye(model.d_out[l]), sample_count) for l, A in model.A.items()})
    elif isinstance(model, (GNH, ExactHessian)):
        kind = "gnh" if isinstance(model, GNH) else "hessian"
        factors = KfacFactors({l: LayerFactors(np.zeros((c, c)), np.zeros((r, r)), sample_count)
                               for l, (r, c) in zip(model.layers, model.shapes)})
    else:
        raise ValidationError(f"cannot serialize {type(model).__name__}")
    flags = (FLAG_EKFAC if kind == "ekfac" else 0) | (FLAG_DENSE if kind in ("gnh", "hessian") else 0)
    order = sorted(factors.layers)
    parts = [CACHE_MAGIC, struct.pack("<IIII", VERSION, len(order), flags, KIND_CODES[kind])]
    for l in order:
        f = factors.layers[l]
        parts.append(struct.pack("<IIIQ", l, f.d_in, f.d_out, f.count))
        parts.append(_f64(f.A))
        parts.append(_f64(f.S))
    if flags & FLAG_EKFAC:
        for l in order:
            c = model.corrections[l]  # type: ignore[union-attr]
            parts += [_f64(c.lam_star), _f64(c.U_out), _f64(c.U_in), _f64(c.lam_out), _f64(c.lam_in)]
    if flags & FLAG_DENSE:
        C = model.G if isinstance(model, GNH) else model.H  # type: ignore[union-attr]
        parts.append(struct.pack("<I", C.shape[0]))
        parts.append(_f64(C))
    return b"".join(parts)


def cache_from_bytes(data: bytes) -> CurvatureModel:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CACHE_MAGIC:
        raise ParseError(f"bad curvature cache magic {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise ParseError(f"unsupported cache version {version}", 4)
    count = r.u32("layer count")
    flags = r.u32("flags")
    code = r.u32("kind")
    if code not in KIND_BY_CODE:
        raise ParseError(f"unknown curvature kind code {code}", 16)
    kind = KIND_BY_CODE[code]
    layers: dict[int, LayerFactors] = {}
    order = []
    for i in range(count):
        l, d_in, d_out = r.u32("layer index"), r.u32("d_in"), r.u32("d_out")
        n = r.u64("sample count")
        A = r.f64((d_in, d_in), f"layer {l} A")
        S = r.f64((d_out, d_out), f"layer {l} S")
        layers[l] = LayerFactors(A, S, n)
        order.append(l)
    factors = KfacFactors(layers)
    model: CurvatureModel
    if flags & FLAG_EKFAC:
        corr = {}
        for l in order:
            f = layers[l]
            lam_star = r.f64((f.d_out, f.d_in), f"layer {l} lam_star")
            U_out = r.f64((f.d_out, f.d_out), f"layer {l} U_out")
            U_in = r.f64((f.d_in, f.d_in), f"layer {l} U_in")
            lam_out = r.f64((f.d_out,), f"layer {l} lam_out")
            lam_in = r.f64((f.d_in,), f"layer {l} lam_in")
            corr[l] = EkfacLayer(U_out, U_in, lam_star, lam_out, lam_in)
        model = EKFAC(factors, corr)
    elif kind == "actcov":
        model = ActivationCov({l: f.A for l, f in layers.items()}, {l: f.d_out for l, f in layers.items()})
    elif flags & FLAG_DENSE:
        at = r.pos
        dim = r.u32("dense dimension")
        shapes = tuple((layers[l].d_out, layers[l].d_in) for l in order)
        if dim != sum(a * b for a, b in shapes):
            raise ParseError(f"dense section dimension {dim} does not match layer shapes", at)
        C = r.f64((dim, dim), "dense curvature")
        model = GNH(C, tuple(order), shapes) if kind == "gnh" else ExactHessian(C, tuple(order), shapes)
    else:
        model = KFAC(factors)
    if kind == "ekfac" and not flags & FLAG_EKFAC:
        raise ParseError("EK-FAC cache without correction section", 12)
    r.done()
    return model


def save_cache(model: CurvatureModel, path: str | Path, sample_count: int = 0) -> None:
    Path(path).write_bytes(cache_bytes(model, sample_count))


def load_cache(path: str | Path) -> CurvatureModel:
    return cache_from_bytes(Path(path).read_bytes())
