"""Encoder / projector / predictor MLPs plus the client-ID and label heads.

Weights follow the ``(out, in)`` convention: a layer maps rows ``x`` to
``x @ W.T + b``. Hidden layers use ReLU; the last layer of every MLP is linear.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .numerics import (DEFAULT_EPS, ConfigurationError, row_l2_normalize,
                       row_l2_normalize_backward)

Layer = tuple[np.ndarray, np.ndarray]

CHECKPOINT_MAGIC = b"FCLP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    input_dim: int = 16
    encoder_hidden: int = 64
    z_dim: int = 32
    proj_hidden: int = 64
    proj_dim: int = 16
    pred_hidden: int = 0        # 0 disables the SimSiam predictor
    num_clients: int = 1
    num_classes: int = 10


@dataclass
class ModelParams:
    encoder: list[Layer]
    projector: list[Layer]
    predictor: list[Layer]
    uv_weights: np.ndarray
    label_head: Layer

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """All arrays in flatten order."""
        for group in ("encoder", "projector", "predictor"):
            for i, (w, b) in enumerate(getattr(self, group)):
                yield f"{group}.{i}.weight", w
                yield f"{group}.{i}.bias", b
        yield "uv.weight", self.uv_weights
        yield "label.weight", self.label_head[0]
        yield "label.bias", self.label_head[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec) -> "ModelParams":
        """New params with this bundle's shapes, filled from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ConfigurationError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self._rebuild(out)

    def map(self, fn: Callable[..., np.ndarray], *others: "ModelParams") -> "ModelParams":
        cols = zip(self.arrays(), *(o.arrays() for o in others))
        return self._rebuild([fn(*c) for c in cols])

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def slices(self) -> dict[str, slice]:
        """Name -> slice into the flat vector."""
        out, pos = {}, 0
        for name, a in self.named_arrays():
            out[name] = slice(pos, pos + a.size)
            pos += a.size
        return out

    def uv_row_slice(self, row: int) -> slice:
        start = self.slices()["uv.weight"].start
        d = self.uv_weights.shape[1]
        return slice(start + row * d, start + (row + 1) * d)

    def _rebuild(self, arrays: list[np.ndarray]) -> "ModelParams":
        it = iter(arrays)

        def take(n):
            return [(next(it), next(it)) for _ in range(n)]

        enc = take(len(self.encoder))
        proj = take(len(self.projector))
        pred = take(len(self.predictor))
        uv = next(it)
        label = (next(it), next(it))
        return ModelParams(enc, proj, pred, uv, label)


def _glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Layer:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in)), np.zeros(fan_out)


def random_unit_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return row_l2_normalize(rng.standard_normal((rows, cols)))


def init_params(dims: ModelDims, rng: np.random.Generator) -> ModelParams:
    enc = [_glorot_layer(rng, dims.input_dim, dims.encoder_hidden),
           _glorot_layer(rng, dims.encoder_hidden, dims.z_dim)]
    proj = [_glorot_layer(rng, dims.z_dim, dims.proj_hidden),
            _glorot_layer(rng, dims.proj_hidden, dims.proj_dim)]
    pred = []
    if dims.pred_hidden > 0:
        pred = [_glorot_layer(rng, dims.proj_dim, dims.pred_hidden),
                _glorot_layer(rng, dims.pred_hidden, dims.proj_dim)]
    uv = random_unit_rows(rng, dims.num_clients, dims.proj_dim)
    label = _glorot_layer(rng, dims.z_dim, dims.num_classes)
    return ModelParams(enc, proj, pred, uv, label)


def project_uv_rows(uv: np.ndarray, rows=None, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Rescale the selected rows (all by default) to unit L2 norm."""
    out = uv.copy()
    idx = slice(None) if rows is None else rows
    out[idx] = row_l2_normalize(out[idx], eps)
    return out


# -- forward / backward -----------------------------------------------------

def mlp_forward(layers: list[Layer], x: np.ndarray):
    """Returns the output and the per-layer (input, pre-activation) cache."""
    cache = []
    h = x
    for i, (w, b) in enumerate(layers):
        pre = h @ w.T + b
        cache.append((h, pre))
        h = pre if i == len(layers) - 1 else np.maximum(pre, 0.0)
    return h, cache


def mlp_backward(layers: list[Layer], cache, d_out: np.ndarray):
    grads: list[Layer] = [None] * len(layers)  # type: ignore[list-item]
    d = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_in, pre = cache[i]
        if i != len(layers) - 1:
            d = d * (pre > 0.0)
        grads[i] = (d.T @ h_in, d.sum(axis=0))
        d = d @ w
    return d, grads


@dataclass
class ForwardTrace:
    x: np.ndarray
    z: np.ndarray                 # encoder output (representation)
    projection: np.ndarray
    prediction: np.ndarray | None
    enc_cache: list = field(repr=False)
    proj_cache: list = field(repr=False)
    pred_cache: list | None = field(repr=False, default=None)

    def preactivations(self) -> Iterator[np.ndarray]:
        for c in (self.enc_cache, self.proj_cache, self.pred_cache or []):
            for _, pre in c:
                yield pre


def forward_encoder(params: ModelParams, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.encoder[0][0].shape[1]:
        raise ConfigurationError(
            f"input has shape {x.shape}, expected (*, {params.encoder[0][0].shape[1]})")
    z, enc_cache = mlp_forward(params.encoder, x)
    p, proj_cache = mlp_forward(params.projector, z)
    q, pred_cache = None, None
    if params.predictor:
        q, pred_cache = mlp_forward(params.predictor, p)
    return ForwardTrace(x, z, p, q, enc_cache, proj_cache, pred_cache)


def uv_logits(params: ModelParams, z_proj, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Cosine logits against the unit-norm client rows, in [-1, 1]."""
    return row_l2_normalize(z_proj, eps) @ params.uv_weights.T


def backward(params: ModelParams, trace: ForwardTrace, d_z=None, d_proj=None,
             d_pred=None) -> ModelParams:
    """Gradient of a scalar loss given its partial derivatives at the taps.

    ``d_z``, ``d_proj`` and ``d_pred`` are the loss gradients w.r.t. the
    encoder output, the projection and the predictor output. Head gradients
    are the caller's business; they come back as zeros here.
    """
    w, b = params.label_head
    pred = [(np.zeros_like(pw), np.zeros_like(pb)) for pw, pb in params.predictor]
    grads = ModelParams([], [], pred, np.zeros_like(params.uv_weights),
                        (np.zeros_like(w), np.zeros_like(b)))
    n = trace.x.shape[0]
    dp = np.zeros((n, trace.projection.shape[1])) if d_proj is None else np.array(d_proj, dtype=float)
    if d_pred is not None:
        if not params.predictor:
            raise ConfigurationError("predictor gradient given but model has no predictor")
        dp_extra, grads.predictor = mlp_backward(params.predictor, trace.pred_cache, d_pred)
        dp = dp + dp_extra
    dz, grads.projector = mlp_backward(params.projector, trace.proj_cache, dp)
    if d_z is not None:
        dz = dz + d_z
    _, grads.encoder = mlp_backward(params.encoder, trace.enc_cache, dz)
    return grads


def uv_head_backward(z_proj: np.ndarray, uv: np.ndarray, d_logits: np.ndarray,
                     eps: float = DEFAULT_EPS):
    """Gradients of the cosine UV head w.r.t. the projection and the UV rows."""
    u = row_l2_normalize(z_proj, eps)
    d_uv = d_logits.T @ u
    d_proj = row_l2_normalize_backward(z_proj, d_logits @ uv, eps)
    return d_proj, d_uv


def stop_gradient(x: np.ndarray) -> np.ndarray:
    """Read-only copy marking a branch that backward passes must not enter.

    Losses receiving such an array return no gradient for it; the flag only
    guards against accidental in-place updates.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


# -- checkpoint format ------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """``FCLP`` | version u32 | count u32 | per array: name, ndim, dims | f64 data."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    named = list(params.named_arrays())
    parts.append(struct.pack("<I", len(named)))
    for name, a in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
    parts.append(params.flatten().astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a parameter checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    shapes: dict[str, tuple[int, ...]] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + ln].decode("utf-8")
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<I", buf, pos)
        shapes[name] = struct.unpack_from(f"<{ndim}Q", buf, pos + 4)
        pos += 4 + 8 * ndim
    data = np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64)
    return _params_from_shapes(shapes).unflatten(data)


def _params_from_shapes(shapes: dict[str, tuple[int, ...]]) -> ModelParams:
    def group(prefix):
        layers, i = [], 0
        while f"{prefix}.{i}.weight" in shapes:
            layers.append((np.zeros(shapes[f"{prefix}.{i}.weight"]),
                           np.zeros(shapes[f"{prefix}.{i}.bias"])))
            i += 1
        return layers

    return ModelParams(group("encoder"), group("projector"), group("predictor"),
                       np.zeros(shapes["uv.weight"]),
                       (np.zeros(shapes["label.weight"]), np.zeros(shapes["label.bias"])))
