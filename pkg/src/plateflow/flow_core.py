"""Exact-likelihood normalizing flow built from affine coupling layers.

The flow maps feature space to latent space.  Each layer leaves the
coordinates selected by its mask untouched and transforms the others as::

    y_b = x_b * exp(s(x_a)) + t(x_a)

with ``s`` and ``t`` one-hidden-layer tanh networks.  The raw output of the
scale network is squashed by ``bound * tanh(raw / bound)`` so the per
coordinate log-scale never leaves ``[-bound, bound]``.  The log-determinant
of one layer is the sum of its scale outputs, so for the whole stack::

    log p(x) = log N(f(x); 0, I) + sum_k sum_j s_k(.)_j

Everything is plain numpy and every gradient is hand-derived; see
:func:`nll_and_grad`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DivergenceError, NumericError

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_SCALE_BOUND = 3.0

PARAM_NAMES = ("s_w1", "s_b1", "s_w2", "s_b2", "t_w1", "t_b1", "t_w2", "t_b2")

MAGIC = b"PFNF"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class CouplingLayer:
    """One affine coupling block.

    ``mask`` is boolean; ``True`` marks the pass-through half.  Weight
    matrices follow the ``(out, in)`` convention, so the scale network is
    ``s_w2 @ tanh(s_w1 @ x_a + s_b1) + s_b2``.
    """

    mask: np.ndarray
    s_w1: np.ndarray
    s_b1: np.ndarray
    s_w2: np.ndarray
    s_b2: np.ndarray
    t_w1: np.ndarray
    t_b1: np.ndarray
    t_w2: np.ndarray
    t_b2: np.ndarray

    @property
    def hidden(self) -> int:
        return self.s_w1.shape[0]

    def params(self) -> Tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in PARAM_NAMES)


@dataclass(frozen=True, eq=False)
class FlowModel:
    dim: int
    layers: Tuple[CouplingLayer, ...] = ()
    scale_bound: float = DEFAULT_SCALE_BOUND

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"flow dimension must be even and >= 2, got {self.dim}")
        half = self.dim // 2
        for k, layer in enumerate(self.layers):
            if layer.mask.shape != (self.dim,) or int(layer.mask.sum()) != half:
                raise ValueError(f"layer {k}: mask must select exactly {half} of {self.dim} coordinates")
            if k and np.array_equal(layer.mask, self.layers[k - 1].mask):
                raise ValueError(f"layer {k}: masks of consecutive layers must alternate")
            h = layer.hidden
            shapes = {
                "s_w1": (h, half), "s_b1": (h,), "s_w2": (half, h), "s_b2": (half,),
                "t_w1": (h, half), "t_b1": (h,), "t_w2": (half, h), "t_b2": (half,),
            }
            for name, shape in shapes.items():
                if getattr(layer, name).shape != shape:
                    raise ValueError(f"layer {k}: {name} has shape {getattr(layer, name).shape}, expected {shape}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> List[np.ndarray]:
        """All trainable arrays, layer by layer in ``PARAM_NAMES`` order."""
        return [p for layer in self.layers for p in layer.params()]

    def with_parameters(self, params: Sequence[np.ndarray], *, frozen: bool = True) -> "FlowModel":
        params = list(params)
        if len(params) != len(PARAM_NAMES) * len(self.layers):
            raise ValueError("parameter count does not match the model")
        layers = []
        for k, layer in enumerate(self.layers):
            chunk = params[k * len(PARAM_NAMES):(k + 1) * len(PARAM_NAMES)]
            values = {}
            for name, old, new in zip(PARAM_NAMES, layer.params(), chunk):
                arr = np.array(new, dtype=np.float64) if frozen else np.asarray(new, dtype=np.float64)
                if arr.shape != old.shape:
                    raise ValueError(f"layer {k}: {name} shape mismatch")
                if frozen:
                    arr.flags.writeable = False
                values[name] = arr
            layers.append(replace(layer, **values))
        return replace(self, layers=tuple(layers))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    """Pass-through mask selecting indices ``i`` with ``i % 2 == parity``."""
    return (np.arange(dim) % 2) == (parity % 2)


def init_flow(dim: int, n_layers: int, hidden: int = 32, seed: int = 0, *,
              scale_bound: float = DEFAULT_SCALE_BOUND,
              output_scale: float = 0.0) -> FlowModel:
    """Build a flow with seeded uniform hidden weights.

    With ``output_scale=0`` the output layers of both networks are zero and
    the flow starts as the identity.  A positive ``output_scale`` draws the
    output weights and all biases uniformly from ``±output_scale / sqrt(fan_in)``
    instead, which gives random non-trivial models for testing.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"flow dimension must be even and >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    half = dim // 2

    def uniform(shape, fan_in, scale=1.0):
        lim = scale / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    layers = []
    for k in range(n_layers):
        arrays = {}
        for net in ("s", "t"):
            arrays[f"{net}_w1"] = uniform((hidden, half), half)
            if output_scale > 0:
                arrays[f"{net}_b1"] = uniform((hidden,), half, output_scale)
                arrays[f"{net}_w2"] = uniform((half, hidden), hidden, output_scale)
                arrays[f"{net}_b2"] = uniform((half,), hidden, output_scale)
            else:
                arrays[f"{net}_b1"] = np.zeros(hidden)
                arrays[f"{net}_w2"] = np.zeros((half, hidden))
                arrays[f"{net}_b2"] = np.zeros(half)
        for arr in arrays.values():
            arr.flags.writeable = False
        mask = alternating_mask(dim, k)
        mask.flags.writeable = False
        layers.append(CouplingLayer(mask=mask, **arrays))
    return FlowModel(dim=dim, layers=tuple(layers), scale_bound=scale_bound)


# -- evaluation ------------------------------------------------------------

def _as_batch(model: FlowModel, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.dim:
        raise ValueError(f"expected vectors of dimension {model.dim}, got shape {x.shape}")
    return batch, single


def _nets(layer: CouplingLayer, xa: np.ndarray, bound: float):
    hs = np.tanh(xa @ layer.s_w1.T + layer.s_b1)
    s = bound * np.tanh((hs @ layer.s_w2.T + layer.s_b2) / bound)
    ht = np.tanh(xa @ layer.t_w1.T + layer.t_b1)
    t = ht @ layer.t_w2.T + layer.t_b2
    return s, t, hs, ht


def _check_finite(arr: np.ndarray, what: str, k: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what} in coupling layer {k}")


def _forward_batch(model: FlowModel, x: np.ndarray, keep: bool = False):
    z = x.copy()
    logdet = np.zeros(x.shape[0])
    caches = []
    for k, layer in enumerate(model.layers):
        m = layer.mask
        xa, xb = z[:, m], z[:, ~m]
        s, t, hs, ht = _nets(layer, xa, model.scale_bound)
        es = np.exp(s)
        yb = xb * es + t
        _check_finite(yb, "output", k)
        if keep:
            caches.append((xa, xb, s, es, hs, ht))
        z[:, ~m] = yb
        logdet += s.sum(axis=1)
    return z, logdet, caches


def forward(model: FlowModel, x) -> Tuple[np.ndarray, np.ndarray]:
    """Map features to latents.

    Accepts one vector of shape ``(D,)`` or a batch ``(N, D)``; returns the
    latent(s) and the log-determinant (a float or an ``(N,)`` array).
    """
    batch, single = _as_batch(model, x)
    z, logdet, _ = _forward_batch(model, batch)
    if single:
        return z[0], float(logdet[0])
    return z, logdet


def inverse(model: FlowModel, z) -> np.ndarray:
    batch, single = _as_batch(model, z)
    x = batch.copy()
    for k in range(model.n_layers - 1, -1, -1):
        layer = model.layers[k]
        m = layer.mask
        s, t, _, _ = _nets(layer, x[:, m], model.scale_bound)
        x[:, ~m] = (x[:, ~m] - t) * np.exp(-s)
        _check_finite(x, "inverse output", k)
    return x[0] if single else x


def base_log_prob(z) -> np.ndarray:
    """Log density of the standard normal, summed over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def log_prob(model: FlowModel, x):
    """Exact log density of ``x`` under the flow; larger means more typical."""
    batch, single = _as_batch(model, x)
    z, logdet, _ = _forward_batch(model, batch)
    lp = base_log_prob(z) + logdet
    if not np.all(np.isfinite(lp)):
        raise NumericError("non-finite log-probability")
    return float(lp[0]) if single else lp


def nll_loss(model: FlowModel, batch) -> float:
    """Mean negative log-likelihood of a non-empty batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise ValueError("nll_loss needs a non-empty batch")
    return float(-np.mean(log_prob(model, batch)))


def nll_and_grad(model: FlowModel, batch) -> Tuple[float, List[np.ndarray]]:
    """Mean NLL of ``batch`` and its gradient for every parameter.

    Gradients come back as a list aligned with ``model.parameters()``.
    """
    x, _ = _as_batch(model, batch)
    n = x.shape[0]
    if n == 0:
        raise ValueError("nll_and_grad needs a non-empty batch")
    z, logdet, caches = _forward_batch(model, x, keep=True)
    loss = float(-np.mean(base_log_prob(z) + logdet))
    bound = model.scale_bound

    gz = z / n                     # d(mean 0.5|z|^2)/dz
    gld = -1.0 / n                 # d loss / d logdet of each sample
    grads: List[List[np.ndarray]] = []
    for k in range(model.n_layers - 1, -1, -1):
        layer = model.layers[k]
        m = layer.mask
        xa, xb, s, es, hs, ht = caches[k]
        gyb = gz[:, ~m]
        gx = np.empty_like(gz)

        gs = gyb * xb * es + gld
        graw = gs * (1.0 - (s / bound) ** 2)
        gw2s = graw.T @ hs
        gb2s = graw.sum(axis=0)
        gpre = (graw @ layer.s_w2) * (1.0 - hs ** 2)
        gw1s = gpre.T @ xa
        gb1s = gpre.sum(axis=0)
        gxa = gpre @ layer.s_w1

        gt = gyb
        gw2t = gt.T @ ht
        gb2t = gt.sum(axis=0)
        gpre = (gt @ layer.t_w2) * (1.0 - ht ** 2)
        gw1t = gpre.T @ xa
        gb1t = gpre.sum(axis=0)
        gxa = gxa + gpre @ layer.t_w1

        gx[:, m] = gz[:, m] + gxa
        gx[:, ~m] = gyb * es
        gz = gx
        grads.append([gw1s, gb1s, gw2s, gb2s, gw1t, gb1t, gw2t, gb2t])
    grads.reverse()
    return loss, [g for layer_grads in grads for g in layer_grads]


# -- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    """Settings for :func:`fit`.

    ``lr_schedule`` is applied piecewise: the step budget is cut into
    ``len(lr_schedule)`` equal parts and part ``i`` uses ``lr_schedule[i]``.
    ``patience`` counts logging intervals without validation improvement.
    """

    steps: int = 3000
    batch_size: int = 64
    lr_schedule: Tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    optimizer: str = "adam"
    log_every: int = 10
    seed: int = 0
    val_fraction: float = 0.0
    patience: Optional[int] = None

    def lr_at(self, step: int) -> float:
        n = len(self.lr_schedule)
        idx = min(n - 1, step * n // max(self.steps, 1))
        return self.lr_schedule[idx]


@dataclass
class FitResult:
    model: FlowModel
    trace: List[float]
    val_trace: List[float] = field(default_factory=list)
    steps_run: int = 0
    stopped_early: bool = False


class _Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _SGD:
    def __init__(self, params):
        pass

    def step(self, params, grads, lr):
        for p, g in zip(params, grads):
            p -= lr * g


_OPTIMIZERS = {"adam": _Adam, "sgd": _SGD}


def fit(model: FlowModel, data, config: Optional[TrainConfig] = None, val_data=None) -> FitResult:
    """Maximum-likelihood training by minibatch gradient descent.

    ``trace[0]`` is the full training-set NLL before any update and one entry
    is appended every ``config.log_every`` steps (and at the last step).
    Validation data, given directly or carved out with ``val_fraction``,
    drives early stopping; the best validation parameters are returned.
    Runs are bit-reproducible for a fixed seed.
    """
    config = config or TrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ValueError(f"training data must have shape (N, {model.dim})")
    if config.optimizer not in _OPTIMIZERS:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    rng = np.random.default_rng(config.seed)
    if val_data is None and config.val_fraction > 0:
        order = rng.permutation(len(data))
        n_val = int(round(config.val_fraction * len(data)))
        val_data, data = data[order[:n_val]], data[order[n_val:]]
    if len(data) < 2 * model.dim:
        raise DataError(f"need at least {2 * model.dim} training vectors, got {len(data)}")
    if not np.all(np.isfinite(data)):
        raise DataError("training data contains non-finite values")
    if val_data is not None:
        val_data = np.asarray(val_data, dtype=np.float64)

    params = [np.array(p, dtype=np.float64) for p in model.parameters()]
    opt = _OPTIMIZERS[config.optimizer](params)
    current = model.with_parameters(params, frozen=False)

    def full_loss(m, arr):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return nll_loss(m, arr)
        except NumericError:
            return float("nan")

    trace = [full_loss(current, data)]
    if not math.isfinite(trace[0]):
        raise DivergenceError("initial loss is not finite", step=0)
    val_trace: List[float] = []
    best_val, best_params, stale = math.inf, None, 0
    if val_data is not None:
        best_val = full_loss(current, val_data)
        val_trace.append(best_val)
        best_params = [p.copy() for p in params]

    n = len(data)
    bs = min(config.batch_size, n)
    order, cursor = rng.permutation(n), 0
    steps_run, stopped = 0, False
    for step in range(config.steps):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        try:
            loss, grads = nll_and_grad(current, data[idx])
        except NumericError as exc:
            raise DivergenceError(f"step {step}: {exc}", step=step, last_loss=trace[-1]) from exc
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError(f"step {step}: loss became non-finite", step=step, last_loss=trace[-1])
        opt.step(params, grads, config.lr_at(step))
        steps_run = step + 1

        if steps_run % config.log_every == 0 or steps_run == config.steps:
            value = full_loss(current, data)
            if not math.isfinite(value):
                raise DivergenceError(f"step {steps_run}: training loss became non-finite",
                                      step=steps_run, last_loss=trace[-1])
            trace.append(value)
            if val_data is not None:
                v = full_loss(current, val_data)
                val_trace.append(v)
                if v < best_val:
                    best_val, best_params, stale = v, [p.copy() for p in params], 0
                else:
                    stale += 1
                    if config.patience is not None and stale >= config.patience:
                        stopped = True
                        break

    final = best_params if best_params is not None else params
    return FitResult(model=model.with_parameters(final), trace=trace, val_trace=val_trace,
                     steps_run=steps_run, stopped_early=stopped)


# -- serialization ---------------------------------------------------------
#
# Layout (all little-endian):
#   4s  magic "PFNF"
#   B   format version (1)
#   I   dim D
#   I   number of layers K
#   I   hidden width H
#   d   scale bound
#   then per layer:
#     D x uint8  mask (1 = pass-through)
#     float64 arrays s_w1 (H, D/2), s_b1 (H), s_w2 (D/2, H), s_b2 (D/2),
#                    t_w1, t_b1, t_w2, t_b2 (same shapes), C order

_HEADER = struct.Struct("<4sBIIId")


def flow_to_bytes(model: FlowModel) -> bytes:
    hidden = model.layers[0].hidden if model.layers else 0
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.dim, model.n_layers, hidden, model.scale_bound)]
    for layer in model.layers:
        if layer.hidden != hidden:
            raise ValueError("all layers must share one hidden width to be serialized")
        out.append(layer.mask.astype("u1").tobytes())
        for p in layer.params():
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def flow_from_bytes(blob: bytes) -> FlowModel:
    if len(blob) < _HEADER.size:
        raise DataError("flow file is truncated")
    magic, version, dim, n_layers, hidden, bound = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"bad flow file magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported flow file version {version}")
    half = dim // 2
    shapes = [(hidden, half), (hidden,), (half, hidden), (half,)] * 2
    pos = _HEADER.size
    layers = []
    try:
        for _ in range(n_layers):
            mask = np.frombuffer(blob, dtype="u1", count=dim, offset=pos).astype(bool)
            pos += dim
            arrays = {}
            for name, shape in zip(PARAM_NAMES, shapes):
                count = int(np.prod(shape))
                arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
                pos += 8 * count
                arr = arr.reshape(shape)
                arr.flags.writeable = False
                arrays[name] = arr
            mask.flags.writeable = False
            layers.append(CouplingLayer(mask=mask, **arrays))
    except ValueError as exc:
        raise DataError(f"flow file is truncated: {exc}") from exc
    if pos != len(blob):
        raise DataError("trailing bytes after flow parameters")
    try:
        return FlowModel(dim=dim, layers=tuple(layers), scale_bound=bound)
    except ValueError as exc:
        raise DataError(f"inconsistent flow file: {exc}") from exc


def save_flow(model: FlowModel, path) -> None:
    Path(path).write_bytes(flow_to_bytes(model))


def load_flow(path) -> FlowModel:
    return flow_from_bytes(Path(path).read_bytes())
