"""Small differentiable core for fixed sequential networks.

Arrays are plain numpy ``ndarray`` objects.  Images and feature maps use
the ``(N, C, H, W)`` layout; dense activations are ``(N, D)``.  A network
is a list of :class:`LayerSpec` and its parameters live in a flat
``ParamSet`` dict keyed ``"<layer>.weight"`` / ``"<layer>.bias"``.
Batch-norm layers also keep ``running_mean`` / ``running_var`` entries;
these are buffers, never receive gradients, and are refreshed by
:func:`update_running_stats` after a training-mode forward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

ParamSet = Dict[str, np.ndarray]

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool2d", "avgpool-global", "dense", "ksparse")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BUFFERS = ("running_mean", "running_var")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    units: int = 0
    k_percent: float = 100.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "dense", "batchnorm")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tape:
    """Activation record produced by ``forward(..., record=True)``."""

    net: Sequence[LayerSpec]
    caches: List[tuple] = field(default_factory=list)
    outputs: Dict[str, np.ndarray] = field(default_factory=dict)
    params: Optional[ParamSet] = None
    train: bool = False
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def check_finite(x: np.ndarray, where: str = "") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where or 'tensor'}")
    return x


def validate_net(net: Sequence[LayerSpec]) -> None:
    names = [layer.name for layer in net]
    if len(set(names)) != len(names):
        raise ValueError(f"layer names must be unique: {names}")


# ---------------------------------------------------------------------------
# Parameter initialisation
# ---------------------------------------------------------------------------

def init_params(net: Sequence[LayerSpec], seed: int, dtype=np.float32) -> ParamSet:
    """He-uniform weights, zero biases."""
    validate_net(net)
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for layer in net:
        if layer.kind == "conv2d":
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            n_out = layer.out_channels
        elif layer.kind == "dense":
            fan_in = layer.in_channels
            shape = (layer.in_channels, layer.units)
            n_out = layer.units
        elif layer.kind == "batchnorm":
            c = layer.in_channels
            params[f"{layer.name}.weight"] = np.ones(c, dtype=dtype)
            params[f"{layer.name}.bias"] = np.zeros(c, dtype=dtype)
            params[f"{layer.name}.running_mean"] = np.zeros(c, dtype=dtype)
            params[f"{layer.name}.running_var"] = np.ones(c, dtype=dtype)
            continue
        else:
            continue
        limit = math.sqrt(6.0 / fan_in)
        params[f"{layer.name}.weight"] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        params[f"{layer.name}.bias"] = np.zeros(n_out, dtype=dtype)
    return params


def trainable_keys(net: Sequence[LayerSpec]) -> List[str]:
    return [f"{layer.name}.{p}" for layer in net if layer.has_params for p in ("weight", "bias")]


def cast_params(params: ParamSet, dtype) -> ParamSet:
    return {k: v.astype(dtype) for k, v in params.items()}


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _check_same_keys(a: ParamSet, b: ParamSet) -> None:
    if a.keys() != b.keys():
        raise ShapeError(f"parameter keys differ: {sorted(set(a) ^ set(b))}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeError(f"{k}: shape {a[k].shape} vs {b[k].shape}")


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, C*k*k, out_h*out_w), stride 1
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + out_h, j:j + out_w]
    return cols.reshape(n, c * k * k, out_h * out_w)


def conv2d_forward(x, weight, bias, stride=1):
    """Same-padded convolution; only stride 1 is supported."""
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    if stride != 1:
        raise ValueError("conv2d supports stride 1 only")
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, h, w)
    out = np.matmul(weight.reshape(o, -1), cols)
    out += bias[:, None]
    return out.reshape(n, o, h, w), (x.shape, cols, weight)


def conv2d_backward(cache, dout):
    (n, c, h, w), cols, weight = cache
    o, _, k, _ = weight.shape
    pad = k // 2
    dmat = dout.reshape(n, o, h * w)
    dweight = np.einsum("nop,nqp->oq", dmat, cols, optimize=True).reshape(weight.shape)
    dbias = dmat.sum(axis=(0, 2))
    dcols = np.matmul(weight.reshape(o, -1).T, dmat).reshape(n, c, k, k, h, w)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dweight, dbias


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, dout):
    return dout * mask


def maxpool2d_forward(x, size=2):
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool{size} needs spatial dims divisible by {size}, got {h}x{w}")
    out = x[:, :, ::size, ::size].copy()
    for i in range(size):
        for j in range(size):
            if i or j:
                np.maximum(out, x[:, :, i::size, j::size], out=out)
    return out, (x, out, size)


def maxpool2d_backward(cache, dout):
    # the first maximum (row-major within the window) receives the gradient
    x, out, size = cache
    dx = np.zeros_like(x, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(size):
        for j in range(size):
            hit = (x[:, :, i::size, j::size] == out) & ~taken
            dx[:, :, i::size, j::size] = dout * hit
            taken |= hit
    return dx


def avgpool_global_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def avgpool_global_backward(shape, dout):
    n, c, h, w = shape
    return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy()


def dense_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense expects (N, {weight.shape[0]}) input, got {x.shape}")
    return x @ weight + bias, x


def dense_backward(x, weight, dout):
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    return (0,), (1, -1)


def batchnorm_forward(x, gamma, beta, mean, var, eps=BN_EPS):
    """Per-channel normalisation with the given statistics, then affine."""
    _, shape = _bn_axes(x)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    return xhat * gamma.reshape(shape) + beta.reshape(shape), (xhat, inv, gamma)


def batch_stats(x):
    axes, _ = _bn_axes(x)
    return x.mean(axis=axes), x.var(axis=axes)


def batchnorm_backward(cache, dout, batch: bool):
    """``batch`` selects training mode, where the statistics depend on ``x``."""
    xhat, inv, gamma = cache
    axes, shape = _bn_axes(dout)
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    scale = (gamma * inv).reshape(shape)
    if not batch:
        return dout * scale, dgamma, dbeta
    m = dout.size // dbeta.size
    dx = scale / m * (m * dout - dbeta.reshape(shape) - xhat * dgamma.reshape(shape))
    return dx, dgamma, dbeta


def update_running_stats(params: ParamSet, tape: "Tape", momentum: float = BN_MOMENTUM) -> None:
    """Blend the batch statistics of a training-mode pass into the buffers (in place)."""
    for name, (mean, var) in tape.stats.items():
        rm, rv = params[f"{name}.running_mean"], params[f"{name}.running_var"]
        rm += (momentum * (mean - rm)).astype(rm.dtype)
        rv += (momentum * (var - rv)).astype(rv.dtype)


def support_size(k_percent: float, d: int) -> int:
    # decimal arithmetic so that e.g. 30% of 10 is 3, not ceil(3.0000000000000004)
    return math.ceil(Decimal(repr(float(k_percent))) * d / 100)


def ksparse_support(z: np.ndarray, k_percent: float) -> np.ndarray:
    """Boolean mask of the top ``ceil(k/100 * d)`` entries along the last axis.

    Ties go to the lowest index.
    """
    if not (0.0 < k_percent <= 100.0):
        raise ValueError(f"k_percent must lie in (0, 100], got {k_percent}")
    d = z.shape[-1]
    if d < 1:
        raise ShapeError("k-sparse needs a non-empty last dimension")
    m = support_size(k_percent, d)
    # stable sort on the negated values keeps equal entries in index order
    order = np.argsort(-z, axis=-1, kind="stable")[..., :m]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def ksparse_activate(z: np.ndarray, k_percent: float) -> np.ndarray:
    mask = ksparse_support(z, k_percent)
    return np.where(mask, z, np.zeros((), dtype=z.dtype))


# ---------------------------------------------------------------------------
# Network forward / backward
# ---------------------------------------------------------------------------

def forward(net: Sequence[LayerSpec], params: ParamSet, x: np.ndarray,
            record: bool = False, keep: Sequence[str] = (), train: Optional[bool] = None):
    """Run ``x`` through ``net``.

    Returns ``(output, tape)``; ``tape`` is ``None`` unless ``record``,
    ``train`` or ``keep`` is set.  ``keep`` names layers whose outputs are
    stored in ``tape.outputs``.  ``train`` (default: ``record``) makes
    batch-norm layers use batch statistics, which are left in
    ``tape.stats``; otherwise the running buffers are used.
    """
    train = record if train is None else train
    tape = Tape(net=net, params=params, train=train) if (record or keep or train) else None
    keep = set(keep)
    h = x
    for layer in net:
        if layer.kind == "conv2d":
            if h.ndim != 4:
                raise ShapeError(f"{layer.name}: conv needs 4-D input, got {h.shape}")
            h, cache = conv2d_forward(h, params[f"{layer.name}.weight"],
                                      params[f"{layer.name}.bias"], layer.stride)
        elif layer.kind == "batchnorm":
            if h.shape[1] != layer.in_channels:
                raise ShapeError(f"{layer.name}: expects {layer.in_channels} channels, got {h.shape}")
            if train:
                mean, var = batch_stats(h)
                tape.stats[layer.name] = (mean, var)
            else:
                mean, var = params[f"{layer.name}.running_mean"], params[f"{layer.name}.running_var"]
            h, cache = batchnorm_forward(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"],
                                         mean, var)
        elif layer.kind == "relu":
            h, cache = relu_forward(h)
        elif layer.kind == "maxpool2d":
            h, cache = maxpool2d_forward(h, layer.kernel)
        elif layer.kind == "avgpool-global":
            if h.ndim != 4:
                raise ShapeError(f"{layer.name}: global pool needs 4-D input, got {h.shape}")
            h, cache = avgpool_global_forward(h)
        elif layer.kind == "dense":
            h, cache = dense_forward(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        else:  # ksparse
            mask = ksparse_support(h, layer.k_percent)
            h, cache = np.where(mask, h, np.zeros((), dtype=h.dtype)), mask
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite activation after layer {layer.name}")
        if record:
            tape.caches.append(cache)
        if layer.name in keep:
            tape.outputs[layer.name] = h
    return h, tape


def backward(tape: Optional[Tape], upstream: np.ndarray,
             extra: Optional[Dict[str, np.ndarray]] = None):
    """Reverse sweep over a recorded tape.

    ``extra`` maps layer names to gradients that are added to the gradient
    of that layer's output (used for losses on intermediate features);
    ``upstream`` may then be ``None``.
    Returns ``(grad_input, grads)`` with one gradient per trainable tensor.
    """
    if tape is None or len(tape.caches) != len(tape.net):
        raise ValueError("backward needs a tape recorded with record=True")
    extra = extra or {}
    grads: ParamSet = {}
    g = upstream
    for layer, cache in zip(reversed(tape.net), reversed(tape.caches)):
        if layer.name in extra:
            g = extra[layer.name] if g is None else g + extra[layer.name]
        if g is None:
            # nothing flows above the deepest tapped layer
            continue
        if layer.kind == "conv2d":
            w = tape.params[f"{layer.name}.weight"]
            if g.shape[1] != w.shape[0]:
                raise ShapeError(f"{layer.name}: upstream gradient shape {g.shape}")
            g, dw, db = conv2d_backward(cache, g)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        elif layer.kind == "batchnorm":
            if g.shape != cache[0].shape:
                raise ShapeError(f"{layer.name}: upstream gradient shape {g.shape}")
            g, dw, db = batchnorm_backward(cache, g, tape.train)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        elif layer.kind == "relu":
            if g.shape != cache.shape:
                raise ShapeError(f"{layer.name}: upstream gradient shape {g.shape}")
            g = relu_backward(cache, g)
        elif layer.kind == "maxpool2d":
            g = maxpool2d_backward(cache, g)
        elif layer.kind == "avgpool-global":
            g = avgpool_global_backward(cache, g)
        elif layer.kind == "dense":
            w = tape.params[f"{layer.name}.weight"]
            if g.ndim != 2 or g.shape[1] != w.shape[1]:
                raise ShapeError(f"{layer.name}: upstream gradient shape {g.shape}")
            g, dw, db = dense_backward(cache, w, g)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        else:  # ksparse: straight-through on the kept support
            g = g * cache
    for layer in tape.net:
        if layer.has_params and f"{layer.name}.weight" not in grads:
            for p in ("weight", "bias"):
                grads[f"{layer.name}.{p}"] = np.zeros_like(tape.params[f"{layer.name}.{p}"])
    return g, grads


def output_shape(net: Sequence[LayerSpec], input_shape: Tuple[int, ...]) -> Dict[str, Tuple[int, ...]]:
    """Per-layer output shapes (without the batch axis) for ``input_shape``."""
    shapes = {}
    s = tuple(input_shape)
    for layer in net:
        if layer.kind == "conv2d":
            c, h, w = s
            if c != layer.in_channels:
                raise ShapeError(f"{layer.name}: expects {layer.in_channels} channels, got {c}")
            pad = layer.kernel // 2
            s = (layer.out_channels,
                 (h + 2 * pad - layer.kernel) // layer.stride + 1,
                 (w + 2 * pad - layer.kernel) // layer.stride + 1)
        elif layer.kind == "maxpool2d":
            c, h, w = s
            s = (c, h // layer.kernel, w // layer.kernel)
        elif layer.kind == "avgpool-global":
            s = (s[0],)
        elif layer.kind == "dense":
            s = (layer.units,)
        shapes[layer.name] = s
    return shapes


# ---------------------------------------------------------------------------
# Unit-length normalisation (used for metric embeddings)
# ---------------------------------------------------------------------------

def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(cache, dy):
    y, norm = cache
    return (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: ParamSet
    lr: float
    momentum: float

    @classmethod
    def for_params(cls, params: ParamSet, lr: float, momentum: float) -> "OptimizerState":
        return cls(zeros_like_params(params), lr, momentum)


def sgd_momentum_step(params: ParamSet, grads: ParamSet, state: OptimizerState) -> Tuple[ParamSet, OptimizerState]:
    """Classical momentum: ``v <- mu*v + g``, ``p <- p - lr*v`` (in place)."""
    _check_same_keys(params, state.velocity)
    for k in params:
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != params[k].shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} vs {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    for k in params:
        g = grads.get(k)
        if g is None:
            continue
        v = state.velocity[k]
        v *= state.momentum
        v += g.astype(v.dtype, copy=False)
        params[k] -= (state.lr * v).astype(params[k].dtype, copy=False)
    return params, state


def complement(alpha: float) -> float:
    """``1 - alpha`` evaluated on the decimal literal of ``alpha``.

    Keeps ``1 - 0.999`` equal to the float ``0.001`` rather than
    ``0.0010000000000000009``.
    """
    return float(Decimal(1) - Decimal(repr(float(alpha))))


def ema_update(theta_m: ParamSet, theta: ParamSet, alpha: float) -> ParamSet:
    """Return ``alpha * theta_m + (1 - alpha) * theta`` for every tensor."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_same_keys(theta_m, theta)
    if alpha == 0.0:
        return copy_params(theta)
    beta = complement(alpha)
    # theta_m + beta*(theta - theta_m) keeps theta_m == theta an exact fixed point
    return {k: theta_m[k] + beta * (theta[k] - theta_m[k]) for k in theta_m}


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def failures(self) -> List[str]:
        return [k for k, e in self.errors.items() if not e < self.tol]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, indices, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` at ``indices`` (in place perturbation)."""
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        old = arr[idx]
        arr[idx] = old + step
        fp = f()
        arr[idx] = old - step
        fm = f()
        arr[idx] = old
        out[n] = (fp - fm) / (2 * step)
    return out


def activation_pattern(*tapes: Tape) -> Tuple[bytes, ...]:
    """Which piece of each piecewise-linear layer (relu, k-sparse, maxpool) is active.

    Two inputs with the same pattern lie in one smooth region of the network.
    """
    out = []
    for tape in tapes:
        for layer, cache in zip(tape.net, tape.caches):
            if layer.kind in ("relu", "ksparse"):
                out.append(np.packbits(cache).tobytes())
            elif layer.kind == "maxpool2d":
                x, pooled, size = cache
                winner = np.full(pooled.shape, -1, dtype=np.int8)
                for i in range(size):
                    for j in range(size):
                        hit = (x[:, :, i::size, j::size] == pooled) & (winner < 0)
                        winner[hit] = i * size + j
                out.append(winner.tobytes())
    return tuple(out)


def numeric_grad_smooth(f: Callable[[], Tuple[float, tuple]], arr: np.ndarray, indices,
                        step: float = 1e-5, min_step: float = 1e-8) -> np.ndarray:
    """Central differences that never straddle a kink.

    ``f`` returns ``(loss, activation pattern)``.  When a probe changes the
    pattern the step shrinks tenfold; a coordinate still on a kink at
    ``min_step`` (where the derivative does not exist) comes back as NaN.
    """
    _, base = f()
    out = np.full(len(indices), np.nan)
    for n, idx in enumerate(indices):
        old = arr[idx]
        h = step
        while h >= min_step:
            arr[idx] = old + h
            fp, pp = f()
            arr[idx] = old - h
            fm, pm = f()
            arr[idx] = old
            if pp == base and pm == base:
                out[n] = (fp - fm) / (2 * h)
                break
            h /= 10
    return out


def _sample_indices(shape, n_samples, rng):
    size = int(np.prod(shape))
    if n_samples is None or n_samples >= size:
        flat = np.arange(size)
    else:
        flat = rng.choice(size, size=n_samples, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def grad_check(net: Sequence[LayerSpec], params: ParamSet,
               loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
               x: np.ndarray, step: float = 1e-5, tol: float = 1e-4,
               n_samples: Optional[int] = None, seed: int = 0,
               backward_fn: Callable = backward) -> GradCheckReport:
    """Compare ``backward`` against central differences, float64 only.

    ``loss_fn(output) -> (loss, dloss/doutput)``.  With ``n_samples`` set,
    only that many random coordinates per tensor are probed.
    """
    if x.dtype != np.float64 or any(p.dtype != np.float64 for p in params.values()):
        raise TypeError("grad_check runs in float64")
    out, tape = forward(net, params, x, record=True)
    _, dout = loss_fn(out)
    _, grads = backward_fn(tape, dout)
    rng = np.random.default_rng(seed)

    def f():
        return float(loss_fn(forward(net, params, x, train=True)[0])[0])

    errors = {}
    for k in trainable_keys(net):
        idx = _sample_indices(params[k].shape, n_samples, rng)
        num = numeric_grad(f, params[k], idx, step)
        ana = np.array([grads[k][i] for i in idx])
        errors[k] = relative_error(ana, num)
    return GradCheckReport(errors, tol)
