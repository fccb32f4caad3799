"""A small reverse-mode differentiation engine for sequential CNNs.

Every network owns one contiguous parameter vector and one contiguous
gradient vector of the same length; each layer's weights and gradients are
views into slices of those vectors, so an optimizer step or an allreduce is a
single vector operation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax

from .errors import FreezeError, LabelError, NumericalError, ShapeError, StateError

LAYER_KINDS = ("conv2d", "maxpool2d", "linear", "relu", "sigmoid", "tanh", "scale", "softmax_out")
PARAM_KINDS = ("conv2d", "linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    in_maps: int = 0
    out_maps: int = 0
    in_dim: int = 0
    out_dim: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.kind in ("conv2d", "maxpool2d"):
            if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
                raise ShapeError(f"{self.kind}: kernel/stride must be positive, padding >= 0")
        if self.kind == "conv2d" and (self.in_maps < 1 or self.out_maps < 1):
            raise ShapeError("conv2d needs positive in_maps and out_maps")
        if self.kind == "linear" and self.out_dim < 1:
            raise ShapeError("linear needs a positive out_dim")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# --------------------------------------------------------------------------
# layers


class Layer:
    n_params = 0

    def __init__(self, spec: LayerSpec, in_shape: tuple, index: int):
        self.spec = spec
        self.index = index
        self.in_shape = tuple(in_shape)
        self.out_shape = self._out_shape(self.in_shape)
        self._cache = None

    def _out_shape(self, in_shape):
        return in_shape

    def bind(self, params, grads):
        pass

    def init(self, rng):
        pass

    def forward(self, x, cache=True):
        raise NotImplementedError

    def backward(self, dy, param_grads=True, input_grad=True):
        raise NotImplementedError

    def _check_input(self, x):
        if x.shape[1:] != self.in_shape:
            raise ShapeError(
                f"layer {self.index} ({self.spec.kind}) expects per-sample shape "
                f"{self.in_shape}, got {x.shape[1:]}"
            )

    def _cached(self):
        if self._cache is None:
            raise StateError(f"layer {self.index} ({self.spec.kind}): backward without forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self):
        return f"{type(self).__name__}({self.in_shape} -> {self.out_shape})"


def _glorot(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Conv2d(Layer):
    def _out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {self.index} (conv2d) needs maps x height x width input")
        c, h, w = in_shape
        if c != self.spec.in_maps:
            raise ShapeError(f"layer {self.index} (conv2d) expects {self.spec.in_maps} maps, got {c}")
        (kh, kw), (sh, sw), (ph, pw) = self.spec.kernel, self.spec.stride, self.spec.padding
        ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {self.index} (conv2d): empty output for input {in_shape}")
        return (self.spec.out_maps, ho, wo)

    @property
    def n_params(self):
        kh, kw = self.spec.kernel
        return self.spec.out_maps * self.spec.in_maps * kh * kw + self.spec.out_maps

    def bind(self, params, grads):
        kh, kw = self.spec.kernel
        o, c = self.spec.out_maps, self.spec.in_maps
        n_w = o * c * kh * kw
        self.weight = params[:n_w].reshape(o, c * kh * kw)
        self.bias = params[n_w:]
        self.d_weight = grads[:n_w].reshape(o, c * kh * kw)
        self.d_bias = grads[n_w:]

    def init(self, rng):
        kh, kw = self.spec.kernel
        fan_in = self.spec.in_maps * kh * kw
        fan_out = self.spec.out_maps * kh * kw
        self.weight[...] = _glorot(rng, self.weight.shape, fan_in, fan_out, self.weight.dtype)
        self.bias[...] = 0

    def forward(self, x, cache=True):
        self._check_input(x)
        n = x.shape[0]
        (kh, kw), (sh, sw), (ph, pw) = self.spec.kernel, self.spec.stride, self.spec.padding
        o, ho, wo = self.out_shape
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        y = cols @ self.weight.T + self.bias
        if cache:
            self._cache = (cols, xp.shape)
        return y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, dy, param_grads=True, input_grad=True):
        cols, padded_shape = self._cached()
        n = dy.shape[0]
        o, ho, wo = self.out_shape
        dyf = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if param_grads:
            self.d_weight += dyf.T @ cols
            self.d_bias += dyf.sum(axis=0)
        if not input_grad:
            return None
        (kh, kw), (sh, sw), (ph, pw) = self.spec.kernel, self.spec.stride, self.spec.padding
        c = self.spec.in_maps
        dcols = (dyf @ self.weight).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
        h, w = self.in_shape[1:]
        return dxp[:, :, ph : ph + h, pw : pw + w]


class MaxPool2d(Layer):
    """Max pooling without padding; gradient ties go to the first element of
    the window in row-major order."""

    def _out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {self.index} (maxpool2d) needs maps x height x width input")
        c, h, w = in_shape
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        ho, wo = conv_output_size(h, kh, sh, 0), conv_output_size(w, kw, sw, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {self.index} (maxpool2d): empty output for input {in_shape}")
        return (c, ho, wo)

    def forward(self, x, cache=True):
        self._check_input(x)
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        _, ho, wo = self.out_shape
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        flat = win.reshape(win.shape[:4] + (kh * kw,))
        arg = flat.argmax(axis=-1)
        if cache:
            self._cache = arg
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy, param_grads=True, input_grad=True):
        arg = self._cached()
        if not input_grad:
            return None
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        _, ho, wo = self.out_shape
        dx = np.zeros((dy.shape[0],) + self.in_shape, dtype=dy.dtype)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.where(arg == k, dy, 0)
        return dx


class Linear(Layer):
    """Fully connected layer; flattens any per-sample shape first."""

    def _out_shape(self, in_shape):
        in_dim = int(np.prod(in_shape))
        if self.spec.in_dim and self.spec.in_dim != in_dim:
            raise ShapeError(
                f"layer {self.index} (linear) declared in_dim {self.spec.in_dim}, input has {in_dim}"
            )
        self.in_dim = in_dim
        return (self.spec.out_dim,)

    @property
    def n_params(self):
        return self.spec.out_dim * self.in_dim + self.spec.out_dim

    def bind(self, params, grads):
        n_w = self.spec.out_dim * self.in_dim
        self.weight = params[:n_w].reshape(self.spec.out_dim, self.in_dim)
        self.bias = params[n_w:]
        self.d_weight = grads[:n_w].reshape(self.spec.out_dim, self.in_dim)
        self.d_bias = grads[n_w:]

    def init(self, rng):
        self.weight[...] = _glorot(rng, self.weight.shape, self.in_dim, self.spec.out_dim, self.weight.dtype)
        self.bias[...] = 0

    def forward(self, x, cache=True):
        self._check_input(x)
        x2 = x.reshape(x.shape[0], self.in_dim)
        if cache:
            self._cache = x2
        return x2 @ self.weight.T + self.bias

    def backward(self, dy, param_grads=True, input_grad=True):
        x2 = self._cached()
        if param_grads:
            self.d_weight += dy.T @ x2
            self.d_bias += dy.sum(axis=0)
        if not input_grad:
            return None
        return (dy @ self.weight).reshape((dy.shape[0],) + self.in_shape)


class ReLU(Layer):
    def forward(self, x, cache=True):
        self._check_input(x)
        if cache:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dy, param_grads=True, input_grad=True):
        mask = self._cached()
        return dy * mask if input_grad else None


class Sigmoid(Layer):
    def forward(self, x, cache=True):
        self._check_input(x)
        y = expit(x)
        if cache:
            self._cache = y
        return y

    def backward(self, dy, param_grads=True, input_grad=True):
        y = self._cached()
        return dy * y * (1 - y) if input_grad else None


class Tanh(Layer):
    def forward(self, x, cache=True):
        self._check_input(x)
        y = np.tanh(x)
        if cache:
            self._cache = y
        return y

    def backward(self, dy, param_grads=True, input_grad=True):
        y = self._cached()
        return dy * (1 - y * y) if input_grad else None


class Scale(Layer):
    """Multiplication by a fixed, non-trainable scalar."""

    def forward(self, x, cache=True):
        self._check_input(x)
        if cache:
            self._cache = True
        return x * x.dtype.type(self.spec.scale)

    def backward(self, dy, param_grads=True, input_grad=True):
        self._cached()
        return dy * dy.dtype.type(self.spec.scale) if input_grad else None


class SoftmaxOut(Layer):
    def forward(self, x, cache=True):
        self._check_input(x)
        y = softmax(x)
        if cache:
            self._cache = y
        return y

    def backward(self, dy, param_grads=True, input_grad=True):
        y = self._cached()
        if not input_grad:
            return None
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))


_LAYER_CLASSES = {
    "conv2d": Conv2d,
    "maxpool2d": MaxPool2d,
    "linear": Linear,
    "relu": ReLU,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
    "scale": Scale,
    "softmax_out": SoftmaxOut,
}


# --------------------------------------------------------------------------
# network


class Network:
    """Sequential network over a contiguous parameter vector.

    ``forward(x, logits=True)`` stops before a trailing ``softmax_out`` layer;
    ``backward`` then takes the gradient with respect to those logits.
    """

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_shape: Sequence[int],
        dtype=np.float32,
        seed: Optional[int] = 0,
        name: str = "",
    ):
        self.specs = list(specs)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.name = name
        self.frozen = False
        self.meta = {}
        shape = self.input_shape
        self.layers = []
        for i, spec in enumerate(self.specs):
            layer = _LAYER_CLASSES[spec.kind](spec, shape, i)
            self.layers.append(layer)
            shape = layer.out_shape
        self.output_shape = shape

        total = sum(layer.n_params for layer in self.layers)
        self.params = np.zeros(total, dtype=dtype)
        self.grads = np.zeros(total, dtype=dtype)
        self.slices = {}
        start = 0
        for layer in self.layers:
            stop = start + layer.n_params
            if layer.n_params:
                layer.bind(self.params[start:stop], self.grads[start:stop])
                self.slices[layer.index] = slice(start, stop)
            start = stop
        if seed is not None:
            self.initialize(seed)
        self._forward_mode = None

    # -- parameters ---------------------------------------------------------

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def param_layers(self):
        return [layer for layer in self.layers if layer.n_params]

    def initialize(self, seed: int):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)

    def zero_grad(self):
        self.grads[...] = 0

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.params).tobytes()).hexdigest()

    def copy(self, dtype=None) -> "Network":
        net = Network(self.specs, self.input_shape, dtype=dtype or self.dtype, seed=None, name=self.name)
        net.params[...] = self.params
        net.frozen = self.frozen
        net.meta = dict(self.meta)
        return net

    def freeze(self) -> "Network":
        self.frozen = True
        return self

    def unfreeze(self) -> "Network":
        self.frozen = False
        return self

    # -- computation --------------------------------------------------------

    @property
    def has_softmax(self) -> bool:
        return bool(self.layers) and self.layers[-1].spec.kind == "softmax_out"

    def forward(self, x, logits: bool = False, cache: bool = True):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network {self.name or ''} expects input {self.input_shape}, got {x.shape[1:]}")
        layers = self.layers[:-1] if (logits and self.has_softmax) else self.layers
        for layer in layers:
            x = layer.forward(x, cache=cache)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite activations after layer {layer.index} ({layer.spec.kind})")
        self._forward_mode = len(layers) if cache else None
        return x

    def backward(self, upstream, input_grad: bool = True):
        """Back-propagate ``upstream``; accumulates into ``grads`` unless frozen."""
        if self._forward_mode is None:
            raise StateError(f"backward called on {self.name or 'network'} without a cached forward")
        n_layers, self._forward_mode = self._forward_mode, None
        g = np.asarray(upstream, dtype=self.dtype)
        first_param = next((layer.index for layer in self.layers if layer.n_params), 0)
        for layer in reversed(self.layers[:n_layers]):
            need_input = input_grad or (not self.frozen and layer.index > first_param)
            g = layer.backward(g, param_grads=not self.frozen, input_grad=need_input)
            if g is None:
                break
        return g

    def predict(self, x, batch_size: int = 512, logits: bool = False):
        """Forward pass in batches without caching activations."""
        x = np.asarray(x)
        outs = [
            self.forward(x[i : i + batch_size], logits=logits, cache=False)
            for i in range(0, len(x), batch_size)
        ]
        if not outs:
            return np.zeros((0,) + self.output_shape, dtype=self.dtype)
        return np.concatenate(outs)

    def describe(self) -> str:
        rows = [("#", "kind", "kernel", "stride", "pad", "maps/dim", "output", "params")]
        for layer in self.layers:
            s = layer.spec
            if s.kind == "conv2d":
                io = f"{s.in_maps}->{s.out_maps}"
            elif s.kind == "linear":
                io = f"{layer.in_dim}->{s.out_dim}"
            elif s.kind == "scale":
                io = f"x{s.scale:g}"
            else:
                io = "-"
            spatial = s.kind in ("conv2d", "maxpool2d")
            rows.append((
                str(layer.index),
                s.kind,
                "x".join(map(str, s.kernel)) if spatial else "-",
                "x".join(map(str, s.stride)) if spatial else "-",
                "x".join(map(str, s.padding)) if s.kind == "conv2d" else "-",
                io,
                "x".join(map(str, layer.out_shape)),
                str(layer.n_params),
            ))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.append(f"input {'x'.join(map(str, self.input_shape))}, total params {self.n_params}")
        return "\n".join(lines)

    def __repr__(self):
        return f"Network({self.name!r}, {len(self.layers)} layers, {self.n_params} params)"


# --------------------------------------------------------------------------
# losses and optimizer


def softmax(x, axis=1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce_loss(logits, labels, normalizer: Optional[float] = None):
    """Mean (or ``sum / normalizer``) of ``-log softmax(logits)[label]``.

    Returns the loss and its gradient with respect to ``logits``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape} labels for a batch of {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    norm = n if normalizer is None else normalizer
    logp = log_softmax(logits.astype(np.float64), axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / norm
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), (grad / norm).astype(logits.dtype)


def mse_loss(pred, target, normalizer: Optional[float] = None):
    """Batch mean of the squared L2 distance ``||target - pred||^2``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    norm = pred.shape[0] if normalizer is None else normalizer
    diff = pred.astype(np.float64) - target
    loss = float((diff**2).sum() / norm)
    return loss, (2.0 * diff / norm).astype(pred.dtype)


LOSSES = {"ce": softmax_ce_loss, "mse": mse_loss}


def sgd_step(net, lr: float):
    """``params -= lr * grads``, then zero the gradients."""
    if getattr(net, "frozen", False):
        raise FreezeError(f"sgd_step on frozen network {getattr(net, 'name', '')!r}")
    net.params -= net.params.dtype.type(lr) * net.grads
    net.grads[...] = 0


class GradCheckResult(NamedTuple):
    max_rel_error: float
    n_checked: int
    n_kinks: int


def grad_check(
    model,
    x,
    loss_kind: str,
    target,
    n_samples: int = 200,
    eps: float = 1e-5,
    seed: int = 0,
    check_input: bool = False,
    abs_floor: float = 1e-6,
    tol: float = 1e-4,
    return_details: bool = False,
    **forward_kwargs,
):
    """Max relative error between back-propagated and central-difference gradients.

    ``model`` is anything with ``params``/``grads`` vectors and
    ``forward``/``backward``/``zero_grad`` (a :class:`Network` or a composite).
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``. Model parameters
    and gradients are restored on return.

    A sample whose error exceeds ``tol`` is looked at once more: when the
    loss is not smooth inside ``[-eps, eps]`` (a ReLU at zero, tied max-pool
    inputs) the central difference averages two different slopes, so the
    sample passes if the analytic value lies between the one-sided slopes.
    Such samples are counted in ``n_kinks``. With ``return_details`` a :class:`GradCheckResult`
    is returned instead of the bare maximum.
    """
    if model.params.dtype != np.float64:
        raise TypeError("grad_check requires a float64 model")
    loss_fn = LOSSES[loss_kind]
    x = np.array(x, dtype=np.float64, order="C")
    logits = loss_kind == "ce"

    def loss_at(inp):
        out = model.forward(inp, logits=logits, cache=False, **forward_kwargs)
        return loss_fn(out, target)[0]

    saved_grads = model.grads.copy()
    model.zero_grad()
    out = model.forward(x, logits=logits, **forward_kwargs)
    base, g = loss_fn(out, target)
    dx = model.backward(g)
    analytic = model.grads.copy()
    model.grads[...] = saved_grads

    rng = np.random.default_rng(seed)
    worst, checked, kinks = 0.0, 0, 0

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), abs_floor)

    def probe(vec, i, a):
        nonlocal worst, checked, kinks
        orig = vec[i]
        losses = {}
        for step in (eps, -eps):
            vec[i] = orig + step
            losses[step] = loss_at(x)
        vec[i] = orig
        num = (losses[eps] - losses[-eps]) / (2 * eps)
        err = rel(a, num)
        if err > tol:
            fwd = (losses[eps] - base) / eps
            bwd = (base - losses[-eps]) / eps
            lo, hi = min(fwd, bwd), max(fwd, bwd)
            # at a kink (ReLU at zero, tied max-pool inputs) the one-sided
            # slopes differ and any value between them is a valid subgradient
            if lo - tol * abs(lo) <= a <= hi + tol * abs(hi):
                kinks += 1
                err = 0.0
        checked += 1
        worst = max(worst, err)

    if model.params.size:
        picks = rng.choice(model.params.size, size=min(n_samples, model.params.size), replace=False)
        for i in picks:
            probe(model.params, i, analytic[i])
    if check_input:
        flat = x.reshape(-1)
        dx_flat = np.asarray(dx).reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in picks:
            probe(flat, i, dx_flat[i])
    if return_details:
        return GradCheckResult(float(worst), checked, kinks)
    return float(worst)
