"""Minimal neural-network engine: layers, losses, optimizers, exact backprop.

Everything is plain ``numpy.ndarray``. Models default to float32; a float64
mode exists for high-precision gradient oracles. Layers follow the usual
contract: ``forward`` caches whatever the matching ``backward`` needs,
``backward`` fills ``self.grads`` and returns the gradient with respect to
the layer input.

The convolution / dense / pooling kernels are also exposed as standalone
functions (``conv2d_forward`` etc.) so that tiled executors can run them on
array slices and aggregate partial results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

PROB_EPS = 1e-12  # clamp floor for log() in cross-entropy


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """An array that must stay finite picked up a NaN or Inf."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; materialized by ``Model``.

    kind: "conv" | "maxpool" | "dense" | "flatten" | "relu"
    """

    kind: str
    kernel: Optional[tuple[int, int]] = None   # conv / maxpool window (h, w)
    filters: Optional[int] = None              # conv output channels
    units: Optional[int] = None                # dense output width
    stride: Optional[tuple[int, int]] = None   # conv only; defaults to (1, 1)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kernel is not None:
            d["kernel"] = list(self.kernel)
        if self.filters is not None:
            d["filters"] = self.filters
        if self.units is not None:
            d["units"] = self.units
        if self.stride is not None:
            d["stride"] = list(self.stride)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(
            kind=d["kind"],
            kernel=tuple(d["kernel"]) if d.get("kernel") else None,
            filters=d.get("filters"),
            units=d.get("units"),
            stride=tuple(d["stride"]) if d.get("stride") else None,
        )


def conv(kernel, filters, stride=None) -> LayerSpec:
    k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    s = None if stride is None else ((stride, stride) if isinstance(stride, int) else tuple(stride))
    return LayerSpec(kind="conv", kernel=k, filters=filters, stride=s)


def maxpool(size=2) -> LayerSpec:
    k = (size, size) if isinstance(size, int) else tuple(size)
    return LayerSpec(kind="maxpool", kernel=k)


def dense(units) -> LayerSpec:
    return LayerSpec(kind="dense", units=units)


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def relu() -> LayerSpec:
    return LayerSpec(kind="relu")


# ---------------------------------------------------------------------------
# Functional kernels (shared with the tiled executor)
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b=None) -> np.ndarray:
    out = x @ w
    if b is not None:
        out = out + b
    return out


def dense_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ w.T
    return dx, dw, db


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Return patches of shape (B*OH*OW, C*kh*kw) for a valid-padding conv."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :]            # (B, C, OH, OW, kh, kw)
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d_out_hw(h: int, w: int, kh: int, kw: int, sh: int, sw: int) -> tuple[int, int]:
    if kh > h or kw > w:
        raise ShapeMismatchError(f"conv kernel ({kh},{kw}) larger than input ({h},{w})")
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b=None, stride=(1, 1)) -> np.ndarray:
    """Valid-padding 2-d convolution. x: (B,C,H,W), w: (F,C,kh,kw) -> (B,F,OH,OW)."""
    bsz, c, h, wid = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatchError(f"conv channels: input {c} vs weight {cw}")
    sh, sw = stride
    oh, ow = conv2d_out_hw(h, wid, kh, kw, sh, sw)
    cols = _im2col(x, kh, kw, sh, sw)
    out = cols @ w.reshape(f, -1).T              # (B*OH*OW, F)
    out = out.reshape(bsz, oh, ow, f).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray, stride=(1, 1)):
    """Gradients of a valid-padding conv; returns (dx, dw, db).

    The dx scatter loops over whichever is smaller, kernel positions or
    output positions: small-kernel/large-map convs take the first path,
    the wide-kernel ensemble conv takes the second.
    """
    bsz, c, h, wid = x.shape
    f, _, kh, kw = w.shape
    sh, sw = stride
    oh, ow = dout.shape[2], dout.shape[3]
    cols = _im2col(x, kh, kw, sh, sw)                        # (B*OH*OW, C*kh*kw)
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)          # (B*OH*OW, F)
    dw = (dmat.T @ cols).reshape(f, c, kh, kw)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    if kh * kw <= oh * ow:
        for i in range(kh):
            for j in range(kw):
                # positions (p,q) of dout touch x[:, :, p*sh+i, q*sw+j]
                contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # (B,OH,OW,C)
                dx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += contrib.transpose(0, 3, 1, 2)
    else:
        dcols = (dmat @ w.reshape(f, -1)).reshape(bsz, oh, ow, c, kh, kw)
        for p in range(oh):
            for q in range(ow):
                dx[:, :, p * sh:p * sh + kh, q * sw:q * sw + kw] += dcols[:, p, q]
    return dx, dw, db


def maxpool2d_forward(x: np.ndarray, size=(2, 2)):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped. Returns (out, argmax) with argmax kept for backward."""
    ph, pw = size
    b, c, h, w = x.shape
    oh, ow = h // ph, w // pw
    xv = x[:, :, :oh * ph, :ow * pw]
    xv = xv.reshape(b, c, oh, ph, ow, pw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, ph * pw)
    idx = xv.argmax(axis=-1)
    out = np.take_along_axis(xv, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(dout: np.ndarray, argmax: np.ndarray, x_shape, size=(2, 2)) -> np.ndarray:
    ph, pw = size
    b, c, h, w = x_shape
    oh, ow = h // ph, w // pw
    flat = np.zeros((b, c, oh, ow, ph * pw), dtype=dout.dtype)
    np.put_along_axis(flat, argmax[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :oh * ph, :ow * pw] = (
        flat.reshape(b, c, oh, ow, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * ph, ow * pw)
    )
    return dx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    return np.eye(n_classes, dtype=dtype)[np.asarray(labels, dtype=np.int64)]


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean negative log-likelihood of probability rows against one-hot rows.

    Probabilities are clamped to [PROB_EPS, 1] before the log.
    """
    if probs.shape != onehot.shape:
        raise ShapeMismatchError(f"cross_entropy shapes {probs.shape} vs {onehot.shape}")
    p = np.clip(probs, PROB_EPS, 1.0)
    return float(-(onehot * np.log(p)).sum(axis=-1).mean())


def softmax_cross_entropy(logits: np.ndarray, onehot: np.ndarray):
    """Fused softmax + cross-entropy; returns (loss, dlogits)."""
    if logits.shape != onehot.shape:
        raise ShapeMismatchError(f"softmax_cross_entropy shapes {logits.shape} vs {onehot.shape}")
    p = softmax(logits)
    loss = cross_entropy(p, onehot)
    dlogits = (p - onehot) / logits.shape[0]
    return loss, dlogits.astype(logits.dtype, copy=False)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements; returns (loss, dpred)."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float((diff * diff).sum() / n)
    return loss, (2.0 / n) * diff


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class; parameter-free layers keep empty params/grads dicts."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.out_shape: tuple[int, ...] = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params["w"] = he_uniform(rng, (in_dim, out_dim), fan_in=in_dim, dtype=dtype)
        self.params["b"] = np.zeros(out_dim, dtype=dtype)
        self.out_shape = (out_dim,)
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError(f"dense expects (B,{self.in_dim}), got {x.shape}")
        self._x = x
        return dense_forward(x, self.params["w"], self.params["b"])

    def backward(self, dout):
        dx, dw, db = dense_backward(self._x, self.params["w"], dout)
        self.grads = {"w": dw, "b": db}
        return dx


class Conv2D(Layer):
    def __init__(self, in_shape, filters: int, kernel, stride, rng: np.random.Generator, dtype):
        super().__init__()
        c, h, w = in_shape
        kh, kw = kernel
        self.stride = stride or (1, 1)
        oh, ow = conv2d_out_hw(h, w, kh, kw, *self.stride)
        fan_in = c * kh * kw
        self.params["w"] = he_uniform(rng, (filters, c, kh, kw), fan_in=fan_in, dtype=dtype)
        self.params["b"] = np.zeros(filters, dtype=dtype)
        self.in_shape = tuple(in_shape)
        self.out_shape = (filters, oh, ow)
        self._x = None

    def forward(self, x):
        if x.shape[1:] != self.in_shape:
            raise ShapeMismatchError(f"conv expects (B,{self.in_shape}), got {x.shape}")
        self._x = x
        return conv2d_forward(x, self.params["w"], self.params["b"], self.stride)

    def backward(self, dout):
        dx, dw, db = conv2d_backward(self._x, self.params["w"], dout, self.stride)
        self.grads = {"w": dw, "b": db}
        return dx


class MaxPool2D(Layer):
    def __init__(self, in_shape, size):
        super().__init__()
        c, h, w = in_shape
        self.size = size
        self.in_shape = tuple(in_shape)
        self.out_shape = (c, h // size[0], w // size[1])
        self._argmax = None
        self._x_shape = None

    def forward(self, x):
        out, self._argmax = maxpool2d_forward(x, self.size)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        return maxpool2d_backward(dout, self._argmax, self._x_shape, self.size)


class Flatten(Layer):
    def __init__(self, in_shape):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.out_shape = (int(np.prod(in_shape)),)
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class ReLU(Layer):
    def __init__(self, in_shape):
        super().__init__()
        self.out_shape = tuple(in_shape)
        self._x = None

    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, dout):
        return relu_backward(self._x, dout)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    """An ordered stack of layers materialized from ``LayerSpec``s.

    Weight init is He-style uniform, driven by a generator derived from
    ``seed`` alone, so identical (specs, input_shape, seed, dtype) always
    yields bit-identical weights.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape, seed, dtype=np.float32):
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        cur = self.input_shape
        for spec in self.specs:
            if spec.kind == "conv":
                if len(cur) != 3:
                    raise ShapeMismatchError(f"conv needs (C,H,W) input, has {cur}")
                layer = Conv2D(cur, spec.filters, spec.kernel, spec.stride, rng, self.dtype)
            elif spec.kind == "maxpool":
                layer = MaxPool2D(cur, spec.kernel or (2, 2))
            elif spec.kind == "dense":
                if len(cur) != 1:
                    raise ShapeMismatchError(f"dense needs flat input, has {cur} (missing flatten?)")
                layer = Dense(cur[0], spec.units, rng, self.dtype)
            elif spec.kind == "flatten":
                layer = Flatten(cur)
            elif spec.kind == "relu":
                layer = ReLU(cur)
            else:
                raise ValueError(f"unknown layer kind: {spec.kind!r}")
            self.layers.append(layer)
            cur = layer.out_shape
        self.output_shape = cur

    def forward(self, x: np.ndarray, taps: Optional[Sequence[int]] = None):
        """Run the stack. With ``taps`` given, also return {layer_index: activation}."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(f"model expects (B,)+{self.input_shape}, got {x.shape}")
        collected = {}
        out = x
        for i, layer in enumerate(self.layers):
            out = layer.forward(out)
            if taps is not None and i in taps:
                collected[i] = out
        check_finite(out, "model output")
        if taps is not None:
            return out, collected
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = dout
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def parameters(self):
        """Stable (layer_index, name, array) listing of all parameters."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((i, name, layer.params[name]))
        return out

    def gradients(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((i, name, layer.grads[name]))
        return out

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def set_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        """Load weights from a {"<layer>.<name>": array} mapping."""
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                key = f"layer{i}.{name}"
                if key not in arrays:
                    raise KeyError(f"missing weight array {key}")
                arr = np.asarray(arrays[key], dtype=self.dtype)
                if arr.shape != layer.params[name].shape:
                    raise ShapeMismatchError(f"{key}: {arr.shape} vs {layer.params[name].shape}")
                layer.params[name] = arr

    def get_parameters(self) -> dict[str, np.ndarray]:
        return {f"layer{i}.{n}": p for i, n, p in self.parameters()}


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0

    def step(self, model: Model) -> None:
        for (_, _, p), (_, _, g) in zip(model.parameters(), model.gradients()):
            check_finite(g, "gradient")
            p -= self.lr * g
        self.step_count += 1


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m: dict[tuple[int, str], np.ndarray] = {}
        self._v: dict[tuple[int, str], np.ndarray] = {}

    def step(self, model: Model) -> None:
        self.step_count += 1
        t = self.step_count
        for (i, name, p), (_, _, g) in zip(model.parameters(), model.gradients()):
            check_finite(g, "gradient")
            key = (i, name)
            if key not in self._m:
                self._m[key] = np.zeros_like(p)
                self._v[key] = np.zeros_like(p)
            m, v = self._m[key], self._v[key]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer kind: {kind!r}")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def fit(model: Model, inputs: np.ndarray, targets: np.ndarray, *, loss: str,
        optimizer, epochs: int, batch_size: int, rng: np.random.Generator,
        n_classes: Optional[int] = None) -> list[float]:
    """Minibatch training with a seeded reshuffle each epoch.

    loss: "cross_entropy" (integer labels, fused softmax) or "mse".
    Returns the per-epoch mean loss trace. Raises DivergenceError when the
    loss goes non-finite, reporting the epoch it happened in.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if loss == "cross_entropy" and n_classes is None:
        raise ValueError("cross_entropy needs n_classes")
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = model.forward(inputs[idx])
            if loss == "cross_entropy":
                y = one_hot(targets[idx], n_classes, dtype=model.dtype)
                lval, dout = softmax_cross_entropy(out, y)
            elif loss == "mse":
                y = np.asarray(targets[idx], dtype=model.dtype).reshape(out.shape)
                lval, dout = mse_loss(out, y)
            else:
                raise ValueError(f"unknown loss: {loss!r}")
            if not np.isfinite(lval):
                raise DivergenceError(epoch)
            model.backward(dout)
            optimizer.step(model)
            total += lval * len(idx)
            seen += len(idx)
        trace.append(total / seen)
    return trace
