"""Layers with hand-written backward passes.

Activations use NHWC layout. Each layer caches what it needs during
``forward`` and consumes it in ``backward``; parameter gradients land in
``self.grads`` under the same keys as ``self.params``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, input_shape):
        raise NotImplementedError

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.grads = {}
        return self

    def spec(self) -> str:
        raise NotImplementedError


def he_uniform(rng, fan_in, shape, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, zero=False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if zero or rng is None:
            W = np.zeros((n_in, n_out), dtype=dtype)
        else:
            W = he_uniform(rng, n_in, (n_in, n_out), dtype)
        self.params = {"W": W, "b": np.zeros(n_out, dtype=dtype)}

    def forward(self, x, train=False):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"dense expects {self.n_in} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._x.reshape(-1, self.n_in)
        g = grad.reshape(-1, self.n_out)
        self.grads = {"W": x.T @ g, "b": g.sum(axis=0)}
        return grad @ self.params["W"].T

    def output_shape(self, input_shape):
        return (*input_shape[:-1], self.n_out)

    def spec(self):
        return f"dense:{self.n_out}"


class ReLU(Layer):
    def forward(self, x, train=False):
        self._on = x > 0
        return x * self._on

    def backward(self, grad):
        return grad * self._on

    def output_shape(self, input_shape):
        return input_shape

    def spec(self):
        return "relu"


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, input_shape):
        return (input_shape[0], int(np.prod(input_shape[1:])))

    def spec(self):
        return "flatten"


class Conv2D(Layer):
    """Square-kernel convolution, stride 1, zero 'same' padding, via im2col.

    Weight rows are ordered (kernel row, kernel col, input channel).
    """

    def __init__(self, c_in, c_out, kernel=3, rng=None, dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        fan_in = c_in * kernel * kernel
        W = he_uniform(rng, fan_in, (fan_in, c_out), dtype) if rng is not None else np.zeros((fan_in, c_out), dtype)
        self.params = {"W": W, "b": np.zeros(c_out, dtype=dtype)}

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeMismatch(f"conv expects (B, H, W, {self.c_in}), got {x.shape}")
        B, H, W, C = x.shape
        k, p = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((B, H, W, k * k * C), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                o = (i * k + j) * C
                cols[..., o:o + C] = xp[:, i:i + H, j:j + W, :]
        self._cols = cols.reshape(B * H * W, k * k * C)
        self._shape = x.shape
        out = self._cols @ self.params["W"] + self.params["b"]
        return out.reshape(B, H, W, self.c_out)

    def backward(self, grad, need_input_grad=True):
        B, H, W, C = self._shape
        k, p = self.k, self.k // 2
        g = grad.reshape(-1, self.c_out)
        self.grads = {"W": self._cols.T @ g, "b": g.sum(axis=0)}
        if not need_input_grad:
            return None
        dcols = (g @ self.params["W"].T).reshape(B, H, W, k * k * C)
        dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                o = (i * k + j) * C
                dxp[:, i:i + H, j:j + W, :] += dcols[..., o:o + C]
        return dxp[:, p:p + H, p:p + W, :]

    def output_shape(self, input_shape):
        return (*input_shape[:3], self.c_out)

    def spec(self):
        return f"conv{self.k}x{self.k}:{self.c_out}"


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    The gradient of each window goes to its first maximal element in
    row-major window order.
    """

    def __init__(self, ph=2, pw=2):
        super().__init__()
        self.ph, self.pw = ph, pw

    def _offsets(self):
        return [(i, j) for i in range(self.ph) for j in range(self.pw)]

    def forward(self, x, train=False):
        B, H, W, C = x.shape
        Ho, Wo = H // self.ph, W // self.pw
        if Ho == 0 or Wo == 0:
            raise ShapeMismatch(f"pool {self.ph}x{self.pw} larger than input {H}x{W}")
        x = x[:, :Ho * self.ph, :Wo * self.pw]
        out = None
        for i, j in self._offsets():
            s = x[:, i::self.ph, j::self.pw]
            out = s.copy() if out is None else np.maximum(out, s, out=out)
        self._x, self._out, self._shape = x, out, (B, H, W, C)
        return out

    def backward(self, grad):
        B, H, W, C = self._shape
        g = np.zeros((B, H, W, C), dtype=grad.dtype)
        taken = np.zeros(self._out.shape, dtype=bool)
        for i, j in self._offsets():
            hit = self._x[:, i::self.ph, j::self.pw] == self._out
            hit &= ~taken
            taken |= hit
            g[:, i:self._x.shape[1]:self.ph, j:self._x.shape[2]:self.pw] = grad * hit
        return g

    def output_shape(self, input_shape):
        B, H, W, C = input_shape
        return (B, H // self.ph, W // self.pw, C)

    def spec(self):
        return f"maxpool{self.ph}x{self.pw}"


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax_cross_entropy(logits, y):
    """Mean cross-entropy of integer labels under softmax(logits); returns (loss, dlogits)."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def prob_cross_entropy(p, y, eps=1e-7):
    """Mean cross-entropy for models that output probabilities directly.

    The target-class probability is clipped to [eps, 1]; returns (loss, dp).
    """
    n = p.shape[0]
    py = p[np.arange(n), y]
    clipped = np.clip(py, eps, 1.0)
    loss = -np.log(clipped).mean()
    grad = np.zeros_like(p)
    live = (py >= eps) & (py <= 1.0)
    grad[np.arange(n), y] = np.where(live, -1.0 / (n * clipped), 0.0)
    return float(loss), grad


def build_layer(token: str, in_shape, rng, dtype):
    """Instantiate one body layer from a spec token such as ``conv3x3:16``."""
    if token == "relu":
        return ReLU()
    if token == "flatten":
        return Flatten()
    if token.startswith("maxpool"):
        ph, pw = (int(v) for v in token[len("maxpool"):].split("x"))
        return MaxPool2D(ph, pw)
    if token.startswith("conv"):
        geom, maps = token[len("conv"):].split(":")
        kh, kw = (int(v) for v in geom.split("x"))
        if kh != kw:
            raise ValueError(f"only square kernels are supported: {token}")
        return Conv2D(in_shape[-1], int(maps), kh, rng=rng, dtype=dtype)
    if token.startswith("dense:"):
        return Dense(in_shape[-1], int(token.split(":")[1]), rng=rng, dtype=dtype)
    raise ValueError(f"unknown layer token {token!r}")
