"""Minimal feed-forward network substrate: layers, backprop, Adam.

Everything is float32 numpy. Layers cache their forward inputs so a
subsequent backward() can produce input gradients and accumulate parameter
gradients. Gradients accumulate until zero_grad() is called, so two losses
can share an encoder stack.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Input shape incompatible with a layer configuration."""


class GraphStateError(RuntimeError):
    """backward() called without a preceding forward()."""


class NumericsError(FloatingPointError):
    """A non-finite value appeared inside a layer."""


def _check_finite(arr, layer, phase):
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {phase} of layer '{layer}'")


class Param:
    """A trainable tensor with a paired same-shape gradient slot."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)


def glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Layer:
    name = "layer"

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def params(self):
        return []


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, name="dense"):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.name = name
        self.W = Param(f"{name}.W", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.b = Param(f"{name}.b", np.zeros(n_out, dtype=DTYPE))
        self._x = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ShapeError(
                f"layer '{self.name}': expected input width {self.n_in}, got {x.shape[1]}"
            )
        self._x = x
        y = x @ self.W.value + self.b.value
        _check_finite(y, self.name, "forward")
        return y

    def backward(self, dy):
        if self._x is None:
            raise GraphStateError(f"layer '{self.name}': backward before forward")
        dy = np.asarray(dy, dtype=DTYPE)
        if dy.ndim == 1:
            dy = dy[None, :]
        self.W.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        dx = dy @ self.W.value.T
        _check_finite(dx, self.name, "backward")
        return dx

    def params(self):
        return [self.W, self.b]


class Conv2d(Layer):
    """2-D convolution, NCHW layout, square kernel, optional zero padding."""

    def __init__(self, c_in, c_out, k, stride=1, pad=0, rng=None, name="conv2d"):
        self.c_in, self.c_out, self.k = int(c_in), int(c_out), int(k)
        self.stride, self.pad = int(stride), int(pad)
        self.name = name
        fan_in = c_in * k * k
        fan_out = c_out * k * k
        self.W = Param(
            f"{name}.W", glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out)
        )
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=DTYPE))
        self._cols = None
        self._xshape = None

    def _out_hw(self, h, w):
        k, s, p = self.k, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"layer '{self.name}': input {h}x{w} too small for k={k}")
        return ho, wo

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(
                f"layer '{self.name}': expected NCHW with {self.c_in} channels, got {x.shape}"
            )
        n, _, h, w = x.shape
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad,) * 2, (self.pad,) * 2))
        ho, wo = self._out_hw(h, w)
        win = np.lib.stride_tricks.sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        win = win[:, :, :: self.stride, :: self.stride]  # (N,C,Ho,Wo,k,k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        self._cols = cols
        self._xshape = (n, h, w, ho, wo)
        wmat = self.W.value.reshape(self.c_out, -1)
        y = (cols @ wmat.T).reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        y += self.b.value[None, :, None, None]
        _check_finite(y, self.name, "forward")
        return np.ascontiguousarray(y)

    def backward(self, dy):
        if self._cols is None:
            raise GraphStateError(f"layer '{self.name}': backward before forward")
        n, h, w, ho, wo = self._xshape
        dy = np.asarray(dy, dtype=DTYPE).reshape(n, self.c_out, ho, wo)
        dymat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
        self.W.grad += (dymat.T @ self._cols).reshape(self.W.value.shape)
        self.b.grad += dymat.sum(axis=0)
        dcols = dymat @ self.W.value.reshape(self.c_out, -1)  # (N*Ho*Wo, C*k*k)
        dcols = dcols.reshape(n, ho, wo, self.c_in, self.k, self.k)
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        dxp = np.zeros((n, self.c_in, hp, wp), dtype=DTYPE)
        s = self.stride
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if self.pad:
            dxp = dxp[:, :, self.pad : self.pad + h, self.pad : self.pad + w]
        _check_finite(dxp, self.name, "backward")
        return dxp

    def params(self):
        return [self.W, self.b]


class MaxPool(Layer):
    """k x k max pooling with stride k; spatial dims must divide k."""

    def __init__(self, k, name="maxpool"):
        self.k = int(k)
        self.name = name
        self._idx = None
        self._shape = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ShapeError(f"layer '{self.name}': {h}x{w} not divisible by k={k}")
        ho, wo = h // k, w // k
        xr = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        xr = xr.reshape(n, c, ho, wo, k * k)
        self._idx = xr.argmax(axis=-1)
        self._shape = (n, c, h, w)
        return np.ascontiguousarray(xr.max(axis=-1))

    def backward(self, dy):
        if self._idx is None:
            raise GraphStateError(f"layer '{self.name}': backward before forward")
        n, c, h, w = self._shape
        k = self.k
        ho, wo = h // k, w // k
        dy = np.asarray(dy, dtype=DTYPE).reshape(n, c, ho, wo)
        flat = np.zeros((n, c, ho, wo, k * k), dtype=DTYPE)
        np.put_along_axis(flat, self._idx[..., None], dy[..., None], axis=-1)
        dx = flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dx.reshape(n, c, h, w))


class Relu(Layer):
    name = "relu"

    def __init__(self, name="relu"):
        self.name = name
        self._mask = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        self._mask = x > 0
        return np.where(self._mask, x, DTYPE(0))

    def backward(self, dy):
        if self._mask is None:
            raise GraphStateError(f"layer '{self.name}': backward before forward")
        return np.where(self._mask, np.asarray(dy, dtype=DTYPE), DTYPE(0))


class Tanh(Layer):
    name = "tanh"

    def __init__(self, name="tanh"):
        self.name = name
        self._y = None

    def forward(self, x):
        self._y = np.tanh(np.asarray(x, dtype=DTYPE))
        return self._y

    def backward(self, dy):
        if self._y is None:
            raise GraphStateError(f"layer '{self.name}': backward before forward")
        return np.asarray(dy, dtype=DTYPE) * (1 - self._y * self._y)


class Flatten(Layer):
    name = "flatten"

    def __init__(self, name="flatten"):
        self.name = name
        self._shape = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        if self._shape is None:
            raise GraphStateError(f"layer '{self.name}': backward before forward")
        return np.asarray(dy, dtype=DTYPE).reshape(self._shape)


class LayerStack:
    """Ordered sequence of layers trained as a unit."""

    def __init__(self, layers, name="stack"):
        self.layers = list(layers)
        self.name = name
        self._ran_forward = False
        # disambiguate duplicate layer names for checkpointing
        for i, lyr in enumerate(self.layers):
            for p in lyr.params():
                p.name = f"{name}/{i}.{p.name}"

    def forward(self, x):
        for lyr in self.layers:
            x = lyr.forward(x)
        self._ran_forward = True
        return x

    def __call__(self, x):
        return self.forward(x)

    def backward(self, dy):
        if not self._ran_forward:
            raise GraphStateError(f"stack '{self.name}': backward before forward")
        for lyr in reversed(self.layers):
            dy = lyr.backward(dy)
        return dy

    def params(self):
        out = []
        for lyr in self.layers:
            out.extend(lyr.params())
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0

    def state_dict(self):
        return {p.name: p.value.copy() for p in self.params()}

    def load_state_dict(self, d, strict=True):
        for p in self.params():
            if p.name in d:
                if d[p.name].shape != p.value.shape:
                    raise ShapeError(
                        f"checkpoint tensor {p.name}: shape {d[p.name].shape} "
                        f"!= {p.value.shape}"
                    )
                p.value[...] = d[p.name]
            elif strict:
                raise KeyError(f"checkpoint missing tensor {p.name}")


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1 - self.b1**self.t
        b2t = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / b1t
            vhat = v / b2t
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(DTYPE)

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over a batch of class logits.

    Returns (loss, dlogits); dlogits already carries the 1/N batch scale.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim == 1:
        logits = logits[None, :]
    targets = np.atleast_1d(np.asarray(targets))
    n, k = logits.shape
    if targets.ndim == 1:
        if targets.min() < 0 or targets.max() >= k:
            raise IndexError(f"target class out of range for {k} classes")
        onehot = np.zeros((n, k), dtype=DTYPE)
        onehot[np.arange(n), targets] = 1
    else:
        onehot = targets.astype(DTYPE)
    lsm = log_softmax(logits)
    loss = float(-(onehot * lsm).sum() / n)
    dlogits = (np.exp(lsm) - onehot) / DTYPE(n)
    return loss, dlogits


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bce(logits, labels):
    """Per-output binary cross-entropy, mean over batch, summed over outputs.

    Returns (loss, dlogits).
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    if logits.ndim == 1:
        logits = logits[None, :]
        labels = labels.reshape(logits.shape)
    n = logits.shape[0]
    # stable: log(1+exp(-|x|)) + max(x,0) - x*y
    loss = float(
        (np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))).sum()
        / n
    )
    dlogits = (sigmoid(logits) - labels) / DTYPE(n)
    return loss, dlogits


def mlp(widths, rng, activation="relu", name="mlp", out_activation=None):
    """Dense stack helper: widths = [in, h1, ..., out]."""
    acts = {"relu": Relu, "tanh": Tanh}
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Dense(a, b, rng, name=f"dense{i}"))
        last = i == len(widths) - 2
        if not last:
            layers.append(acts[activation](name=f"{activation}{i}"))
        elif out_activation is not None:
            layers.append(acts[out_activation](name=f"{out_activation}{i}"))
    return LayerStack(layers, name=name)
