"""Module protocol, activations and the basic layers."""

from __future__ import annotations

import numpy as np

from dsrlab.nn import init as initializers

ACTIVATIONS = ("linear", "sigmoid", "tanh", "relu", "softmax", "log_softmax")


def as_real(x):
    """``x`` as a floating array; float64 unless it already carries a wider float type."""
    x = np.asarray(x)
    return x if x.dtype.kind == "f" and x.dtype.itemsize >= 8 else x.astype(np.float64)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def activate(kind: str, a):
    if kind == "linear":
        return a
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "softmax":
        return softmax(a)
    if kind == "log_softmax":
        return log_softmax(a)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, a, y, dy):
    """Gradient w.r.t. the pre-activation ``a`` given output ``y`` and ``dy``."""
    if kind == "linear":
        return dy
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "relu":
        return dy * (a > 0)
    if kind == "softmax":
        return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    if kind == "log_softmax":
        return dy - np.exp(y) * np.sum(dy, axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {kind!r}")


class Module:
    """Base class: named parameters with matching gradient accumulators.

    ``forward`` caches what ``backward`` needs. ``backward`` adds into the
    gradient buffers (call :meth:`zero_grad` between steps) and returns the
    gradient w.r.t. the input.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64).copy()
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def add_buffer(self, name: str, value) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64).copy()
        self._buffers[name] = value
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p, self._grads[name]
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p, _ in self.named_parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for _, _, g in self.named_parameters()]

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in a stable order (used by checkpoints)."""
        return [(n, p) for n, p, _ in self.named_parameters()] + list(self.named_buffers())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward(self, x, train: bool = True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train: bool = True):
        return self.forward(x, train)

    def config(self) -> dict:
        raise NotImplementedError


def _flatten(x, dim):
    x = as_real(x)
    if x.shape[-1] != dim:
        raise ValueError(f"expected last axis {dim}, got shape {x.shape}")
    return x.reshape(-1, dim), x.shape[:-1]


class Dense(Module):
    """``y = g(x W^T + b)`` with W of shape (out, in); any leading axes."""

    def __init__(self, n_in: int, n_out: int, activation: str = "linear", rng=None,
                 bias: float | None = 0.0, init: str = "glorot"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.activation, self.init = n_in, n_out, activation, init
        maker = initializers.orthogonal if init == "orthogonal" else initializers.glorot_uniform
        self.W = self.add_param("W", maker((n_out, n_in), rng))
        # bias=None drops the bias (it is redundant in front of batch norm)
        self.use_bias = bias is not None
        self.b = self.add_param("b", np.full(n_out, float(bias))) if self.use_bias else None
        self._cache = None

    def forward(self, x, train=True):
        flat, lead = _flatten(x, self.n_in)
        a = flat @ self.W.T
        if self.use_bias:
            a = a + self.b
        y = activate(self.activation, a)
        self._cache = (flat, a, y, lead)
        return y.reshape(*lead, self.n_out)

    def backward(self, dy):
        flat, a, y, lead = self._cache
        dy = np.asarray(dy, dtype=np.float64).reshape(-1, self.n_out)
        da = activation_backward(self.activation, a, y, dy)
        self._grads["W"] += da.T @ flat
        if self.use_bias:
            self._grads["b"] += da.sum(axis=0)
        return (da @ self.W).reshape(*lead, self.n_in)

    def config(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out, "activation": self.activation,
                "bias": self.use_bias}


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, x, train=True):
        x = as_real(x)
        y = activate(self.kind, x)
        self._cache = (x, y)
        return y

    def backward(self, dy):
        x, y = self._cache
        return activation_backward(self.kind, x, y, dy)

    def config(self):
        return {"type": "Activation", "kind": self.kind}


class BatchNorm(Module):
    """Batch normalization over every axis but the last.

    Training mode normalizes with the batch statistics and updates the
    running averages (``running = momentum * running + (1 - momentum) * batch``);
    inference mode applies the running statistics as a fixed affine map.
    """

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5,
                 gamma: float = 0.1, beta: float = 0.01):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self.gamma = self.add_param("gamma", np.full(dim, float(gamma)))
        self.beta = self.add_param("beta", np.full(dim, float(beta)))
        self.running_mean = self.add_buffer("running_mean", np.zeros(dim))
        self.running_var = self.add_buffer("running_var", np.ones(dim))
        self._cache = None

    def forward(self, x, train=True, mask=None):
        """``mask`` (same shape as the leading axes) excludes padded rows from the statistics."""
        flat, lead = _flatten(x, self.dim)
        w = None if mask is None or not train else np.asarray(mask, dtype=np.float64).reshape(-1)
        if train:
            m = flat.shape[0] if w is None else w.sum()
            if m < 2:
                raise ValueError("batch normalization needs at least 2 samples in training mode")
            if w is None:
                mu = flat.mean(axis=0)
                var = flat.var(axis=0)
            else:
                mu = (w[:, None] * flat).sum(axis=0) / m
                var = (w[:, None] * (flat - mu) ** 2).sum(axis=0) / m
            self.running_mean *= self.momentum
            self.running_mean += (1.0 - self.momentum) * mu
            self.running_var *= self.momentum
            self.running_var += (1.0 - self.momentum) * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (flat - mu) * inv
        self._cache = (xhat, inv, lead, train, w)
        return (self.gamma * xhat + self.beta).reshape(*lead, self.dim)

    def backward(self, dy):
        xhat, inv, lead, train, w = self._cache
        dy = np.asarray(dy, dtype=np.float64).reshape(-1, self.dim)
        self._grads["gamma"] += (dy * xhat).sum(axis=0)
        self._grads["beta"] += dy.sum(axis=0)
        dxhat = dy * self.gamma
        if not train:
            return (dxhat * inv).reshape(*lead, self.dim)
        # masked rows still produce outputs but do not move the statistics
        w = np.ones((dy.shape[0], 1)) if w is None else w[:, None]
        m = w.sum()
        dx = inv * (dxhat - w / m * (dxhat.sum(axis=0) + xhat * (dxhat * xhat).sum(axis=0)))
        return dx.reshape(*lead, self.dim)

    def config(self):
        return {"type": "BatchNorm", "dim": self.dim, "momentum": self.momentum, "eps": self.eps}


class Dropout(Module):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` in training.

    With ``shared_axis`` set (0 for time-major sequences) one mask is drawn per
    sequence and reused at every step along that axis.
    """

    def __init__(self, rate: float, rng=None, shared_axis: int | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate, self.shared_axis = rate, shared_axis
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def make_mask(self, shape):
        shape = list(shape)
        if self.shared_axis is not None:
            shape[self.shared_axis] = 1
        keep = self.rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)

    def forward(self, x, train=True):
        x = as_real(x)
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = self.make_mask(x.shape)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask

    def config(self):
        return {"type": "Dropout", "rate": self.rate, "shared_axis": self.shared_axis}


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def config(self):
        return {"type": "Sequential", "layers": [layer.config() for layer in self.layers]}


def mlp(sizes, hidden_activation="relu", output_activation="log_softmax", batchnorm=False,
        dropout=0.0, rng=None, hidden_bias=None):
    """Dense stack ``sizes[0] -> ... -> sizes[-1]``.

    Hidden blocks are Dense -> [BN] -> activation -> [Dropout]. ReLU layers
    get a 0.1 bias unless ``hidden_bias`` says otherwise.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if hidden_bias is None:
        hidden_bias = 0.1 if hidden_activation == "relu" else 0.0
    layers = []
    for n_in, n_out in zip(sizes[:-2], sizes[1:-1]):
        if batchnorm:
            layers += [Dense(n_in, n_out, "linear", rng, bias=None), BatchNorm(n_out), Activation(hidden_activation)]
        else:
            layers.append(Dense(n_in, n_out, hidden_activation, rng, bias=hidden_bias))
        if dropout > 0:
            layers.append(Dropout(dropout, rng))
    layers.append(Dense(sizes[-2], sizes[-1], output_activation, rng))
    return Sequential(layers)


def build(config: dict, rng=None) -> Module:
    """Rebuild a module tree from :meth:`Module.config` output."""
    kind = config["type"]
    if kind == "Dense":
        return Dense(config["n_in"], config["n_out"], config["activation"], rng,
                     bias=0.0 if config.get("bias", True) else None)
    if kind == "Activation":
        return Activation(config["kind"])
    if kind == "BatchNorm":
        return BatchNorm(config["dim"], config["momentum"], config["eps"])
    if kind == "Dropout":
        return Dropout(config["rate"], rng, config["shared_axis"])
    if kind == "Sequential":
        return Sequential([build(c, rng) for c in config["layers"]])
    if kind in _REGISTRY:
        return _REGISTRY[kind].from_config(config, rng)
    raise ValueError(f"unknown module type {kind!r}")


_REGISTRY: dict[str, type] = {}


def register(cls):
    """Class decorator making ``cls.from_config`` reachable from :func:`build`."""
    _REGISTRY[cls.__name__] = cls
    return cls
