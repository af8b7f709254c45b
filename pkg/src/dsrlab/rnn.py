"""Recurrent layers (ReLU RNN, GRU, M-GRU, Li-GRU) with full BPTT, plus analyses.

All sequence tensors are time-major: ``(T, B, features)``. The initial state
is zero and gradients are propagated through every time step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsrlab.nn import init as initializers
from dsrlab.nn.core import BatchNorm, Dense, Dropout, Module, as_real, register, sigmoid
from dsrlab.nn.losses import mse_loss, nll_loss

CELL_KINDS = ("relu_rnn", "gru", "mgru", "ligru")

#: Li-GRU hidden states are clamped to this magnitude
STATE_CLAMP = 1e6

_GATES = {"relu_rnn": ("h",), "gru": ("z", "r", "h"), "mgru": ("z", "h"), "ligru": ("z", "h")}


def gru_step(p: dict, x_t, h_prev):
    """One GRU step; returns ``(h_t, z, r, candidate)``."""
    z = sigmoid(x_t @ p["W_z"].T + h_prev @ p["U_z"].T + p["b_z"])
    r = sigmoid(x_t @ p["W_r"].T + h_prev @ p["U_r"].T + p["b_r"])
    c = np.tanh(x_t @ p["W_h"].T + (r * h_prev) @ p["U_h"].T + p["b_h"])
    return z * h_prev + (1.0 - z) * c, z, r, c


def mgru_step(p: dict, x_t, h_prev):
    """GRU without the reset gate; returns ``(h_t, z, candidate)``."""
    z = sigmoid(x_t @ p["W_z"].T + h_prev @ p["U_z"].T + p["b_z"])
    c = np.tanh(x_t @ p["W_h"].T + h_prev @ p["U_h"].T + p["b_h"])
    return z * h_prev + (1.0 - z) * c, z, c


def ligru_step(p: dict, x_t, h_prev, bn_z: BatchNorm, bn_h: BatchNorm, train: bool = True):
    """One Li-GRU step with batch norm on the feed-forward terms (statistics over the batch)."""
    z = sigmoid(bn_z.forward(x_t @ p["W_z"].T, train) + h_prev @ p["U_z"].T)
    c = np.maximum(bn_h.forward(x_t @ p["W_h"].T, train) + h_prev @ p["U_h"].T, 0.0)
    return z * h_prev + (1.0 - z) * c, z, c


def reverse_padded(x, lengths):
    """Reverse each sequence within its own length; padding stays at the end."""
    t = x.shape[0]
    out = x.copy()
    for b, n in enumerate(lengths):
        out[:n, b] = x[:n, b][::-1]
        out[n:t, b] = x[n:t, b]
    return out


class RecurrentLayer(Module):
    """A single-direction recurrent layer of one cell kind."""

    def __init__(self, kind: str, n_in: int, hidden: int, rng=None):
        super().__init__()
        if kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind, self.n_in, self.hidden = kind, n_in, hidden
        self.gates = _GATES[kind]
        for g in self.gates:
            self.add_param(f"W_{g}", initializers.glorot_uniform((hidden, n_in), rng))
            self.add_param(f"U_{g}", initializers.orthogonal((hidden, hidden), rng))
            if kind != "ligru":
                bias = 0.1 if kind == "relu_rnn" else 0.0
                self.add_param(f"b_{g}", np.full(hidden, bias))
        if kind == "ligru":
            self.bn_z = self.add_child("bn_z", BatchNorm(hidden))
            self.bn_h = self.add_child("bn_h", BatchNorm(hidden))
        self.clamp_events = 0
        self._cache = None

    @property
    def p(self) -> dict:
        return self._params

    def _feedforward(self, x, mask, train):
        """Input projections for all steps at once, shape (T, B, H) per gate."""
        a = {g: x @ self.p[f"W_{g}"].T for g in self.gates}
        if self.kind == "ligru":
            a["z"] = self.bn_z.forward(a["z"], train, mask)
            a["h"] = self.bn_h.forward(a["h"], train, mask)
        else:
            for g in self.gates:
                a[g] = a[g] + self.p[f"b_{g}"]
        return a

    def forward(self, x, train=True, lengths=None):
        x = as_real(x)
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ValueError(f"expected (T, B, {self.n_in}) input, got {x.shape}")
        t_max, batch = x.shape[:2]
        if t_max == 0:
            raise ValueError("empty sequence")
        mask = _length_mask(lengths, t_max, batch)
        a = self._feedforward(x, mask, train)
        p, kind = self.p, self.kind
        h = np.zeros((batch, self.hidden), dtype=x.dtype)
        hs = np.zeros((t_max + 1, batch, self.hidden), dtype=x.dtype)
        steps = []
        for t in range(t_max):
            prev = h
            if kind == "relu_rnn":
                pre = a["h"][t] + prev @ p["U_h"].T
                h = np.maximum(pre, 0.0)
                steps.append((pre,))
            else:
                z = sigmoid(a["z"][t] + prev @ p["U_z"].T)
                if kind == "gru":
                    r = sigmoid(a["r"][t] + prev @ p["U_r"].T)
                    pre = a["h"][t] + (r * prev) @ p["U_h"].T
                    c = np.tanh(pre)
                else:
                    r = None
                    pre = a["h"][t] + prev @ p["U_h"].T
                    c = np.tanh(pre) if kind == "mgru" else np.maximum(pre, 0.0)
                h = z * prev + (1.0 - z) * c
                keep = None
                if kind == "ligru":
                    keep = np.abs(h) <= STATE_CLAMP
                    if not keep.all():
                        self.clamp_events += int((~keep).sum())
                        h = np.clip(h, -STATE_CLAMP, STATE_CLAMP)
                steps.append((pre, z, r, c, keep))
            hs[t + 1] = h
        self._cache = (x, mask, hs, steps)
        return hs[1:].copy()

    def gate_activations(self):
        """Update/reset gate values (T, B, H) from the last forward pass."""
        _, _, _, steps = self._cache
        if self.kind == "relu_rnn":
            raise ValueError("a ReLU RNN has no gates")
        z = np.stack([s[1] for s in steps])
        r = np.stack([s[2] for s in steps]) if self.kind == "gru" else None
        return z, r

    def backward(self, dy):
        x, mask, hs, steps = self._cache
        p, g, kind = self.p, self._grads, self.kind
        dy = np.asarray(dy, dtype=np.float64)
        t_max = x.shape[0]
        da = {k: np.zeros_like(dy) for k in self.gates}
        dh_next = np.zeros_like(hs[0])
        for t in range(t_max - 1, -1, -1):
            dh = dy[t] + dh_next
            prev = hs[t]
            if kind == "relu_rnn":
                (pre,) = steps[t]
                dpre = dh * (pre > 0)
                g["U_h"] += dpre.T @ prev
                dh_next = dpre @ p["U_h"]
                da["h"][t] = dpre
                continue
            pre, z, r, c, keep = steps[t]
            if keep is not None:
                dh = dh * keep
            dz = dh * (prev - c)
            dc = dh * (1.0 - z)
            dprev = dh * z
            dpre = dc * (1.0 - c * c) if kind in ("gru", "mgru") else dc * (pre > 0)
            if kind == "gru":
                g["U_h"] += dpre.T @ (r * prev)
                drh = dpre @ p["U_h"]
                dprev += drh * r
                dar = drh * prev * r * (1.0 - r)
                g["U_r"] += dar.T @ prev
                dprev += dar @ p["U_r"]
                da["r"][t] = dar
            else:
                g["U_h"] += dpre.T @ prev
                dprev += dpre @ p["U_h"]
            daz = dz * z * (1.0 - z)
            g["U_z"] += daz.T @ prev
            dprev += daz @ p["U_z"]
            da["z"][t] = daz
            da["h"][t] = dpre
            dh_next = dprev
        if kind == "ligru":
            da["z"] = self.bn_z.backward(da["z"])
            da["h"] = self.bn_h.backward(da["h"])
        flat_x = x.reshape(-1, self.n_in)
        dx = np.zeros_like(flat_x)
        for k in self.gates:
            d = da[k].reshape(-1, self.hidden)
            g[f"W_{k}"] += d.T @ flat_x
            if kind != "ligru":
                g[f"b_{k}"] += d.sum(axis=0)
            dx += d @ p[f"W_{k}"]
        return dx.reshape(x.shape)

    def config(self):
        return {"type": "RecurrentLayer", "kind": self.kind, "n_in": self.n_in, "hidden": self.hidden}


def _length_mask(lengths, t_max, batch):
    if lengths is None:
        return None
    lengths = np.asarray(lengths)
    return (np.arange(t_max)[:, None] < lengths[None, :]).astype(np.float64)


class BiRecurrentLayer(Module):
    """Forward and time-reversed layers whose outputs are concatenated."""

    def __init__(self, kind: str, n_in: int, hidden: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fwd = self.add_child("fwd", RecurrentLayer(kind, n_in, hidden, rng))
        self.bwd = self.add_child("bwd", RecurrentLayer(kind, n_in, hidden, rng))
        self.hidden = hidden
        self._lengths = None

    def forward(self, x, train=True, lengths=None):
        x = as_real(x)
        if lengths is None:
            lengths = np.full(x.shape[1], x.shape[0])
        self._lengths = lengths
        yf = self.fwd.forward(x, train, lengths)
        yb = reverse_padded(self.bwd.forward(reverse_padded(x, lengths), train, lengths), lengths)
        return np.concatenate([yf, yb], axis=-1)

    def backward(self, dy):
        lengths = self._lengths
        dxf = self.fwd.backward(dy[..., : self.hidden])
        dxb = self.bwd.backward(reverse_padded(dy[..., self.hidden :], lengths))
        return dxf + reverse_padded(dxb, lengths)


@register
class RnnModel(Module):
    """Stacked recurrent layers plus a per-frame dense output layer.

    Each recurrent layer's input goes through dropout with one mask per
    sequence shared by all time steps.
    """

    def __init__(self, kind: str, n_in: int, hidden, n_out: int, bidirectional: bool = False,
                 output_activation: str = "log_softmax", dropout: float = 0.0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = [hidden] if np.isscalar(hidden) else list(hidden)
        self.kind, self.n_in, self.hidden, self.n_out = kind, n_in, hidden, n_out
        self.bidirectional, self.output_activation, self.dropout_rate = bidirectional, output_activation, dropout
        self.layers, self.drops = [], []
        size = n_in
        for i, h in enumerate(hidden):
            self.drops.append(Dropout(dropout, rng, shared_axis=0))
            layer = BiRecurrentLayer(kind, size, h, rng) if bidirectional else RecurrentLayer(kind, size, h, rng)
            self.layers.append(self.add_child(f"rnn{i}", layer))
            size = 2 * h if bidirectional else h
        self.out = self.add_child("out", Dense(size, n_out, output_activation, rng))

    def forward(self, x, train=True, lengths=None):
        h = as_real(x)
        for drop, layer in zip(self.drops, self.layers):
            h = layer.forward(drop.forward(h, train), train, lengths)
        return self.out.forward(h, train)

    def forward_batch(self, batch, train):
        return self.forward(batch.x, train, batch.lengths)

    def backward(self, dy):
        d = self.out.backward(dy)
        for drop, layer in zip(reversed(self.drops), reversed(self.layers)):
            d = drop.backward(layer.backward(d))
        return d

    @property
    def clamp_events(self) -> int:
        total = 0
        for layer in self.layers:
            parts = [layer.fwd, layer.bwd] if isinstance(layer, BiRecurrentLayer) else [layer]
            total += sum(p.clamp_events for p in parts)
        return total

    def config(self):
        return {"type": "RnnModel", "kind": self.kind, "n_in": self.n_in, "hidden": self.hidden,
                "n_out": self.n_out, "bidirectional": self.bidirectional,
                "output_activation": self.output_activation, "dropout": self.dropout_rate}

    @classmethod
    def from_config(cls, cfg, rng=None):
        return cls(cfg["kind"], cfg["n_in"], cfg["hidden"], cfg["n_out"], cfg["bidirectional"],
                   cfg["output_activation"], cfg["dropout"], rng)


def layer_param_count(kind: str, n_in: int, hidden: int) -> int:
    """Trainable scalars in one direction of one recurrent layer."""
    if kind == "ligru":
        return 2 * (n_in * hidden + hidden * hidden) + 4 * hidden
    n_gates = len(_GATES[kind])
    return n_gates * (n_in * hidden + hidden * hidden + hidden)


def param_count(kind: str, n_in: int, hidden, n_out: int | None = None, bidirectional: bool = False) -> int:
    """Closed-form parameter count of an :class:`RnnModel` topology.

    ``n_out=None`` counts the recurrent stack only.
    """
    hidden = [hidden] if np.isscalar(hidden) else list(hidden)
    dirs = 2 if bidirectional else 1
    total, size = 0, n_in
    for h in hidden:
        total += dirs * layer_param_count(kind, size, h)
        size = dirs * h
    if n_out is not None:
        total += size * n_out + n_out
    return total


def recurrent_weight_count(kind: str, hidden: int) -> int:
    return len(_GATES[kind]) * hidden * hidden


@dataclass(frozen=True, eq=False)
class GateCorrelation:
    lags: np.ndarray
    czr: np.ndarray
    czz: np.ndarray

    @property
    def peak_lag(self) -> int:
        return int(self.lags[np.argmax(self.czr)])


def gate_xcorr(z_means, r_means, max_lag: int, remove_mean: bool = False):
    """Average over utterances of ``sum_t z[t] r[t + k]`` for k in [-max_lag, max_lag].

    Each element of ``z_means``/``r_means`` is one utterance's neuron-averaged
    gate trajectory. Returns ``(lags, C)`` without normalization.
    """
    if len(z_means) == 0:
        raise ValueError("empty dataset")
    lags = np.arange(-max_lag, max_lag + 1)
    acc = np.zeros(len(lags))
    for z, r in zip(z_means, r_means):
        z = np.asarray(z, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        if remove_mean:
            z = z - z.mean()
            r = r - r.mean()
        n = len(z)
        for i, k in enumerate(lags):
            lo, hi = max(0, -k), min(n, n - k)
            if hi > lo:
                acc[i] += np.dot(z[lo:hi], r[lo + k : hi + k])
    return lags, acc / len(z_means)


def gate_correlation(model: RnnModel, sequences, max_lag: int = 20, layer: int = 0,
                     remove_mean: bool = False) -> GateCorrelation:
    """C(z, r) and C(z, z) of one GRU layer, normalized by max C(z, z).

    Gates are averaged over the neurons at each step; each utterance is run
    on its own (inference mode) and the correlations are averaged.
    """
    if len(sequences) == 0:
        raise ValueError("empty dataset")
    target = model.layers[layer]
    target = target.fwd if isinstance(target, BiRecurrentLayer) else target
    if target.kind != "gru":
        raise ValueError("gate correlation needs a GRU layer")
    zs, rs = [], []
    for seq in sequences:
        model.forward(np.asarray(seq, dtype=np.float64)[:, None, :], train=False)
        z, r = target.gate_activations()
        zs.append(z[:, 0].mean(axis=1))
        rs.append(r[:, 0].mean(axis=1))
    lags, czr = gate_xcorr(zs, rs, max_lag, remove_mean)
    _, czz = gate_xcorr(zs, zs, max_lag, remove_mean)
    scale = czz.max()
    return GateCorrelation(lags, czr / scale, czz / scale)


def grad_norm_stats(model, dataset, objective: str = "nll", epochs: int = 1) -> dict:
    """Mean over sentences (and passes) of each parameter's gradient L2 norm.

    Every utterance is a separate backward pass in training mode; the model
    is not updated.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    sums = {name: 0.0 for name, _, _ in model.named_parameters()}
    count = 0
    for _ in range(epochs):
        for x, y in zip(dataset.xs, dataset.ys):
            model.zero_grad()
            out = model.forward(x[:, None, :], train=True)
            if objective == "nll":
                _, grad = nll_loss(out, y[:, None])
            else:
                _, grad = mse_loss(out, np.asarray(y, dtype=np.float64).reshape(out.shape))
            model.backward(grad)
            for name, _, g in model.named_parameters():
                sums[name] += float(np.linalg.norm(g))
            count += 1
    model.zero_grad()
    return {name: s / count for name, s in sums.items()}
