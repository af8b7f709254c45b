"""Networks of cooperating enhancement (SE) and recognition (SR) DNNs.

An unfolded network with ``L`` communication levels holds

* ``SE_l`` for ``l < L``: input is the stacked noisy context, plus the
  monophone posteriors of ``SR_{l-1}`` when ``l >= 1``; output is the
  enhanced centre context (linear regression head);
* ``SR_l`` for ``l >= 1``: input is the noisy context followed by the
  output of ``SE_{l-1}`` (the context is left out with
  ``sr_raw_input=False``, giving a pure SE -> SR cascade);
* ``SR_0`` (only when ``L >= 2``): input is the noisy context itself.

``L = 1`` is therefore the flat SE -> SR pipeline, and ``L = 2`` gives
``SE_0, SR_0, SE_1, SR_1, SR_2``. SR nodes carry a context-dependent
softmax and an auxiliary monophone softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dsrlab.features import ContextWindowSpec, assemble_context
from dsrlab.nn.core import Activation, BatchNorm, Dense, Dropout, Module, Sequential, as_real, register
from dsrlab.nn.losses import frame_accuracy, mse_loss, nll_loss

SE, SR = "SE", "SR"

#: stacked noisy frames fed to SE nodes and clean frames they predict
INPUT_CONTEXT = ContextWindowSpec(10, 10)
OUTPUT_CONTEXT = ContextWindowSpec(5, 5)


def hidden_stack(n_in: int, sizes, rng, batchnorm: bool = True, dropout: float = 0.0) -> Sequential:
    """Dense -> BN -> ReLU -> Dropout blocks (Dense with 0.1 bias and ReLU without BN)."""
    layers = []
    for n_out in sizes:
        if batchnorm:
            layers += [Dense(n_in, n_out, "linear", rng, bias=None), BatchNorm(n_out), Activation("relu")]
        else:
            layers.append(Dense(n_in, n_out, "relu", rng, bias=0.1))
        if dropout > 0:
            layers.append(Dropout(dropout, rng))
        n_in = n_out
    return Sequential(layers)


@register
class SENode(Module):
    """Enhancement DNN with a linear regression head."""

    def __init__(self, n_in: int, n_out: int, hidden=(32,), batchnorm=True, dropout=0.0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.hidden = n_in, n_out, list(hidden)
        self.batchnorm, self.dropout = batchnorm, dropout
        self.trunk = self.add_child("trunk", hidden_stack(n_in, self.hidden, rng, batchnorm, dropout))
        last = self.hidden[-1] if self.hidden else n_in
        self.head = self.add_child("head", Dense(last, n_out, "linear", rng))

    def forward(self, x, train=True):
        return self.head.forward(self.trunk.forward(x, train), train)

    def backward(self, dy):
        return self.trunk.backward(self.head.backward(dy))

    def config(self):
        return {"type": "SENode", "n_in": self.n_in, "n_out": self.n_out, "hidden": self.hidden,
                "batchnorm": self.batchnorm, "dropout": self.dropout}

    @classmethod
    def from_config(cls, c, rng=None):
        return cls(c["n_in"], c["n_out"], c["hidden"], c["batchnorm"], c["dropout"], rng)


@register
class SRNode(Module):
    """Recognition DNN with context-dependent and monophone log-softmax heads."""

    def __init__(self, n_in: int, n_classes: int, n_mono: int, hidden=(32,), batchnorm=True,
                 dropout=0.0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_classes, self.n_mono, self.hidden = n_in, n_classes, n_mono, list(hidden)
        self.batchnorm, self.dropout = batchnorm, dropout
        self.trunk = self.add_child("trunk", hidden_stack(n_in, self.hidden, rng, batchnorm, dropout))
        last = self.hidden[-1] if self.hidden else n_in
        self.cd = self.add_child("cd", Dense(last, n_classes, "log_softmax", rng))
        self.mono = self.add_child("mono", Dense(last, n_mono, "log_softmax", rng))

    def forward(self, x, train=True):
        h = self.trunk.forward(x, train)
        return self.cd.forward(h, train), self.mono.forward(h, train)

    def backward(self, dy):
        """``dy = (d_cd, d_mono_aux[, d_mono_payload])``.

        The auxiliary monophone loss trains this node only: its gradient
        reaches the trunk but is not passed on to the input. Gradients that
        arrive through the posterior payload sent to a higher SE node
        propagate normally. Returns ``None`` when nothing reaches the input.
        """
        dcd, aux = dy[0], dy[1]
        payload = dy[2] if len(dy) > 2 else None
        dh = None
        if dcd is not None:
            dh = self.cd.backward(dcd)
        if payload is not None:
            d = self.mono.backward(payload)
            dh = d if dh is None else dh + d
        dx = self.trunk.backward(dh) if dh is not None else None
        if aux is not None:
            self.trunk.backward(self.mono.backward(aux))
        return dx

    def config(self):
        return {"type": "SRNode", "n_in": self.n_in, "n_classes": self.n_classes, "n_mono": self.n_mono,
                "hidden": self.hidden, "batchnorm": self.batchnorm, "dropout": self.dropout}

    @classmethod
    def from_config(cls, c, rng=None):
        return cls(c["n_in"], c["n_classes"], c["n_mono"], c["hidden"], c["batchnorm"], c["dropout"], rng)


@dataclass(frozen=True)
class NodeSpec:
    task: str
    level: int
    inputs: tuple = ()  # producer node names, fed in this order after x
    takes_x: bool = True

    @property
    def name(self) -> str:
        return f"{self.task}{self.level}"


@dataclass(frozen=True)
class NetworkSpec:
    """Sizes shared by every node of an unfolded network."""

    feat_dim: int
    n_classes: int
    n_mono: int
    se_hidden: tuple = (32,)
    sr_hidden: tuple = (32,)
    batchnorm: bool = True
    dropout: float = 0.0
    sr_raw_input: bool = True  # feed the noisy context to SR_l, l >= 1, next to SE output
    mono_weight: float = 0.5

    @property
    def x_dim(self) -> int:
        return INPUT_CONTEXT.width * self.feat_dim

    @property
    def se_out_dim(self) -> int:
        return OUTPUT_CONTEXT.width * self.feat_dim


def unfold(levels: int) -> list[NodeSpec]:
    """Node specs of the unfolded network in topological (level) order."""
    if levels < 1:
        raise ValueError("need at least one communication level")
    specs = []
    for level in range(levels + 1):
        if level < levels:
            inputs = (f"SR{level - 1}",) if level >= 1 and levels >= 2 else ()
            specs.append(NodeSpec(SE, level, inputs, True))
        if level >= 1:
            specs.append(NodeSpec(SR, level, (f"SE{level - 1}",), False))
        elif levels >= 2:
            specs.append(NodeSpec(SR, 0, (), True))
    return specs


def graph_edges(specs) -> list[tuple[str, str]]:
    return [(src, s.name) for s in specs for src in s.inputs]


@register
class JointNetwork(Module):
    """Unfolded network of SE and SR DNNs with back-propagation through network."""

    def __init__(self, spec: NetworkSpec, levels: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec, self.levels = spec, levels
        self.specs = unfold(levels)
        self.nodes: dict[str, Module] = {}
        for ns in self.specs:
            n_in = self.input_dim(ns)
            if ns.task == SE:
                node = SENode(n_in, spec.se_out_dim, spec.se_hidden, spec.batchnorm, spec.dropout, rng)
            else:
                node = SRNode(n_in, spec.n_classes, spec.n_mono, spec.sr_hidden, spec.batchnorm,
                              spec.dropout, rng)
            self.nodes[ns.name] = self.add_child(ns.name, node)
        self._outputs = None
        self._inputs = None

    def takes_x(self, ns: NodeSpec) -> bool:
        return ns.takes_x or (ns.task == SR and self.spec.sr_raw_input)

    def payload_dim(self, name: str) -> int:
        return self.spec.se_out_dim if name.startswith(SE) else self.spec.n_mono

    def input_dim(self, ns: NodeSpec) -> int:
        return (self.spec.x_dim if self.takes_x(ns) else 0) + sum(self.payload_dim(s) for s in ns.inputs)

    @property
    def sr_names(self) -> list[str]:
        return [ns.name for ns in self.specs if ns.task == SR]

    @property
    def se_names(self) -> list[str]:
        return [ns.name for ns in self.specs if ns.task == SE]

    def forward(self, x, train=True):
        """Evaluate every node in level order; returns name -> output(s)."""
        x = as_real(x)
        outputs, inputs = {}, {}
        for ns in self.specs:
            parts = [x] if self.takes_x(ns) else []
            for src in ns.inputs:
                out = outputs[src]
                # SR -> SE messages are monophone posteriors
                parts.append(np.exp(out[1]) if src.startswith(SR) else out)
            inp = np.concatenate(parts, axis=-1)
            inputs[ns.name] = inp
            outputs[ns.name] = self.nodes[ns.name].forward(inp, train)
        self._outputs, self._inputs = outputs, inputs
        return outputs

    def node_losses(self, targets, lam_sr: float = 1.0):
        """Per-node losses and output gradients for the cached forward pass.

        ``targets`` holds ``clean`` (enhancement targets), ``labels`` and
        ``mono``. Returns ``{name: (loss, grad)}``; SR grads are (cd, mono) pairs.
        """
        result = {}
        for ns in self.specs:
            out = self._outputs[ns.name]
            if ns.task == SE:
                result[ns.name] = mse_loss(out, targets["clean"])
            else:
                l1, g1 = nll_loss(out[0], targets["labels"])
                l2, g2 = nll_loss(out[1], targets["mono"])
                w = self.spec.mono_weight
                result[ns.name] = (l1 + w * l2, (g1, w * g2))
        return result

    def backprop(self, seeds: dict) -> None:
        """Reverse traversal accumulating into parameter gradients.

        ``seeds`` maps node names to the gradient of the loss subset w.r.t.
        their outputs; nodes receiving no gradient are skipped.
        """
        if self._outputs is None:
            raise ValueError("backprop needs a forward pass first")
        unknown = set(seeds) - set(self.nodes)
        if unknown:
            raise ValueError(f"gradients for unknown nodes {sorted(unknown)}")
        grads: dict[str, object] = {}
        for name, g in seeds.items():
            if name.startswith(SR) and g is not None:
                g = (g[0], g[1], None)
            grads[name] = g
        for ns in reversed(self.specs):
            g = grads.get(ns.name)
            if g is None:
                continue
            dx = self.nodes[ns.name].backward(g)
            if dx is None:
                continue
            offset = self.spec.x_dim if self.takes_x(ns) else 0
            for src in ns.inputs:
                width = self.payload_dim(src)
                piece = dx[:, offset : offset + width]
                offset += width
                prev = grads.get(src)
                if src.startswith(SR):
                    # d exp(l) / dl = exp(l): posterior gradient to log-probability gradient
                    piece = piece * np.exp(self._outputs[src][1])
                    if prev is None:
                        grads[src] = (None, None, piece)
                    else:
                        grads[src] = (prev[0], prev[1], piece if prev[2] is None else prev[2] + piece)
                else:
                    grads[src] = piece if prev is None else prev + piece

    def split_gradients(self, targets):
        """Gradients of the SE-loss sum and of the SR-loss sum, from two backward passes.

        Returns ``(total_loss_se, total_loss_sr, g_se, g_sr)`` with the
        gradient lists ordered like :meth:`parameters`.
        """
        losses = self.node_losses(targets)
        se = {n: losses[n][1] for n in self.se_names}
        sr = {n: losses[n][1] for n in self.sr_names}
        self.zero_grad()
        self.backprop(se)
        g_se = [g.copy() for g in self.gradients()]
        self.zero_grad()
        self.backprop(sr)
        g_sr = [g.copy() for g in self.gradients()]
        self.zero_grad()
        loss_se = sum(losses[n][0] for n in self.se_names)
        loss_sr = sum(losses[n][0] for n in self.sr_names)
        return loss_se, loss_sr, g_se, g_sr

    def se_param_mask(self) -> list[bool]:
        return [name.startswith(SE) for name, _, _ in self.named_parameters()]

    def combined_gradients(self, targets, lam: float):
        """SE parameters get ``g_se + lam * g_sr``; SR parameters ``g_se + g_sr``."""
        loss_se, loss_sr, g_se, g_sr = self.split_gradients(targets)
        out = []
        for is_se, a, b in zip(self.se_param_mask(), g_se, g_sr):
            out.append(a + lam * b if is_se else a + b)
        return loss_se, loss_sr, out

    def config(self):
        s = self.spec
        return {"type": "JointNetwork", "levels": self.levels, "feat_dim": s.feat_dim,
                "n_classes": s.n_classes, "n_mono": s.n_mono, "se_hidden": list(s.se_hidden),
                "sr_hidden": list(s.sr_hidden), "batchnorm": s.batchnorm, "dropout": s.dropout,
                "sr_raw_input": s.sr_raw_input, "mono_weight": s.mono_weight}

    @classmethod
    def from_config(cls, c, rng=None):
        spec = NetworkSpec(c["feat_dim"], c["n_classes"], c["n_mono"], tuple(c["se_hidden"]),
                           tuple(c["sr_hidden"]), c["batchnorm"], c["dropout"], c["sr_raw_input"],
                           c["mono_weight"])
        return cls(spec, c["levels"], rng)


def sgd_update(params, grads, lr: float) -> None:
    for p, g in zip(params, grads):
        p -= lr * g


def joint_train_step(se: SENode, sr: SRNode, batch: dict, lr: float, lam: float = 0.1,
                     mono_weight: float = 0.5, sr_raw_input: bool = False, train: bool = True):
    """One flat SE -> SR update.

    ``theta_SE -= lr * (g_SE + lam * g_SR)`` and ``theta_SR -= lr * g_SR``,
    where g_SR reaches the SE network by back-propagating the recognition
    loss through it. With ``sr_raw_input`` the recognizer sees the noisy
    input followed by the enhanced features. Returns the two losses.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    enhanced = se.forward(batch["x"], train)
    loss_se, d_se = mse_loss(enhanced, batch["clean"])
    sr_in = np.concatenate([batch["x"], enhanced] if sr_raw_input else [enhanced], axis=-1)
    cd, mono = sr.forward(sr_in, train)
    l1, g1 = nll_loss(cd, batch["labels"])
    l2, g2 = nll_loss(mono, batch["mono"])
    se.zero_grad()
    se.backward(d_se)
    g_se = [g.copy() for g in se.gradients()]
    se.zero_grad()
    sr.zero_grad()
    d_enh = sr.backward((g1, mono_weight * g2))
    if sr_raw_input:
        d_enh = d_enh[:, batch["x"].shape[-1] :]
    g_sr_sr = [g.copy() for g in sr.gradients()]
    se.backward(d_enh)
    g_sr_se = [g.copy() for g in se.gradients()]
    sgd_update(se.parameters(), [a + lam * b for a, b in zip(g_se, g_sr_se)], lr)
    sgd_update(sr.parameters(), g_sr_sr, lr)
    se.zero_grad()
    sr.zero_grad()
    return loss_se, l1 + mono_weight * l2


def network_train_step(net: JointNetwork, batch: dict, lr: float, lam: float = 0.1):
    """One SGD step on an unfolded network with lambda-weighted cross-task gradients."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    net.forward(batch["x"], True)
    loss_se, loss_sr, grads = net.combined_gradients(batch, lam)
    sgd_update(net.parameters(), grads, lr)
    return loss_se, loss_sr


@register
class MultitaskModel(Module):
    """Shared trunk feeding an enhancement branch and a recognition branch."""

    def __init__(self, spec: NetworkSpec, shared=(32,), branch=(32,), se_weight: float = 1.0,
                 sr_weight: float = 1.0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec, self.shared_sizes, self.branch_sizes = spec, list(shared), list(branch)
        self.se_weight, self.sr_weight = se_weight, sr_weight
        self.trunk = self.add_child("trunk", hidden_stack(spec.x_dim, self.shared_sizes, rng, spec.batchnorm,
                                                          spec.dropout))
        width = self.shared_sizes[-1]
        self.se = self.add_child("se", SENode(width, spec.se_out_dim, self.branch_sizes, spec.batchnorm,
                                              spec.dropout, rng))
        self.sr = self.add_child("sr", SRNode(width, spec.n_classes, spec.n_mono, self.branch_sizes,
                                              spec.batchnorm, spec.dropout, rng))

    def forward(self, x, train=True):
        h = self.trunk.forward(x, train)
        return self.se.forward(h, train), self.sr.forward(h, train)

    def loss_and_backward(self, batch, train=True):
        """Weighted summed loss; fills the gradient buffers (zeroed first)."""
        enhanced, (cd, mono) = self.forward(batch["x"], train)
        l_se, d_se = mse_loss(enhanced, batch["clean"])
        l1, g1 = nll_loss(cd, batch["labels"])
        l2, g2 = nll_loss(mono, batch["mono"])
        w = self.spec.mono_weight
        self.zero_grad()
        # one model: the monophone head trains the shared trunk as well
        dh = self.se.backward(self.se_weight * d_se) + self.sr.backward(
            (self.sr_weight * g1, None, self.sr_weight * w * g2))
        self.trunk.backward(dh)
        return self.se_weight * l_se + self.sr_weight * (l1 + w * l2)

    def config(self):
        return {"type": "MultitaskModel", "shared": self.shared_sizes, "branch": self.branch_sizes,
                "se_weight": self.se_weight, "sr_weight": self.sr_weight, "spec": _spec_dict(self.spec)}

    @classmethod
    def from_config(cls, c, rng=None):
        return cls(NetworkSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c["spec"].items()}),
                   c["shared"], c["branch"], c["se_weight"], c["sr_weight"], rng)


def _spec_dict(spec: NetworkSpec) -> dict:
    return {"feat_dim": spec.feat_dim, "n_classes": spec.n_classes, "n_mono": spec.n_mono,
            "se_hidden": list(spec.se_hidden), "sr_hidden": list(spec.sr_hidden),
            "batchnorm": spec.batchnorm, "dropout": spec.dropout, "sr_raw_input": spec.sr_raw_input,
            "mono_weight": spec.mono_weight}


def frames_from_task(task, indices=None) -> dict:
    """Stack utterances into frame-level arrays for the joint networks."""
    idx = range(len(task.clean)) if indices is None else indices
    xs, clean, labels, mono = [], [], [], []
    for i in idx:
        xs.append(assemble_context(task.noisy[i], INPUT_CONTEXT))
        clean.append(assemble_context(task.clean[i], OUTPUT_CONTEXT))
        labels.append(task.labels[i])
        mono.append(task.mono[i])
    return {"x": np.vstack(xs), "clean": np.vstack(clean), "labels": np.concatenate(labels),
            "mono": np.concatenate(mono)}


def minibatches(data: dict, batch_size: int, rng):
    n = len(data["x"])
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            continue
        yield {k: v[idx] for k, v in data.items()}


def evaluate_levels(net: JointNetwork, data: dict) -> dict:
    """Frame accuracy of every SR node's context-dependent head (inference mode)."""
    outputs = net.forward(data["x"], train=False)
    return {name: frame_accuracy(outputs[name][0], data["labels"]) for name in net.sr_names}


@dataclass
class JointLog:
    records: list = field(default_factory=list)


def train_joint(net: JointNetwork, data: dict, epochs: int = 10, lr: float = 0.05, lam: float = 0.1,
                batch_size: int = 128, seed: int = 0, dev: dict | None = None) -> JointLog:
    """Minibatch SGD on an unfolded network; logs losses and per-level dev accuracy."""
    if len(data["x"]) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    log = JointLog()
    for epoch in range(1, epochs + 1):
        se_sum, sr_sum, count = 0.0, 0.0, 0
        for batch in minibatches(data, batch_size, rng):
            l_se, l_sr = network_train_step(net, batch, lr, lam)
            se_sum += l_se
            sr_sum += l_sr
            count += 1
        record = {"epoch": epoch, "se_loss": se_sum / count, "sr_loss": sr_sum / count, "lr": lr}
        if dev is not None:
            record["dev_acc"] = evaluate_levels(net, dev)
        log.records.append(record)
    return log
