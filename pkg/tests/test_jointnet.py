import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsrlab.jointnet import (
    INPUT_CONTEXT,
    OUTPUT_CONTEXT,
    JointNetwork,
    MultitaskModel,
    NetworkSpec,
    SENode,
    SRNode,
    evaluate_levels,
    frames_from_task,
    graph_edges,
    joint_train_step,
    network_train_step,
    train_joint,
    unfold,
)
from dsrlab.nn.checkpoint import decode_checkpoint, encode_checkpoint, load_state
from dsrlab.nn.core import build
from dsrlab.nn.gradcheck import numeric_gradient, relative_error
from dsrlab.nn.losses import frame_accuracy, mse_loss, nll_loss
from dsrlab.synthetic import joint_task

SPEC = NetworkSpec(feat_dim=2, n_classes=5, n_mono=3, se_hidden=(8,), sr_hidden=(8,))


def copy_state(dst, src):
    load_state(dst, [(n, a.copy()) for n, a in src.state_arrays()])


def make_batch(spec, n=12, seed=1):
    rng = np.random.default_rng(seed)
    return {"x": rng.standard_normal((n, spec.x_dim)), "clean": rng.standard_normal((n, spec.se_out_dim)),
            "labels": rng.integers(0, spec.n_classes, n), "mono": rng.integers(0, spec.n_mono, n)}


def first_dense(node):
    return node.trunk.layers[0]


def params(module):
    return [p.copy() for p in module.parameters()]


def toposort(names, edges):
    """Kahn's algorithm; returns the order or None when a cycle exists."""
    indeg = {n: 0 for n in names}
    for _, dst in edges:
        indeg[dst] += 1
    ready = [n for n in names if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for src, dst in edges:
            if src == n:
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    ready.append(dst)
    return order if len(order) == len(names) else None


class TestUnfold:
    def test_rejects_zero_levels(self):
        with pytest.raises(ValueError):
            unfold(0)

    def test_flat_pipeline(self):
        specs = unfold(1)
        assert [s.name for s in specs] == ["SE0", "SR1"]
        assert graph_edges(specs) == [("SE0", "SR1")]

    def test_two_levels(self):
        specs = unfold(2)
        assert [s.name for s in specs] == ["SE0", "SR0", "SE1", "SR1", "SR2"]
        assert sorted(graph_edges(specs)) == [("SE0", "SR1"), ("SE1", "SR2"), ("SR0", "SE1")]

    @given(st.integers(1, 8))
    def test_graph_rules(self, levels):
        specs = unfold(levels)
        names = [s.name for s in specs]
        level = {s.name: s.level for s in specs}
        edges = graph_edges(specs)
        assert len(set(names)) == len(names)
        for src, dst in edges:
            assert src[:2] != dst[:2]
            assert level[src] == level[dst] - 1
        order = toposort(names, edges)
        assert order is not None
        # the construction order is itself topological and sorted by level
        pos = {n: i for i, n in enumerate(names)}
        assert all(pos[s] < pos[d] for s, d in edges)
        assert [level[n] for n in names] == sorted(level[n] for n in names)
        assert sorted(level[n] for n in order) == sorted(level.values())
        # every node is fed from the input, directly or through producers
        reached = set()
        for s in specs:
            if s.takes_x or all(src in reached for src in s.inputs) and s.inputs:
                reached.add(s.name)
        assert reached == set(names)
        assert all(s.takes_x and not s.inputs for s in specs if s.level == 0)

    def test_node_dims(self):
        net = JointNetwork(SPEC, 2)
        assert SPEC.x_dim == 21 * SPEC.feat_dim
        assert SPEC.se_out_dim == 11 * SPEC.feat_dim
        assert net.nodes["SE0"].n_in == SPEC.x_dim
        assert net.nodes["SE1"].n_in == SPEC.x_dim + SPEC.n_mono
        assert net.nodes["SR1"].n_in == SPEC.x_dim + SPEC.se_out_dim
        cascade = JointNetwork(NetworkSpec(2, 5, 3, sr_raw_input=False), 2)
        assert cascade.nodes["SR1"].n_in == SPEC.se_out_dim
        assert INPUT_CONTEXT.width == 21 and OUTPUT_CONTEXT.width == 11


class TestForward:
    def test_outputs(self):
        out = JointNetwork(SPEC, 2).forward(make_batch(SPEC)["x"])
        for name in ("SE0", "SE1"):
            assert out[name].shape == (12, SPEC.se_out_dim)
        for name in ("SR0", "SR1", "SR2"):
            cd, mono = out[name]
            np.testing.assert_allclose(np.exp(cd).sum(axis=1), 1.0, atol=1e-12)
            np.testing.assert_allclose(np.exp(mono).sum(axis=1), 1.0, atol=1e-12)

    def test_perturbing_top_level_leaves_lower_levels(self):
        net = JointNetwork(SPEC, 2)
        x = make_batch(SPEC)["x"]
        before = net.forward(x)
        for p in net.nodes["SR2"].parameters():
            p += 0.5
        after = net.forward(x)
        for name in ("SE0", "SR0", "SE1", "SR1"):
            np.testing.assert_array_equal(np.hstack(after[name]), np.hstack(before[name]))
        assert not np.array_equal(after["SR2"][0], before["SR2"][0])

    def test_level_one_se_matches_standalone(self):
        net = JointNetwork(SPEC, 2)
        x = make_batch(SPEC)["x"]
        out = net.forward(x)
        alone = SENode(SPEC.x_dim + SPEC.n_mono, SPEC.se_out_dim, SPEC.se_hidden, rng=np.random.default_rng(9))
        copy_state(alone, net.nodes["SE1"])
        np.testing.assert_array_equal(alone.forward(np.hstack([x, np.exp(out["SR0"][1])])), out["SE1"])

    def test_identical_weights_without_cross_edges(self):
        net = JointNetwork(SPEC, 2)
        copy_state(net.nodes["SR2"], net.nodes["SR1"])
        for name in ("SR1", "SR2"):
            first_dense(net.nodes[name]).W[:, SPEC.x_dim :] = 0.0
        out = net.forward(make_batch(SPEC)["x"])
        np.testing.assert_array_equal(out["SR1"][0], out["SR2"][0])
        np.testing.assert_array_equal(out["SR1"][1], out["SR2"][1])


class TestBackprop:
    def test_errors(self):
        net = JointNetwork(SPEC, 2)
        with pytest.raises(ValueError):
            net.backprop({})
        net.forward(make_batch(SPEC)["x"])
        with pytest.raises(ValueError):
            net.backprop({"SR9": None})

    def test_top_level_gradient_is_local(self):
        net = JointNetwork(SPEC, 2)
        batch = make_batch(SPEC)
        net.forward(batch["x"])
        _, _, _, g_sr = net.split_gradients(batch)
        names = [n for n, _, _ in net.named_parameters()]
        local = net.node_losses(batch)["SR2"][1]
        net.zero_grad()
        net.backprop({"SR2": local})
        for name, g, (_, _, only) in zip(names, g_sr, net.named_parameters()):
            if name.startswith("SR2."):
                np.testing.assert_array_equal(g, only)

    def test_monophone_head_trains_only_its_owner(self):
        net = JointNetwork(SPEC, 2)
        batch = make_batch(SPEC)
        net.forward(batch["x"])
        aux = net.node_losses(batch)["SR0"][1][1]
        net.zero_grad()
        net.backprop({"SR0": (None, aux)})
        for name, _, g in net.named_parameters():
            if name.startswith("SR0.trunk") or name.startswith("SR0.mono"):
                continue
            assert not np.any(g), name
        assert np.any(dict((n, g) for n, _, g in net.named_parameters())["SR0.mono.W"])

    @pytest.mark.parametrize("lam", [0.0, 0.1, 1.0])
    @pytest.mark.parametrize("raw", [True, False])
    def test_gradcheck(self, lam, raw):
        spec = NetworkSpec(2, 5, 3, (8,), (8,), sr_raw_input=raw)
        net = JointNetwork(spec, 2, np.random.default_rng(0))
        batch = make_batch(spec)
        net.forward(batch["x"])
        _, _, grads = net.combined_gradients(batch, lam)
        ld, rows = np.longdouble, np.arange(12)

        def objective(owner):
            # extended-precision forward pass; lambda folded in as a loss scale and the
            # monophone term belonging to its own node
            out = net.forward(batch["x"].astype(ld))
            total = ld(0)
            for name in net.se_names:
                d = out[name].astype(ld) - batch["clean"]
                total += np.sum(d * d) / d.size
            scale = ld(lam) if owner.startswith("SE") else ld(1)
            for name in net.sr_names:
                total -= scale * np.sum(out[name][0].astype(ld)[rows, batch["labels"]]) / 12
            if owner.startswith("SR"):
                total -= ld(0.5) * np.sum(out[owner][1].astype(ld)[rows, batch["mono"]]) / 12
            return total

        worst = 0.0
        for (name, p, _), g in zip(net.named_parameters(), grads):
            owner = name.split(".")[0]
            num = numeric_gradient(lambda: objective(owner), p).astype(np.float64)
            worst = max(worst, relative_error(g, num).max())
        assert worst <= 1e-5

    def test_zero_cross_edges_give_isolated_gradients(self):
        net = JointNetwork(SPEC, 2)
        for name in ("SE1", "SR1", "SR2"):
            first_dense(net.nodes[name]).W[:, SPEC.x_dim :] = 0.0
        batch = make_batch(SPEC)
        out = net.forward(batch["x"])
        _, _, grads = net.combined_gradients(batch, 0.1)
        got = dict(zip([n for n, _, _ in net.named_parameters()], grads))
        for ns in net.specs:
            node = net.nodes[ns.name]
            alone = type(node).from_config(node.config())
            copy_state(alone, node)
            inp = net._inputs[ns.name]
            if ns.task == "SE":
                _, g = mse_loss(alone.forward(inp), batch["clean"])
            else:
                cd, mono = alone.forward(inp)
                g = (nll_loss(cd, batch["labels"])[1], 0.5 * nll_loss(mono, batch["mono"])[1])
            alone.backward(g)
            for name, _, ga in alone.named_parameters():
                np.testing.assert_allclose(got[f"{ns.name}.{name}"], ga, rtol=1e-12, atol=1e-15)
        assert out is not None


class TestJointTrainStep:
    def pair(self, raw):
        rng = np.random.default_rng(4)
        se = SENode(SPEC.x_dim, SPEC.se_out_dim, (8,), rng=rng)
        sr = SRNode((SPEC.x_dim if raw else 0) + SPEC.se_out_dim, 5, 3, (8,), rng=rng)
        return se, sr

    def test_negative_lambda(self):
        se, sr = self.pair(False)
        with pytest.raises(ValueError):
            joint_train_step(se, sr, make_batch(SPEC), 0.1, lam=-0.1)
        with pytest.raises(ValueError):
            network_train_step(JointNetwork(SPEC, 1), make_batch(SPEC), 0.1, lam=-1)

    def test_lambda_zero_is_pure_mse_step(self):
        se, sr = self.pair(False)
        batch = make_batch(SPEC)
        ref = SENode.from_config(se.config())
        copy_state(ref, se)
        ref.backward(mse_loss(ref.forward(batch["x"]), batch["clean"])[1])
        expected = [p - 0.1 * g for p, g in zip(ref.parameters(), ref.gradients())]
        joint_train_step(se, sr, batch, 0.1, lam=0.0)
        for a, b in zip(se.parameters(), expected):
            np.testing.assert_array_equal(a, b)

    def summed_gradients(self, se, sr, batch, raw, with_sr=True):
        """Gradients of MSE + [NLL] from a single backward pass through copies."""
        se2, sr2 = SENode.from_config(se.config()), SRNode.from_config(sr.config())
        copy_state(se2, se)
        copy_state(sr2, sr)
        enh = se2.forward(batch["x"])
        _, d = mse_loss(enh, batch["clean"])
        if with_sr:
            cd, mono = sr2.forward(np.hstack([batch["x"], enh]) if raw else enh)
            dx = sr2.backward((nll_loss(cd, batch["labels"])[1], 0.5 * nll_loss(mono, batch["mono"])[1]))
            d = d + dx[:, -enh.shape[1] :]
        se2.backward(d)
        return [g.copy() for g in se2.gradients()], [g.copy() for g in sr2.gradients()]

    @pytest.mark.parametrize("raw", [True, False])
    @pytest.mark.parametrize("lam", [0.1, 1.0])
    def test_weighted_update(self, raw, lam):
        se, sr = self.pair(raw)
        batch = make_batch(SPEC)
        g_mse, _ = self.summed_gradients(se, sr, batch, raw, with_sr=False)
        g_sum, g_sr = self.summed_gradients(se, sr, batch, raw)
        se_before, sr_before = params(se), params(sr)
        joint_train_step(se, sr, batch, 0.05, lam=lam, sr_raw_input=raw)
        for p0, p1, a, b in zip(se_before, se.parameters(), g_mse, g_sum):
            np.testing.assert_allclose(p1, p0 - 0.05 * (a + lam * (b - a)), rtol=1e-12, atol=1e-14)
        for p0, p1, g in zip(sr_before, sr.parameters(), g_sr):
            np.testing.assert_allclose(p1, p0 - 0.05 * g, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("raw", [True, False])
    def test_single_level_network_is_flat_pipeline(self, raw):
        spec = NetworkSpec(2, 5, 3, (8,), (8,), sr_raw_input=raw)
        net = JointNetwork(spec, 1, np.random.default_rng(2))
        se, sr = SENode.from_config(net.nodes["SE0"].config()), SRNode.from_config(net.nodes["SR1"].config())
        copy_state(se, net.nodes["SE0"])
        copy_state(sr, net.nodes["SR1"])
        for seed in range(3):
            batch = make_batch(spec, seed=seed)
            out = net.forward(batch["x"])
            enh = se.forward(batch["x"])
            np.testing.assert_array_equal(out["SE0"], enh)
            np.testing.assert_array_equal(out["SR1"][0], sr.forward(np.hstack([batch["x"], enh]) if raw else enh)[0])
            a = network_train_step(net, batch, 0.05, 0.1)
            b = joint_train_step(se, sr, batch, 0.05, 0.1, sr_raw_input=raw)
            assert a == b
            for p, q in zip(net.nodes["SE0"].parameters(), se.parameters()):
                np.testing.assert_array_equal(p, q)
            for p, q in zip(net.nodes["SR1"].parameters(), sr.parameters()):
                np.testing.assert_array_equal(p, q)


class TestEvaluate:
    def test_chance_level(self):
        spec = NetworkSpec(2, 6, 3, (16,), (16,))
        net = JointNetwork(spec, 2, np.random.default_rng(0))
        rng = np.random.default_rng(5)
        n = 6000
        data = {"x": rng.standard_normal((n, spec.x_dim)), "labels": rng.integers(0, 6, n)}
        net.forward(data["x"])
        acc = evaluate_levels(net, data)
        sigma = np.sqrt(1 / 6 * 5 / 6 / n)
        for name, a in acc.items():
            assert abs(a - 1 / 6) < 4 * sigma, name

    def test_level_zero_matches_standalone(self):
        net = JointNetwork(SPEC, 2)
        data = make_batch(SPEC, n=40)
        net.forward(data["x"])
        alone = SRNode.from_config(net.nodes["SR0"].config())
        copy_state(alone, net.nodes["SR0"])
        expected = frame_accuracy(alone.forward(data["x"], train=False)[0], data["labels"])
        assert evaluate_levels(net, data)["SR0"] == expected

    def test_training_reduces_losses(self):
        task = joint_task(8, seed=0)
        data = frames_from_task(task)
        spec = NetworkSpec(task.dim, task.n_classes, task.n_mono, (16,), (16,))
        net = JointNetwork(spec, 2, np.random.default_rng(0))
        log = train_joint(net, data, epochs=3, lr=0.05, batch_size=64, dev=data)
        assert log.records[-1]["sr_loss"] < log.records[0]["sr_loss"]
        assert set(log.records[-1]["dev_acc"]) == {"SR0", "SR1", "SR2"}
        with pytest.raises(ValueError):
            train_joint(net, {k: v[:0] for k, v in data.items()})


class TestMultitask:
    def model(self, se_weight=1.0, sr_weight=1.0):
        m = MultitaskModel(SPEC, (8,), (8,), se_weight, sr_weight, np.random.default_rng(3))
        return m

    def test_head_gradients_add_in_trunk(self):
        batch = make_batch(SPEC)
        grads = {}
        for key, w in {"both": (1, 1), "se": (1, 0), "sr": (0, 1)}.items():
            m = self.model(*w)
            m.loss_and_backward(batch)
            grads[key] = {n: g.copy() for n, _, g in m.named_parameters()}
        for name in grads["both"]:
            np.testing.assert_allclose(grads["both"][name], grads["se"][name] + grads["sr"][name],
                                       rtol=1e-12, atol=1e-15)

    def test_detached_head_is_single_task(self):
        batch = make_batch(SPEC)
        m = self.model(1.0, 0.0)
        loss = m.loss_and_backward(batch)
        ref = self.model()
        h = ref.trunk.forward(batch["x"])
        value, d = mse_loss(ref.se.forward(h), batch["clean"])
        ref.zero_grad()
        ref.trunk.backward(ref.se.backward(d))
        assert loss == pytest.approx(value, rel=1e-15)
        for (name, _, g), (_, _, r) in zip(m.named_parameters(), ref.named_parameters()):
            np.testing.assert_array_equal(g, r)
            if name.startswith("sr."):
                assert not np.any(g)

    def test_gradcheck(self):
        m = self.model()
        batch = make_batch(SPEC)
        m.loss_and_backward(batch)
        analytic = [g.copy() for g in m.gradients()]
        worst = 0.0
        for p, g in zip(m.parameters(), analytic):
            num = numeric_gradient(lambda: m.loss_and_backward(batch), p)
            worst = max(worst, relative_error(g, num).max())
        assert worst <= 1e-5


class TestCheckpoint:
    @pytest.mark.parametrize("model", [
        JointNetwork(SPEC, 2), JointNetwork(NetworkSpec(3, 4, 2, (5, 6), (7,), sr_raw_input=False), 3),
        MultitaskModel(SPEC, (8,), (4,))])
    def test_round_trip(self, model):
        for _, a in model.state_arrays():
            a[...] = a.astype(np.float32)
        header, arrays = decode_checkpoint(encode_checkpoint(model))
        clone = build(header["topology"])
        load_state(clone, arrays)
        assert clone.config() == model.config()
        for (n, a), (m, b) in zip(model.state_arrays(), clone.state_arrays()):
            assert n == m
            np.testing.assert_array_equal(a, b)
