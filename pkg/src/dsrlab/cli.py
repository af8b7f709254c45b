"""Command-line entry points.

Every command reads a JSON config (validated, unknown keys rejected, a
``seed`` is mandatory) and writes its outputs atomically below ``--out``.
Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from dsrlab.errors import FormatError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GRADCHECK_MODELS = ("dense", "bn", "relu_rnn", "gru", "mgru", "ligru", "jointnet")


class UsageError(Exception):
    """Bad command-line usage (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- schemas

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_SIZES = {"type": "array", "items": _POS_INT, "minItems": 1}


def _obj(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False}


def _top(properties: dict, required=()) -> dict:
    return _obj({"seed": _INT, **properties}, ("seed", *required))


ROOM = _obj({"dimensions": _VEC3,
             "reflection_coeffs": {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 6,
                                                    "maxItems": 6}]},
             "sound_speed": _POS}, ["dimensions"])
SOURCE = _obj({"position": _VEC3, "azimuth": _NUM, "elevation": _NUM, "p": _NUM, "q": _NUM, "eps": _POS},
              ["position"])
MIC = _obj({"position": _VEC3, "pattern": {"enum": ["omnidirectional", "cardioid"]}, "azimuth": _NUM,
            "elevation": _NUM}, ["position"])
EXCITATION = _obj({"kind": {"enum": ["MLS", "LSS", "ESS"]}, "length": _POS_INT, "w1": _POS, "w2": _POS,
                   "amplitude": _POS, "fade_ms": {"type": "number", "minimum": 0}, "sample_rate": _POS},
                  ["kind", "length"])
FRAME_TASK = _obj({"n_train": _POS_INT, "n_dev": _POS_INT, "n_classes": _POS_INT, "dim": _POS_INT,
                   "noise": _POS, "task_seed": _INT})
JOINT_TASK = _obj({"n_train": _POS_INT, "n_dev": _POS_INT, "n_classes": _POS_INT, "n_mono": _POS_INT,
                   "dim": _POS_INT, "noise": _POS, "task_seed": _INT})
RNN_MODEL = _obj({"kind": {"enum": ["relu_rnn", "gru", "mgru", "ligru"]}, "hidden": _SIZES,
                  "bidirectional": _BOOL, "dropout": {"type": "number", "minimum": 0, "maximum": 0.99}},
                 ["kind", "hidden"])
RNN_TRAINER = _obj({"optimizer": {"enum": ["sgd", "adam"]}, "lr": _POS, "epochs": _POS_INT,
                    "batch_size": _POS_INT, "schedule": _BOOL, "clip": _POS})
NETWORK = _obj({"levels": _POS_INT, "se_hidden": _SIZES, "sr_hidden": _SIZES, "batchnorm": _BOOL,
                "dropout": {"type": "number", "minimum": 0, "maximum": 0.99}, "sr_raw_input": _BOOL,
                "mono_weight": {"type": "number", "minimum": 0}})
JOINT_TRAINER = _obj({"epochs": _POS_INT, "lr": _POS, "lam": {"type": "number", "minimum": 0},
                      "batch_size": _POS_INT})

SCHEMAS = {
    "simulate-ir": _top({"fs": _POS, "room": ROOM, "source": SOURCE, "mic": MIC,
                         "max_order": {"type": "integer", "minimum": 0}, "n_samples": _POS_INT},
                        ["room", "source", "mic"]),
    "measure-ir": _top({"excitation": EXCITATION, "ir_length": _POS_INT, "recording": _STR, "ir": _STR,
                        "periods": _POS_INT, "snr_db": _NUM}, ["excitation", "ir_length"]),
    "contaminate": _top({"clean": _STR, "ir": _STR, "noise": _STR, "snr_db": _NUM, "truncate": _BOOL},
                        ["clean", "ir"]),
    "features": _top({"inputs": {"type": "array", "items": _STR, "minItems": 1},
                      "kind": {"enum": ["FBANK", "MFCC", "MFCC+D", "MFCC+D+DD"]},
                      "n_filters": _POS_INT, "frame_ms": _POS, "shift_ms": _POS, "cmvn": _BOOL},
                     ["inputs"]),
    "train-rnn": _top({"task": FRAME_TASK, "model": RNN_MODEL, "trainer": RNN_TRAINER}, ["model"]),
    "train-jointnet": _top({"task": JOINT_TASK, "network": NETWORK, "trainer": JOINT_TRAINER}),
    "pearson": _top({"x": _STR, "y": _STR, "n_past": {"type": "integer", "minimum": 0},
                     "n_future": {"type": "integer", "minimum": 0}}, ["x", "y"]),
    "importance": _top({"checkpoint": _STR, "n_past": {"type": "integer", "minimum": 0},
                        "n_future": {"type": "integer", "minimum": 0}, "dims": _POS_INT},
                       ["checkpoint", "n_past", "n_future", "dims"]),
    "gates": _top({"checkpoint": _STR, "task": FRAME_TASK, "max_lag": _POS_INT,
                   "layer": {"type": "integer", "minimum": 0}, "remove_mean": _BOOL}, ["checkpoint"]),
    "gradnorms": _top({"checkpoint": _STR, "task": FRAME_TASK, "epochs": _POS_INT}, ["checkpoint"]),
}


def load_config(path, command: str, seed: int | None = None) -> dict:
    """Read and validate a JSON config; ``seed`` (if given) overrides the file's."""
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise FormatError(f"{path}: {where}: {exc.message}") from exc
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else base / p


def _write_text(path: Path, text: str) -> None:
    from dsrlab.wavio import atomic_write

    data = text.encode("utf-8")
    atomic_write(path, lambda fh: fh.write(data))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{what} is not finite")


# --------------------------------------------------------------------------- commands


def cmd_simulate_ir(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.room import MicSpec, RoomSpec, SourceSpec, compute_metrics, save_ir, simulate_ir

    room_cfg = dict(cfg["room"])
    room_cfg["dimensions"] = tuple(room_cfg["dimensions"])
    if isinstance(room_cfg.get("reflection_coeffs"), list):
        room_cfg["reflection_coeffs"] = tuple(room_cfg["reflection_coeffs"])
    ir = simulate_ir(RoomSpec(**room_cfg), SourceSpec(**cfg["source"]), MicSpec(**cfg["mic"]),
                     cfg.get("fs", 16000.0), cfg.get("max_order"), cfg.get("n_samples"))
    metrics = compute_metrics(ir)
    save_ir(out / "ir.wav", ir, metrics)
    return f"ir.wav: {len(ir)} samples, T60 {metrics.t60:.3f} s, DRR {metrics.drr:.2f} dB"


def cmd_measure_ir(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.measure import ExcitationKind, ExcitationSpec, estimate_ir, generate
    from dsrlab.room import save_ir
    from dsrlab.signal import convolve, mix_at_snr
    from dsrlab.wavio import read_wav, write_wav

    spec = ExcitationSpec(**cfg["excitation"])
    excitation = generate(spec)
    if spec.kind is ExcitationKind.MLS:
        excitation = excitation.with_samples(np.tile(excitation.samples, cfg.get("periods", 2)))
    if "recording" in cfg:
        recording = read_wav(_resolve(base, cfg["recording"]))
    elif "ir" in cfg:
        h = read_wav(_resolve(base, cfg["ir"]))
        recording = convolve(excitation, h.samples)
        if "snr_db" in cfg:
            rng = np.random.default_rng(cfg["seed"])
            noise = recording.with_samples(rng.standard_normal(len(recording)))
            recording = mix_at_snr(recording, noise, cfg["snr_db"])
    else:
        raise FormatError("measure-ir needs either 'recording' or 'ir'")
    est = estimate_ir(excitation, recording, spec.kind, cfg["ir_length"], spec.w1, spec.w2)
    write_wav(out / "excitation.wav", excitation)
    save_ir(out / "measured_ir.wav", est)
    return f"measured_ir.wav: {len(est)} samples, first lag {est.lag0}"


def cmd_contaminate(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.signal import contaminate
    from dsrlab.wavio import read_wav, write_wav

    clean = read_wav(_resolve(base, cfg["clean"]))
    ir = read_wav(_resolve(base, cfg["ir"]))
    if ir.sample_rate != clean.sample_rate:
        raise FormatError("clean speech and IR sample rates differ")
    noise = read_wav(_resolve(base, cfg["noise"])) if "noise" in cfg else None
    y = contaminate(clean, ir, noise, cfg.get("snr_db"), cfg.get("truncate", False))
    write_wav(out / "contaminated.wav", y)
    return f"contaminated.wav: {len(y)} samples"


def _feature_job(args):
    path, out_path, kind, n_filters, frame_ms, shift_ms, use_cmvn = args
    from dsrlab.features import FeatureKind, MelFilterbankSpec, cmvn, deltas, fbank, mfcc, write_features
    from dsrlab.wavio import read_wav

    sig = read_wav(path)
    spec = MelFilterbankSpec(n_filters=n_filters)
    kind = FeatureKind(kind)
    if kind is FeatureKind.FBANK:
        feats = fbank(sig, spec, frame_ms, shift_ms)
    else:
        feats = mfcc(sig, spec=spec, frame_ms=frame_ms, shift_ms=shift_ms)
        if kind is not FeatureKind.MFCC:
            feats = deltas(feats, order=1 if kind is FeatureKind.MFCC_D else 2)
    if use_cmvn:
        feats = cmvn(feats)
    write_features(out_path, feats)
    return out_path.name, feats.n_frames, feats.dims


def cmd_features(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    inputs = [_resolve(base, p) for p in cfg["inputs"]]
    stems = [p.stem for p in inputs]
    if len(set(stems)) != len(stems):
        raise FormatError("input files must have distinct names")
    tasks = [(p, out / f"{p.stem}.dsrf", cfg.get("kind", "FBANK"), cfg.get("n_filters", 40),
              cfg.get("frame_ms", 25.0), cfg.get("shift_ms", 10.0), cfg.get("cmvn", False)) for p in inputs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_feature_job, tasks))
    else:
        results = [_feature_job(t) for t in tasks]
    return "\n".join(f"{name}: {n} frames x {d} dims" for name, n, d in results)


def _frame_task(cfg: dict, seed: int):
    from dsrlab.synthetic import frame_classification_task

    t = cfg.get("task", {})
    common = {"n_classes": t.get("n_classes", 6), "dim": t.get("dim", 8), "noise": t.get("noise", 1.0),
              "task_seed": t.get("task_seed", seed)}
    train = frame_classification_task(t.get("n_train", 64), seed=seed, **common)
    dev = frame_classification_task(t.get("n_dev", 16), seed=seed + 1, **common)
    return train, dev, common


def cmd_train_rnn(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.nn.checkpoint import save_checkpoint
    from dsrlab.nn.optim import LrSchedule, make_optimizer
    from dsrlab.nn.train import train
    from dsrlab.rnn import RnnModel

    seed = cfg["seed"]
    train_set, dev_set, task = _frame_task(cfg, seed)
    m, tr = cfg["model"], cfg.get("trainer", {})
    model = RnnModel(m["kind"], task["dim"], m["hidden"], task["n_classes"], m.get("bidirectional", False),
                     dropout=m.get("dropout", 0.0), rng=np.random.default_rng(seed))
    lr = tr.get("lr", 0.005)
    kwargs = {"clip": tr["clip"]} if "clip" in tr else {}
    optimizer = make_optimizer(tr.get("optimizer", "adam"), lr, **kwargs)
    schedule = LrSchedule(lr) if tr.get("schedule", False) else None
    log = train(model, train_set, optimizer, schedule, tr.get("epochs", 10), tr.get("batch_size", 8),
                dev=dev_set, seed=seed)
    for record in log.records:
        _check_finite(record["train_loss"], "training loss")
    save_checkpoint(out / "model.dsrm", model, {"seed": seed, "task": task})
    _write_text(out / "log.jsonl", _jsonl(log.records))
    final = log.final
    return f"model.dsrm: {model.param_count()} parameters, dev accuracy {final['dev_acc']:.4f}"


def cmd_train_jointnet(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.jointnet import JointNetwork, NetworkSpec, evaluate_levels, frames_from_task, train_joint
    from dsrlab.nn.checkpoint import save_checkpoint
    from dsrlab.synthetic import joint_task

    seed = cfg["seed"]
    t, n, tr = cfg.get("task", {}), cfg.get("network", {}), cfg.get("trainer", {})
    common = {"n_classes": t.get("n_classes", 12), "n_mono": t.get("n_mono", 4), "dim": t.get("dim", 4),
              "noise": t.get("noise", 0.6), "task_seed": t.get("task_seed", seed)}
    train_task = joint_task(t.get("n_train", 50), seed=seed, **common)
    dev_task = joint_task(t.get("n_dev", 150), seed=seed + 1, **common)
    spec = NetworkSpec(common["dim"], common["n_classes"], common["n_mono"],
                       tuple(n.get("se_hidden", (64, 64))), tuple(n.get("sr_hidden", (64, 64))),
                       n.get("batchnorm", True), n.get("dropout", 0.0), n.get("sr_raw_input", True),
                       n.get("mono_weight", 0.5))
    net = JointNetwork(spec, n.get("levels", 2), np.random.default_rng(seed))
    dev = frames_from_task(dev_task)
    log = train_joint(net, frames_from_task(train_task), tr.get("epochs", 20), tr.get("lr", 0.05),
                      tr.get("lam", 0.1), tr.get("batch_size", 128), seed, dev)
    for record in log.records:
        _check_finite(record["se_loss"] + record["sr_loss"], "training loss")
    for name, node in net.nodes.items():
        save_checkpoint(out / f"node_{name}.dsrm", node, {"seed": seed, "node": name})
    save_checkpoint(out / "network.dsrm", net, {"seed": seed})
    _write_text(out / "log.jsonl", _jsonl(log.records))
    acc = evaluate_levels(net, dev)
    rows = [(int(name[2:]), name, float(a)) for name, a in acc.items()]
    _write_text(out / "levels.csv", _csv_text(["level", "node", "accuracy"], rows))
    return "\n".join(f"{name}: dev frame accuracy {a:.4f}" for _, name, a in rows)


def _load_matrix(path: Path) -> np.ndarray:
    from dsrlab.features import read_features

    if path.suffix == ".dsrf":
        return read_features(path).values
    if path.suffix in (".csv", ".txt"):
        try:
            data = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return data
    raise FormatError(f"{path}: expected a .dsrf or .csv feature file")


def cmd_pearson(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.features import pearson_lag_correlation

    x = _load_matrix(_resolve(base, cfg["x"]))
    y = _load_matrix(_resolve(base, cfg["y"]))
    res = pearson_lag_correlation(x, y, cfg.get("n_past", 10), cfg.get("n_future", 10))
    rows = [(int(p), float(r)) for p, r in zip(res.lags, res.r)]
    text = _csv_text(["lag", "r"], rows)
    _write_text(out / "pearson.csv", text)
    return text.rstrip("\n")


def _first_weight(model) -> np.ndarray:
    for name, p, _ in model.named_parameters():
        if name.endswith("W") and p.ndim == 2:
            return p
    raise FormatError("checkpoint holds no dense weight matrix")


def cmd_importance(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.features import frame_importance
    from dsrlab.nn.checkpoint import load_checkpoint

    model, _ = load_checkpoint(_resolve(base, cfg["checkpoint"]))
    res = frame_importance(_first_weight(model), cfg["n_past"], cfg["n_future"], cfg["dims"])
    text = _csv_text(["frame", "importance"], [(int(p), float(v)) for p, v in zip(res.lags, res.values)])
    _write_text(out / "importance.csv", text)
    return text.rstrip("\n")


def _rnn_checkpoint(cfg: dict, base: Path):
    from dsrlab.nn.checkpoint import load_checkpoint
    from dsrlab.rnn import RnnModel

    model, meta = load_checkpoint(_resolve(base, cfg["checkpoint"]), np.random.default_rng(cfg["seed"]))
    if not isinstance(model, RnnModel):
        raise FormatError("checkpoint does not hold a recurrent model")
    task_cfg = dict(meta.get("task", {}))
    task_cfg.update(cfg.get("task", {}))
    return model, task_cfg


def cmd_gates(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.rnn import gate_correlation

    model, task = _rnn_checkpoint(cfg, base)
    _, dev, _ = _frame_task({"task": task}, cfg["seed"])
    res = gate_correlation(model, dev.xs, cfg.get("max_lag", 20), cfg.get("layer", 0),
                           cfg.get("remove_mean", False))
    rows = [(int(k), float(a), float(b)) for k, a, b in zip(res.lags, res.czr, res.czz)]
    _write_text(out / "gates.csv", _csv_text(["lag", "czr", "czz"], rows))
    return f"gates.csv: C(z,r) peaks at lag {res.peak_lag}"


def cmd_gradnorms(cfg: dict, out: Path, base: Path, jobs: int) -> str:
    from dsrlab.rnn import grad_norm_stats

    model, task = _rnn_checkpoint(cfg, base)
    train_set, _, _ = _frame_task({"task": task}, cfg["seed"])
    stats = grad_norm_stats(model, train_set, epochs=cfg.get("epochs", 1))
    for value in stats.values():
        _check_finite(value, "gradient norm")
    text = _csv_text(["parameter", "mean_grad_norm"], [(k, float(v)) for k, v in stats.items()])
    _write_text(out / "gradnorms.csv", text)
    return text.rstrip("\n")


def run_gradcheck(model_name: str, seed: int = 0, bidirectional: bool = False, layers: int = 1):
    """Finite-difference check of one model family; returns a GradCheckResult."""
    from dsrlab.nn.core import mlp
    from dsrlab.nn.gradcheck import grad_check
    from dsrlab.rnn import RnnModel

    rng = np.random.default_rng(seed)
    if model_name in ("dense", "bn"):
        model = mlp([6, 8, 8, 4], batchnorm=model_name == "bn", output_activation="linear", rng=rng)
        return grad_check(model, rng.standard_normal((10, 6)), seed=seed)
    if model_name == "jointnet":
        return jointnet_gradcheck(seed)
    model = RnnModel(model_name, 3, [5] * layers, 4, bidirectional, output_activation="linear", rng=rng)
    x = rng.standard_normal((6, 3, 3))
    lengths = np.array([6, 4, 5])
    mask = (np.arange(6)[:, None] < lengths[None, :]).astype(float)[:, :, None]
    r = np.random.default_rng(seed + 1).standard_normal((6, 3, 4)) * mask

    def loss_fn(o):
        return np.sum(o * r), r

    return grad_check(model, x, loss_fn=loss_fn, forward=lambda m, inp: m.forward(inp, True, lengths),
                      check_input=True)


def jointnet_gradcheck(seed: int = 0, levels: int = 2, hidden: int = 8, lam: float = 0.1, n: int = 12):
    """Check the lambda-weighted network gradients of a tiny unfolded graph.

    SE parameters are compared with central differences of
    ``sum C_SE + lam * sum C_SR``, SR parameters with those of
    ``sum C_SE + sum C_SR``. An SR node's auxiliary monophone loss only
    enters the objective of its own parameters. The finite-difference
    forward pass runs in extended precision so round-off stays below the
    tiniest gradients.
    """
    from dsrlab.jointnet import SE, JointNetwork, NetworkSpec
    from dsrlab.nn.gradcheck import GradCheckResult, numeric_gradient, relative_error

    spec = NetworkSpec(feat_dim=2, n_classes=5, n_mono=3, se_hidden=(hidden,), sr_hidden=(hidden,))
    net = JointNetwork(spec, levels, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    batch = {"x": rng.standard_normal((n, spec.x_dim)), "clean": rng.standard_normal((n, spec.se_out_dim)),
             "labels": rng.integers(0, spec.n_classes, n), "mono": rng.integers(0, spec.n_mono, n)}
    net.forward(batch["x"], True)
    _, _, grads = net.combined_gradients(batch, lam)
    ld = np.longdouble
    rows = np.arange(n)

    def objective(owner: str):
        out = net.forward(batch["x"].astype(ld), True)
        total = ld(0)
        for name in net.se_names:
            d = out[name].astype(ld) - batch["clean"]
            total += np.sum(d * d) / d.size
        scale = ld(lam) if owner.startswith(SE) else ld(1)
        for name in net.sr_names:
            total -= scale * np.sum(out[name][0].astype(ld)[rows, batch["labels"]]) / n
        if not owner.startswith(SE):
            total -= ld(spec.mono_weight) * np.sum(out[owner][1].astype(ld)[rows, batch["mono"]]) / n
        return total

    per = {}
    for (name, p, _), g in zip(net.named_parameters(), grads):
        owner = name.split(".")[0]
        gn = numeric_gradient(lambda: objective(owner), p).astype(np.float64)
        per[name] = float(relative_error(g, gn).max())
    return GradCheckResult(max(per.values()), per)


# --------------------------------------------------------------------------- report

REPORT_FILES = ("pearson.csv", "importance.csv", "gates.csv", "gradnorms.csv", "levels.csv")


def build_report(directory: Path) -> str:
    """Plain-text tables of every analysis CSV found in ``directory``."""
    sections = []
    for name in REPORT_FILES:
        path = directory / name
        if not path.exists():
            continue
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise FormatError(f"{path}: empty table")
        widths = [max(len(r[i]) for r in rows if i < len(r)) for i in range(len(rows[0]))]
        lines = [f"== {path.stem} =="]
        for k, row in enumerate(rows):
            lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        sections.append("\n".join(lines))
    if not sections:
        raise FormatError(f"{directory}: no analysis tables to report")
    return "\n\n".join(sections) + "\n"


# --------------------------------------------------------------------------- parser

COMMANDS = {
    "simulate-ir": (cmd_simulate_ir, "Simulate a room impulse response with the image method."),
    "measure-ir": (cmd_measure_ir, "Estimate an IR from an MLS, LSS or ESS recording."),
    "contaminate": (cmd_contaminate, "Convolve clean speech with an IR and optionally add noise."),
    "features": (cmd_features, "Extract FBANK or MFCC features into DSRF files."),
    "train-rnn": (cmd_train_rnn, "Train a recurrent acoustic model on a synthetic frame task."),
    "train-jointnet": (cmd_train_jointnet, "Train an unfolded network of SE and SR DNNs."),
}
ANALYSES = {
    "pearson": (cmd_pearson, "Lagged Pearson correlation between two feature streams."),
    "importance": (cmd_importance, "Context-frame importance from first-layer weights."),
    "gates": (cmd_gates, "Cross-correlation of GRU update and reset gates."),
    "gradnorms": (cmd_gradnorms, "Mean per-sentence gradient norms of a recurrent model."),
}


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, metavar="PATH", help="JSON config file")
    p.add_argument("--out", default=".", metavar="DIR", help="output directory (default: current)")
    p.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsrlab", description="Distant speech recognition toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        _common(sub.add_parser(name, help=help_text, description=help_text))
    analyze = sub.add_parser("analyze", help="Run an analysis and write a CSV table.",
                             description="Run an analysis and write a CSV table.")
    asub = analyze.add_subparsers(dest="analysis", metavar="ANALYSIS", parser_class=_Parser)
    asub.required = True
    for name, (_, help_text) in ANALYSES.items():
        _common(asub.add_parser(name, help=help_text, description=help_text))
    gc = sub.add_parser("gradcheck", help="Finite-difference gradient check of a model family.",
                        description="Finite-difference gradient check of a model family.")
    gc.add_argument("--model", required=True, choices=GRADCHECK_MODELS, help="model family")
    gc.add_argument("--bidirectional", action="store_true", help="bidirectional recurrent layers")
    gc.add_argument("--layers", type=int, default=1, metavar="N", help="stacked recurrent layers")
    gc.add_argument("--tol", type=float, default=1e-5, help="maximum relative error (default: 1e-5)")
    _common(gc, config_required=False)
    rep = sub.add_parser("report", help="Summarize analysis CSVs as plain-text tables.",
                         description="Summarize analysis CSVs as plain-text tables.")
    rep.add_argument("input", metavar="DIR", help="directory holding analysis CSV files")
    _common(rep, config_required=False)
    return parser


def _dispatch(args) -> str:
    out = Path(args.out)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    if args.command == "gradcheck":
        if args.layers < 1:
            raise UsageError("--layers must be at least 1")
        res = run_gradcheck(args.model, args.seed or 0, args.bidirectional, args.layers)
        lines = [f"{name}: {err:.3e}" for name, err in res.per_array.items()]
        lines.append(f"max relative error {res.max_rel_error:.3e} (tolerance {args.tol:.0e})")
        if not res.passed(args.tol):
            raise NumericError("\n".join(lines))
        return "\n".join(lines)
    if args.command == "report":
        text = build_report(Path(args.input))
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "report.txt", text)
        return text.rstrip("\n")
    key = args.analysis if args.command == "analyze" else args.command
    handler = ANALYSES[key][0] if args.command == "analyze" else COMMANDS[key][0]
    cfg = load_config(args.config, key, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    return handler(cfg, out, Path(args.config).resolve().parent, args.jobs)


def main(argv=None) -> int:
    from dsrlab.room import EstimationError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        message = _dispatch(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, EstimationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if message:
        print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
