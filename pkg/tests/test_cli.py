import json

import numpy as np
import pytest

from dsrlab.cli import ANALYSES, COMMANDS, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, GRADCHECK_MODELS, main
from dsrlab.features import read_features
from dsrlab.nn.checkpoint import load_checkpoint
from dsrlab.signal import AudioSignal
from dsrlab.wavio import read_wav, write_wav

FS = 16000.0

SIMULATE = {"seed": 0, "room": {"dimensions": [5.0, 4.0, 3.0], "reflection_coeffs": 0.8},
            "source": {"position": [1.0, 1.2, 1.5]}, "mic": {"position": [3.5, 2.6, 1.4]}}
RNN = {"seed": 3, "task": {"n_train": 6, "n_dev": 4, "dim": 5, "n_classes": 4},
       "model": {"kind": "gru", "hidden": [8]}, "trainer": {"epochs": 2, "batch_size": 3}}
JOINT = {"seed": 1, "task": {"n_train": 3, "n_dev": 2},
         "network": {"levels": 1, "se_hidden": [8], "sr_hidden": [8]}, "trainer": {"epochs": 1}}


def run(*argv):
    return main([str(a) for a in argv])


def config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def tree(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def noise_wav(path, seconds, seed=0):
    rng = np.random.default_rng(seed)
    write_wav(path, AudioSignal(0.1 * rng.standard_normal(int(seconds * FS)), FS))


@pytest.fixture(scope="module")
def rnn_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("rnn")
    path = base / "cfg.json"
    path.write_text(json.dumps(RNN))
    assert run("train-rnn", "--config", path, "--out", base / "out") == EXIT_OK
    return base


class TestHelp:
    @pytest.mark.parametrize("argv", [[]] + [[c] for c in COMMANDS] + [["analyze", a] for a in ANALYSES]
                             + [["gradcheck"], ["report"]])
    def test_every_command(self, argv, capsys):
        assert run(*argv, "--help") == EXIT_OK
        text = capsys.readouterr().out
        if argv:
            for flag in ("--config", "--out", "--seed", "--jobs"):
                assert flag in text

    def test_gradcheck_flags(self, capsys):
        run("gradcheck", "--help")
        text = capsys.readouterr().out
        for flag in ("--model", "--bidirectional", "--layers", "--tol"):
            assert flag in text


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        [], ["frobnicate"], ["simulate-ir"], ["analyze"], ["gradcheck"], ["gradcheck", "--model", "lstm"],
        ["gradcheck", "--model", "gru", "--layers", "0"], ["simulate-ir", "--config", "x", "--jobs", "0"]])
    def test_usage(self, argv, capsys):
        assert run(*argv) == EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert run("simulate-ir", "--config", tmp_path / "none.json", "--out", tmp_path) == EXIT_DATA

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{seed: 1")
        assert run("simulate-ir", "--config", path, "--out", tmp_path) == EXIT_DATA

    @pytest.mark.parametrize("mutate", [
        lambda c: c.pop("seed"), lambda c: c.update(colour="blue"),
        lambda c: c["room"].update(dimensions=[1, 2]), lambda c: c["mic"].update(pattern="figure8")])
    def test_schema_violations(self, tmp_path, mutate):
        data = json.loads(json.dumps(SIMULATE))
        mutate(data)
        assert run("simulate-ir", "--config", config(tmp_path, data), "--out", tmp_path / "o") == EXIT_DATA
        assert not (tmp_path / "o" / "ir.wav").exists()

    def test_source_outside_room(self, tmp_path):
        data = json.loads(json.dumps(SIMULATE))
        data["source"]["position"] = [9.0, 1.0, 1.0]
        assert run("simulate-ir", "--config", config(tmp_path, data), "--out", tmp_path) == EXIT_DATA

    def test_missing_input_file(self, tmp_path):
        cfg = config(tmp_path, {"seed": 0, "clean": "absent.wav", "ir": "absent_ir.wav"})
        assert run("contaminate", "--config", cfg, "--out", tmp_path) == EXIT_DATA

    def test_numeric_failure(self, capsys):
        assert run("gradcheck", "--model", "dense", "--tol", "1e-300") == EXIT_NUMERIC
        assert "numeric failure" in capsys.readouterr().err


class TestSimulateAndMeasure:
    def test_simulate_is_idempotent(self, tmp_path):
        cfg = config(tmp_path, SIMULATE)
        for d in ("a", "b"):
            assert run("simulate-ir", "--config", cfg, "--out", tmp_path / d) == EXIT_OK
        assert tree(tmp_path / "a") == tree(tmp_path / "b")
        assert read_wav(tmp_path / "a" / "ir.wav").sample_rate == FS

    def test_seed_flag_is_accepted(self, tmp_path):
        cfg = config(tmp_path, SIMULATE)
        assert run("simulate-ir", "--config", cfg, "--out", tmp_path / "s", "--seed", 7) == EXIT_OK

    @pytest.mark.parametrize("kind,length", [("MLS", 16383), ("ESS", 16384)])
    def test_measure_from_simulated_ir(self, tmp_path, kind, length):
        assert run("simulate-ir", "--config", config(tmp_path, SIMULATE), "--out", tmp_path / "sim") == EXIT_OK
        h = read_wav(tmp_path / "sim" / "ir.wav").samples
        cfg = config(tmp_path, {"seed": 0, "excitation": {"kind": kind, "length": length},
                                "ir": "sim/ir.wav", "ir_length": len(h) + 200}, "m.json")
        for d in ("m1", "m2"):
            assert run("measure-ir", "--config", cfg, "--out", tmp_path / d) == EXIT_OK
        assert tree(tmp_path / "m1") == tree(tmp_path / "m2")
        est = read_wav(tmp_path / "m1" / "measured_ir.wav").samples
        assert len(est) > 0

    def test_measure_needs_a_source(self, tmp_path):
        cfg = config(tmp_path, {"seed": 0, "excitation": {"kind": "MLS", "length": 1023}, "ir_length": 100})
        assert run("measure-ir", "--config", cfg, "--out", tmp_path) == EXIT_DATA


class TestContaminate:
    def test_output_length(self, tmp_path):
        noise_wav(tmp_path / "clean.wav", 1.0)
        noise_wav(tmp_path / "ir.wav", 0.5, seed=1)
        cfg = config(tmp_path, {"seed": 0, "clean": "clean.wav", "ir": "ir.wav"})
        assert run("contaminate", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        assert len(read_wav(tmp_path / "o" / "contaminated.wav").samples) == 16000 + 8000 - 1

    def test_noise_is_reproducible(self, tmp_path):
        noise_wav(tmp_path / "clean.wav", 0.5)
        noise_wav(tmp_path / "ir.wav", 0.05, seed=1)
        noise_wav(tmp_path / "noise.wav", 0.3, seed=2)
        cfg = config(tmp_path, {"seed": 0, "clean": "clean.wav", "ir": "ir.wav", "noise": "noise.wav",
                                "snr_db": 10.0, "truncate": True})
        for d in ("a", "b"):
            assert run("contaminate", "--config", cfg, "--out", tmp_path / d) == EXIT_OK
        assert tree(tmp_path / "a") == tree(tmp_path / "b")
        assert len(read_wav(tmp_path / "a" / "contaminated.wav").samples) == 8000

    def test_rate_mismatch(self, tmp_path):
        noise_wav(tmp_path / "clean.wav", 0.1)
        write_wav(tmp_path / "ir.wav", AudioSignal(np.ones(10) * 0.1, 8000.0))
        cfg = config(tmp_path, {"seed": 0, "clean": "clean.wav", "ir": "ir.wav"})
        assert run("contaminate", "--config", cfg, "--out", tmp_path) == EXIT_DATA


class TestFeatures:
    @pytest.mark.parametrize("kind,dims", [("FBANK", 40), ("MFCC", 13), ("MFCC+D+DD", 39)])
    def test_kinds(self, tmp_path, kind, dims):
        noise_wav(tmp_path / "a.wav", 0.5)
        cfg = config(tmp_path, {"seed": 0, "inputs": ["a.wav"], "kind": kind, "cmvn": True})
        assert run("features", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        feats = read_features(tmp_path / "o" / "a.dsrf")
        assert feats.dims == dims and feats.n_frames == 48

    def test_parallel_matches_serial(self, tmp_path):
        for i in range(3):
            noise_wav(tmp_path / f"u{i}.wav", 0.3, seed=i)
        cfg = config(tmp_path, {"seed": 0, "inputs": [f"u{i}.wav" for i in range(3)]})
        assert run("features", "--config", cfg, "--out", tmp_path / "serial") == EXIT_OK
        assert run("features", "--config", cfg, "--out", tmp_path / "pool", "--jobs", 2) == EXIT_OK
        assert tree(tmp_path / "serial") == tree(tmp_path / "pool")

    def test_duplicate_stems(self, tmp_path):
        (tmp_path / "d").mkdir()
        noise_wav(tmp_path / "a.wav", 0.1)
        noise_wav(tmp_path / "d" / "a.wav", 0.1)
        cfg = config(tmp_path, {"seed": 0, "inputs": ["a.wav", "d/a.wav"]})
        assert run("features", "--config", cfg, "--out", tmp_path / "o") == EXIT_DATA


class TestTraining:
    def test_rnn_outputs(self, rnn_run):
        out = rnn_run / "out"
        model, meta = load_checkpoint(out / "model.dsrm")
        assert meta["seed"] == 3 and model.config()["kind"] == "gru"
        records = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in records] == [1, 2]

    def test_rnn_is_idempotent(self, rnn_run, tmp_path):
        assert run("train-rnn", "--config", rnn_run / "cfg.json", "--out", tmp_path) == EXIT_OK
        assert tree(tmp_path) == tree(rnn_run / "out")

    def test_seed_override_changes_the_run(self, rnn_run, tmp_path):
        assert run("train-rnn", "--config", rnn_run / "cfg.json", "--out", tmp_path, "--seed", 4) == EXIT_OK
        assert (tmp_path / "model.dsrm").read_bytes() != (rnn_run / "out" / "model.dsrm").read_bytes()

    def test_jointnet(self, tmp_path):
        cfg = config(tmp_path, JOINT)
        for d in ("a", "b"):
            assert run("train-jointnet", "--config", cfg, "--out", tmp_path / d) == EXIT_OK
        assert tree(tmp_path / "a") == tree(tmp_path / "b")
        names = set(tree(tmp_path / "a"))
        assert {"network.dsrm", "node_SE0.dsrm", "node_SR1.dsrm", "levels.csv", "log.jsonl"} <= names
        assert (tmp_path / "a" / "levels.csv").read_text().splitlines()[0] == "level,node,accuracy"


class TestAnalyses:
    def test_pearson_identity(self, tmp_path, capsys):
        np.savetxt(tmp_path / "x.csv", np.random.default_rng(0).standard_normal((50, 3)), delimiter=",")
        cfg = config(tmp_path, {"seed": 0, "x": "x.csv", "y": "x.csv", "n_past": 2, "n_future": 2})
        assert run("analyze", "pearson", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        lines = (tmp_path / "o" / "pearson.csv").read_text().splitlines()
        assert lines[0] == "lag,r" and "0,1.000000" in lines
        assert "0,1.000" in capsys.readouterr().out

    def test_pearson_rejects_other_formats(self, tmp_path):
        (tmp_path / "x.npy").write_bytes(b"")
        cfg = config(tmp_path, {"seed": 0, "x": "x.npy", "y": "x.npy"})
        assert run("analyze", "pearson", "--config", cfg, "--out", tmp_path) == EXIT_DATA

    def test_importance(self, tmp_path):
        assert run("train-jointnet", "--config", config(tmp_path, JOINT), "--out", tmp_path / "j") == EXIT_OK
        cfg = config(tmp_path, {"seed": 0, "checkpoint": "j/node_SE0.dsrm", "n_past": 10, "n_future": 10,
                                "dims": 4}, "imp.json")
        assert run("analyze", "importance", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        rows = (tmp_path / "o" / "importance.csv").read_text().splitlines()
        assert len(rows) == 22
        assert max(float(r.split(",")[1]) for r in rows[1:]) == 1.0

    def test_gates_and_gradnorms(self, rnn_run, tmp_path):
        cfg = config(tmp_path, {"seed": 0, "checkpoint": str(rnn_run / "out" / "model.dsrm"), "max_lag": 4})
        assert run("analyze", "gates", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        assert len((tmp_path / "o" / "gates.csv").read_text().splitlines()) == 10
        cfg = config(tmp_path, {"seed": 0, "checkpoint": str(rnn_run / "out" / "model.dsrm")}, "g.json")
        assert run("analyze", "gradnorms", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        assert run("report", tmp_path / "o", "--out", tmp_path / "r") == EXIT_OK
        text = (tmp_path / "r" / "report.txt").read_text()
        assert "== gates ==" in text and "== gradnorms ==" in text

    def test_gates_need_a_recurrent_checkpoint(self, tmp_path):
        assert run("train-jointnet", "--config", config(tmp_path, JOINT), "--out", tmp_path / "j") == EXIT_OK
        cfg = config(tmp_path, {"seed": 0, "checkpoint": "j/network.dsrm"}, "g.json")
        assert run("analyze", "gates", "--config", cfg, "--out", tmp_path) == EXIT_DATA

    def test_report_of_empty_directory(self, tmp_path):
        assert run("report", tmp_path, "--out", tmp_path / "r") == EXIT_DATA


class TestGradcheck:
    @pytest.mark.parametrize("model", GRADCHECK_MODELS)
    def test_models_pass(self, model, capsys):
        assert run("gradcheck", "--model", model) == EXIT_OK
        assert "max relative error" in capsys.readouterr().out

    @pytest.mark.parametrize("model", ["gru", "ligru"])
    def test_stacked_bidirectional(self, model):
        assert run("gradcheck", "--model", model, "--bidirectional", "--layers", 2) == EXIT_OK
