import hashlib
import json
import math

import pytest
from numpy.testing import assert_allclose

from app import main
from database import RunDatabase
from lamp import HistoryDistribution, LampModel, SparseStochasticMatrix, Vocabulary, load_model, save_model

AB = Vocabulary(("a", "b"))


@pytest.fixture
def model_file(tmp_path, two_state_model):
    path = tmp_path / "model.json"
    save_model(two_state_model, path)
    return path


def corpus_file(tmp_path, text, name="corpus.txt"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def read_json(path):
    return json.loads(path.read_text())


def test_evaluate_worked_example(tmp_path, model_file, capsys):
    corpus = corpus_file(tmp_path, "a b b\n")
    out = tmp_path / "eval.json"
    assert main(["evaluate", "--model", str(model_file), "--corpus", str(corpus), "--output", str(out)]) == 0
    doc = read_json(out)
    assert doc["perplexity"] == pytest.approx(4.38529, abs=1e-4)
    assert doc["log_likelihood"] == pytest.approx(-2.956512, abs=1e-6)
    assert doc["transitions"] == 2
    assert doc["impossible_transitions"] == 0
    assert doc["num_parameters"] == 6
    assert capsys.readouterr().out.startswith("perplexity 4.3852")


def test_evaluate_reports_impossible_transitions(tmp_path):
    swap = LampModel(HistoryDistribution.first_order(),
                     SparseStochasticMatrix.from_dense([[0.0, 1.0], [1.0, 0.0]]), AB)
    model = tmp_path / "swap.json"
    save_model(swap, model)
    corpus = corpus_file(tmp_path, "a a b\n")
    out = tmp_path / "eval.json"
    assert main(["evaluate", "--model", str(model), "--corpus", str(corpus), "--output", str(out)]) == 0
    doc = read_json(out)
    assert doc["perplexity"] == math.inf
    assert doc["log_likelihood"] == -math.inf
    assert doc["impossible_transitions"] == 1
    assert "Infinity" in out.read_text()

    assert main(["evaluate", "--model", str(model), "--corpus", str(corpus), "--output", str(out), "--floor"]) == 0
    doc = read_json(out)
    assert doc["floor"] == 1e-10
    assert doc["impossible_transitions"] == 0
    assert math.isfinite(doc["perplexity"])


def test_data_errors_exit_with_two(tmp_path, model_file, capsys):
    out = tmp_path / "eval.json"
    unknown = corpus_file(tmp_path, "a z\n")
    assert main(["evaluate", "--model", str(model_file), "--corpus", str(unknown), "--output", str(out)]) == 2
    assert main(["evaluate", "--model", str(model_file), "--corpus", str(tmp_path / "none.txt"),
                 "--output", str(out)]) == 2
    assert "error:" in capsys.readouterr().err
    assert not out.exists()
    manifest = read_json(tmp_path / "eval.json.manifest.json")
    assert manifest["exit_code"] == 2
    assert manifest["outputs"] == []


def test_usage_errors_exit_with_one(tmp_path, model_file, capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["analyze", "entropy", "--output", str(tmp_path / "a.json")]) == 1
    assert main(["evaluate", "--model", str(model_file), "--corpus", "c.txt",
                 "--output", "o.json", "--threads", "many"]) == 1
    assert "usage:" in capsys.readouterr().err
    # a missing --model is only detected by the analyze handler
    assert main(["analyze", "stationary", "--output", str(tmp_path / "a.json")]) == 1


def test_train_half_round_keeps_the_empirical_matrix(tmp_path):
    corpus = corpus_file(tmp_path, "a b a b b a\nb a a b\n")
    out = tmp_path / "model.json"
    assert main(["train", "--corpus", str(corpus), "--output", str(out), "--k", "1", "--rounds", "0.5"]) == 0
    model = load_model(out)
    assert_allclose(model.P.to_dense(), [[0.25, 0.75], [0.75, 0.25]])
    assert_allclose(model.w.weights, [1.0])
    lines = (tmp_path / "model.json.report.jsonl").read_text().splitlines()
    assert [json.loads(line)["block"] for line in lines] == ["init", "w"]


def test_train_report_never_decreases(tmp_path, capsys):
    corpus = corpus_file(tmp_path, "a b a b b a b a a b\nb a b b a b a a\na b b a\n")
    out = tmp_path / "model.json"
    trace = tmp_path / "trace.csv"
    assert main(["train", "--corpus", str(corpus), "--output", str(out), "--k", "2",
                 "--rounds", "1.5", "--trace-csv", str(trace)]) == 0
    records = [json.loads(line) for line in (tmp_path / "model.json.report.jsonl").read_text().splitlines()]
    assert [r["block"] for r in records] == ["init", "w", "P", "w"]
    assert all("wall_time" not in r for r in records)
    ll = [r["log_likelihood"] for r in records]
    assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))
    assert trace.read_text().splitlines()[0].startswith("half_iteration")
    assert "train perplexity" in capsys.readouterr().out


def test_pipeline_is_deterministic(tmp_path, monkeypatch):
    raw = "a b c a b\nc b a c\nb c a b c\na c b a\nc a b c\n" * 2
    names = ["clean.json", "train.json", "test.json", "m.json", "m.json.report.jsonl", "eval.json"]
    runs = []
    for run in ("first", "second"):
        workdir = tmp_path / run
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        corpus_file(workdir, raw, "raw.txt")
        assert main(["preprocess", "--input", "raw.txt", "--output", "clean.json", "--min-count", "1",
                     "--train-output", "train.json", "--test-output", "test.json"]) == 0
        assert main(["train", "--corpus", "train.json", "--output", "m.json", "--k", "2", "--rounds", "1"]) == 0
        assert main(["evaluate", "--model", "m.json", "--corpus", "test.json", "--floor",
                     "--output", "eval.json"]) == 0
        runs.append({name: (workdir / name).read_bytes() for name in names})
    assert runs[0] == runs[1]


def test_unwritable_output_exits_with_two(tmp_path, capsys):
    corpus = corpus_file(tmp_path, "a b a b b a\n")
    manifest = tmp_path / "run.manifest.json"
    assert main(["--manifest", str(manifest), "train", "--corpus", str(corpus),
                 "--output", str(tmp_path / "missing" / "m.json"), "--k", "1", "--rounds", "0.5"]) == 2
    assert "error:" in capsys.readouterr().err
    doc = read_json(manifest)
    assert doc["exit_code"] == 2
    assert "m.json" in doc["summary"]


def test_unwritable_manifest_is_logged(tmp_path, model_file, caplog):
    corpus = corpus_file(tmp_path, "a b b\n")
    argv = ["--manifest", str(tmp_path / "missing" / "run.json"), "evaluate", "--model", str(model_file),
            "--corpus", str(corpus), "--output", str(tmp_path / "eval.json")]
    assert main(argv) == 0
    assert "could not write manifest" in caplog.text


def test_preprocess_then_train(tmp_path):
    raw = corpus_file(tmp_path, "a a b c\nb c\nq\na b c a\n" * 3)
    out = tmp_path / "clean.json"
    train, test = tmp_path / "train.json", tmp_path / "test.json"
    assert main(["preprocess", "--input", str(raw), "--output", str(out), "--min-count", "2",
                 "--train-output", str(train), "--test-output", str(test), "--split-fraction", "0.75"]) == 0
    doc = read_json(out)
    assert doc["report"]["sequences_in"] == 12
    assert doc["report"]["dropped_short"] == 3
    assert doc["config"]["rare_min_count"] == 2
    assert train.exists() and test.exists()
    assert main(["train", "--corpus", str(train), "--holdout", str(test), "--floor",
                 "--output", str(tmp_path / "m.json"), "--k", "2", "--rounds", "1"]) == 0
    records = (tmp_path / "m.json.report.jsonl").read_text().splitlines()
    assert all("holdout_perplexity" in json.loads(line) for line in records)


def test_generate_single_step_prints_the_start_token(tmp_path, model_file, capsys):
    out = tmp_path / "gen.json"
    assert main(["generate", "--model", str(model_file), "--start", "b", "--length", "1",
                 "--output", str(out)]) == 0
    assert capsys.readouterr().out.strip() == "b"
    assert read_json(out)["sequences"] == [["b"]]


def test_generate_is_reproducible(tmp_path, model_file):
    outs = [tmp_path / "g1.json", tmp_path / "g2.json"]
    for out in outs:
        assert main(["generate", "--model", str(model_file), "--start", "a", "--length", "40",
                     "--runs", "3", "--seed", "7", "--output", str(out)]) == 0
    first, second = (read_json(p)["sequences"] for p in outs)
    assert first == second
    assert len(first) == 3 and all(len(seq) == 40 for seq in first)


def test_analyze_stationary(tmp_path, model_file, capsys):
    out = tmp_path / "pi.json"
    assert main(["analyze", "stationary", "--model", str(model_file), "--output", str(out)]) == 0
    doc = read_json(out)
    assert_allclose(doc["outputs"]["pi"], [2 / 3, 1 / 3], atol=1e-10)
    assert "pi = (0.666667, 0.333333)" in capsys.readouterr().out


def test_analyze_mixing_and_bound(tmp_path, model_file):
    out = tmp_path / "mix.json"
    assert main(["analyze", "mixing", "--model", str(model_file), "--output", str(out)]) == 0
    assert read_json(out)["outputs"]["mixing_time"] == 12
    assert main(["analyze", "bound", "--model", str(model_file), "--w", "0.5,0.5",
                 "--delta", "0.01", "--epsilon", "1", "--T", "100", "--output", str(out)]) == 0
    doc = read_json(out)
    assert doc["outputs"]["bound"] == 100
    assert doc["outputs"]["vacuous"] is False


def test_vacuous_bound_only_fails_when_strict(tmp_path, model_file):
    out = tmp_path / "bound.json"
    args = ["analyze", "bound", "--model", str(model_file), "--w", "1", "--T", "0", "--output", str(out)]
    assert main(args) == 0
    assert read_json(out)["outputs"]["vacuous"] is True
    assert main(args + ["--strict"]) == 3


def test_analyze_exponent_of_first_order_weights(tmp_path):
    out = tmp_path / "exp.json"
    trace = tmp_path / "trace.csv"
    assert main(["analyze", "exponent", "--w", "1", "--steps", "100", "--output", str(out),
                 "--trace-csv", str(trace)]) == 0
    doc = read_json(out)
    assert doc["outputs"]["rate"] == 1.0
    assert doc["outputs"]["clt_defined"] is False
    assert doc["passed"] is True
    assert len(trace.read_text().splitlines()) == 101


def test_non_ergodic_model_exits_with_three(tmp_path, capsys):
    swap = LampModel(HistoryDistribution([0.5, 0.5]),
                     SparseStochasticMatrix.from_dense([[0.0, 1.0], [1.0, 0.0]]), AB)
    model = tmp_path / "swap.json"
    save_model(swap, model)
    assert main(["analyze", "stationary", "--model", str(model), "--output", str(tmp_path / "pi.json")]) == 3
    assert "not ergodic" in capsys.readouterr().err


def test_baseline_command(tmp_path):
    train = corpus_file(tmp_path, "a b a b b a\nb a a b\n", "train.txt")
    test = corpus_file(tmp_path, "a b b a\n", "test.txt")
    out = tmp_path / "kn.json"
    model_out = tmp_path / "kn.model.json"
    assert main(["baseline", "--train", str(train), "--test", str(test), "--order", "2",
                 "--smoothing", "kn", "--output", str(out), "--model-output", str(model_out)]) == 0
    doc = read_json(out)
    assert doc["smoothing"] == "kneser_ney"
    assert doc["discount"] == 0.75
    assert math.isfinite(doc["test_perplexity"])
    assert model_out.exists()


def test_manifest_records_inputs_and_config(tmp_path, model_file):
    corpus = corpus_file(tmp_path, "a b b\n")
    out = tmp_path / "eval.json"
    assert main(["evaluate", "--model", str(model_file), "--corpus", str(corpus), "--output", str(out)]) == 0
    manifest = read_json(tmp_path / "eval.json.manifest.json")
    assert manifest["command"] == "evaluate"
    assert manifest["exit_code"] == 0
    assert manifest["outputs"] == [str(out)]
    hashes = {entry["path"]: entry["sha256"] for entry in manifest["inputs"]}
    assert hashes[str(corpus)] == hashlib.sha256(corpus.read_bytes()).hexdigest()
    assert "handler" not in manifest["config"]
    assert manifest["config"]["floor"] is None
    assert manifest["summary"].startswith("perplexity")


def test_registry_records_each_run(tmp_path, model_file):
    corpus = corpus_file(tmp_path, "a b b\n")
    db = tmp_path / "runs.db"
    manifest = tmp_path / "custom.manifest.json"
    argv = ["--registry", str(db), "--manifest", str(manifest), "evaluate", "--model", str(model_file),
            "--corpus", str(corpus), "--output", str(tmp_path / "eval.json")]
    assert main(argv) == 0
    assert manifest.exists()
    registry = RunDatabase(str(db))
    runs = registry.get_recent_runs()
    assert [run["command"] for run in runs] == ["evaluate"]
    assert registry.find_runs_by_input(hashlib.sha256(corpus.read_bytes()).hexdigest()) == [runs[0]["id"]]


def test_cli_logger_is_named_after_its_module():
    import app

    assert app.logger.name == app.__name__ == "app"
