import json

import pandas as pd
import pytest
from typer.testing import CliRunner

from conftest import make_spec
from moeprune.pipelines.cli import app
from moeprune.pipelines.runner import Pipeline, Step

runner = CliRunner()

SPEC = make_spec(layers=3, experts_per_layer=4, fanout=1, max_seq_len=12, weight_seed=21)


def invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


def ok(*args):
    result = invoke(*args)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """gen-model -> gen-dataset -> calibrate -> cache-logits -> make-manifest in one directory."""
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(SPEC.to_dict()))
    ok("gen-model", d / "spec.json", "--out", d / "model.json")
    ok("gen-dataset", d / "model.json", "--out", d / "dataset.jsonl",
       "--n-samples", 6, "--prompt-len", 3, "--answer-len", 3, "--seed", 5)
    ok("calibrate", d / "model.json", d / "dataset.jsonl", "--criterion", "frequency", "--out", d)
    ok("cache-logits", d / "model.json", d / "dataset.jsonl", "--out", d / "logits.cache")
    ok("make-manifest", d / "model.json", d / "dataset.jsonl", d / "order_frequency.json",
       "--out", d, "--budget", 3, "--parity", "any", "--population-size", 8, "--elite-size", 2,
       "--generations", 3, "--seed", 1, "--cache", d / "logits.cache", "--search-out", d / "search")
    return d


def test_gen_model_prints_the_spec_hash(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC.to_dict()))
    result = ok("gen-model", tmp_path / "spec.json", "--out", tmp_path / "model.json")
    artifact = json.loads((tmp_path / "model.json").read_text())
    assert artifact["spec_hash"] == SPEC.spec_hash()
    assert SPEC.spec_hash() in result.output
    assert len(artifact["parameter_checksum"]) == 64


def test_gen_model_seed_override(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC.to_dict()))
    ok("gen-model", tmp_path / "spec.json", "--out", tmp_path / "model.json", "--seed", 99)
    assert json.loads((tmp_path / "model.json").read_text())["spec"]["weight_seed"] == 99


def test_fanout_above_experts_exits_with_validation_code(tmp_path):
    bad = {**SPEC.to_dict(), "fanout": [1, 5, 1]}
    (tmp_path / "spec.json").write_text(json.dumps(bad))
    result = invoke("gen-model", tmp_path / "spec.json", "--out", tmp_path / "model.json")
    assert result.exit_code == 2
    assert "fanout" in result.output


def test_missing_spec_file_exits_with_io_code(tmp_path):
    result = invoke("gen-model", tmp_path / "missing.json", "--out", tmp_path / "model.json")
    assert result.exit_code == 5


def test_calibration_is_byte_identical(work, tmp_path):
    ok("calibrate", work / "model.json", work / "dataset.jsonl", "--criterion", "frequency", "--out", tmp_path)
    for name in ("scores_frequency.json", "order_frequency.json"):
        assert (tmp_path / name).read_bytes() == (work / name).read_bytes()


def test_manifest_records_inputs(work):
    manifest = json.loads((work / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"model_spec", "dataset", "order", "budget", "search_config", "cache"}
    assert manifest["criterion"] == "frequency"
    assert json.loads((work / "budget.json").read_text())["budget"] == 3


def test_search_then_brute_force(work, tmp_path):
    result = ok("search", work / "manifest.json", "--out", tmp_path / "search")
    assert "best allocation" in result.output
    best = json.loads((tmp_path / "search" / "best_allocation.json").read_text())
    assert sum(best["allocation"]) == 3
    assert best["fitness"]["kind"] == "esap"
    for name in ("search_run.json", "search_log.jsonl", "density.csv", "history.csv"):
        assert (tmp_path / "search" / name).exists()
    assert len((tmp_path / "search" / "search_log.jsonl").read_text().splitlines()) == 4

    ok("brute-force", work / "manifest.json", "--limit", 100, "--out", tmp_path / "bf")
    table = pd.read_csv(tmp_path / "bf" / "brute_force.csv")
    assert len(table) == 10
    assert best["fitness"]["value"] <= table["fitness"].max() + 1e-12


def test_search_outputs_are_reproducible(work, tmp_path):
    ok("search", work / "manifest.json", "--out", tmp_path / "a")
    ok("search", work / "manifest.json", "--out", tmp_path / "b")
    for name in ("search_run.json", "best_allocation.json", "search_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluate_zero_allocation_scores_one(work, tmp_path):
    (tmp_path / "zero.json").write_text("[0, 0, 0]")
    ok("evaluate", work / "model.json", work / "order_frequency.json", tmp_path / "zero.json",
       work / "dataset.jsonl", "--fitness", "esap", "--fitness", "kl",
       "--cache", work / "logits.cache", "--out", tmp_path / "eval.csv")
    report = pd.read_csv(tmp_path / "eval.csv")
    assert list(report["allocation"]) == ["allocation", "uniform"]
    assert report["esap"].tolist() == pytest.approx([1.0, 1.0], abs=1e-9)
    assert report["kl"].tolist() == pytest.approx([0.0, 0.0], abs=1e-9)


def test_evaluate_rejects_an_allocation_over_the_caps(work, tmp_path):
    (tmp_path / "bad.json").write_text("[4, 0, 0]")
    result = invoke("evaluate", work / "model.json", work / "order_frequency.json", tmp_path / "bad.json",
                    work / "dataset.jsonl", "--fitness", "esap")
    assert result.exit_code == 2


def test_evaluate_refuses_an_allocation_searched_on_another_model(work, tmp_path):
    other = make_spec(layers=3, experts_per_layer=4, fanout=1, max_seq_len=12, weight_seed=22)
    (tmp_path / "best.json").write_text(json.dumps({
        "allocation": [1, 1, 1], "parity": "any", "inputs": {"model_spec": other.spec_hash()},
    }))
    result = invoke("evaluate", work / "model.json", work / "order_frequency.json", tmp_path / "best.json",
                    work / "dataset.jsonl", "--fitness", "esap", "--cache", work / "logits.cache")
    assert result.exit_code == 3


def test_brute_force_over_limit_exits_with_size_code(work, tmp_path):
    result = invoke("brute-force", work / "manifest.json", "--limit", 5, "--out", tmp_path / "bf")
    assert result.exit_code == 4
    assert "count=10" in result.output


def test_changed_dataset_makes_the_manifest_stale(work, tmp_path):
    d = tmp_path / "copy"
    d.mkdir()
    for name in ("spec.json", "model.json", "dataset.jsonl", "order_frequency.json", "logits.cache"):
        (d / name).write_bytes((work / name).read_bytes())
    ok("make-manifest", d / "model.json", d / "dataset.jsonl", d / "order_frequency.json",
       "--out", d, "--budget", 3, "--parity", "any", "--cache", d / "logits.cache")
    with open(d / "dataset.jsonl", "a") as f:
        f.write(json.dumps({"prompt": [1, 2], "answer": [3]}) + "\n")
    assert invoke("search", d / "manifest.json", "--out", d / "search").exit_code == 3
    assert invoke("brute-force", d / "manifest.json", "--limit", 100).exit_code == 3


def test_infeasible_budget_exits_with_validation_code(work, tmp_path):
    result = invoke("make-manifest", work / "model.json", work / "dataset.jsonl", work / "order_frequency.json",
                    "--out", tmp_path, "--budget", 3, "--parity", "even")
    assert result.exit_code == 2


def test_unknown_pipeline_is_rejected():
    assert invoke("run", "nope").exit_code != 0


def test_pipeline_runs_steps_in_order():
    seen = []
    results = Pipeline("demo", [Step("a", lambda: seen.append("a") or 1),
                                Step("b", lambda x: seen.append(x) or 2, {"x": "b"})]).run()
    assert seen == ["a", "b"]
    assert results == {"a": 1, "b": 2}
