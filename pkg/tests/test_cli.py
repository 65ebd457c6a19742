import json
import subprocess
import sys

import numpy as np
import pytest

from sbirlab import formats
from sbirlab.cli import compare_reports, main

SMALL = {
    "synth": {"num_categories": 3, "instances_per_category": 4, "sketches_per_instance": 2,
              "image_size": [16, 16]},
    "split": {"test_fraction": 0.25},
    "schedule": {"epochs": 2, "drop_epoch": 1, "batch_size": 4, "initial_lr": 1e-3,
                 "dropped_lr": 1e-4, "finetune_lr": 1e-5},
    "photo_encoder": {"stage_channels": [4, 8]},
    "sketch_encoder": {"stage_channels": [4, 8]},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL))
    return d


@pytest.fixture(scope="module")
def pipeline(workdir):
    """generate -> train -> embed -> eval, run once for the module."""
    cfg = workdir / "cfg.json"
    steps = [
        ["generate", "--config", cfg, "--seed", 1, "--out", workdir / "data"],
        ["train", "--config", cfg, "--seed", 1, "--data", workdir / "data", "--out", workdir / "m.fgck"],
        ["embed", "--ckpt", workdir / "m.fgck", "--data", workdir / "data",
         "--photos", workdir / "p.fgem", "--sketches", workdir / "s.fgem"],
        ["eval", "--data", workdir / "data", "--photos", workdir / "p.fgem",
         "--sketches", workdir / "s.fgem", "--out", workdir / "r.json"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return workdir


def test_pipeline_outputs(pipeline, capsys):
    header = json.loads((pipeline / "data" / "manifest.jsonl").read_text().splitlines()[0])
    assert header["format"] == "sbirlab-manifest" and header["num_categories"] == 3
    ckpt = formats.read_checkpoint(pipeline / "m.fgck")
    assert ckpt.epoch == 2
    hist = formats.read_json(str(pipeline / "m.fgck") + ".history.json")
    assert [h["epoch"] for h in hist["epochs"]] == [1, 2]
    ids, vecs = formats.read_embeddings(pipeline / "p.fgem")
    assert vecs.shape == (3, 8)  # 25% of 12 instances
    report = formats.read_json(pipeline / "r.json")
    assert report["format"] == "sbirlab-report"
    assert set(report["recall"]) == {"@1", "@2"}
    assert len(report["queries"]) == report["num_queries"] == 6
    assert report["provenance"]["photos_sha256"]


def test_pipeline_is_reproducible(pipeline, tmp_path):
    cfg = pipeline / "cfg.json"
    assert main(["generate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "manifest.jsonl").read_bytes() == (pipeline / "data" / "manifest.jsonl").read_bytes()
    assert main(["train", "--config", str(cfg), "--seed", "1", "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "m.fgck")]) == 0
    assert (tmp_path / "m.fgck").read_bytes() == (pipeline / "m.fgck").read_bytes()
    assert main(["embed", "--ckpt", str(tmp_path / "m.fgck"), "--data", str(tmp_path / "d"),
                 "--photos", str(tmp_path / "p.fgem"), "--sketches", str(tmp_path / "s.fgem")]) == 0
    assert (tmp_path / "p.fgem").read_bytes() == (pipeline / "p.fgem").read_bytes()


def test_finetune_strategies_and_pool(pipeline, capsys, tmp_path):
    for strategy in ("baseline", "flip", "category", "flip_category"):
        code, out, err = run(capsys, "finetune", "--config", pipeline / "cfg.json", "--ckpt", pipeline / "m.fgck",
                             "--data", pipeline / "data", "--out", tmp_path / f"{strategy}.fgck",
                             "--strategy", strategy, "--epochs", 1,
                             "--set", "batch.category_repeat_range=[2,3]")
        assert code == 0, err
        assert out["strategy"] == strategy and out["epochs"] == 3
    code, out, err = run(capsys, "finetune", "--config", pipeline / "cfg.json", "--ckpt", pipeline / "m.fgck",
                         "--data", pipeline / "data", "--out", tmp_path / "s22.fgck", "--pool", "spatial2x2",
                         "--epochs", 1)
    assert code == 0, err
    code, out, _ = run(capsys, "embed", "--ckpt", tmp_path / "s22.fgck", "--data", pipeline / "data",
                       "--photos", tmp_path / "p.fgem", "--sketches", tmp_path / "s.fgem")
    assert out["dim"] == 32


def test_zero_lr_finetune_keeps_weights(pipeline, capsys, tmp_path):
    code, _, err = run(capsys, "finetune", "--config", pipeline / "cfg.json", "--ckpt", pipeline / "m.fgck",
                       "--data", pipeline / "data", "--out", tmp_path / "z.fgck", "--lr", 0, "--epochs", 1)
    assert code == 0, err
    a, b = formats.read_checkpoint(pipeline / "m.fgck"), formats.read_checkpoint(tmp_path / "z.fgck")
    assert all(np.array_equal(a.photo_params[k], b.photo_params[k]) for k in a.photo_params)


def test_identical_embeddings_give_perfect_recall(pipeline, capsys, tmp_path):
    ds, splits, _ = formats.read_dataset(pipeline / "data")
    test = formats.split_from_manifest(ds, splits, "test")
    rng = np.random.default_rng(0)
    photo_ids = np.array([r.instance_id for r in test])
    table = rng.normal(size=(len(photo_ids), 5))
    sketch_ids = np.array([s for r in test for s in r.sketch_refs])
    rows = np.array([i for i, r in enumerate(test) for _ in r.sketch_refs])
    formats.write_embeddings(tmp_path / "p.fgem", photo_ids, table)
    formats.write_embeddings(tmp_path / "s.fgem", sketch_ids, table[rows])
    code, out, err = run(capsys, "eval", "--data", pipeline / "data", "--photos", tmp_path / "p.fgem",
                         "--sketches", tmp_path / "s.fgem", "--out", tmp_path / "r.json", "--k", 1)
    assert code == 0, err
    assert out["recall"] == {"@1": 1.0}


def test_compare_identical_reports_is_zero(pipeline, capsys, tmp_path):
    code, out, _ = run(capsys, "compare", pipeline / "r.json", pipeline / "r.json", "--out", tmp_path / "c.json")
    assert code == 0
    assert all(v == 0.0 for v in out["recall_delta"].values())
    assert out["category_mismatch"]["baseline"] == out["category_mismatch"]["new"]


def _report(recall, n, cat, flip):
    return {"format": "sbirlab-report", "recall": {"@1": recall}, "num_queries": n,
            "category_mismatch_count": cat, "flip_confusion_count": flip}


def test_compare_relative_drop():
    doc = compare_reports(_report(0.0, 100, 100, 10), _report(0.1, 100, 90, 10))
    assert doc["category_mismatch"]["improvement_percentage"] == 10.0
    assert doc["misses"]["@1"] == {"baseline": 100, "new": 90, "improvement_percentage": 10.0}
    assert doc["flip_confusion"]["improvement_percentage"] == 0.0
    zero = compare_reports(_report(1.0, 4, 0, 0), _report(0.5, 4, 2, 0))
    assert zero["category_mismatch"]["improvement_percentage"] is None
    assert zero["flip_confusion"]["improvement_percentage"] == 0.0


def test_config_command_merges_overrides(capsys, workdir):
    code, out, _ = run(capsys, "config", "--config", workdir / "cfg.json", "--set", "loss.margin=2.5",
                       "--seed", 9)
    assert code == 0
    assert out["loss"]["margin"] == 2.5 and out["loss"]["classification_weight"] == 1.0
    assert out["synth"]["seed"] == out["schedule"]["seed"] == 9
    assert out["photo_encoder"]["stage_channels"] == [4, 8]


@pytest.mark.parametrize("argv, code, kind", [
    (["nonsense"], 2, "UsageError"),
    (["train", "--data", "x"], 2, "UsageError"),
    (["config", "--set", "bogus.key=1"], 2, "ConfigError"),
    (["config", "--set", "loss.margin=-1"], 2, "ConfigError"),
    (["config", "--set", "loss.colour=1"], 2, "ConfigError"),
    (["config", "--set", "missing-dot"], 2, "ConfigError"),
    (["eval", "--data", "/nonexistent", "--photos", "a", "--sketches", "b", "--out", "c"], 3, None),
])
def test_errors_are_one_line_json(capsys, argv, code, kind):
    got, out, err = run(capsys, *argv)
    assert got == code and out is None
    lines = err.strip().splitlines()
    assert len(lines) == 1
    doc = json.loads(lines[0])
    assert set(doc) == {"error", "message"}
    if kind:
        assert doc["error"] == kind


def test_corrupt_checkpoint_is_input_error(pipeline, capsys, tmp_path):
    bad = tmp_path / "bad.fgck"
    bad.write_bytes((pipeline / "m.fgck").read_bytes()[:100])
    code, _, err = run(capsys, "embed", "--ckpt", bad, "--data", pipeline / "data",
                       "--photos", tmp_path / "p", "--sketches", tmp_path / "s")
    assert code == 3 and json.loads(err)["error"] == "FormatError"


def test_dimension_mismatch_rejected(pipeline, capsys, tmp_path):
    ids, vecs = formats.read_embeddings(pipeline / "p.fgem")
    formats.write_embeddings(tmp_path / "p.fgem", ids, np.hstack([vecs, vecs]))
    code, _, err = run(capsys, "eval", "--data", pipeline / "data", "--photos", tmp_path / "p.fgem",
                       "--sketches", pipeline / "s.fgem", "--out", tmp_path / "r.json")
    assert code == 3 and json.loads(err)["error"] == "DimensionMismatch"


def test_module_entry_point(workdir):
    res = subprocess.run([sys.executable, "-m", "sbirlab", "config"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["loss"]["margin"] == 3.0
