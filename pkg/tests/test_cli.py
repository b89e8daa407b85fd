import json
import subprocess
import sys

import pytest
import yaml

from seqground.cli import main


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture()
def dataset(tmp_path, capsys):
    spec = write_yaml(tmp_path / "spec.yaml", {"n_tasks": 40, "seed": 3})
    code, out, _ = run(capsys, "gen", spec, "--out", tmp_path / "data")
    assert code == 0
    assert json.loads(out) == {"train": str(tmp_path / "data/train.jsonl"), "eval": str(tmp_path / "data/eval.jsonl"),
                               "n_train": 32, "n_eval": 8}
    return tmp_path / "data"


def train_config(tmp_path, data, name="run", **kw):
    doc = {"variant": "groundflow", "epochs": 1, "batch_size": 8, "hidden": 8, "lr": 1e-3, "seed": 1,
           "train_path": str(data / "train.jsonl"), "eval_path": str(data / "eval.jsonl"),
           "output_dir": str(tmp_path / name)}
    doc.update(kw)
    return write_yaml(tmp_path / f"{name}.yaml", doc)


def test_gen_is_byte_identical(tmp_path, capsys, dataset):
    spec = tmp_path / "spec.yaml"
    assert run(capsys, "gen", spec, "--out", tmp_path / "again")[0] == 0
    for name in ("train.jsonl", "eval.jsonl"):
        assert (dataset / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_audit_reports_ok(capsys, dataset):
    code, out, _ = run(capsys, "audit", dataset / "train.jsonl")
    assert code == 0
    assert json.loads(out)["ok"] is True


def test_train_and_eval_are_deterministic(tmp_path, capsys, dataset):
    for name in ("a", "b"):
        cfg = train_config(tmp_path, dataset, name)
        assert run(capsys, "train", cfg)[0] == 0
        ck = tmp_path / name / "checkpoint.json"
        code, out, _ = run(capsys, "eval", ck, "--data", dataset / "eval.jsonl", "--out", tmp_path / name / "eval")
        assert code == 0
        res = json.loads(out)
        assert 0 <= res["t_acc"] <= res["s_acc"] <= 1
    for rel in ("checkpoint.json", "loss_curve.json", "eval/report.json", "eval/report.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_train_override_changes_variant(tmp_path, capsys, dataset):
    cfg = train_config(tmp_path, dataset)
    assert run(capsys, "train", cfg, "--set", "variant=lstm", "--set", "epochs=0")[0] == 0
    ck = json.loads((tmp_path / "run" / "checkpoint.json").read_text())
    assert ck["variant"] == "lstm"


def test_ablate_emits_table_and_reruns_identically(tmp_path, capsys, dataset):
    base = yaml.safe_load(train_config(tmp_path, dataset).read_text())
    grid = write_yaml(tmp_path / "grid.yaml", {"base": base, "variants": ["none", "groundflow"], "seeds": [1, 2],
                                               "baseline": "none"})
    outs = []
    for name in ("x", "y"):
        code, out, _ = run(capsys, "ablate", grid, "--out", tmp_path / name)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1] and "groundflow" in outs[0]
    for name in ("comparison.json", "comparison.csv", "comparison.txt"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()
    assert len((tmp_path / "x" / "comparison.csv").read_text().splitlines()) == 2 * 2 + 1


def test_bad_config_gives_json_error(tmp_path, capsys, dataset):
    cfg = train_config(tmp_path, dataset, lr=2.0)
    code, out, err = run(capsys, "train", cfg)
    assert code != 0 and out == ""
    doc = json.loads(err)
    assert doc["error"] == "ConfigError" and "lr" in doc["message"]


def test_missing_dataset_gives_json_error(tmp_path, capsys):
    code, _, err = run(capsys, "audit", tmp_path / "nope.jsonl")
    assert code == 2
    assert json.loads(err)["error"] == "FileNotFoundError"


def test_corrupt_dataset_gives_json_error(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text('{"format": "seqground-tasks", "version": 7}\n')
    code, _, err = run(capsys, "audit", tmp_path / "bad.jsonl")
    assert code == 2
    assert "schema version 7" in json.loads(err)["message"]


def test_unsatisfiable_spec_gives_json_error(tmp_path, capsys):
    spec = write_yaml(tmp_path / "spec.yaml", {"n_tasks": 5, "n_colors": 2})
    code, _, err = run(capsys, "gen", spec, "--out", tmp_path / "d")
    assert code == 2
    assert json.loads(err)["error"] == "SpecError"


def test_grid_with_one_variant_rejected(tmp_path, capsys, dataset):
    base = yaml.safe_load(train_config(tmp_path, dataset).read_text())
    grid = write_yaml(tmp_path / "grid.yaml", {"base": base, "variants": ["none"], "seeds": [1]})
    code, _, err = run(capsys, "ablate", grid)
    assert code == 2 and "at least two" in json.loads(err)["message"]


def test_console_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "seqground.cli", "audit", str(tmp_path / "missing.jsonl")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "FileNotFoundError"
