import json

import jsonschema
import pytest

from cva.cli import SCHEMAS, run

TINY = {
    "epochs": 1, "batch_size": 4, "lr": 1e-3, "grad_clip": 1.0, "eval_every": 1,
    "model": {"dim": 16, "heads": 2, "cte": {"windows": [4, 8], "n_queries": 4}, "dec_queries": 5,
              "contrast_dim": 8},
}


def cli_json(capsys, *argv):
    code = run(["--json", *argv])
    out = capsys.readouterr().out
    assert code == 0, out
    return json.loads(out)


@pytest.fixture
def manifest(tmp_path, capsys):
    rep = cli_json(capsys, "gen-data", "--out", str(tmp_path / "data"), "--seed", "1", "--n-train", "8",
                   "--n-eval", "4")
    return rep["manifest"]


def test_gen_data_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        rep = cli_json(capsys, "gen-data", "--out", str(tmp_path / name), "--seed", "5", "--n-train", "6")
        jsonschema.validate(rep, SCHEMAS["gen-data"])
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_seed_env_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CVA_SEED", "7")
    rep = cli_json(capsys, "gen-data", "--out", str(tmp_path / "d"), "--n-train", "3")
    assert rep["seed"] == 7


def test_stats(manifest, capsys):
    rep = cli_json(capsys, "stats", "--manifest", manifest)
    jsonschema.validate(rep, SCHEMAS["stats"])
    assert rep["theta_min"] <= rep["theta_max"] and rep["alpha"] == 10


def test_boundary_iou(capsys):
    rep = cli_json(capsys, "boundary-iou", "--gt", "10,20", "--pred", "12,20", "--w", "2")
    jsonschema.validate(rep, SCHEMAS["boundary-iou"])
    assert (rep["start"], rep["end"], rep["combined"]) == (0.0, 1.0, 0.5)


def test_boundary_iou_table(capsys):
    assert run(["boundary-iou", "--gt", "0,4", "--pred", "0,4"]) == 0
    assert "boundary-iou 1.0000" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["boundary-iou", "--gt", "10,20", "--pred", "12,20", "--bogus"],
    ["boundary-iou", "--gt", "20,10", "--pred", "1,2"],
    ["boundary-iou", "--gt", "0,1", "--pred", "0,1", "--w", "0"],
    ["nope"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert "error" in capsys.readouterr().err


def test_bad_manifest_exit_1(tmp_path, capsys):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    assert run(["stats", "--manifest", str(bad)]) == 1
    assert run(["stats", "--manifest", str(tmp_path / "missing.json")]) == 1


def test_check_config(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(TINY))
    assert run(["check-config", "--config", str(good)]) == 0
    assert json.loads(capsys.readouterr().out)["batch_size"] == 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 1, "lr_typo": 3}))
    assert run(["check-config", "--config", str(bad)]) == 1


def test_augment(manifest, tmp_path, capsys):
    out = tmp_path / "aug"
    rep = cli_json(capsys, "augment", "--manifest", manifest, "--out", str(out), "--seed", "2")
    jsonschema.validate(rep, SCHEMAS["augment"])
    log = json.loads((out / "augment_log.json").read_text())
    assert len(log["records"]) == len(rep["records"]) > 0
    first = log["records"][0]
    assert all((out / v["path"]).exists() for v in first["views"])


def test_schema_command(capsys):
    assert run(["schema"]) == 0
    assert set(json.loads(capsys.readouterr().out)) == set(SCHEMAS)


def test_train_eval_diagnose(manifest, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    rep = cli_json(capsys, "train", "--manifest", manifest, "--config", str(cfg), "--out", str(out))
    jsonschema.validate(rep, SCHEMAS["train"])
    assert rep["steps"] == 2 and (out / "config.json").exists() and (out / "metrics.jsonl").exists()

    ev = cli_json(capsys, "eval", "--ckpt", str(out / "ckpt"), "--manifest", manifest)
    jsonschema.validate(ev, SCHEMAS["eval"])
    assert ev["n_queries"] == 4
    assert ev == cli_json(capsys, "eval", "--ckpt", str(out / "ckpt"), "--manifest", manifest)

    for mode in ("zero", "random"):
        d = cli_json(capsys, "diagnose", "--ckpt", str(out / "ckpt"), "--manifest", manifest, "--mode", mode)
        jsonschema.validate(d, SCHEMAS["diagnose"])
        assert d["mode"] == mode

    assert run(["eval", "--ckpt", str(tmp_path / "nowhere"), "--manifest", manifest]) == 1


def test_eval_rejects_incompatible_dims(manifest, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert run(["train", "--manifest", manifest, "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    other = cli_json(capsys, "gen-data", "--out", str(tmp_path / "wide"), "--dim", "8", "--n-train", "2",
                     "--n-eval", "2")
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(tmp_path / "run" / "ckpt"), "--manifest", other["manifest"]]) == 1
    assert "incompatible" in capsys.readouterr().err
