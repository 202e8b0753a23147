import csv
import json

import pytest

from rankpyr.cli import ABLATION_GRIDS, run

TINY = {"steps": 2, "crop_size": 64, "sigma": 3.0, "lr": 1e-3, "eval_every": 1, "checkpoint_every": 1,
        "batch_labeled": 2, "batch_unlabeled": 2,
        "model": {"decoder_width": 4, "decoder_channels": [4] * 6}}


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth-gen", "--out", str(root / "c"), "--n", "8", "--size", "64", "--max-count", "20"]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    return root


def test_synth_gen_writes_manifest(corpus):
    m = json.loads((corpus / "c" / "manifest.json").read_text())
    assert m["command"] == "synth-gen" and m["seed"] == 0
    assert len(json.loads((corpus / "c" / "corpus.json").read_text())["entries"]) == 8


def train(corpus, run_dir, *extra):
    return run(["train", "--config", str(corpus / "cfg.json"), "--corpus", str(corpus / "c"),
                "--labeled-ratio", "0.5", "--run-dir", str(run_dir), *extra])


def test_train_twice_identical(corpus, tmp_path, capsys):
    assert train(corpus, tmp_path / "a", "--seed", "7") == 0
    assert train(corpus, tmp_path / "b", "--seed", "7") == 0
    for name in ("manifest.json", "train_log.jsonl", "final.npz", "final.json", "ckpt_000001.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert (tmp_path / "a" / "loss_curves.png").stat().st_size > 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["config"]["seed"] == 7 and man["config"]["labeled_ratio"] == 0.5


def test_rerun_from_manifest(corpus, tmp_path, capsys):
    assert train(corpus, tmp_path / "a", "--seed", "3", "--lambda", "0.5") == 0
    assert run(["train", "--config", str(tmp_path / "a" / "manifest.json"), "--run-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "final.npz").read_bytes() == (tmp_path / "b" / "final.npz").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["config"]["lambda"] == 0.5


def test_eval_oracle_zero_mae(corpus, tmp_path, capsys):
    rc = run(["eval", "--oracle", "--corpus", str(corpus / "c"), "--run-dir", str(tmp_path / "e"), "--overlays", "2"])
    assert rc == 0
    out = last_json(capsys)
    assert out["mae"] == pytest.approx(0.0, abs=1e-3) and out["n"] == 8
    rows = list(csv.DictReader(open(tmp_path / "e" / "eval_report.csv")))
    assert len(rows) == 8
    assert len(list((tmp_path / "e" / "overlays").glob("*.png"))) == 2


def test_eval_and_audit_checkpoint(corpus, tmp_path, capsys):
    assert train(corpus, tmp_path / "t") == 0
    ck = str(tmp_path / "t" / "final.npz")
    assert run(["eval", "--checkpoint", ck, "--corpus", str(corpus / "c"), "--run-dir", str(tmp_path / "e")]) == 0
    assert last_json(capsys)["mae"] >= 0
    assert run(["rank-audit", "--checkpoint", ck, "--corpus", str(corpus / "c"), "--n-centers", "1",
                "--run-dir", str(tmp_path / "a")]) == 0
    doc = json.loads((tmp_path / "a" / "audit.json").read_text())
    assert 0 <= doc["violation_rate"] <= 1 and (tmp_path / "a" / "audit.png").exists()


def test_audit_oracle_no_violations(corpus, tmp_path, capsys):
    assert run(["rank-audit", "--oracle", "--corpus", str(corpus / "c"), "--run-dir", str(tmp_path / "a")]) == 0
    assert last_json(capsys)["violation_rate"] == 0.0


def test_export_density(corpus, tmp_path, capsys):
    ann = corpus / "c" / "annotations" / "img_0000.json"
    assert run(["export-density", "--annotation", str(ann), "--sigma", "3", "--out", str(tmp_path)]) == 0
    assert set(last_json(capsys)["files"]) == {"img_0000.dmap", "img_0000_overlay.png"}


@pytest.mark.parametrize("axis", ["lambda", "levels"])
def test_ablate_table_shape(corpus, tmp_path, axis, capsys):
    rc = run(["ablate", "--axis", axis, "--config", str(corpus / "cfg.json"), "--corpus", str(corpus / "c"),
              "--labeled-ratio", "0.5", "--steps", "1", "--run-dir", str(tmp_path)])
    assert rc == 0
    rows = list(csv.reader(open(tmp_path / "ablation.csv")))
    assert rows[0] == [axis, "mae", "rmse"]
    assert [r[0] for r in rows[1:]] == [str(v) for v in ABLATION_GRIDS[axis][1]]
    assert (tmp_path / "ablation.png").exists()


def test_error_record(corpus, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"lamda": 1}))
    rc = run(["train", "--config", str(tmp_path / "bad.json"), "--corpus", str(corpus / "c"),
              "--run-dir", str(tmp_path / "r")])
    assert rc == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"] == "invalid-parameter" and "lamda" in rec["message"]


def test_missing_corpus_is_io_error(tmp_path, capsys):
    rc = run(["eval", "--oracle", "--corpus", str(tmp_path / "nope"), "--run-dir", str(tmp_path / "r")])
    assert rc != 0
    assert "error" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])
