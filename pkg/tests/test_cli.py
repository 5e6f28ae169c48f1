import csv
import json

import pytest

from modmoe.cli import main

SMALL = "align=16,instruct=32,tune=16,test=16"
FAST = ["--epochs", "1", "--max-steps", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--seed", "1", "--out", str(out), "--sizes", SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def instruct_ck(data, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["train", "--phase", "align", "--data", str(data), "--out", str(root / "a")] + FAST) == 0
    assert main(["train", "--phase", "instruct", "--data", str(data), "--out", str(root / "i"),
                 "--init", str(root / "a" / "checkpoint.bin")] + FAST) == 0
    return root / "i" / "checkpoint.bin"


def test_gen_data_is_idempotent(tmp_path):
    for d in ("x", "y"):
        assert main(["gen-data", "--out", str(tmp_path / d), "--sizes", SMALL]) == 0
    for f in (tmp_path / "x").iterdir():
        assert f.read_bytes() == (tmp_path / "y" / f.name).read_bytes()


def test_gen_data_counts(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--sizes", "align=64,instruct=8,tune=8,test=8"]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["counts"]["align"]["total"] == 64


def test_missing_out_is_usage_error():
    assert main(["gen-data"]) == 2


@pytest.mark.parametrize("sizes", ["align=x", "holdout=8", "tune=2"])
def test_bad_sizes_are_config_errors(tmp_path, sizes):
    assert main(["gen-data", "--out", str(tmp_path), "--sizes", sizes]) == 2


def test_bad_config_file(tmp_path, data):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"d_model": 10}}))
    assert main(["train", "--phase", "align", "--data", str(data), "--out", str(tmp_path / "o"),
                 "--config", str(tmp_path / "c.json")] + FAST) == 2
    (tmp_path / "d.json").write_text(json.dumps({"colour": 1}))
    assert main(["train", "--phase", "align", "--data", str(data), "--out", str(tmp_path / "o"),
                 "--config", str(tmp_path / "d.json")]) == 2


def test_missing_corpus_is_missing_prerequisite(tmp_path):
    assert main(["train", "--phase", "align", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_moe_without_router_checkpoint(tmp_path, data, instruct_ck, capsys):
    code = main(["train", "--phase", "moe", "--data", str(data), "--out", str(tmp_path),
                 "--init", str(instruct_ck)] + FAST)
    assert code == 3
    assert "router" in capsys.readouterr().err
    assert main(["train", "--phase", "moe", "--data", str(data), "--out", str(tmp_path)]) == 3


def test_train_writes_run_files(tmp_path, data):
    assert main(["train", "--phase", "align", "--data", str(data), "--out", str(tmp_path)] + FAST) == 0
    for name in ("config.json", "manifest.json", "checkpoint.bin", "losses.csv"):
        assert (tmp_path / name).exists()
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["phase"] == "align" and m["corpus_seed"] == 1 and len(m["config_hash"]) == 16
    assert (tmp_path / "losses.csv").read_text().splitlines()[0] == "step,loss,lr"


def test_nan_loss_exits_4_with_step(tmp_path, data, instruct_ck, capsys):
    code = main(["train", "--phase", "instruct", "--data", str(data), "--out", str(tmp_path),
                 "--init", str(instruct_ck).replace("/i/", "/a/"), "--lr", "1e200", "--max-steps", "20"])
    assert code == 4
    assert "step" in capsys.readouterr().err


def test_full_sequence_then_eval_trace_count(tmp_path, data, instruct_ck):
    r = tmp_path / "r"
    m = tmp_path / "m"
    assert main(["train", "--phase", "router", "--data", str(data), "--out", str(r),
                 "--init", str(instruct_ck), "--epochs", "2"]) == 0
    assert main(["train", "--phase", "moe", "--data", str(data), "--out", str(m),
                 "--init", str(r / "checkpoint.bin")] + FAST) == 0
    ck = str(m / "checkpoint.bin")
    assert main(["eval", "--checkpoint", ck, "--data", str(data), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "report.csv").exists()
    assert main(["trace", "--checkpoint", ck, "--data", str(data), "--out", str(tmp_path / "t")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "t" / "trace.csv")))
    assert len(rows) == 2 * 4 * 4
    assert main(["count-params", "--checkpoint", ck, "--out", str(tmp_path / "c")]) == 0
    params = json.loads((tmp_path / "c" / "params.json").read_text())
    assert params["activated"] < params["total"] and "reference_scale" in params and params["note"]
    assert main(["trace", "--checkpoint", str(instruct_ck), "--data", str(data),
                 "--out", str(tmp_path / "t2")]) == 3


def test_resume_through_cli_matches(tmp_path, data, instruct_ck):
    a_init = str(instruct_ck).replace("/i/", "/a/")
    args = ["train", "--phase", "instruct", "--data", str(data), "--init", a_init,
            "--epochs", "1", "--batch-size", "8"]
    assert main(args + ["--out", str(tmp_path / "full")]) == 0
    assert main(args + ["--out", str(tmp_path / "half"), "--stop-after", "2"]) == 0
    assert main(["train", "--phase", "instruct", "--data", str(data), "--epochs", "1",
                 "--batch-size", "8", "--out", str(tmp_path / "rest"),
                 "--resume", str(tmp_path / "half" / "checkpoint.bin")]) == 0
    assert ((tmp_path / "full" / "checkpoint.bin").read_bytes()
            == (tmp_path / "rest" / "checkpoint.bin").read_bytes())


def test_ablate_two_cells(tmp_path, data, instruct_ck):
    (tmp_path / "m.json").write_text(json.dumps({"cells": [{"name": "base"}, {"name": "nometa", "meta": False}]}))
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(data), "--out", str(out), "--matrix", str(tmp_path / "m.json"),
                 "--init", str(instruct_ck)] + FAST) == 0
    manifests = sorted(p.parent.name for p in out.glob("*/manifest.json"))
    assert manifests == ["base", "nometa"]
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert list(rows[0]) == ["method", "setting", "metric", "value", "delta"]
    assert {r["setting"] for r in rows} == {f"{s}-{k}" for s in ("instruct", "tune", "test")
                                            for k in ("open", "closed")}
    assert all(float(r["delta"]) == 0.0 for r in rows if r["method"] == "base")
    assert sum(r["method"] == "nometa" for r in rows) == 6


@pytest.mark.parametrize("cells", [[{"k": 3, "e": 2}], [{"meta": "maybe"}], [{"colour": 1}], [],
                                   [{"name": "a"}, {"name": "a"}]])
def test_invalid_cells(tmp_path, data, cells):
    (tmp_path / "m.json").write_text(json.dumps({"cells": cells}))
    assert main(["ablate", "--data", str(data), "--out", str(tmp_path / "o"),
                 "--matrix", str(tmp_path / "m.json")]) == 2
