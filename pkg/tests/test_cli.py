import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spikebev import spkl
from spikebev.cli import main
from spikebev.codec import write_detections
from spikebev.engine import ArchConfig, build_network
from spikebev.ingest import GridMeta, load_kitti_labels
from spikebev.pipeline import oracle_detections, read_manifest

TINY_TRAIN = {"epochs": 1, "batch_size": 2, "arch": {"widths": [4, 8], "depth": 2}}


def tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "5", "--count", "4", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    net = build_network(ArchConfig(widths=(4, 8), depth=2), seed=1, weight_init="normal")
    spkl.save(net, d / "m.spkl")
    return d / "m.spkl"


def test_synth_count_zero(tmp_path):
    assert main(["synth", "--count", "0", "--out", str(tmp_path)]) == 0
    assert read_manifest(tmp_path) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["config.json", "manifest.jsonl"]


def test_synth_deterministic_and_listed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["synth", "--seed", "1", "--count", "6", "--out", str(a)])
    main(["--seed", "1", "synth", "--count", "6", "--out", str(b)])  # global flag before command
    ta, tb = tree(a), tree(b)
    ta.pop("config.json"), tb.pop("config.json")  # echoes differ only in the out path
    assert ta == tb
    assert len(read_manifest(a)) == 6


def test_synth_hundred_scenes(tmp_path):
    assert main(["synth", "--seed", "1", "--count", "100", "--out", str(tmp_path),
                 "--max-objects", "1"]) == 0
    entries = read_manifest(tmp_path)
    assert len(entries) == 100
    assert all((tmp_path / f"{e['scene']}.bin").exists() for e in entries)


def test_config_echo_reproduces(tmp_path, dataset):
    first = tmp_path / "first"
    main(["synth", "--seed", "9", "--count", "2", "--out", str(first)])
    echoed = json.loads((first / "config.json").read_text())
    assert echoed["seed"] == 9 and echoed["count"] == 2
    second = tmp_path / "second"
    echoed["out"] = str(second)
    (tmp_path / "c.json").write_text(json.dumps(echoed))
    assert main(["synth", "--config", str(tmp_path / "c.json")]) == 0
    a, b = tree(first), tree(second)
    a.pop("config.json"), b.pop("config.json")
    assert a == b


def test_usage_and_config_errors(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert "train_dir" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1
    (tmp_path / "bad.json").write_text("{nope")
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    (tmp_path / "k.json").write_text(json.dumps({"train_dir": "x", "warp": 9}))
    assert main(["train", "--config", str(tmp_path / "k.json"), "--out", str(tmp_path)]) == 1
    assert "warp" in capsys.readouterr().err


def test_train_tiny_run_and_audit(tmp_path, dataset, capsys):
    cfg = dict(TINY_TRAIN, train_dir=str(dataset), out=str(tmp_path / "run"))
    (tmp_path / "t.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "t.json")]) == 0
    run = tmp_path / "run"
    assert {"model.spkl", "report.json", "config.json", "timing.json"} <= {p.name for p in run.iterdir()}
    assert json.loads((run / "config.json").read_text())["epochs"] == 1
    timing = json.loads((run / "timing.json").read_text())["train_seconds"]
    assert timing < 60
    assert main(["audit", str(run / "model.spkl")]) == 0
    assert "PASS" in capsys.readouterr().out


def test_train_val_fraction_split(tmp_path, dataset):
    cfg = dict(TINY_TRAIN, train_dir=str(dataset), out=str(tmp_path / "run"), val_fraction=0.25)
    (tmp_path / "t.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "t.json")]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["steps"] == 2  # 3 training scenes at batch size 2
    assert "AP@0.5" in report["epochs"][0]
    bad = dict(cfg, val_fraction=1.0)
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 1


def test_infer_outputs_and_determinism(tmp_path, dataset, model):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["infer", str(model), str(dataset), "--out", str(a)]) == 0
    assert main(["infer", str(model), str(dataset), "--out", str(b), "--threads", "2"]) == 0
    names = [e["scene"] for e in read_manifest(dataset)]
    assert sorted(p.stem for p in (a / "detections").iterdir()) == sorted(names)
    for n in names:
        assert (a / "detections" / f"{n}.txt").read_bytes() == (b / "detections" / f"{n}.txt").read_bytes()
    assert (a / "activity.json").read_bytes() == (b / "activity.json").read_bytes()
    assert "ms_per_scene" in json.loads((a / "timing.json").read_text())


def test_infer_zero_input(tmp_path, model):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    out = tmp_path / "o"
    assert main(["infer", str(model), str(empty), "--out", str(out)]) == 0
    assert (out / "detections" / "empty.txt").read_text() == ""
    act = json.loads((out / "activity.json").read_text())["scenes"]["empty"]
    assert all(layer["sparsity"] == 1.0 for layer in act["layers"] if layer["name"] != "head_box")


def test_infer_rejects_bad_model_first(tmp_path, model, capsys):
    data = bytearray(model.read_bytes())
    data[0] ^= 0xFF
    bad = tmp_path / "bad.spkl"
    bad.write_bytes(bytes(data))
    # the input does not exist either; the model must be rejected first
    assert main(["infer", str(bad), str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 2
    assert "not a SPKL file" in capsys.readouterr().err
    data = bytearray(model.read_bytes())
    data[4] = 7
    bad.write_bytes(bytes(data))
    assert main(["infer", str(bad), str(tmp_path / "x.bin"), "--out", str(tmp_path)]) == 2
    assert "version" in capsys.readouterr().err


def test_eval_oracle_and_empty_detections(tmp_path, dataset):
    det_dir = tmp_path / "dets"
    det_dir.mkdir()
    for e in read_manifest(dataset):
        lab = load_kitti_labels(dataset / f"{e['scene']}.txt")
        write_detections(oracle_detections(lab), det_dir / f"{e['scene']}.txt")
    out = tmp_path / "ev"
    assert main(["eval", "--detections", str(det_dir), "--out", str(out), str(dataset)]) == 0
    rep = json.loads((out / "eval.json").read_text())
    assert set(rep["ap"]) == {"0.5", "0.7"}
    assert rep["ap"]["0.5"]["easy"] == 1.0 and rep["ap"]["0.7"]["easy"] == 1.0
    empty = tmp_path / "none"
    empty.mkdir()
    assert main(["eval", "--detections", str(empty), "--out", str(out), str(dataset),
                 "--iou", "0.5"]) == 0
    rep = json.loads((out / "eval.json").read_text())
    assert set(rep["ap"]) == {"0.5"} and rep["ap"]["0.5"]["easy"] == 0.0


def test_eval_with_model(tmp_path, dataset, model):
    assert main(["eval", str(model), str(dataset), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["scenes"] == 4 and set(rep["ap"]) == {"0.5", "0.7"}
    assert rep["model"] == "m.spkl"
    assert json.loads((tmp_path / "timing.json").read_text())["ms_per_scene"] > 0


def test_audit_failures(tmp_path, model, capsys):
    data = bytearray(model.read_bytes())
    w_off = 8 + 15 + 8 * 4  # stem weights follow its header and 4 scales
    data[w_off + 3] = (data[w_off + 3] & 0xF0) | 0x8
    bad = tmp_path / "nib.spkl"
    bad.write_bytes(bytes(data))
    assert main(["audit", str(bad), "--out", str(tmp_path / "a")]) == 3
    out = capsys.readouterr().out
    assert "FAIL" in out and "layer 0" in out and "index 6" in out
    rep = json.loads((tmp_path / "a" / "audit.json").read_text())
    assert not rep["pass"] and rep["violations"][0]["index"] == 6
    bad.write_bytes(model.read_bytes()[:-7])
    assert main(["audit", str(bad)]) == 3
    assert "unexpected end of file" in capsys.readouterr().out
    assert main(["audit", str(tmp_path / "missing.spkl")]) == 2


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "spikebev.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "synth" in r.stdout
