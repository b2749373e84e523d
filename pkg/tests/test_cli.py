import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from lavide.cli import main
import lavide.training
from lavide.evaluation import CONFUSION_COLORS, decode_confusion_rgb
from lavide.synthetic import read_dataset

from conftest import TINY


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _gen(out, *extra):
    args = ["gen-data", "--out", str(out), "--scenes", "3", "--size", "32x32", "--categories", "4", *extra]
    assert main(args) == 0
    return out


@pytest.fixture
def tiny_config_file(tmp_path):
    cfg = {k: dict(v) for k, v in TINY.items()}
    cfg["train"] = {"max_iters": 2, "batch_size": 2}
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_is_deterministic(tmp_path):
    a = _gen(tmp_path / "a", "--seed", "4", "--change-rate", "0.5")
    b = _gen(tmp_path / "b", "--seed", "4", "--change-rate", "0.5")
    c = _gen(tmp_path / "c", "--seed", "5", "--change-rate", "0.5")
    assert _digest(a) == _digest(b) != _digest(c)
    manifest = json.loads((a / "gen_manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["scenes"] == 3


def test_gen_data_zero_change_rate(tmp_path):
    ds = read_dataset(_gen(tmp_path / "d", "--change-rate", "0"))
    assert not ds.labels.any()


def test_train_eval_report(tmp_path, tiny_config_file, capsys):
    data = _gen(tmp_path / "d", "--change-rate", "0.5")
    capsys.readouterr()
    assert main(["train", "--config", str(tiny_config_file), "--data", str(data), "--out", str(tmp_path / "run")]) == 0
    echoed = json.loads(capsys.readouterr().out.splitlines()[0])
    assert echoed["train"]["config"]["train"]["max_iters"] == 2
    assert len(json.loads((tmp_path / "run" / "loss_log.json").read_text())) == 2
    report = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.pt"), "--data", str(data),
                 "--report", str(report)]) == 0
    r = json.loads(report.read_text())
    assert {"f1", "iou", "recall", "precision", "samples", "counts"} <= set(r)
    assert r["samples"] == 3 and sum(r["counts"].values()) == 3 * 32 * 32


def test_eval_of_perfect_predictor_scores_one(tmp_path, tiny_config_file):
    data = _gen(tmp_path / "d", "--change-rate", "0.5")
    for p in (data / "labels").glob("*.png"):
        Image.fromarray(np.full((32, 32), 255, np.uint8)).save(p)
    assert main(["train", "--config", str(tiny_config_file), "--data", str(data), "--out", str(tmp_path / "run")]) == 0
    ckpt = tmp_path / "run" / "checkpoint.pt"
    payload = torch.load(ckpt, weights_only=True)
    payload["model"]["moe.head.classifier.weight"].zero_()
    payload["model"]["moe.head.classifier.bias"].copy_(torch.tensor([-10.0, 10.0]))
    torch.save(payload, ckpt)
    report = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--report", str(report)]) == 0
    r = json.loads(report.read_text())
    assert r["f1"] == r["iou"] == r["recall"] == r["precision"] == 1.0
    assert main(["render", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "viz")]) == 0
    for f in (tmp_path / "viz").glob("*.png"):
        overlay = np.asarray(Image.open(f))[:, 64:]
        assert (decode_confusion_rgb(overlay) == "tp").all()


def test_category_baseline_and_render(tmp_path, tiny_config_file):
    data = _gen(tmp_path / "d", "--change-rate", "0.5")
    run = tmp_path / "seg"
    assert main(["train", "--baseline", "category", "--config", str(tiny_config_file), "--data", str(data),
                 "--out", str(run)]) == 0
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"), "--data", str(data),
                 "--report", str(tmp_path / "r.json")]) == 0
    assert main(["render", "--checkpoint", str(run / "checkpoint.pt"), "--data", str(data),
                 "--out", str(tmp_path / "viz")]) == 0
    files = sorted((tmp_path / "viz").glob("*.png"))
    assert len(files) == 3
    legend = {tuple(c) for c in CONFUSION_COLORS.values()}
    for f in files:
        arr = np.asarray(Image.open(f))
        assert arr.shape == (32, 96, 3)
        assert {tuple(px) for px in arr[:, 64:].reshape(-1, 3)} <= legend


def test_lavide_c_baseline_trains(tmp_path, tiny_config_file):
    data = _gen(tmp_path / "d", "--change-rate", "0.5")
    assert main(["train", "--baseline", "lavide-c", "--config", str(tiny_config_file), "--data", str(data),
                 "--out", str(tmp_path / "c")]) == 0
    cfg = json.loads((tmp_path / "c" / "config.json").read_text())
    assert cfg["map"]["encoding"] == "color"


def test_ablate_writes_reports(tmp_path, tiny_config_file):
    data = _gen(tmp_path / "d", "--change-rate", "0.5")
    report = tmp_path / "abl.json"
    assert main(["ablate", "--axis", "ocopt", "--values", "with,without", "--config", str(tiny_config_file),
                 "--data", str(data), "--report", str(report)]) == 0
    assert [r["value"] for r in json.loads(report.read_text())["rows"]] == ["with", "without"]
    assert (tmp_path / "abl.json.txt").read_text().startswith("ablation over ocopt")


def test_usage_errors_exit_2(tmp_path):
    data = _gen(tmp_path / "d")
    with pytest.raises(SystemExit) as e:
        main(["ablate", "--axis", "heads", "--values", "1", "--data", str(data), "--report", "r.json"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", str(tmp_path / "x"), "--bogus"])
    assert e.value.code == 2
    assert main(["ablate", "--axis", "experts", "--values", "1,0", "--data", str(data),
                 "--report", str(tmp_path / "r.json")]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--size", "40x40"]) == 2


def test_bad_thread_count_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("LAVIDE_NUM_THREADS", "zero")
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--scenes", "1", "--size", "32x32"]) == 2


def test_data_and_checkpoint_errors_exit_3(tmp_path):
    data = _gen(tmp_path / "d")
    (data / "images" / "scene_0001.png").unlink()
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.pt"), "--data", str(data),
                 "--report", str(tmp_path / "r.json")]) == 3
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 3


def test_nan_loss_exits_4(tmp_path, tiny_config_file, monkeypatch, capsys):
    data = _gen(tmp_path / "d", "--change-rate", "0.5")
    monkeypatch.setattr(lavide.training, "change_loss", lambda logits, *a: logits.sum() * float("nan"))
    assert main(["train", "--config", str(tiny_config_file), "--data", str(data), "--out", str(tmp_path / "o")]) == 4
    assert "change" in capsys.readouterr().err


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lavide.cli", "gen-data", "--out", str(tmp_path / "d"),
                           "--scenes", "1", "--size", "32x32"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout.splitlines()[0])["gen-data"]["scenes"] == 1
