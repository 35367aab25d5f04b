import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from qualcon import imgproc
from qualcon.bench import make_corpus
from qualcon.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

TINY = {
    "train": {
        "epochs": 2,
        "batch_size": 2,
        "views": 2,
        "out_size": 16,
        "d_h": 8,
        "d_f": 4,
        "queue_size": 16,
        "lr_decay_epochs": [],
    },
    "corpus": {"size": 4, "image_size": 20},
    "bench": {"n_base": 1, "levels": 3, "size": 20},
    "probe": {"seeds": 3, "lam": 1.0},
    "finetune": {"epochs": 1, "seeds": 2, "resize_to": 20},
}


def tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture
def images(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    for i, img in enumerate(make_corpus(3, seed=4, size=24)):
        imgproc.write_image(src / f"im{i}.png", img)
    return src


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_count_space_output(capsys):
    assert main(["count-space"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "1,972,818" in out and "2x10^7" in out
    assert main(["count-space", "--num-ops", "2", "--max-order", "2"]) == EXIT_OK
    assert "= 8" in capsys.readouterr().out
    assert main(["count-space", "--num-ops", "1", "--max-order", "1"]) == EXIT_OK
    assert "= 1\n" in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE
    assert main(["count-space", "--max-order", "5"]) == EXIT_USAGE
    assert main(["pretrain", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"nonsense": 1}}))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_degrade_is_byte_deterministic(images, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["degrade", "--input", str(images), "--out", str(out), "--seed", "5", "--count", "2"]) == EXIT_OK
    da, db = tree_digest(a), tree_digest(b)
    assert len(da) == 3 * 2 + 1
    assert da == db
    c = tmp_path / "c"
    main(["degrade", "--input", str(images), "--out", str(c), "--seed", "6", "--count", "2"])
    assert tree_digest(c) != da


def test_degrade_count_zero(images, tmp_path):
    assert main(["degrade", "--input", str(images), "--out", str(tmp_path / "z"), "--count", "0"]) == EXIT_OK
    assert (tmp_path / "z" / "manifest.jsonl").read_text() == ""


def test_degrade_replay_reproduces_images(images, tmp_path):
    first = tmp_path / "first"
    main(["degrade", "--input", str(images), "--out", str(first), "--seed", "9", "--count", "2"])
    again = tmp_path / "again"
    rc = main(["degrade", "--replay", str(first / "manifest.jsonl"), "--input", str(images), "--out", str(again)])
    assert rc == EXIT_OK
    assert tree_digest(first) == tree_digest(again)


def test_degrade_bad_input_is_data_error(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "broken.ppm").write_bytes(b"P6\n2 2\n255\n\x00")
    assert main(["degrade", "--input", str(src), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["degrade", "--input", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_pretrain_probe_finetune_report(config, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", "--config", str(config), "--seed", "3", "--out", str(run)]) == EXIT_OK
    resolved = json.loads((run / "config.json").read_text())
    assert resolved["train"]["seed"] == 3 and resolved["train"]["epochs"] == 2
    assert (run / "final.npz").exists() and (run / "ckpt_epoch002.npz").exists()
    assert len((run / "trace.jsonl").read_text().splitlines()) == 2 * 2

    probe = tmp_path / "probe"
    assert main(["probe", "--config", str(config), "--checkpoint", str(run / "final.npz"), "--out", str(probe)]) == EXIT_OK
    m = json.loads((probe / "metrics.json").read_text())
    assert len(m["per_seed"]) == 3 and "median" in (probe / "metrics.txt").read_text()

    ft = tmp_path / "ft"
    assert main(["finetune", "--config", str(config), "--random-init", "--out", str(ft)]) == EXIT_OK
    assert len(json.loads((ft / "metrics.json").read_text())["per_seed"]) == 2

    assert main(["report", str(run)]) == EXIT_OK
    assert (run / "loss.png").exists()
    assert "4 steps" in (run / "summary.txt").read_text()


def test_pretrain_is_reproducible(config, tmp_path):
    for name in ("x", "y"):
        main(["pretrain", "--config", str(config), "--out", str(tmp_path / name)])
    a = np.load(tmp_path / "x" / "final.npz")
    b = np.load(tmp_path / "y" / "final.npz")
    assert np.array_equal(a["theta_q"], b["theta_q"])
    assert (tmp_path / "x" / "trace.jsonl").read_bytes() == (tmp_path / "y" / "trace.jsonl").read_bytes()


def test_report_plot_is_deterministic(config, tmp_path):
    run = tmp_path / "run"
    main(["pretrain", "--config", str(config), "--out", str(run)])
    main(["report", str(run)])
    first = (run / "loss.png").read_bytes()
    main(["report", str(run)])
    assert (run / "loss.png").read_bytes() == first


def test_report_empty_trace(tmp_path, capsys):
    (tmp_path / "trace.jsonl").write_text("")
    assert main(["report", str(tmp_path)]) == EXIT_OK
    assert "no steps recorded" in capsys.readouterr().out


def test_report_missing_traces_is_data_error(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_DATA


def test_ablate_writes_grid(config, tmp_path):
    out = tmp_path / "abl"
    rc = main(["ablate", "--config", str(config), "--out", str(out), "--variants", "full", "fixed_sequence"])
    assert rc == EXIT_OK
    res = json.loads((out / "ablation.json").read_text())
    assert set(res["variants"]) == {"none", "full", "fixed_sequence"}
    assert set(res["cross_family"]) == {"noise", "blur", "jpeg", "resample"}
    assert main(["report", str(out)]) == EXIT_OK
    assert (out / "cross_family.png").exists()


def test_env_var_config(config, tmp_path, monkeypatch):
    monkeypatch.setenv("QUALCON_CONFIG", str(config))
    out = tmp_path / "p"
    assert main(["probe", "--random-init", "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "config.json").read_text())["probe"]["seeds"] == 3
