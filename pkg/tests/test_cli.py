"""End-to-end command-line workflows through main()."""

import json

import numpy as np
import pytest

from addmark import theory, trainer
from addmark.cli import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, main
from addmark.codec import Dictionary
from addmark.tensor import Message, SeededRng, read_image, write_image


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Image directory plus a trained watermark shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "images"
    data.mkdir()
    imgs = theory.make_smooth_images(80, (1, 16, 16), SeededRng(0))
    for i, img in enumerate(imgs):
        write_image(data / f"img_{i:03d}.png", img)
    cfg = root / "train.json"
    cfg.write_text(json.dumps({
        "K": 4, "beta_alg": 0.2 * 256, "loss": "logistic", "epochs": 4,
        "batch_size": 16, "polish_steps": 150, "init_scale": 0.8, "seed": 0,
    }))
    wm = root / "mark.addwm"
    rc = main(["train", str(data), "--out", str(wm), "--config", str(cfg)])
    assert rc == EXIT_OK
    return root, data, wm


def test_train_writes_watermark_and_log(workspace):
    root, data, wm = workspace
    assert wm.exists()
    w = trainer.WatermarkSet.load(wm)
    assert w.K == 4 and w.shape == (1, 16, 16)
    log = wm.parent / (wm.name + ".log.csv")
    lines = log.read_text().strip().splitlines()
    assert lines[0].startswith("epoch,")
    assert len(lines) == 1 + 4


def test_embed_detect_decode_roundtrip(workspace, tmp_path, capsys):
    root, data, wm = workspace
    src = sorted(data.iterdir())[0]
    out_img = tmp_path / "marked.png"
    rc = main([
        "embed", str(src), "--watermark", str(wm),
        "--message", "+-+-", "--out", str(out_img),
    ])
    assert rc == EXIT_OK
    report = tmp_path / "report.json"
    rc = main([
        "detect", str(out_img), "--watermark", str(wm),
        "--threshold", "0.0", "--out", str(report),
    ])
    assert rc == EXIT_OK
    payload = json.loads(report.read_text())
    assert payload["decision"] is True
    assert payload["decoded"] == "+-+-"
    capsys.readouterr()


def test_detect_with_calibration_dir(workspace, tmp_path, capsys):
    root, data, wm = workspace
    src = sorted(data.iterdir())[1]
    out_img = tmp_path / "marked.png"
    main(["embed", str(src), "--watermark", str(wm),
          "--message", "random", "--out", str(out_img), "--seed", "5"])
    capsys.readouterr()
    rc = main([
        "decode", str(out_img), "--watermark", str(wm),
        "--alpha", "0.05", "--calibration-dir", str(data),
    ])
    assert rc == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["S"] > payload["threshold_used"]
    assert payload["decision"] is True


def test_calibrate_outputs_threshold(workspace, tmp_path, capsys):
    root, data, wm = workspace
    out = tmp_path / "cal.json"
    rc = main(["calibrate", str(data), "--watermark", str(wm),
               "--alpha", "0.05", "--out", str(out)])
    assert rc == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["alpha"] == 0.05
    assert payload["n_scores"] == 80
    assert np.isfinite(payload["threshold"])
    capsys.readouterr()


def test_detect_with_dictionary(workspace, tmp_path, capsys):
    root, data, wm = workspace
    d = Dictionary([Message.from_string(s) for s in ("++++", "----", "+-+-")])
    dict_path = tmp_path / "dict.txt"
    d.save(dict_path)
    src = sorted(data.iterdir())[2]
    out_img = tmp_path / "marked.png"
    rc = main(["embed", str(src), "--watermark", str(wm),
               "--message=----", "--out", str(out_img)])
    assert rc == EXIT_OK
    capsys.readouterr()
    rc = main([
        "detect", str(out_img), "--watermark", str(wm),
        "--dictionary", str(dict_path), "--threshold", "0.0",
    ])
    assert rc == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["mode"] == "dictionary"
    assert payload["decoded"] == "----"


def test_eval_reports_metrics(workspace, tmp_path, capsys):
    root, data, wm = workspace
    out = tmp_path / "eval.json"
    rc = main(["eval", str(data), "--watermark", str(wm), "--out", str(out)])
    assert rc == EXIT_OK
    payload = json.loads(out.read_text())
    assert np.isfinite(payload["psnr"])
    assert 0.0 <= payload["avg_bit_accuracy"] <= 1.0
    assert "identity" in payload["bit_accuracy"]
    capsys.readouterr()


def test_embed_rerun_is_deterministic(workspace, tmp_path):
    root, data, wm = workspace
    src = sorted(data.iterdir())[3]
    a, b = tmp_path / "a.addt", tmp_path / "b.addt"
    for out in (a, b):
        main(["embed", str(src), "--watermark", str(wm),
              "--message", "random", "--out", str(out), "--seed", "9"])
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(read_image(a).data, read_image(b).data)


def test_theory_check_oracle_only(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"oracle_only": True}))
    out = tmp_path / "report.json"
    rc = main(["theory-check", "--config", str(cfg), "--out", str(out)])
    assert rc == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["failures"] == []
    assert payload["r_star"] == pytest.approx(1.5365169, abs=1e-6)
    text = capsys.readouterr().out
    assert "PASS" in text and "FAIL" not in text


def test_theory_check_degenerate_beta(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "beta_theory": 9.0, "n": 2000, "epochs": 5, "detection_trials": 1000,
    }))
    rc = main(["theory-check", "--config", str(cfg)])
    assert rc == EXIT_OK
    assert "degenerate_norms" in capsys.readouterr().out


def test_bench_reports_timing(workspace, tmp_path, capsys):
    root, data, wm = workspace
    out = tmp_path / "bench.json"
    rc = main(["bench", str(data), "--watermark", str(wm), "--out", str(out)])
    assert rc == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["embed_ms"] > 0 and payload["decode_ms"] > 0
    capsys.readouterr()


def test_sweep_writes_csv(tmp_path, capsys):
    data = tmp_path / "imgs"
    data.mkdir()
    for i, img in enumerate(theory.make_smooth_images(24, (1, 8, 8), SeededRng(1))):
        write_image(data / f"{i:02d}.png", img)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "K": 2, "beta_alg": 6.4, "epochs": 2, "batch_size": 8,
        "polish_steps": 10,
    }))
    out = tmp_path / "sweep.csv"
    rc = main(["sweep", str(data), "beta", "3.2,32.0",
               "--config", str(cfg), "--out", str(out)])
    assert rc == EXIT_OK
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "parameter,psnr,avg_bit_accuracy"
    assert len(lines) == 3
    capsys.readouterr()


def test_usage_errors_exit_2(workspace, tmp_path, capsys):
    root, data, wm = workspace
    assert main(["train", str(tmp_path / "missing"), "--out", "x.addwm"]) == EXIT_USAGE
    src = sorted(data.iterdir())[0]
    # wrong message length
    assert main(["embed", str(src), "--watermark", str(wm),
                 "--message", "++", "--out", str(tmp_path / "o.png")]) == EXIT_USAGE
    # detect without threshold or calibration dir
    assert main(["detect", str(src), "--watermark", str(wm)]) == EXIT_USAGE
    # unknown subcommand
    assert main(["compress", str(src)]) == EXIT_USAGE
    capsys.readouterr()
