import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pseudoct.cli import main
from pseudoct.fixtures import make_case, write_case
from pseudoct.register import save_landmarks
from pseudoct.volgrid import Volume, load_uvol, raw_path, save_uvol

TINY = {
    "epochs": 1, "seed": 1,
    "generator": {"levels": 2, "base_channels": 2, "proj_dim": 4, "tf_layers": 1, "tf_heads": 2},
    "discriminator": {"channels": [4, 4, 4, 4]},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """fixtures -> register -> preprocess -> train -> synthesize, once per module."""
    root = tmp_path_factory.mktemp("pipe")
    assert main(["fixtures", "--out-dir", str(root / "raw"), "--cases", "2", "--seed", "3"]) == 0
    for case in ("case000", "case001"):
        raw = root / "raw"
        assert main([
            "register", "--us-landmarks", str(raw / f"{case}_us_landmarks.json"),
            "--ct-landmarks", str(raw / f"{case}_ct_landmarks.json"), "--ct", str(raw / f"{case}_ct.uvol"),
            "--us", str(raw / f"{case}_us.uvol"), "--ct-mask", str(raw / f"{case}_ct_mask.uvol"),
            "--out-dir", str(root / "reg"),
        ]) == 0
        assert main([
            "preprocess", "--ct", str(root / "reg" / f"{case}_ct_reg.uvol"), "--us", str(raw / f"{case}_us.uvol"),
            "--us-mask", str(raw / f"{case}_us_mask.uvol"), "--target-dims", "16", "16", "32",
            "--case", case, "--out-dir", str(root / "pre"),
        ]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--data-dir", str(root / "pre"), "--config", str(root / "cfg.json"),
                 "--out-dir", str(root / "run")]) == 0
    (root / "pred").mkdir()
    for case in ("case000", "case001"):
        assert main(["synthesize", "--checkpoint", str(root / "run" / "checkpoint_last"),
                     "--us", str(root / "pre" / f"{case}_us.uvol"),
                     "--out", str(root / "pred" / f"{case}_pct.uvol")]) == 0
    return root


def test_register_identity_is_bit_exact(tmp_path, capsys, rng):
    A = np.diag([1.5, 1.5, 1.5, 1.0])
    ct = Volume(rng.normal(size=(6, 7, 8)).astype(np.float32), A)
    save_uvol(tmp_path / "x_ct.uvol", ct)
    save_uvol(tmp_path / "x_us.uvol", ct)
    pts = rng.normal(size=(5, 3)) * 10
    save_landmarks(tmp_path / "p.json", pts)
    code, out, err = run(capsys, "register", "--us-landmarks", tmp_path / "p.json", "--ct-landmarks",
                         tmp_path / "p.json", "--ct", tmp_path / "x_ct.uvol", "--us", tmp_path / "x_us.uvol",
                         "--out-dir", tmp_path / "o")
    assert code == 0, err
    assert raw_path(tmp_path / "o" / "x_ct_reg.uvol").read_bytes() == raw_path(tmp_path / "x_ct.uvol").read_bytes()


def test_register_recovers_synthetic_transform(pipeline):
    rep = json.loads((pipeline / "reg" / "case000_transform.json").read_text())
    assert rep["fre_mm"] < 1e-6
    assert set(rep) == {"s", "R", "t", "fre_mm"}
    mask = load_uvol(pipeline / "reg" / "case000_ct_mask_reg.uvol")
    assert mask.is_binary()


def test_register_count_mismatch_exit_code(tmp_path, capsys):
    sc = make_case(seed=1)
    paths = write_case(tmp_path, sc)
    save_landmarks(tmp_path / "short.json", sc.ct_landmarks[:5])
    code, out, err = run(capsys, "register", "--us-landmarks", paths["us_landmarks"], "--ct-landmarks",
                         tmp_path / "short.json", "--ct", paths["ct"], "--us", paths["us"],
                         "--out-dir", tmp_path / "o")
    assert code == 11
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error code=SizeMismatch message=")


def test_missing_file_is_single_line_error(tmp_path, capsys):
    code, out, err = run(capsys, "synthesize", "--checkpoint", tmp_path / "nope", "--us", tmp_path / "nope.uvol",
                         "--out", tmp_path / "o.uvol")
    assert code != 0 and len(err.strip().splitlines()) == 1 and err.startswith("error code=")


def make_blob_inputs(tmp_path, rng, dims=(40, 40, 40), lo=(12, 14, 16), hi=(20, 23, 26)):
    us = rng.uniform(0.1, 1.0, size=dims)
    us[:2] = 0.0
    mask = np.zeros(dims)
    mask[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = 1
    ct = rng.normal(size=dims)
    for name, data in (("b_us", us), ("b_us_mask", mask), ("b_ct_reg", ct)):
        save_uvol(tmp_path / f"{name}.uvol", Volume(data, np.eye(4)))
    return [tmp_path / f"{n}.uvol" for n in ("b_ct_reg", "b_us", "b_us_mask")]


@pytest.mark.parametrize("margin", [0, 5, 14])
def test_preprocess_dims(tmp_path, capsys, rng, margin):
    ct, us, mask = make_blob_inputs(tmp_path, rng)
    code, out, err = run(capsys, "preprocess", "--ct", ct, "--us", us, "--us-mask", mask,
                         "--margin", margin, "--out-dir", tmp_path / "o")
    assert code == 0, err
    got = load_uvol(tmp_path / "o" / "b_ct.uvol")
    lo, hi = np.array([12, 14, 16]), np.array([20, 23, 26])
    expect = np.minimum(hi + margin, 39) - np.maximum(lo - margin, 0) + 1
    assert got.dims == tuple(expect)
    manifest = json.loads((tmp_path / "o" / "b_preprocess_manifest.json").read_text())
    assert manifest["params"]["margin"] == margin
    assert manifest["box"]["b_min"] == list(np.maximum(lo - margin, 0))


def test_preprocess_masks_outside_fov(tmp_path, capsys, rng):
    ct, us, mask = make_blob_inputs(tmp_path, rng)
    code, _, err = run(capsys, "preprocess", "--ct", ct, "--us", us, "--us-mask", mask,
                       "--margin", 14, "--out-dir", tmp_path / "o")
    assert code == 0, err
    fov = load_uvol(tmp_path / "o" / "b_fov.uvol").data
    out = load_uvol(tmp_path / "o" / "b_ct.uvol").data
    unmasked = load_uvol(tmp_path / "o" / "b_ct_unmasked.uvol").data
    # slices 0 and 1 of the US are blank, and the margin-14 box starts at slice 0
    assert np.all(fov[:2] == 0) and np.all(fov[2:] == 1)
    assert np.all(out[:2] == 0)
    assert np.array_equal(out[2:], unmasked[2:])
    assert out.min() >= 0 and out.max() <= 1


def test_pipeline_ct_zero_outside_fov(pipeline):
    for case in ("case000", "case001"):
        fov = load_uvol(pipeline / "pre" / f"{case}_fov.uvol").data
        ct = load_uvol(pipeline / "pre" / f"{case}_ct.uvol").data
        assert np.all(ct[fov == 0] == 0)


def test_preprocess_empty_mask(tmp_path, capsys, rng):
    ct, us, mask = make_blob_inputs(tmp_path, rng)
    save_uvol(mask, Volume(np.zeros((40, 40, 40)), np.eye(4)))
    code, _, err = run(capsys, "preprocess", "--ct", ct, "--us", us, "--us-mask", mask, "--out-dir", tmp_path / "o")
    assert code == 13 and "EmptyMask" in err


def test_train_outputs_and_manifest(pipeline):
    run_dir = pipeline / "run"
    curve = [json.loads(l) for l in (run_dir / "loss_curve.jsonl").read_text().splitlines()]
    assert len(curve) == 2
    assert set(curve[0]) == {"step", "epoch", "disc", "gen_total", "gen_pix", "gen_adv"}
    manifest = json.loads((run_dir / "train_manifest.json").read_text())
    listed = {Path(o["path"]).name: o["sha256"] for o in manifest["outputs"]}
    for name in ("checkpoint_last.json", "checkpoint_last.bin", "checkpoint_epoch001.bin", "loss_curve.jsonl"):
        assert listed[name] == sha(run_dir / name)
    assert manifest["params"]["config"]["lambda_pix"] == 50.0
    assert manifest["version"]


def test_train_same_seed_identical_curves(pipeline, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data-dir", pipeline / "pre", "--config", pipeline / "cfg.json",
                       "--out-dir", tmp_path / "again")
    assert code == 0, err
    assert (tmp_path / "again" / "loss_curve.jsonl").read_bytes() == (pipeline / "run" / "loss_curve.jsonl").read_bytes()
    assert (tmp_path / "again" / "checkpoint_last.bin").read_bytes() == (pipeline / "run" / "checkpoint_last.bin").read_bytes()


def test_train_rejects_indivisible_dims(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"generator": {"input_dims": [128, 120, 256]}, "lr": -1}))
    code, _, err = run(capsys, "train", "--dry-run", "--config", cfg)
    assert code == 20
    assert "H=120" in err and "learning rate" in err
    assert len(err.strip().splitlines()) == 1


def test_train_flag_overrides(pipeline, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data-dir", pipeline / "pre", "--config", pipeline / "cfg.json",
                       "--out-dir", tmp_path / "o", "--seed", "9", "--lambda-adv", "0")
    assert code == 0, err
    cfg = json.loads((tmp_path / "o" / "config.json").read_text())
    assert cfg["seed"] == 9 and cfg["lambda_adv"] == 0.0


def test_train_dry_run_full_scale(capsys):
    code, out, _ = run(capsys, "train", "--dry-run")
    assert code == 0
    assert "(1, 1, 128, 128, 256)" in out
    assert "generator parameters 14930203" in out


def test_synthesize_contract(pipeline, tmp_path, capsys):
    us = load_uvol(pipeline / "pre" / "case000_us.uvol")
    pred = load_uvol(pipeline / "pred" / "case000_pct.uvol")
    assert pred.dims == us.dims
    assert np.array_equal(pred.affine, us.affine)
    assert np.all(pred.data > 0) and np.all(pred.data < 1)
    code, _, err = run(capsys, "synthesize", "--checkpoint", pipeline / "run" / "checkpoint_last",
                       "--us", pipeline / "pre" / "case000_us.uvol", "--out", tmp_path / "again.uvol")
    assert code == 0, err
    assert raw_path(tmp_path / "again.uvol").read_bytes() == raw_path(pipeline / "pred" / "case000_pct.uvol").read_bytes()


def test_synthesize_dims_mismatch(pipeline, tmp_path, capsys):
    save_uvol(tmp_path / "big_us.uvol", Volume(np.zeros((16, 16, 16)), np.eye(4)))
    code, _, err = run(capsys, "synthesize", "--checkpoint", pipeline / "run" / "checkpoint_last",
                       "--us", tmp_path / "big_us.uvol", "--out", tmp_path / "o.uvol")
    assert code == 21 and "CheckpointMismatch" in err


def test_evaluate_pipeline_report(pipeline, capsys):
    code, _, err = run(capsys, "evaluate", "--pred-dir", pipeline / "pred", "--ref-dir", pipeline / "pre",
                       "--out", pipeline / "report.json")
    assert code == 0, err
    rep = json.loads((pipeline / "report.json").read_text())
    assert [r["case"] for r in rep["cases"]] == ["case000", "case001"]


def write_pairs(directory, offsets, dims=(8, 8, 8)):
    directory.mkdir(parents=True, exist_ok=True)
    for i, off in enumerate(offsets):
        ref = np.full(dims, 0.25)
        save_uvol(directory / f"c{i}_ct.uvol", Volume(ref, np.eye(4)))
        save_uvol(directory / f"c{i}_pct.uvol", Volume(ref + off, np.eye(4)))


def test_evaluate_identical_and_offsets(tmp_path, capsys):
    write_pairs(tmp_path / "same", [0.0, 0.0])
    code, _, _ = run(capsys, "evaluate", "--pred-dir", tmp_path / "same", "--ref-dir", tmp_path / "same",
                     "--out", tmp_path / "r1.json")
    rep = json.loads((tmp_path / "r1.json").read_text())
    assert code == 0 and rep["aggregate"]["psnr_db"]["n_infinite"] == 2
    assert all(r["psnr_db"] == "inf" for r in rep["cases"])
    assert abs(rep["aggregate"]["ssim"]["mean"] - 1) < 1e-9
    write_pairs(tmp_path / "off", [0.5, 0.25])  # float32-exact offsets
    run(capsys, "evaluate", "--pred-dir", tmp_path / "off", "--ref-dir", tmp_path / "off", "--out", tmp_path / "r2.json")
    rep = json.loads((tmp_path / "r2.json").read_text())
    expect = [10 * np.log10(1 / 0.25), 10 * np.log10(1 / 0.0625)]
    assert [abs(r["psnr_db"] - e) < 1e-9 for r, e in zip(rep["cases"], expect)] == [True, True]


def test_evaluate_missing_case_named(tmp_path, capsys):
    write_pairs(tmp_path / "d", [0.1, 0.1, 0.1])
    (tmp_path / "d" / "c1_pct.uvol").unlink()
    code, _, err = run(capsys, "evaluate", "--pred-dir", tmp_path / "d", "--ref-dir", tmp_path / "d",
                       "--out", tmp_path / "r.json")
    assert code == 22 and "c1" in err


def test_gradcheck_negative_control_with_empty_config(tmp_path, capsys):
    (tmp_path / "empty.json").write_text("{}")
    code, out, err = run(capsys, "gradcheck", "--config", tmp_path / "empty.json", "--corrupt", "layer_norm")
    assert code == 25
    assert "FAIL layer_norm" in out
    assert "PASS conv3d.input" in out
    assert "layer_norm" in err


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "pseudoct.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("pseudoct ")
