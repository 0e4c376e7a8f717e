"""Command-line surface: exit codes, determinism, dataset layout, montage."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from htcgan.cli import _phantom_means_stds, _write_array_dir, main, montage
from htcgan.data_io import load_slices
from htcgan.pipeline import StageConfig

TINY_PARAMS = {
    "synth_base": 8,
    "res_blocks": 1,
    "attn_base": 8,
    "disc_base": 8,
    "disc_layers": 1,
    "seg_base": 8,
    "seg_growth": 4,
    "seg_layers": 2,
    "seg_pools": 2,
    "dropout": 0.0,
}

PHANTOM_ARGS = [
    "phantom", "--out", "data", "--n", "6", "--size", "16",
    "--regions", "1", "--seed", "3",
]


def run_in(monkeypatch, workdir: Path, argv) -> int:
    workdir.mkdir(parents=True, exist_ok=True)
    monkeypatch.chdir(workdir)
    return main(argv)


# ----------------------------------------------------------------- exit codes


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["phantom", "--help"]) == 0
    capsys.readouterr()


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["phantom"]) == 1  # missing required arguments
    assert main(["phantom", "--out", "d", "--n", "x", "--size", "16", "--seed", "0"]) == 1
    capsys.readouterr()


def test_runtime_errors_exit_two(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["montage", "--run", "nowhere", "--out", "m.png"]) == 2
    assert main(["infer", "--checkpoint", "missing.ckpt", "--input", "d", "--out", "o"]) == 2
    assert main(["eval", "--pred", "a", "--gt", "b", "--report", "r.json"]) == 2
    # phantom spec validation surfaces as a runtime failure, not a crash
    assert main(["phantom", "--out", "d", "--n", "0", "--size", "16", "--seed", "0"]) == 2
    assert main(["phantom", "--out", "d", "--n", "2", "--size", "8", "--seed", "0"]) == 2
    capsys.readouterr()


# -------------------------------------------------------------- deterministic


def test_phantom_and_targets_are_bit_deterministic(tmp_path, monkeypatch, capsys):
    """Same seed and arguments must reproduce every artifact byte for byte,
    including the manifests."""
    argv_targets = ["targets", "--data", "data", "--stage", "1", "--seed", "5"]
    for d in ("a", "b"):
        assert run_in(monkeypatch, tmp_path / d, list(PHANTOM_ARGS)) == 0
        assert run_in(monkeypatch, tmp_path / d, list(argv_targets)) == 0
    capsys.readouterr()

    files_a = sorted(
        p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()
    )
    files_b = sorted(
        p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file()
    )
    assert files_a == files_b
    assert any(f.name == "manifest.json" for f in files_a)
    assert any(f.name == "tgt_0000.raw" for f in files_a)
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (
            tmp_path / "b" / rel
        ).read_bytes(), str(rel)


def test_phantom_output_layout(tmp_path, monkeypatch, capsys):
    assert run_in(monkeypatch, tmp_path, list(PHANTOM_ARGS)) == 0
    capsys.readouterr()
    slices, meta = load_slices(tmp_path / "data")
    assert len(slices) == 6
    assert all(s.image.shape == (16, 16) for s in slices)
    assert all(s.image.min() >= 0.0 and s.image.max() <= 1.0 for s in slices)
    assert set(np.unique(np.stack([s.labels for s in slices]))) <= {0, 1}
    assert len(meta["spec"]["target_index"]) == 6

    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert set(manifest) == {"artifacts", "command", "config", "seed"}
    assert manifest["command"] == "phantom"
    assert manifest["seed"] == 3
    assert "manifest.json" not in manifest["artifacts"]
    assert "img_0000.raw" in manifest["artifacts"]


def test_targets_layout(tmp_path, monkeypatch, capsys):
    assert run_in(monkeypatch, tmp_path, list(PHANTOM_ARGS)) == 0
    assert run_in(
        monkeypatch, tmp_path, ["targets", "--data", "data", "--stage", "1", "--seed", "5"]
    ) == 0
    capsys.readouterr()
    tdir = tmp_path / "data" / "targets_stage1"
    meta = json.loads((tdir / "meta.json").read_text())
    assert meta["count"] == 6
    assert meta["shape"] == [16, 16]
    assert meta["stage"] == 1 and meta["seed"] == 5
    arr = np.frombuffer((tdir / "tgt_0000.raw").read_bytes(), "<f4").reshape(16, 16)
    assert 0.0 <= arr.min() and arr.max() <= 1.0


def test_phantom_means_stds_defaults():
    means, stds = _phantom_means_stds(1, 0.15)
    assert means == [0.4, 0.6]
    assert stds == [0.15, 0.15]
    means, stds = _phantom_means_stds(3, 0.1)
    assert np.allclose(means, np.linspace(0.3, 0.7, 4))
    assert stds == [0.1] * 4


# --------------------------------------------------------------- full command
# chain: phantom -> train -> montage -> infer (both kinds) -> eval


def test_full_cli_pipeline(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(list(PHANTOM_ARGS)) == 0

    stage = StageConfig(
        stage_index=1,
        foreground_labels=[1],
        patch_size=16,
        epochs=1,
        switch_epoch=1,
        seed=3,
        batch_size=4,
        lr=1e-3,
        seg_epochs=1,
        seg_batch_size=4,
        model_params=dict(TINY_PARAMS),
    )
    Path("exp.json").write_text(
        json.dumps(
            {
                "seed": 3,
                "stages": [stage.to_json()],
                "data": {"train": "data"},
                "output_dir": "run",
            }
        )
    )
    assert main(["train", "--config", "exp.json", "--stage", "1"]) == 0
    run = Path("run")
    for name in (
        "stage1_synthesis.ckpt",
        "stage1_segmenter.ckpt",
        "stage1_synthesis_log.jsonl",
        "stage1_seg_log.jsonl",
        "manifest.json",
    ):
        assert (run / name).exists(), name
    log_lines = (run / "stage1_synthesis_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 1
    assert json.loads(log_lines[0])["mode"] == "whole"
    for prefix in ("src", "att", "syn", "tgt"):
        assert (run / "samples" / f"{prefix}_0000.raw").exists()

    assert main(["montage", "--run", "run", "--out", "m/montage.png"]) == 0
    with Image.open("m/montage.png") as im:
        assert im.size == (4 * 16 + 3, 4 * 16 + 3)  # 4 panels x 4 sample rows

    assert main(
        ["infer", "--checkpoint", "run/stage1_synthesis.ckpt",
         "--input", "data", "--out", "syn_out"]
    ) == 0
    syn_meta = json.loads(Path("syn_out/meta.json").read_text())
    assert syn_meta["count"] == 6
    assert Path("syn_out/syn_0005.raw").exists()
    assert Path("syn_out/att_0005.raw").exists()

    assert main(
        ["infer", "--checkpoint", "run/stage1_segmenter.ckpt",
         "--input", "data", "--out", "pred_out"]
    ) == 0
    assert Path("pred_out/pred_0005.raw").exists()
    assert Path("pred_out/prob_0005.raw").exists()
    pred = np.frombuffer(Path("pred_out/pred_0000.raw").read_bytes(), np.uint8)
    assert set(np.unique(pred)) <= {0, 1}

    assert main(
        ["eval", "--pred", "pred_out", "--gt", "data",
         "--synthetic", "syn_out", "--target", "data/targets_stage1",
         "--report", "reports/report.json"]
    ) == 2  # targets were never built in this workspace
    assert main(["targets", "--data", "data", "--stage", "1", "--seed", "5"]) == 0
    assert main(
        ["eval", "--pred", "pred_out", "--gt", "data",
         "--synthetic", "syn_out", "--target", "data/targets_stage1",
         "--report", "reports/report.json"]
    ) == 0
    capsys.readouterr()

    payload = json.loads(Path("reports/report.json").read_text())
    assert "region1" in payload["regions"]
    assert payload["regions"]["region1"]["dice"]["n"] == 6
    assert "image" in payload["regions"]
    csv_lines = Path("reports/report.csv").read_text().splitlines()
    assert csv_lines[0] == "case,region,dice,hd95,psnr,ssim,ks"
    assert Path("reports/manifest.json").exists()


def test_eval_perfect_predictions(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rng = np.random.default_rng(0)
    masks = (rng.random((4, 16, 16)) < 0.3).astype(np.uint8)
    _write_array_dir(Path("preds"), "pred", list(masks))
    _write_array_dir(Path("gts"), "lbl", list(masks))
    assert main(["eval", "--pred", "preds", "--gt", "gts", "--report", "r/report.json"]) == 0
    capsys.readouterr()
    payload = json.loads(Path("r/report.json").read_text())
    region = payload["regions"]["region1"]
    assert region["dice"]["mean"] == 1.0
    assert region["hd95"]["mean"] == 0.0


def test_eval_requires_synthetic_and_target_together(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    masks = np.zeros((2, 16, 16), np.uint8)
    masks[:, 4:8, 4:8] = 1
    _write_array_dir(Path("preds"), "pred", list(masks))
    _write_array_dir(Path("gts"), "lbl", list(masks))
    code = main(
        ["eval", "--pred", "preds", "--gt", "gts",
         "--synthetic", "preds", "--report", "r/report.json"]
    )
    assert code == 2
    capsys.readouterr()


def test_train_rejects_out_of_range_stage(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(list(PHANTOM_ARGS)) == 0
    stage = StageConfig(stage_index=1, foreground_labels=[1], patch_size=16)
    Path("exp.json").write_text(
        json.dumps(
            {"seed": 0, "stages": [stage.to_json()],
             "data": {"train": "data"}, "output_dir": "run"}
        )
    )
    assert main(["train", "--config", "exp.json", "--stage", "5"]) == 2
    capsys.readouterr()


# -------------------------------------------------------------------- montage


def test_montage_single_case_layout(tmp_path):
    rng = np.random.default_rng(1)
    row = tuple(rng.random((64, 64)) for _ in range(4))
    out = tmp_path / "m.png"
    montage([row], out)
    with Image.open(out) as im:
        arr = np.array(im)
    assert arr.shape == (64, 4 * 64 + 3)
    # 1-px white separators between the four panels
    for col in (64, 129, 194):
        assert (arr[:, col] == 255).all()


def test_montage_three_cases_layout(tmp_path):
    rng = np.random.default_rng(2)
    panels = [tuple(rng.random((64, 64)) for _ in range(4)) for _ in range(3)]
    out = tmp_path / "m.png"
    montage(panels, out)
    with Image.open(out) as im:
        arr = np.array(im)
    assert arr.shape == (3 * 64 + 2, 259)
    for rowline in (64, 129):
        assert (arr[rowline, :] == 255).all()


def test_montage_clamps_and_quantizes(tmp_path):
    low = np.full((8, 8), -0.5)
    high = np.full((8, 8), 1.5)
    half = np.full((8, 8), 0.5)
    zero = np.zeros((8, 8))
    out = tmp_path / "m.png"
    montage([(low, high, half, zero)], out)
    with Image.open(out) as im:
        arr = np.array(im)
    assert (arr[:, :8] == 0).all()
    assert (arr[:, 9:17] == 255).all()
    assert (arr[:, 18:26] == 128).all()
    assert (arr[:, 27:35] == 0).all()


def test_montage_rejects_bad_panels(tmp_path):
    with pytest.raises(ValueError):
        montage([], tmp_path / "m.png")
    with pytest.raises(ValueError):
        montage(
            [(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((4, 4)))],
            tmp_path / "m.png",
        )
    with pytest.raises(ValueError):
        montage([(np.zeros((8, 8)), np.zeros((8, 8)))], tmp_path / "m.png")
