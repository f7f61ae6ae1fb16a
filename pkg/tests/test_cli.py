import numpy as np
import pytest
import yaml
from PIL import Image

from matevit.cli import RunConfig, main, palette
from matevit.errors import ConfigError

TINY = {
    "backbone": {"image_size": 32, "patch_size": 8, "depth": 2, "dim": 16, "heads": 2, "ffn_dim": 32},
    "schedule": {"epochs": 2, "batch_size": 4},
    "data": {"synthetic": True, "synthetic_spec": {"n_images": 4}},
    "eval_every": 1,
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def trained(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out), "--quiet"]) == 0
    capsys.readouterr()
    return out


def test_run_config_defaults_and_strictness(tmp_path):
    run = RunConfig.from_dict({})
    assert run.out and run.eval_every > 0 and not run.data.synthetic
    for bad, key in (({"epochz": 3}, "epochz"), ({"data": {"sythetic": True}}, "data.sythetic"),
                     ({"data": {"synthetic_spec": {"n_img": 2}}}, "data.synthetic_spec.n_img")):
        with pytest.raises(ConfigError, match=key):
            RunConfig.from_dict(bad)
    assert RunConfig.from_dict(RunConfig.from_dict(TINY).to_dict()).to_dict() == RunConfig.from_dict(TINY).to_dict()


def test_unknown_key_exits_with_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("epochz: 3\n")
    assert main(["train", "--config", str(path)]) == 1
    assert "epochz" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--out", "/nonexistent/never"]) == 1  # no dataset given
    capsys.readouterr()


def test_train_writes_artifacts_and_is_deterministic(tmp_path, cfg_path, trained, capsys):
    assert (trained / "checkpoint.mvt").is_file()
    first = (trained / "metrics.csv").read_text()
    assert first.startswith("epoch,task,metric,value")
    again = tmp_path / "again"
    assert main(["train", "--config", str(cfg_path), "--out", str(again), "--quiet"]) == 0
    out = capsys.readouterr().out
    assert "final object mIoU=" in out and "final material mIoU=" in out
    assert (again / "metrics.csv").read_text() == first


def test_seed_flag_changes_run(tmp_path, cfg_path, trained, capsys):
    other = tmp_path / "other"
    assert main(["train", "--config", str(cfg_path), "--out", str(other), "--seed", "7", "--quiet"]) == 0
    capsys.readouterr()
    assert (other / "metrics.csv").read_text() != (trained / "metrics.csv").read_text()


def test_eval_prints_table(cfg_path, trained, capsys):
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(trained / "checkpoint.mvt")]) == 0
    out = capsys.readouterr().out
    assert "pixel_acc" in out and "object" in out and "material" in out


def test_predict_two_files_per_image(tmp_path, cfg_path, trained, capsys):
    img = tmp_path / "photo.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (40, 40, 3), dtype=np.uint8)).save(img)
    out = tmp_path / "pred"
    assert main(["predict", "--config", str(cfg_path), "--checkpoint", str(trained / "checkpoint.mvt"),
                 "--images", str(img), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["photo_material.png", "photo_object.png"]
    mask = Image.open(out / "photo_object.png")
    assert mask.mode == "P" and mask.size == (32, 32)
    assert mask.getpalette()[:6] == palette()[:6]
    capsys.readouterr()


def test_class_count_mismatch(tmp_path, trained, capsys):
    from matevit.data import SyntheticSpec, generate_synthetic, save_dataset
    root = tmp_path / "ds"
    save_dataset(generate_synthetic(SyntheticSpec(n_images=2, image_size=32)), root,
                 [(0, "object", 6), (1, "material", 4)])
    assert main(["eval", "--data", str(root), "--checkpoint", str(trained / "checkpoint.mvt")]) == 1
    assert "class-count mismatch" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_nonzero(tmp_path, cfg_path, trained, capsys):
    bad = tmp_path / "bad.mvt"
    raw = (trained / "checkpoint.mvt").read_bytes()
    bad.write_bytes(raw[: len(raw) // 3])
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_flops_scales_with_resolution(tmp_path, cfg_path, capsys):
    def total(res):
        out = tmp_path / f"f{res}"
        assert main(["flops", "--config", str(cfg_path), "--resolution", str(res), "--out", str(out)]) == 0
        rows = dict(line.split(",", 1) for line in (out / "flops.csv").read_text().splitlines())
        return rows
    small, large = total(64), total(128)
    capsys.readouterr()
    assert int(large["patch_embed"].split(",")[0]) == 4 * int(small["patch_embed"].split(",")[0])
    assert int(large["encoder.0.attn_scores"].split(",")[0]) == 16 * int(small["encoder.0.attn_scores"].split(",")[0])
    assert main(["flops", "--config", str(cfg_path), "--resolution", "30"]) == 2


def test_route_stats_shares_sum_to_one(cfg_path, capsys):
    assert main(["route-stats", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    for block in out.split("gate ")[1:]:
        shares = [float(line.split(":")[1].split()[0]) for line in block.splitlines() if "expert" in line]
        assert all(0.0 <= s <= 1.0 for s in shares)
        assert sum(shares) == pytest.approx(1.0, abs=2e-3)


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "ok" in capsys.readouterr().out


def test_palette_is_fixed():
    pal = palette()
    assert len(pal) == 768
    assert pal[:9] == [0, 0, 0, 128, 0, 0, 0, 128, 0]
    assert pal[255 * 3:] == [255, 255, 255]
