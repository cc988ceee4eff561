import hashlib
from pathlib import Path

import numpy as np
import pytest

from swindepth import cli
from swindepth.config import key_fields
from swindepth.metrics import read_metrics
from swindepth.synthdata import read_pfm, write_pfm

DATA = ["--height", "32", "--width", "64", "--frames", "12", "--seed", "3"]
MODEL = ["--height", "32", "--width", "64", "--embed-dim", "8", "--depths", "2,2,2,2", "--heads", "1,1,2,2",
         "--proj-dim", "8", "--pose-widths", "8,8,16,16,16", "--batch-size", "2", "--holdout", "3",
         "--checkpoint-every", "2", "--lr", "1e-3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("synth", "--out", root, *DATA) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", dataset, "--out", out, "--steps", 4, "--quiet", *MODEL) == 0
    return out


class TestHelp:
    @pytest.mark.parametrize("command", ["synth", "train", "infer", "eval"])
    def test_help_lists_every_accepted_key(self, command, capsys):
        with pytest.raises(SystemExit) as info:
            run(command, "--help")
        assert info.value.code == 0
        text = capsys.readouterr().out
        groups = cli.COMMAND_GROUPS[command]
        for f in key_fields():
            flag = "--" + f.name.replace("_", "-")
            if groups is None or f.metadata["group"] in groups:
                assert flag in text, flag
            else:
                assert flag + " " not in text

    def test_unknown_option_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            run("train", "--data", "x", "--out", "y", "--no-such-key", "1")
        assert info.value.code == cli.EXIT_USAGE


class TestSynth:
    def test_manifest_and_determinism(self, dataset, tmp_path):
        assert (dataset / "manifest.txt").read_text() == "0000 12\n"
        assert len(list((dataset / "scene_0000").glob("frame_*.ppm"))) == 12
        assert run("synth", "--out", tmp_path, *DATA) == 0
        assert tree_digest(tmp_path) == tree_digest(dataset)

    def test_invalid_depth_range(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path, "--near", 60, "--far", 10) == cli.EXIT_DATA
        assert "depth range" in capsys.readouterr().err

    def test_bad_value_is_usage_error(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--frames", "ten") == cli.EXIT_USAGE


class TestTrain:
    def test_outputs(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"run_config.txt", "loss_log.txt", "loss_curve.png", "parameters.tsv", "checkpoints", "holdout"} <= names
        assert len((trained / "loss_log.txt").read_text().splitlines()) == 4
        assert (trained / "checkpoints" / "step_0000004.swdp").exists()
        assert {"metrics.txt", "report.txt", "per_image.tsv", "depth_preview.png"} <= {
            p.name for p in (trained / "holdout").iterdir()}

    def test_echoed_config_reproduces_run(self, dataset, trained, tmp_path):
        assert run("train", "--data", dataset, "--out", tmp_path, "--config", trained / "run_config.txt",
                   "--quiet", "--no-eval") == 0
        assert (tmp_path / "loss_log.txt").read_bytes() == (trained / "loss_log.txt").read_bytes()

    def test_resume_matches_uninterrupted(self, dataset, trained, tmp_path):
        assert run("train", "--data", dataset, "--out", tmp_path, "--steps", 2, "--quiet", "--no-eval", *MODEL) == 0
        assert run("train", "--data", dataset, "--out", tmp_path, "--steps", 4, "--quiet", "--no-eval",
                   "--resume", "last", *MODEL) == 0
        assert (tmp_path / "loss_log.txt").read_bytes() == (trained / "loss_log.txt").read_bytes()

    def test_ablation_flag(self, dataset, tmp_path):
        assert run("train", "--data", dataset, "--out", tmp_path, "--steps", 1, "--quiet", "--no-eval",
                   "--ablate", "no_ppm", *MODEL) == 0
        text = (tmp_path / "run_config.txt").read_text()
        assert "ppm = false" in text and "topdown_add = true" in text

    def test_missing_dataset(self, tmp_path, capsys):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o", *MODEL) == cli.EXIT_DATA
        assert "manifest" in capsys.readouterr().err


class TestInfer:
    def test_single_image(self, dataset, trained, tmp_path):
        img = dataset / "scene_0000" / "frame_000004.ppm"
        assert run("infer", "--checkpoint", trained / "checkpoints" / "last.swdp", "--input", img, "--out", tmp_path) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["depth_000004.pfm", "depth_000004.ppm", "run_config.txt"]
        depth = read_pfm(tmp_path / "depth_000004.pfm")
        assert depth.shape == (32, 64) and np.all((depth > 0.1) & (depth < 100))

    def test_directory_mirrored(self, dataset, trained, tmp_path):
        assert run("infer", "--checkpoint", trained / "checkpoints" / "last.swdp", "--input", dataset,
                   "--out", tmp_path) == 0
        assert len(list((tmp_path / "scene_0000").glob("depth_*.pfm"))) == 12
        assert len(list((tmp_path / "scene_0000").glob("depth_*.ppm"))) == 12

    def test_other_resolution_returns_input_size(self, trained, tmp_path):
        from swindepth.synthdata import write_ppm

        write_ppm(tmp_path / "big.ppm", np.random.default_rng(0).random((3, 48, 80)))
        assert run("infer", "--checkpoint", trained / "checkpoints" / "last.swdp", "--input", tmp_path / "big.ppm",
                   "--out", tmp_path / "o") == 0
        assert read_pfm(tmp_path / "o" / "big.pfm").shape == (48, 80)

    def test_corrupted_checkpoint(self, trained, tmp_path, capsys):
        blob = bytearray((trained / "checkpoints" / "last.swdp").read_bytes())
        blob[100] ^= 0xFF
        (tmp_path / "bad.swdp").write_bytes(bytes(blob))
        assert run("infer", "--checkpoint", tmp_path / "bad.swdp", "--input", tmp_path, "--out", tmp_path / "o") == 2
        assert "CRC" in capsys.readouterr().err


class TestEval:
    def test_self_comparison(self, dataset, tmp_path):
        assert run("eval", "--pred", dataset, "--gt", dataset, "--out", tmp_path) == 0
        m = read_metrics(tmp_path / "metrics.txt")
        assert m["abs_rel"] == 0.0 and m["delta1"] == 1.0 and m["n_images"] == 12
        assert (tmp_path / "per_image_abs_rel.png").stat().st_size > 0
        assert (tmp_path / "per_image.tsv").read_text().count("\n") == 13

    def test_median_scaling_switch(self, dataset, tmp_path):
        pred = tmp_path / "pred" / "scene_0000"
        pred.mkdir(parents=True)
        for p in (dataset / "scene_0000").glob("depth_*.pfm"):
            write_pfm(pred / p.name, read_pfm(p) * 1.5)  # stays under the 80 cap
        assert run("eval", "--pred", tmp_path / "pred", "--gt", dataset, "--out", tmp_path / "a") == 0
        assert run("eval", "--pred", tmp_path / "pred", "--gt", dataset, "--out", tmp_path / "b",
                   "--no-median-scale") == 0
        assert read_metrics(tmp_path / "a" / "metrics.txt")["abs_rel"] < 1e-6
        assert read_metrics(tmp_path / "b" / "metrics.txt")["abs_rel"] == pytest.approx(0.5, rel=1e-6)

    def test_holdout_split(self, dataset, tmp_path):
        assert run("eval", "--pred", dataset, "--gt", dataset, "--out", tmp_path, "--split", "holdout",
                   "--holdout", 3) == 0
        assert read_metrics(tmp_path / "metrics.txt")["n_images"] == 3

    def test_missing_file_named(self, dataset, tmp_path, capsys):
        pred = tmp_path / "pred" / "scene_0000"
        pred.mkdir(parents=True)
        assert run("eval", "--pred", tmp_path / "pred", "--gt", dataset, "--out", tmp_path / "o") == 2
        assert "depth_000000.pfm" in capsys.readouterr().err


class TestReport:
    def test_loss_curve(self, trained, capsys):
        (trained / "loss_curve.png").unlink()
        assert run("report", "--run", trained) == 0
        assert (trained / "loss_curve.png").stat().st_size > 0
        assert "ratio=" in capsys.readouterr().out
