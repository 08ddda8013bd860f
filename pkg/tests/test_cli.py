import csv
import hashlib
import json

import numpy as np
import pytest

from muvi_tta.cli import main
from muvi_tta.metrics import read_case_csv


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("generate-data", "--domain", "source", "--n", 2, "--seed", 0, "--shape", 32,
               "--out", root / "train") == 0
    assert run("generate-data", "--domain", "shifted", "--n", 2, "--seed", 50, "--shape", 32,
               "--out", root / "test") == 0
    for norm in ("batch_norm", "instance_norm"):
        assert run("train-source", "--data", root / "train", "--val", root / "train", "--norm", norm,
                   "--patch", 16, "--depth", 2, "--channels", 4, "--epochs", 1, "--batch", 2,
                   "--out", root / norm) == 0
    return root


class TestGenerateData:
    def test_count_and_manifest(self, workspace):
        with open(workspace / "train" / "manifest.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert set(rows[0]) == {"case_id", "seed", "domain", "domain_hash", "image", "mask"}
        assert len(list((workspace / "train").glob("*_image.nii.gz"))) == 2

    def test_rerun_identical(self, workspace, tmp_path):
        assert run("generate-data", "--domain", "source", "--n", 2, "--seed", 0, "--shape", 32,
                   "--out", tmp_path / "again") == 0
        for f in sorted((workspace / "train").glob("*.nii.gz")):
            assert digest(f) == digest(tmp_path / "again" / f.name)

    def test_domain_file_and_config(self, tmp_path):
        spec = tmp_path / "dom.json"
        spec.write_text(json.dumps({"name": "warm", "intensity_gamma": 1.2}))
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"data": {"domain": str(spec), "n": 3, "shape": [32]}}))
        assert run("generate-data", "--config", cfg, "--n", 1, "--out", tmp_path / "d") == 0
        resolved = json.loads((tmp_path / "d" / "config.json").read_text())["data"]
        assert resolved["n"] == 1 and resolved["domain_spec"]["intensity_gamma"] == 1.2

    def test_missing_domain_file(self, tmp_path, capsys):
        assert run("generate-data", "--domain", tmp_path / "nope.json", "--out", tmp_path / "x") == 2
        assert "nope.json" in capsys.readouterr().err

    def test_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MUVI_TTA_OUTPUT_ROOT", str(tmp_path))
        assert run("generate-data", "--n", 1, "--shape", 32, "--out", "rel") == 0
        assert (tmp_path / "rel" / "manifest.csv").exists()


class TestTrainSource:
    def test_checkpoints_differ_in_norm(self, workspace):
        from muvi_tta.model import SegmentationModel
        bn = SegmentationModel.load(workspace / "batch_norm" / "model.pt")
        inn = SegmentationModel.load(workspace / "instance_norm" / "model.pt")
        assert bn.norm_kind == "batch_norm" and inn.norm_kind == "instance_norm"
        assert (workspace / "batch_norm" / "validation.json").exists()

    def test_indivisible_patch(self, workspace, tmp_path):
        assert run("train-source", "--data", workspace / "train", "--patch", 50, "--depth", 3,
                   "--out", tmp_path / "m") == 2

    def test_deterministic(self, workspace, tmp_path):
        assert run("train-source", "--data", workspace / "train", "--val", workspace / "train", "--patch", 16,
                   "--depth", 2, "--channels", 4, "--epochs", 1, "--batch", 2, "--out", tmp_path / "m") == 0
        a = json.loads((workspace / "batch_norm" / "validation.json").read_text())
        b = json.loads((tmp_path / "m" / "validation.json").read_text())
        assert a == b


@pytest.fixture(scope="module")
def runs(workspace):
    ckpt = workspace / "batch_norm" / "model.pt"
    out = workspace / "runs"
    assert run("adapt", "--checkpoint", ckpt, "--data", workspace / "test", "--method", "none",
               "--out", out / "none") == 0
    assert run("adapt", "--checkpoint", ckpt, "--data", workspace / "test", "--method", "muvi", "--lr", 0,
               "--label", "muvi-lr0", "--out", out / "muvi0") == 0
    assert run("adapt", "--checkpoint", ckpt, "--data", workspace / "test", "--method", "muvi",
               "--ablate", "no_consistency", "--out", out / "nocons") == 0
    return out


class TestAdaptEvaluate:
    def test_run_dir_layout(self, runs):
        case = sorted(p for p in (runs / "muvi0").iterdir() if p.is_dir())[0]
        assert {p.name for p in case.iterdir()} >= {"prediction.nii.gz", "loss_trace.jsonl", "timing.json",
                                                    "config.json", "pseudolabel.nii.gz"}

    def test_zero_lr_matches_baseline(self, runs, workspace):
        assert run("evaluate", "--runs", runs / "none", runs / "muvi0", "--ref", workspace / "test",
                   "--out", workspace / "eval") == 0
        a = read_case_csv(workspace / "eval" / "metrics_none.csv")
        b = read_case_csv(workspace / "eval" / "metrics_muvi-lr0.csv")
        assert [r.dsc for r in a] == [r.dsc for r in b]

    def test_no_consistency_trace(self, runs):
        for trace in (runs / "nocons").glob("*/loss_trace.jsonl"):
            for line in trace.read_text().splitlines():
                rec = json.loads(line)
                assert rec["consistency"] == 0 and rec["cosine"] == 0

    def test_tent_on_instance_norm_skipped(self, workspace, capsys):
        out = workspace / "runs" / "tent_in"
        assert run("adapt", "--checkpoint", workspace / "instance_norm" / "model.pt", "--data", workspace / "test",
                   "--method", "tent", "--out", out) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["skipped"] == {"NormUnsupported": 2} and summary["n_adapted"] == 0
        assert "skipped 2/2" in capsys.readouterr().out

    def test_unknown_method(self, workspace, tmp_path):
        assert run("adapt", "--checkpoint", workspace / "batch_norm" / "model.pt", "--data", workspace / "test",
                   "--method", "ttt", "--out", tmp_path) == 2

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert run("adapt", "--checkpoint", tmp_path / "x.pt", "--data", workspace / "test",
                   "--out", tmp_path / "o") == 2

    def test_evaluate_references_against_themselves(self, workspace, tmp_path):
        fake = tmp_path / "perfect"
        for mask in (workspace / "test").glob("*_mask.nii.gz"):
            case = mask.name.removesuffix("_mask.nii.gz")
            (fake / case).mkdir(parents=True)
            (fake / case / "prediction.nii.gz").write_bytes(mask.read_bytes())
        assert run("evaluate", "--runs", fake, "--ref", workspace / "test", "--out", tmp_path / "e") == 0
        row = (tmp_path / "e" / "table.md").read_text().splitlines()[2]
        assert row == "| perfect | 1.0000 ± 0.0000 | 0.0000 ± 0.0000 | 0.0000 ± 0.0000 | 0 |"

    def test_case_mismatch(self, runs, workspace, tmp_path, capsys):
        partial = tmp_path / "partial"
        case = sorted(p for p in (runs / "none").iterdir() if p.is_dir())[0]
        (partial / case.name).mkdir(parents=True)
        (partial / case.name / "prediction.nii.gz").write_bytes((case / "prediction.nii.gz").read_bytes())
        assert run("evaluate", "--runs", partial, "--ref", workspace / "test", "--out", tmp_path / "e") == 2
        assert "missing predictions" in capsys.readouterr().err

    def test_report(self, runs, workspace, capsys):
        run("evaluate", "--runs", runs / "none", runs / "nocons", "--ref", workspace / "test",
            "--out", workspace / "eval2")
        capsys.readouterr()
        assert run("report", "--metrics", workspace / "eval2", "--out", workspace / "report.md") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [l.split(" | ")[0] for l in lines[2:]] == ["| muvi-no_consistency", "| none"]


class TestOverlay:
    def test_layout_and_determinism(self, workspace, tmp_path):
        from matplotlib.image import imread
        image = sorted((workspace / "test").glob("*_image.nii.gz"))[0]
        mask = image.with_name(image.name.replace("_image", "_mask"))
        args = ["overlay", "--volume", image, "--masks", mask, mask, "--labels", "a", "b"]
        assert run(*args, "--out", tmp_path / "a.png") == 0
        assert run(*args, "--out", tmp_path / "b.png") == 0
        assert digest(tmp_path / "a.png") == digest(tmp_path / "b.png")
        assert imread(tmp_path / "a.png").shape[1] == 3 * 220

    def test_empty_mask(self, workspace, tmp_path):
        from muvi_tta.io import load_nifti, save_nifti
        from muvi_tta.volume import LabelVolume
        image = sorted((workspace / "test").glob("*_image.nii.gz"))[0]
        vol = load_nifti(image)
        save_nifti(LabelVolume(np.zeros(vol.shape, np.uint8), spacing=vol.spacing), tmp_path / "e.nii.gz")
        assert run("overlay", "--volume", image, "--masks", tmp_path / "e.nii.gz", "--out", tmp_path / "o.png") == 0

    def test_shape_mismatch(self, workspace, tmp_path):
        train_img = sorted((workspace / "train").glob("*_image.nii.gz"))[0]
        test_mask = sorted((workspace / "test").glob("*_mask.nii.gz"))[0]
        assert run("overlay", "--volume", train_img, "--masks", test_mask, "--out", tmp_path / "o.png") == 2
