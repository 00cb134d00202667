import json
from pathlib import Path

import jsonschema
import pytest
import torch
import yaml

from helpers import tiny_config, write_random_images
from onestep_sr import cli
from onestep_sr.evalkit import METRICS_SCHEMA


@pytest.mark.parametrize("sub", sorted(cli.COMMANDS))
def test_help_exits_zero(sub, capsys):
    assert cli.main([sub, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_top_level_help(capsys):
    assert cli.main(["--help"]) == 0


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("teacher:\n  iterationz: 5\n")
    assert cli.main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "teacher.iterationz" in capsys.readouterr().err


def test_bad_override_type(tmp_path, capsys):
    assert cli.main(["train-teacher", "--override", "teacher.iterations=many", "--out", str(tmp_path)]) == 2
    assert "teacher.iterations" in capsys.readouterr().err


def test_missing_dataset_is_config_error(tmp_path):
    rc = cli.main(["train-teacher", "--override", f"data.train_dir={tmp_path / 'nope'}", "--out", str(tmp_path)])
    assert rc == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_random_images(root / "imgs", 6)
    cfg_path = root / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(tiny_config(data).to_dict()))
    out = root / "runs"
    return root, data, cfg_path, out


def run_dir_of(capsys):
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def test_full_pipeline(pipeline, capsys):
    root, data, cfg_path, out = pipeline
    common = ["--config", str(cfg_path), "--out", str(out)]

    assert cli.main(["make-dataset", *common]) == 0
    ds = run_dir_of(capsys)
    manifest = json.loads((ds / "manifest.json").read_text())
    assert len(manifest["files"]) == 6 and (ds / manifest["files"][0]["lr"]).exists()

    assert cli.main(["train-teacher", *common]) == 0
    teacher = run_dir_of(capsys)
    assert (teacher / "config.yaml").exists() and (teacher / "checkpoint" / "manifest.json").exists()
    assert json.loads((teacher / "run.json").read_text())["seed"] == 0

    assert cli.main(["distill", *common, "--teacher", str(teacher)]) == 0
    student = run_dir_of(capsys)
    assert json.loads((student / "run.json").read_text())["teacher"] == str(teacher.resolve())

    assert cli.main(["infer", *common, "--checkpoint", str(student), "--input", str(ds / "lr")]) == 0
    sr = run_dir_of(capsys) / "sr"
    assert len(list(sr.glob("*.png"))) == 6
    assert cli.main(["infer", *common, "--checkpoint", str(teacher), "--input", str(ds / "lr"), "--steps", "T"]) == 0
    assert cli.main(["infer", *common, "--checkpoint", str(student), "--input", str(ds / "lr"), "--steps", "3"]) == 2

    assert cli.main(["eval", *common, "--teacher", str(teacher), "--student", str(student)]) == 0
    ev = run_dir_of(capsys)
    for method in ("bicubic", "teacher", "student"):
        jsonschema.validate(json.loads((ev / f"metrics_{method}.json").read_text()), METRICS_SCHEMA)

    assert cli.main(["analyze-steps", *common, "--teacher", str(teacher), "--images", "3"]) == 0
    an = run_dir_of(capsys)
    assert (an / "spectrum_report.npz").exists() and (an / "hf_trajectory.png").exists()

    assert cli.main(["ablate", *common, "--teacher", str(teacher)]) == 0
    ab = run_dir_of(capsys)
    rows = json.loads((ab / "ablation_summary.json").read_text())
    assert [r["label"] for r in rows] == ["distill", "distill+hfp", "distill+hfp+sd", "distill+hfp+sd+adv"]
    for r in rows:
        d = json.loads((ab / f"metrics_{r['label']}.json").read_text())
        jsonschema.validate(d, METRICS_SCHEMA)
        assert d["label"] == r["label"]
    assert "delta_vs_previous" in rows[1]


def test_reruns_get_new_directories(pipeline, capsys):
    root, data, cfg_path, out = pipeline
    dirs = set()
    for _ in range(2):
        assert cli.main(["make-dataset", "--config", str(cfg_path), "--out", str(out)]) == 0
        dirs.add(run_dir_of(capsys))
    assert len(dirs) == 2


def test_resume_teacher_matches_uninterrupted(pipeline, capsys):
    import torch

    root, data, cfg_path, out = pipeline
    common = ["--config", str(cfg_path), "--out", str(out)]
    const = ["--override", "teacher.lr_decay=none"]
    assert cli.main(["train-teacher", *common, *const]) == 0
    full = run_dir_of(capsys)
    assert cli.main(["train-teacher", *common, *const, "--override", "teacher.iterations=10"]) == 0
    part = run_dir_of(capsys)
    # continue the partial run to the full length
    cfg = yaml.safe_load((part / "config.yaml").read_text())
    cfg["teacher"]["iterations"] = 20
    (part / "config.yaml").write_text(yaml.safe_dump(cfg))
    assert cli.main(["train-teacher", "--resume", str(part)]) == 0
    a = torch.load(full / "checkpoint" / "weights.pt")["teacher"]
    b = torch.load(part / "checkpoint" / "weights.pt")["teacher"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_seed_flag_recorded(pipeline, capsys):
    root, data, cfg_path, out = pipeline
    assert cli.main(["make-dataset", "--config", str(cfg_path), "--out", str(out), "--seed", "7"]) == 0
    d = run_dir_of(capsys)
    assert yaml.safe_load((d / "config.yaml").read_text())["train"]["seed"] == 7


def test_codec_cache_reused(pipeline, tmp_path, monkeypatch):
    root, data, cfg_path, out = pipeline
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "cache"))
    from onestep_sr.config import load_config
    from onestep_sr.dataio import load_dataset

    cfg = load_config(cfg_path, ["data.patch_size=32", "model.codec=linear", "model.spatial_factor=4",
                                "model.latent_channels=8"])
    images, _ = load_dataset(data, cfg.data.patch_size)
    first = cli.prepare_codec(cfg, images)
    assert len(list((tmp_path / "cache").glob("codec-*"))) == 1
    second = cli.prepare_codec(cfg, images)
    for a, b in zip(first.state_dict().values(), second.state_dict().values()):
        assert torch.equal(a, b)
