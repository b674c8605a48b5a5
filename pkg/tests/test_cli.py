import json

import jsonschema
import numpy as np
import pytest

from contourqa.autodiff import load_checkpoint
from contourqa.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING, EXIT_OK, EXIT_PIPELINE, main
from contourqa.evaluate import REPORT_SCHEMA
from contourqa.mesh import read_ply


def small_config(out_dir):
    return {
        "output_dir": str(out_dir),
        "dataset": {"n_phantoms": 4, "n_perturbations": 3},
        "phantom": {"dims": [48, 48, 48], "radius_range": [10.0, 15.0]},
        "folds": {"k": 2, "seed": 0},
        "train": {"max_epochs": 1, "batch_size": 4, "perturbations_per_image": 2,
                  "pretext_max_epochs": 2, "pretext_samples_per_epoch": 128},
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(small_config(root / "out")))
    assert main(["generate", "--config", str(cfg)]) == EXIT_OK
    return root, cfg


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_generate_is_idempotent(workspace, capsys):
    _, cfg = workspace
    code, out, _ = run(capsys, "generate", "--config", str(cfg))
    assert code == EXIT_OK and "up to date" in out
    ds = workspace[0] / "out" / "dataset"
    assert len(list((ds / "samples").glob("*.rec"))) == 12
    assert json.loads((ds / "config.json").read_text()) == json.loads(cfg.read_text())


def test_fold_out_of_range(workspace, capsys):
    code, _, err = run(capsys, "train", "--config", str(workspace[1]), "--fold", "7")
    assert code == EXIT_CONFIG and "--fold 7 out of range for k=2" in err


def test_config_errors(tmp_path, capsys):
    bad = small_config(tmp_path)
    bad["train"]["learning_rate"] = 0.1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    code, _, err = run(capsys, "generate", "--config", str(path))
    assert code == EXIT_CONFIG and "learning_rate" in err

    for mutate in (lambda c: c.update(extra=1), lambda c: c["dataset"].update(size=3),
                   lambda c: c["folds"].update(k=9), lambda c: c.update(model={"spline_degree": 0})):
        cfg = small_config(tmp_path)
        mutate(cfg)
        path.write_text(json.dumps(cfg))
        assert run(capsys, "generate", "--config", str(path))[0] == EXIT_CONFIG

    path.write_text("{not json")
    assert run(capsys, "generate", "--config", str(path))[0] == EXIT_CONFIG
    assert run(capsys, "generate", "--config", str(tmp_path / "nope.json"))[0] == EXIT_CONFIG


def test_missing_dataset_is_reported(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(small_config(tmp_path / "empty")))
    code, _, err = run(capsys, "train", "--config", str(path), "--fold", "0")
    assert code == EXIT_MISSING and "generate" in err


def test_eval_without_checkpoint(workspace, capsys):
    code, _, err = run(capsys, "eval", "--config", str(workspace[1]), "--fold", "1", "--ablation", "blind_ct")
    assert code == EXIT_MISSING and "model.ckpt" in err


def test_full_training_needs_encoder(workspace, capsys):
    code, _, err = run(capsys, "train", "--config", str(workspace[1]), "--fold", "1", "--ablation", "full")
    assert code == EXIT_MISSING and "encoder.ckpt" in err


def test_train_from_scratch_then_eval(workspace, capsys):
    root, cfg = workspace
    out = root / "out"
    code, stdout, _ = run(capsys, "train", "--config", str(cfg), "--fold", "0", "--ablation", "no_pretrain")
    assert code == EXIT_OK and "best validation loss" in stdout
    run_dir = out / "fold0" / "no_pretrain"
    assert (run_dir / "model.ckpt").exists()
    assert (run_dir / "history.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,val_loss,val_acc"
    assert json.loads((run_dir / "config.json").read_text()) == json.loads(cfg.read_text())
    assert not (out / "fold0" / "encoder.ckpt").exists()

    code, stdout, _ = run(capsys, "eval", "--config", str(cfg), "--fold", "0", "--ablation", "no_pretrain")
    assert code == EXIT_OK
    rep_dir = out / "reports" / "no_pretrain"
    report = json.loads((rep_dir / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert [f["fold"] for f in report["folds"]] == [0]
    assert (rep_dir / "confusion.csv").exists() and (rep_dir / "config.json").exists()
    assert list((rep_dir / "meshes").glob("fold0_worst_*.ply"))


def test_pretrain_then_full(workspace, capsys):
    root, cfg = workspace
    code, stdout, _ = run(capsys, "pretrain", "--config", str(cfg), "--fold", "1")
    assert code == EXIT_OK and "pretext validation accuracy" in stdout
    fold_dir = root / "out" / "fold1"
    assert (fold_dir / "encoder.ckpt").exists() and (fold_dir / "config.json").exists()
    assert json.loads((fold_dir / "pretext_history.json").read_text())
    for ablation in ("full", "no_gnn"):
        assert run(capsys, "train", "--config", str(cfg), "--fold", "1", "--ablation", ablation)[0] == EXIT_OK
        assert (fold_dir / ablation / "model.ckpt").exists()
    code, stdout, _ = run(capsys, "eval", "--config", str(cfg), "--fold", "1", "--ablation", "full")
    assert code == EXIT_OK and "report.json" in stdout


def test_divergence_exit_code(workspace, capsys, tmp_path):
    cfg = small_config(workspace[0] / "out")
    cfg["train"].update(lr0=1e300, eta_min=1e300)
    path = tmp_path / "diverge.json"
    path.write_text(json.dumps(cfg))
    with pytest.warns(RuntimeWarning):
        code, _, err = run(capsys, "train", "--config", str(path), "--fold", "0", "--ablation", "no_pretrain")
    assert code == EXIT_DIVERGED and "diverged" in err
    tensors, meta, _ = load_checkpoint(workspace[0] / "out" / "fold0" / "no_pretrain" / "diverged.ckpt")
    assert meta["diverged"] and all(np.isfinite(v).all() for v in tensors.values())


def test_export_mesh(workspace, capsys, tmp_path):
    root, cfg = workspace
    target = tmp_path / "labels.ply"
    code, _, _ = run(capsys, "export-mesh", "--config", str(cfg), "--record", "samples/p000_s000.rec",
                     "--out", str(target))
    assert code == EXIT_OK
    mesh, classes = read_ply(target)
    assert mesh.is_watertight() and classes is not None and len(classes) == mesh.n_vertices

    code, _, err = run(capsys, "export-mesh", "--config", str(cfg), "--record", "samples/p000_s000.rec",
                       "--out", str(target), "--ablation", "full")
    assert code == EXIT_CONFIG and "--fold" in err
    code, _, _ = run(capsys, "export-mesh", "--config", str(cfg), "--record", "samples/missing.rec",
                     "--out", str(target))
    assert code == EXIT_MISSING


def test_corrupt_record_is_a_pipeline_error(tmp_path, capsys):
    cfg = small_config(tmp_path / "out")
    cfg["dataset"] = {"n_phantoms": 3, "n_perturbations": 1}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    assert run(capsys, "generate", "--config", str(path))[0] == EXIT_OK
    for rec in (tmp_path / "out" / "dataset" / "samples").glob("*.rec"):
        raw = bytearray(rec.read_bytes())
        raw[100] ^= 0xFF
        rec.write_bytes(bytes(raw))
    code, _, err = run(capsys, "train", "--config", str(path), "--fold", "1", "--ablation", "no_pretrain")
    assert code == EXIT_PIPELINE and "sha256" in err


def test_verbose_logging_is_key_value(workspace, capsys):
    code, _, err = run(capsys, "generate", "--config", str(workspace[1]), "-v")
    assert code == EXIT_OK
    line = err.strip().splitlines()[0]
    assert line.startswith("ts=") and "level=info" in line and "stage=generate" in line
