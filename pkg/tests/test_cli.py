"""CLI commands end to end: exit codes, artifacts, reproducibility records."""

import json
import subprocess
import sys

import pytest

from neurostate.cli import main
from neurostate.pipeline import read_manifest

NAMES8 = ["FP1", "F3", "CZ", "C4", "P3", "PZ", "O1", "O2"]

TINY_PRETRAIN_CFG = """\
# desk-scale run
data.manifest = {manifest}
out.dir = {out}
data.window_s = 0.5
encoder.conv_channels = 8,8
encoder.conv_kernels = 15,3
encoder.conv_strides = 1,1
encoder.conv_paddings = 7,1
encoder.k_c = 8
encoder.k_r = 8
encoder.patch_len = 10
encoder.patch_stride = 10
encoder.d_model = 16
encoder.n_layers = 1
encoder.n_heads = 4
encoder.d_ff = 32
encoder.n_pos_max = 16
decoder.layers = 1
train.batch_size = 2
train.total_epochs = 2
train.warmup_epochs = 1
train.save_every = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    channel_list = root / "channels.txt"
    channel_list.write_text("\n".join(NAMES8) + "\n")
    code = main([
        "synth",
        "--out", str(corpus),
        "--segments-per-state", "7",
        "--snr", "3.0",
        "--seed", "4",
        "--duration-s", "0.5",
        "--channel-list", str(channel_list),
    ])
    assert code == 0
    return root, corpus / "manifest.tsv"


@pytest.fixture(scope="module")
def pretrained(workspace):
    root, manifest = workspace
    out = root / "run"
    cfg = root / "pretrain.cfg"
    cfg.write_text(TINY_PRETRAIN_CFG.format(manifest=manifest, out=out))
    code = main(["pretrain", "--config", str(cfg)])
    assert code == 0
    return out / "checkpoint_last.bin"


def test_synth_artifacts(workspace):
    root, manifest = workspace
    entries = read_manifest(manifest)
    assert len(entries) == 21
    record = json.loads((manifest.parent / "run_record.json").read_text())
    assert record["command"] == "synth"
    assert record["package_version"]
    assert len(record["config_hash"]) == 64
    assert record["seeds"] == {"seed": 4}


def test_pretrain_artifacts(workspace, pretrained):
    out = pretrained.parent
    assert pretrained.exists()
    assert (out / "train_log.jsonl").exists()
    assert (out / "loss_curve.png").read_bytes()[:4] == b"\x89PNG"
    record = json.loads((out / "run_record.json").read_text())
    assert record["command"] == "pretrain"
    assert record["seeds"] == {"train.seed": 0}


def test_pretrain_config_errors(workspace, tmp_path, capsys):
    root, manifest = workspace
    missing = tmp_path / "missing.cfg"
    missing.write_text("out.dir = x\n")
    assert main(["pretrain", "--config", str(missing)]) == 2
    assert "data.manifest" in capsys.readouterr().err

    unknown = tmp_path / "unknown.cfg"
    unknown.write_text(f"data.manifest = {manifest}\nout.dir = x\nencoder.bogus = 1\n")
    assert main(["pretrain", "--config", str(unknown)]) == 2
    assert "encoder.bogus" in capsys.readouterr().err


def test_finetune_flags_and_artifacts(workspace, pretrained, capsys):
    root, manifest = workspace
    out = root / "ft"
    code = main([
        "finetune",
        "--ckpt", str(pretrained),
        "--task", str(manifest),
        "--out", str(out),
        "--encoders", "affect,shared",
        "--merge", "mean",
        "--epochs", "1",
        "--seeds", "0,1",
        "--batch-size", "4",
        "--window-s", "0.5",
    ])
    assert code == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3  # one per seed + aggregate
    seeds = [json.loads(ln).get("seed") for ln in lines[:2]]
    assert seeds == [0, 1]
    aggregate = json.loads(lines[2])
    assert "balanced_accuracy" in aggregate["aggregate"]
    assert aggregate["n_classes"] == 3
    assert (out / "adaptation_curve.png").exists()
    stdout = capsys.readouterr().out
    assert "balanced_accuracy" in stdout


def test_finetune_missing_checkpoint_is_config_error(workspace, capsys):
    root, manifest = workspace
    code = main(["finetune", "--task", str(manifest), "--out", str(root / "x")])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


def test_eval_command(tmp_path, capsys):
    preds = tmp_path / "preds.tsv"
    preds.write_text(
        "y_true\ty_pred\tscore\n"
        "0\t0\t0.1\n0\t1\t0.7\n1\t1\t0.9\n1\t1\t0.8\n"
    )
    out = tmp_path / "report"
    assert main(["eval", "--predictions", str(preds), "--out", str(out)]) == 0
    table = dict(
        line.split("\t") for line in
        (out / "metrics.tsv").read_text().splitlines()[1:]
    )
    assert set(table) == {"balanced_accuracy", "cohens_kappa", "weighted_f1",
                          "auroc", "auc_pr"}
    assert float(table["balanced_accuracy"]) == 0.75
    assert (out / "confusion.png").exists()
    capsys.readouterr()


def test_eval_rejects_bad_header(tmp_path, capsys):
    preds = tmp_path / "preds.tsv"
    preds.write_text("true\tpred\n0\t0\n")
    assert main(["eval", "--predictions", str(preds), "--out", str(tmp_path / "r")]) == 1
    assert "header" in capsys.readouterr().err


def test_eval_accepts_string_labels(tmp_path, capsys):
    preds = tmp_path / "preds.tsv"
    preds.write_text(
        "y_true\ty_pred\tscore\n"
        "rest\trest\t0.1\nrest\ttask\t0.7\ntask\ttask\t0.9\ntask\ttask\t0.8\n"
    )
    out = tmp_path / "report"
    assert main(["eval", "--predictions", str(preds), "--out", str(out)]) == 0
    table = dict(
        line.split("\t") for line in
        (out / "metrics.tsv").read_text().splitlines()[1:]
    )
    # same confusion as the integer fixture, so the same numbers
    assert float(table["balanced_accuracy"]) == 0.75
    assert float(table["auroc"]) == 1.0
    assert (out / "confusion.png").exists()
    capsys.readouterr()


def test_eval_rejects_ragged_rows(tmp_path, capsys):
    preds = tmp_path / "preds.tsv"
    preds.write_text("y_true\ty_pred\tscore\n0\t0\t0.5\n1\t1\n")
    assert main(["eval", "--predictions", str(preds), "--out", str(tmp_path / "r")]) == 1
    assert "columns" in capsys.readouterr().err


def test_gradcheck_failure_exit_code(tmp_path, capsys):
    # an impossible tolerance must trip the check-failure exit code
    out = tmp_path / "gc"
    assert main(["gradcheck", "--seed", "0", "--tol", "1e-12", "--out", str(out)]) == 3
    assert (out / "gradcheck.tsv").exists()
    assert "FAIL" in capsys.readouterr().out


def test_export_filters(pretrained, tmp_path, capsys):
    out = tmp_path / "filters"
    code = main(["export-filters", "--ckpt", str(pretrained), "--out", str(out),
                 "--figures"])
    assert code == 0
    for name in ("shared", "affect", "motor", "others"):
        table = out / f"filters_{name}.tsv"
        lines = table.read_text().splitlines()
        assert len(lines) == 1 + 60 * 8 + 24 * 8
        assert (out / f"filters_{name}.png").exists()
    capsys.readouterr()


def test_console_script_roundtrip(tmp_path):
    result = subprocess.run(
        [sys.executable, "-m", "neurostate.cli", "synth",
         "--out", str(tmp_path / "c"), "--segments-per-state", "1",
         "--duration-s", "0.5"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert "manifest" in result.stdout

    bad = subprocess.run(
        [sys.executable, "-m", "neurostate.cli", "synth",
         "--out", str(tmp_path / "d"), "--states", "affect,sleep"],
        capture_output=True, text=True,
    )
    assert bad.returncode == 1
