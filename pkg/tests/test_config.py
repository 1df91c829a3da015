"""Typed key=value config files."""

import pytest

from neurostate.config import (
    ConfigError,
    FINETUNE_SCHEMA,
    PRETRAIN_SCHEMA,
    load_finetune_file,
    load_pretrain_file,
    read_kv_file,
    resolve,
)


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_read_kv_parses_comments_and_blanks(tmp_path):
    path = write(
        tmp_path,
        "# full-line comment\n"
        "\n"
        "train.seed = 7   # trailing comment\n"
        "encoder.k_c=16\n",
    )
    assert read_kv_file(path) == {"train.seed": "7", "encoder.k_c": "16"}


def test_read_kv_rejects_malformed_lines(tmp_path):
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        read_kv_file(write(tmp_path, "just words\n"))
    with pytest.raises(ConfigError, match="duplicate key"):
        read_kv_file(write(tmp_path, "a = 1\na = 2\n"))
    with pytest.raises(ConfigError, match="empty key"):
        read_kv_file(write(tmp_path, "= 3\n"))


def test_resolve_reports_key_paths():
    with pytest.raises(ConfigError, match="unknown config key 'encoder.kc'"):
        resolve(PRETRAIN_SCHEMA, {"encoder.kc": "8"}, environ={})
    with pytest.raises(ConfigError, match="missing config key 'data.manifest'"):
        resolve(PRETRAIN_SCHEMA, {"out.dir": "x"}, environ={})
    with pytest.raises(ConfigError, match="config key 'encoder.k_c'"):
        resolve(
            PRETRAIN_SCHEMA,
            {"data.manifest": "m", "out.dir": "o", "encoder.k_c": "many"},
            environ={},
        )


def test_resolve_applies_defaults():
    values = resolve(PRETRAIN_SCHEMA, {"data.manifest": "m", "out.dir": "o"}, environ={})
    assert values["train.peak_lr"] == 1e-4
    assert values["encoder.conv_channels"] == (32, 32, 32)
    assert values["train.states"] == ("affect", "motor", "others")


def test_env_overrides_paths_only():
    env = {
        "NEUROSTATE_DATA_MANIFEST": "/elsewhere/manifest.tsv",
        "NEUROSTATE_TRAIN_SEED": "999",
    }
    values = resolve(
        PRETRAIN_SCHEMA,
        {"data.manifest": "local.tsv", "out.dir": "o", "train.seed": "3"},
        environ=env,
    )
    assert values["data.manifest"] == "/elsewhere/manifest.tsv"
    assert values["train.seed"] == 3


def test_load_pretrain_file_builds_config(tmp_path):
    path = write(
        tmp_path,
        "data.manifest = corpus/manifest.tsv\n"
        "out.dir = runs/a\n"
        "encoder.k_c = 8\n"
        "encoder.conv_channels = 8,8\n"
        "encoder.conv_kernels = 15,3\n"
        "encoder.conv_strides = 1,1\n"
        "encoder.conv_paddings = 7,1\n"
        "train.total_epochs = 5\n",
    )
    config, values = load_pretrain_file(path, environ={})
    assert config.encoder.k_c == 8
    assert config.encoder.conv_channels == (8, 8)
    assert config.total_epochs == 5
    assert config.peak_lr == 1e-4
    assert values["out.dir"] == "runs/a"


def test_load_pretrain_file_wraps_semantic_errors(tmp_path):
    # 5 heads do not divide the default width of 32
    path = write(
        tmp_path,
        "data.manifest = m\nout.dir = o\nencoder.n_heads = 5\n",
    )
    with pytest.raises(ConfigError):
        load_pretrain_file(path, environ={})


def test_load_finetune_file(tmp_path):
    path = write(
        tmp_path,
        "checkpoint = runs/a/checkpoint_last.bin\n"
        "data.manifest = task/manifest.tsv\n"
        "out.dir = runs/ft\n"
        "task.encoders = affect,shared\n"
        "task.merge_mode = aggr5\n"
        "task.hidden_factor = 8\n"
        "task.seeds = 0,1\n",
    )
    adapt, values = load_finetune_file(path, environ={})
    assert adapt.encoder_subset == ("shared", "affect")
    assert adapt.merge_mode == "aggr5"
    assert adapt.hidden_factor == 8
    assert adapt.seeds == (0, 1)
    assert values["task.freeze_encoders"] is False


def test_load_finetune_bad_merge_mode(tmp_path):
    path = write(
        tmp_path,
        "checkpoint = c\ndata.manifest = m\nout.dir = o\ntask.merge_mode = median\n",
    )
    with pytest.raises(ConfigError):
        load_finetune_file(path, environ={})


def test_schemas_cover_training_knobs():
    for key in (
        "encoder.conv_channels",
        "encoder.conv_kernels",
        "encoder.conv_strides",
        "encoder.conv_paddings",
        "encoder.k_c",
        "encoder.k_r",
        "encoder.patch_len",
        "encoder.patch_stride",
        "encoder.d_model",
        "encoder.n_layers",
        "encoder.n_heads",
        "encoder.d_ff",
        "decoder.layers",
        "train.batch_size",
        "train.peak_lr",
        "train.min_lr",
        "train.warmup_epochs",
        "train.total_epochs",
        "train.weight_decay",
        "train.beta1",
        "train.beta2",
        "train.grad_clip",
        "train.mask_ratio",
    ):
        assert key in PRETRAIN_SCHEMA
    for key in (
        "task.encoders",
        "task.merge_mode",
        "task.hidden_factor",
        "task.dropout",
        "task.lr",
        "task.epochs",
        "task.batch_size",
        "task.label_smoothing",
        "task.seeds",
        "task.weight_decay",
        "task.min_lr",
        "task.grad_clip",
    ):
        assert key in FINETUNE_SCHEMA
