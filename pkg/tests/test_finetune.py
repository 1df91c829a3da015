"""Adaptation module: selection, merging, head, reset, training loop."""

import math

import numpy as np
import pytest
import torch

from neurostate.encoder import EncoderConfig
from neurostate.finetune import (
    AGGR_GROUP,
    AdaptConfig,
    AdaptError,
    ClassifierHead,
    build_classifier,
    finetune_loop,
    load_task,
    merge_tokens,
    merged_length,
    reset_temporal_pos_embed,
    select_and_concat,
    trainable_parameter_names,
)
from neurostate.pipeline import read_manifest, write_manifest
from neurostate.pretrain import PretrainConfig, PretrainModel, make_checkpoint
from neurostate.synthdata import generate_corpus

NAMES8 = ["FP1", "F3", "CZ", "C4", "P3", "PZ", "O1", "O2"]


def tiny_config() -> PretrainConfig:
    enc = EncoderConfig(
        conv_channels=(8, 8),
        conv_kernels=(15, 3),
        conv_strides=(1, 1),
        conv_paddings=(7, 1),
        k_c=8,
        k_r=8,
        patch_len=10,
        patch_stride=10,
        d_model=16,
        n_layers=1,
        n_heads=4,
        d_ff=32,
        n_pos_max=16,
    )
    return PretrainConfig(encoder=enc, decoder_layers=1, batch_size=2, total_epochs=3,
                          warmup_epochs=1, save_every=0)


@pytest.fixture(scope="module")
def tiny_checkpoint():
    torch.manual_seed(0)
    model = PretrainModel(tiny_config())
    optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3)
    gen = torch.Generator()
    gen.manual_seed(0)
    return make_checkpoint(model, optimizer, epoch=0, global_step=0, mask_generator=gen)


@pytest.fixture(scope="module")
def binary_task(tmp_path_factory):
    out = tmp_path_factory.mktemp("task")
    manifest = generate_corpus(
        out,
        states=("affect", "motor"),
        channel_names=NAMES8,
        segments_per_state=9,
        snr=3.0,
        seed=2,
        duration_s=0.5,
    )
    return load_task(manifest, window_s=0.5)


# ------------------------------------------------------------------ config


def test_config_canonicalizes_subset_order():
    cfg = AdaptConfig(encoder_subset=("affect", "shared"))
    assert cfg.encoder_subset == ("shared", "affect")
    cfg = AdaptConfig(encoder_subset=("others", "motor", "motor", "shared"))
    assert cfg.encoder_subset == ("shared", "motor", "others")


def test_config_rejects_bad_values():
    with pytest.raises(AdaptError):
        AdaptConfig(encoder_subset=())
    with pytest.raises(AdaptError):
        AdaptConfig(encoder_subset=("shared", "sleep"))
    with pytest.raises(AdaptError):
        AdaptConfig(merge_mode="median")
    with pytest.raises(AdaptError):
        AdaptConfig(hidden_factor=0)
    with pytest.raises(AdaptError):
        AdaptConfig(dropout=1.0)
    with pytest.raises(AdaptError):
        AdaptConfig(seeds=())


# --------------------------------------------------------------- selection


def test_select_single_encoder_is_identity():
    z = torch.randn(2, 5, 32)
    out = select_and_concat({"shared": z}, ("shared",))
    assert torch.equal(out, z)


def test_select_concat_width_and_order():
    torch.manual_seed(1)
    outputs = {s: torch.randn(2, 5, 32) for s in ("shared", "affect", "motor", "others")}
    two = select_and_concat(outputs, ("affect", "shared"))
    assert two.shape == (2, 5, 64)
    assert torch.equal(two[..., :32], outputs["shared"])
    assert torch.equal(two[..., 32:], outputs["affect"])
    four = select_and_concat(outputs, ("others", "motor", "affect", "shared"))
    assert four.shape == (2, 5, 128)
    canonical = select_and_concat(outputs, ("shared", "affect", "motor", "others"))
    assert torch.equal(four, canonical)


def test_select_errors():
    z = torch.randn(1, 4, 8)
    with pytest.raises(AdaptError):
        select_and_concat({"shared": z}, ())
    with pytest.raises(AdaptError):
        select_and_concat({"shared": z}, ("shared", "affect"))
    with pytest.raises(AdaptError):
        select_and_concat({"shared": z, "affect": torch.randn(1, 5, 8)}, ("shared", "affect"))


# ----------------------------------------------------------------- merging


def test_merge_single_token_all_modes():
    z = torch.randn(3, 1, 7)
    for mode in ("mean", "aggr5", "all"):
        assert torch.equal(merge_tokens(z, mode), z)


def test_merge_aggr5_grouping():
    z = torch.arange(10, dtype=torch.float32).reshape(1, 10, 1)
    out = merge_tokens(z, "aggr5")
    assert out.shape == (1, 2, 1)
    assert torch.equal(out.reshape(-1), torch.tensor([2.0, 7.0]))
    # short tail averaged as-is: last group is tokens 5 and 6
    z7 = torch.arange(7, dtype=torch.float32).reshape(1, 7, 1)
    out7 = merge_tokens(z7, "aggr5")
    assert out7.shape == (1, 2, 1)
    assert torch.equal(out7.reshape(-1), torch.tensor([2.0, 5.5]))


def test_merge_mean_and_all():
    z = torch.ones(2, 6, 3) * 4.5
    assert torch.equal(merge_tokens(z, "mean"), torch.full((2, 1, 3), 4.5))
    assert torch.equal(merge_tokens(z, "all"), z)


def test_mean_equals_grouped_mean_only_when_divisible():
    torch.manual_seed(2)
    z10 = torch.randn(1, 10, 4, dtype=torch.float64)
    direct = merge_tokens(z10, "mean")
    regrouped = merge_tokens(z10, "aggr5").mean(dim=-2, keepdim=True)
    assert torch.allclose(direct, regrouped, atol=1e-12)
    # unequal group sizes reweight the tail: 7 tokens -> groups of 5 and 2
    z7 = torch.zeros(1, 7, 1, dtype=torch.float64)
    z7[0, 5:, 0] = 1.0
    direct7 = merge_tokens(z7, "mean").item()
    regrouped7 = merge_tokens(z7, "aggr5").mean(dim=-2).item()
    assert direct7 == pytest.approx(2.0 / 7.0)
    assert regrouped7 == pytest.approx(0.5)
    assert abs(direct7 - regrouped7) > 0.1


def test_merged_length_arithmetic():
    assert merged_length(10, "mean") == 1
    assert merged_length(10, "aggr5") == 2
    assert merged_length(11, "aggr5") == 3
    assert merged_length(11, "all") == 11
    assert AGGR_GROUP == 5


# -------------------------------------------------------------------- head


def test_head_zero_weights_give_uniform_logits():
    head = ClassifierHead(in_width=12, hidden_factor=2, n_classes=4, dropout=0.0)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    out = head(torch.randn(5, 12))
    assert torch.equal(out, torch.zeros(5, 4))


def test_head_hidden_factor_and_shape():
    head = ClassifierHead(in_width=128, hidden_factor=8, n_classes=9, dropout=0.1)
    assert head.fc1.out_features == 1024
    head.eval()
    assert head(torch.randn(3, 128)).shape == (3, 9)


# ------------------------------------------------------------------- reset


def test_reset_pos_embed_bounds_and_isolation(tiny_checkpoint):
    from neurostate.pretrain import model_from_checkpoint

    model = model_from_checkpoint(tiny_checkpoint)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    gen = torch.Generator()
    gen.manual_seed(7)
    reset = reset_temporal_pos_embed(model, gen)
    assert sorted(reset) == sorted(
        k for k in before if k.endswith("pos_embed")
    )
    cfg = tiny_config().encoder
    bound = math.sqrt(6.0 / (cfg.n_pos_max + cfg.d_model))
    after = model.state_dict()
    for k, v in after.items():
        if k.endswith("pos_embed"):
            assert not torch.equal(v, before[k])
            assert v.abs().max().item() <= bound
            assert model.get_parameter(k).requires_grad
        else:
            assert torch.equal(v, before[k])


def test_reset_pos_embed_seed_behaviour(tiny_checkpoint):
    from neurostate.pretrain import model_from_checkpoint

    snapshots = []
    for seed in (3, 3, 4):
        model = model_from_checkpoint(tiny_checkpoint)
        gen = torch.Generator()
        gen.manual_seed(seed)
        reset_temporal_pos_embed(model, gen)
        snapshots.append(model.shared_encoder.pos_embed.detach().clone())
    assert torch.equal(snapshots[0], snapshots[1])
    assert not torch.equal(snapshots[0], snapshots[2])


# -------------------------------------------------------------- classifier


def test_build_classifier_copies_weights_without_mutation(tiny_checkpoint):
    from neurostate.pretrain import model_from_checkpoint

    model = model_from_checkpoint(tiny_checkpoint)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    torch.manual_seed(0)
    clf = build_classifier(model, AdaptConfig(encoder_subset=("shared", "affect")),
                           n_classes=3, n_patches=10, seed=0)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    assert torch.equal(
        clf.encoders["shared"].embed.weight, model.shared_encoder.embed.weight
    )
    assert not torch.equal(
        clf.encoders["shared"].pos_embed, model.shared_encoder.pos_embed
    )


def test_classifier_forward_shapes_and_mismatch(tiny_checkpoint, binary_task):
    from neurostate.pretrain import model_from_checkpoint

    model = model_from_checkpoint(tiny_checkpoint)
    train = binary_task["train"]
    n_p = model.config.encoder.n_patches(train.x.shape[-1])
    for mode, rows in (("mean", 1), ("aggr5", 2), ("all", n_p)):
        torch.manual_seed(0)
        clf = build_classifier(
            model, AdaptConfig(encoder_subset=("shared",), merge_mode=mode),
            n_classes=2, n_patches=n_p, seed=0,
        )
        clf.eval()
        logits = clf(train.x[:3], train.montage)
        assert logits.shape == (3, 2)
        assert clf.head_in == rows * model.config.encoder.d_model
    clf = build_classifier(
        model, AdaptConfig(encoder_subset=("shared",), merge_mode="all"),
        n_classes=2, n_patches=4, seed=0,
    )
    with pytest.raises(AdaptError):
        clf(train.x[:1], train.montage)


def test_trainable_audit(tiny_checkpoint):
    from neurostate.pretrain import model_from_checkpoint

    model = model_from_checkpoint(tiny_checkpoint)
    full = build_classifier(model, AdaptConfig(encoder_subset=("shared", "motor")),
                            n_classes=2, n_patches=10, seed=0)
    names = trainable_parameter_names(full)
    assert names == [n for n, _ in full.named_parameters()]
    assert any(n.startswith("encoders.shared.") for n in names)
    assert any(n.startswith("head.") for n in names)

    frozen = build_classifier(
        model,
        AdaptConfig(encoder_subset=("shared", "motor"), freeze_encoders=True),
        n_classes=2, n_patches=10, seed=0,
    )
    frozen_names = trainable_parameter_names(frozen)
    assert frozen_names == [n for n, _ in frozen.named_parameters() if n.startswith("head.")]


# -------------------------------------------------------------------- data


def test_load_task_shapes(binary_task):
    assert set(binary_task) == {"train", "val", "test"}
    train = binary_task["train"]
    assert train.x.shape == (14, 8, 100)
    assert train.x.dtype == torch.float32
    assert sorted(set(train.y.tolist())) == [0, 1]
    assert binary_task["val"].x.shape[0] == 2
    assert binary_task["test"].x.shape[0] == 2


def test_load_task_rejects_overlapping_splits(tmp_path):
    manifest = generate_corpus(
        tmp_path, states=("affect", "motor"), channel_names=NAMES8,
        segments_per_state=4, seed=3, duration_s=0.5,
    )
    entries = read_manifest(manifest)
    dup = entries[0]
    other = "val" if dup.split != "val" else "test"
    entries.append(type(dup)(dup.path, dup.dataset, dup.state, dup.label, other))
    write_manifest(manifest, entries)
    with pytest.raises(AdaptError):
        load_task(manifest, window_s=0.5)


# -------------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def loop_report(tiny_checkpoint, binary_task):
    cfg = AdaptConfig(
        encoder_subset=("shared", "affect"),
        merge_mode="mean",
        hidden_factor=1,
        lr=1e-3,
        epochs=2,
        batch_size=4,
        seeds=(0, 1),
    )
    return cfg, finetune_loop(tiny_checkpoint, binary_task, cfg)


def test_loop_report_structure(loop_report):
    _, report = loop_report
    assert report["n_classes"] == 2
    assert [r["seed"] for r in report["per_seed"]] == [0, 1]
    for record in report["per_seed"]:
        for key in ("balanced_accuracy", "cohens_kappa", "weighted_f1",
                    "auroc", "auc_pr", "best_epoch", "val_balanced_accuracy"):
            assert key in record
        assert 1 <= record["best_epoch"] <= 2
    agg = report["aggregate"]
    values = [r["balanced_accuracy"] for r in report["per_seed"]]
    assert agg["balanced_accuracy"]["mean"] == pytest.approx(float(np.mean(values)))
    assert agg["balanced_accuracy"]["std"] == pytest.approx(float(np.std(values)))


def test_loop_is_deterministic(tiny_checkpoint, binary_task, loop_report):
    cfg, first = loop_report
    second = finetune_loop(tiny_checkpoint, binary_task, cfg)
    assert first == second


def test_loop_requires_all_splits(tiny_checkpoint, binary_task):
    partial = {k: v for k, v in binary_task.items() if k != "val"}
    with pytest.raises(AdaptError):
        finetune_loop(tiny_checkpoint, partial, AdaptConfig())
