"""Downstream adaptation: encoder selection, token merging, and the
classification loop.

A task model concatenates token sequences from a chosen subset of the
pre-trained encoders (always in canonical order, so supplying the same
subset in any order builds the same network), merges tokens by one of
three modes, and classifies with a two-layer head.  Temporal position
embeddings are re-initialized before training; everything else starts
from the checkpoint.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .metrics import balanced_accuracy, summarize
from .montage import MontageMap
from .pipeline import ManifestEntry, prepare_recording, read_manifest, read_recording
from .pretrain import PretrainModel, model_from_checkpoint

__all__ = [
    "AdaptConfig",
    "AdaptError",
    "CANONICAL_ORDER",
    "ClassifierHead",
    "StateClassifier",
    "TaskData",
    "build_classifier",
    "finetune_loop",
    "load_task",
    "merge_tokens",
    "reset_temporal_pos_embed",
    "select_and_concat",
    "trainable_parameter_names",
]

CANONICAL_ORDER = ("shared", "affect", "motor", "others")
AGGR_GROUP = 5


class AdaptError(ValueError):
    """Raised for invalid adaptation configs or task layouts."""


@dataclass(frozen=True)
class AdaptConfig:
    """Knobs for one downstream task."""

    encoder_subset: tuple[str, ...] = ("shared", "affect")
    merge_mode: str = "mean"
    hidden_factor: int = 1
    dropout: float = 0.1
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 64
    label_smoothing: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    freeze_encoders: bool = False
    weight_decay: float = 5e-2
    min_lr: float = 1e-6
    grad_clip: float = 1.0

    def __post_init__(self):
        subset = tuple(dict.fromkeys(self.encoder_subset))
        unknown = [s for s in subset if s not in CANONICAL_ORDER]
        if unknown:
            raise AdaptError(f"unknown encoders {unknown}; choose from {CANONICAL_ORDER}")
        if not subset:
            raise AdaptError("encoder subset must be non-empty")
        object.__setattr__(
            self, "encoder_subset", tuple(sorted(subset, key=CANONICAL_ORDER.index))
        )
        if self.merge_mode not in ("mean", "aggr5", "all"):
            raise AdaptError(f"unknown merge mode {self.merge_mode!r}")
        if self.hidden_factor < 1:
            raise AdaptError("hidden_factor must be a positive integer")
        if not 0.0 <= self.dropout < 1.0:
            raise AdaptError("dropout must be in [0, 1)")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise AdaptError("lr, epochs, batch_size must be positive")
        if not self.seeds:
            raise AdaptError("at least one seed required")


def select_and_concat(outputs: dict[str, torch.Tensor], subset) -> torch.Tensor:
    """Concatenate per-encoder token sequences along the feature axis.

    Order is always canonical (shared first, then states), regardless of
    how ``subset`` or ``outputs`` are ordered.
    """
    chosen = tuple(dict.fromkeys(subset))
    if not chosen:
        raise AdaptError("encoder subset must be non-empty")
    missing = [s for s in chosen if s not in outputs]
    if missing:
        raise AdaptError(f"missing encoder outputs for {missing}")
    ordered = sorted(chosen, key=CANONICAL_ORDER.index)
    shapes = {outputs[s].shape[:-1] for s in ordered}
    if len(shapes) != 1:
        raise AdaptError(f"token sequences disagree in length: {sorted(shapes)}")
    return torch.cat([outputs[s] for s in ordered], dim=-1)


def merge_tokens(z: torch.Tensor, mode: str) -> torch.Tensor:
    """Reduce a (..., N_p, W) token sequence per the merge mode.

    mean  -> (..., 1, W); aggr5 -> (..., ceil(N_p/5), W) with the short
    tail averaged as-is; all -> identity.
    """
    if mode == "mean":
        return z.mean(dim=-2, keepdim=True)
    if mode == "aggr5":
        n_p = z.shape[-2]
        groups = [
            z[..., start : min(start + AGGR_GROUP, n_p), :].mean(dim=-2)
            for start in range(0, n_p, AGGR_GROUP)
        ]
        return torch.stack(groups, dim=-2)
    if mode == "all":
        return z
    raise AdaptError(f"unknown merge mode {mode!r}")


def merged_length(n_patches: int, mode: str) -> int:
    if mode == "mean":
        return 1
    if mode == "aggr5":
        return math.ceil(n_patches / AGGR_GROUP)
    if mode == "all":
        return n_patches
    raise AdaptError(f"unknown merge mode {mode!r}")


class ClassifierHead(nn.Module):
    """Two-layer head over the flattened merged tokens."""

    def __init__(self, in_width: int, hidden_factor: int, n_classes: int, dropout: float):
        super().__init__()
        hidden = hidden_factor * in_width
        self.fc1 = nn.Linear(in_width, hidden)
        self.act = nn.GELU()
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, n_classes)
        self.reset_parameters()

    def reset_parameters(self):
        for lin in (self.fc1, self.fc2):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.drop(self.act(self.fc1(x))))


class StateClassifier(nn.Module):
    """Selected encoders + token merge + classification head."""

    def __init__(self, encoders: dict[str, nn.Module], config: AdaptConfig,
                 n_classes: int, n_patches: int):
        super().__init__()
        missing = [s for s in config.encoder_subset if s not in encoders]
        if missing:
            raise AdaptError(f"missing encoders {missing}")
        self.subset = config.encoder_subset
        self.merge_mode = config.merge_mode
        self.encoders = nn.ModuleDict({s: encoders[s] for s in self.subset})
        width = sum(e.config.d_model for e in self.encoders.values())
        self.head_in = merged_length(n_patches, config.merge_mode) * width
        self.head = ClassifierHead(self.head_in, config.hidden_factor, n_classes,
                                   config.dropout)
        if config.freeze_encoders:
            for p in self.encoders.parameters():
                p.requires_grad_(False)

    def tokens(self, x: torch.Tensor, montage: MontageMap) -> torch.Tensor:
        outputs = {s: enc.encode(x, montage) for s, enc in self.encoders.items()}
        return select_and_concat(outputs, self.subset)

    def forward(self, x: torch.Tensor, montage: MontageMap) -> torch.Tensor:
        merged = merge_tokens(self.tokens(x, montage), self.merge_mode)
        flat = merged.reshape(merged.shape[0], -1)
        if flat.shape[1] != self.head_in:
            raise AdaptError(
                f"merged width {flat.shape[1]} does not match head input {self.head_in}"
            )
        return self.head(flat)


def reset_temporal_pos_embed(module: nn.Module, generator: torch.Generator) -> list[str]:
    """Replace every positional-embedding table under ``module`` with
    fresh uniform(-a, a) samples, a = sqrt(6 / (fan_in + fan_out)).

    Returns the qualified names that were reset; everything else is
    untouched and the tables stay trainable.
    """
    reset = []
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("pos_embed"):
                bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                p.uniform_(-bound, bound, generator=generator)
                reset.append(name)
    return reset


def build_classifier(
    model: PretrainModel,
    config: AdaptConfig,
    n_classes: int,
    n_patches: int,
    seed: int,
) -> StateClassifier:
    """Fresh classifier around a copy of the pre-trained encoders.

    The source model is never mutated; position embeddings in the copy
    are re-initialized from ``seed`` and the head is drawn from the
    global torch RNG (seeded by the caller).
    """
    encoders: dict[str, nn.Module] = {}
    for s in config.encoder_subset:
        source = model.shared_encoder if s == "shared" else model.state_encoders[s]
        encoders[s] = copy.deepcopy(source)
    clf = StateClassifier(encoders, config, n_classes, n_patches)
    gen = torch.Generator()
    gen.manual_seed(seed)
    reset_temporal_pos_embed(clf.encoders, gen)
    return clf


def trainable_parameter_names(model: nn.Module) -> list[str]:
    return [name for name, p in model.named_parameters() if p.requires_grad]


# ------------------------------------------------------------------ data


@dataclass
class TaskData:
    """One split's tensors; labels are contiguous ints from the manifest."""

    x: torch.Tensor
    y: torch.Tensor
    montage: MontageMap
    paths: tuple[str, ...] = field(default_factory=tuple)


def load_task(
    manifest_path,
    template=None,
    window_s: float = 10.0,
    splits=("train", "val", "test"),
) -> dict[str, TaskData]:
    """Materialize split tensors from a manifest of recordings.

    Every window of a recording inherits its manifest label.  Splits
    must be disjoint at the recording level.
    """
    entries = read_manifest(manifest_path)
    by_split: dict[str, list[ManifestEntry]] = {s: [] for s in splits}
    seen: dict[str, str] = {}
    for e in entries:
        key = str(e.path)
        if key in seen and seen[key] != e.split:
            raise AdaptError(f"recording {key} appears in splits {seen[key]} and {e.split}")
        seen[key] = e.split
        if e.split in by_split:
            by_split[e.split].append(e)

    out: dict[str, TaskData] = {}
    montage = None
    layout = None
    for split, split_entries in by_split.items():
        xs, ys, paths = [], [], []
        for e in split_entries:
            rec = read_recording(e.path)
            if layout is None:
                layout = rec.channel_names
            elif rec.channel_names != layout:
                raise AdaptError(
                    f"channel layout of {e.path} differs from the task layout"
                )
            kept, _ = prepare_recording(rec, template=template, window_s=window_s)
            if montage is None and kept:
                montage = kept[0].montage
            for seg in kept:
                xs.append(torch.from_numpy(seg.data))
                ys.append(int(e.label))
                paths.append(str(e.path))
        if not xs:
            raise AdaptError(f"split {split!r} is empty")
        out[split] = TaskData(torch.stack(xs), torch.tensor(ys, dtype=torch.long),
                              montage, tuple(paths))
    return out


def _evaluate(clf: StateClassifier, data: TaskData, eval_batch: int = 128):
    clf.eval()
    preds, scores = [], []
    with torch.no_grad():
        for start in range(0, data.x.shape[0], eval_batch):
            logits = clf(data.x[start : start + eval_batch], data.montage)
            preds.append(logits.argmax(dim=1))
            scores.append(torch.softmax(logits, dim=1))
    return torch.cat(preds).numpy(), torch.cat(scores).numpy()


# ------------------------------------------------------------------ loop


def finetune_loop(
    checkpoint: Checkpoint,
    task: dict[str, TaskData],
    config: AdaptConfig,
    log=None,
) -> dict:
    """Per-seed fine-tuning with validation selection and one test pass.

    Model selection uses validation balanced accuracy (strictly-better
    replacement, so ties keep the earlier epoch).  Returns per-seed
    records plus mean/std aggregates.
    """
    for split in ("train", "val", "test"):
        if split not in task:
            raise AdaptError(f"task is missing the {split!r} split")
    train, val, test = task["train"], task["val"], task["test"]
    labels = torch.cat([train.y, val.y, test.y])
    n_classes = int(labels.max().item()) + 1
    if n_classes < 2:
        raise AdaptError("need at least two classes")
    t_len = train.x.shape[-1]

    per_seed = []
    for seed in config.seeds:
        torch.manual_seed(seed)
        model = model_from_checkpoint(checkpoint)
        n_patches = model.config.encoder.n_patches(t_len)
        clf = build_classifier(model, config, n_classes, n_patches, seed)
        trainable = [p for p in clf.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(
            trainable, lr=config.lr, betas=(0.9, 0.999), eps=1e-8,
            weight_decay=config.weight_decay,
        )
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=config.epochs, eta_min=config.min_lr
        )
        smoothing = config.label_smoothing if n_classes > 2 else 0.0
        criterion = nn.CrossEntropyLoss(label_smoothing=smoothing)

        best_state = None
        best_val = -1.0
        best_epoch = -1
        n_train = train.x.shape[0]
        for epoch in range(1, config.epochs + 1):
            clf.train()
            order = np.random.default_rng([seed, epoch]).permutation(n_train)
            for start in range(0, n_train, config.batch_size):
                idx = torch.from_numpy(order[start : start + config.batch_size].copy())
                logits = clf(train.x[idx], train.montage)
                loss = criterion(logits, train.y[idx])
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
                optimizer.step()
            scheduler.step()
            val_pred, _ = _evaluate(clf, val)
            val_acc = balanced_accuracy(val.y.numpy(), val_pred)
            if log is not None:
                log({"seed": seed, "epoch": epoch, "val_balanced_accuracy": val_acc})
            if val_acc > best_val:
                best_val = val_acc
                best_epoch = epoch
                best_state = copy.deepcopy(clf.state_dict())

        clf.load_state_dict(best_state)
        test_pred, test_scores = _evaluate(clf, test)
        y_true = test.y.numpy()
        if n_classes == 2:
            record = summarize(y_true, test_pred, scores=test_scores[:, 1])
        else:
            record = summarize(y_true, test_pred)
        record.update(seed=seed, best_epoch=best_epoch, val_balanced_accuracy=best_val)
        per_seed.append(record)

    metric_names = [k for k in per_seed[0] if k not in ("seed", "best_epoch")]
    aggregate = {
        name: {
            "mean": float(np.mean([r[name] for r in per_seed])),
            "std": float(np.std([r[name] for r in per_seed])),
        }
        for name in metric_names
    }
    return {"per_seed": per_seed, "aggregate": aggregate, "n_classes": n_classes}
