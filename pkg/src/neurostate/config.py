"""Plain-text configuration files with a typed schema.

Files hold one ``key = value`` pair per line with ``#`` comments.  Every
knob of the pre-training and adaptation recipes is addressable by a
dotted key path; violations are reported with that path so operators
can fix files without reading code.  Environment variables may override
path-typed keys only (``NEUROSTATE_<KEY>`` with dots as underscores).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

from .encoder import EncoderConfig
from .finetune import AdaptConfig
from .pretrain import PretrainConfig

__all__ = [
    "ConfigError",
    "FINETUNE_SCHEMA",
    "PRETRAIN_SCHEMA",
    "build_adapt_config",
    "build_pretrain_config",
    "load_finetune_file",
    "load_pretrain_file",
    "read_kv_file",
    "resolve",
]

ENV_PREFIX = "NEUROSTATE_"

_REQUIRED = object()


class ConfigError(ValueError):
    """Raised with the offending key path for any schema violation."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_str_tuple(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], object]
    default: object = _REQUIRED
    is_path: bool = False

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


PRETRAIN_SCHEMA: dict[str, Option] = {
    "data.manifest": Option(str, is_path=True),
    "out.dir": Option(str, is_path=True),
    "data.window_s": Option(float, 10.0),
    "encoder.conv_channels": Option(_parse_int_tuple, (32, 32, 32)),
    "encoder.conv_kernels": Option(_parse_int_tuple, (15, 3, 3)),
    "encoder.conv_strides": Option(_parse_int_tuple, (1, 1, 1)),
    "encoder.conv_paddings": Option(_parse_int_tuple, (7, 1, 1)),
    "encoder.k_c": Option(int, 32),
    "encoder.k_r": Option(int, 32),
    "encoder.patch_len": Option(int, 20),
    "encoder.patch_stride": Option(int, 20),
    "encoder.d_model": Option(int, 32),
    "encoder.n_layers": Option(int, 4),
    "encoder.n_heads": Option(int, 32),
    "encoder.d_ff": Option(int, 64),
    "encoder.gn_groups": Option(int, 4),
    "encoder.n_pos_max": Option(int, 512),
    "decoder.layers": Option(int, 2),
    "train.states": Option(_parse_str_tuple, ("affect", "motor", "others")),
    "train.mask_ratio": Option(float, 0.5),
    "train.margin": Option(float, 0.1),
    "train.batch_size": Option(int, 64),
    "train.peak_lr": Option(float, 1e-4),
    "train.min_lr": Option(float, 1e-5),
    "train.warmup_epochs": Option(int, 2),
    "train.total_epochs": Option(int, 30),
    "train.weight_decay": Option(float, 0.05),
    "train.beta1": Option(float, 0.9),
    "train.beta2": Option(float, 0.98),
    "train.grad_clip": Option(float, 3.0),
    "train.seed": Option(int, 0),
    "train.save_every": Option(int, 10),
}

FINETUNE_SCHEMA: dict[str, Option] = {
    "checkpoint": Option(str, is_path=True),
    "data.manifest": Option(str, is_path=True),
    "out.dir": Option(str, is_path=True),
    "data.window_s": Option(float, 10.0),
    "task.encoders": Option(_parse_str_tuple, ("shared", "affect")),
    "task.merge_mode": Option(str, "mean"),
    "task.hidden_factor": Option(int, 1),
    "task.dropout": Option(float, 0.1),
    "task.lr": Option(float, 1e-4),
    "task.epochs": Option(int, 50),
    "task.batch_size": Option(int, 64),
    "task.label_smoothing": Option(float, 0.1),
    "task.seeds": Option(_parse_int_tuple, (0, 1, 2, 3, 4)),
    "task.freeze_encoders": Option(_parse_bool, False),
    "task.weight_decay": Option(float, 5e-2),
    "task.min_lr": Option(float, 1e-6),
    "task.grad_clip": Option(float, 1.0),
}


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; comments and blanks are skipped."""
    raw: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
            key, value = text.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            raw[key] = value.strip()
    return raw


def _env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def resolve(schema: dict[str, Option], raw: dict[str, str], environ=None) -> dict[str, object]:
    """Typed values for every schema key, or ConfigError naming the key."""
    environ = os.environ if environ is None else environ
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    values: dict[str, object] = {}
    for key, option in schema.items():
        text = raw.get(key)
        if option.is_path:
            text = environ.get(_env_name(key), text)
        if text is None:
            if option.required:
                raise ConfigError(f"missing config key '{key}'")
            values[key] = option.default
            continue
        try:
            values[key] = option.parse(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key '{key}': {exc}") from exc
    return values


def build_pretrain_config(values: dict[str, object]) -> PretrainConfig:
    encoder = EncoderConfig(
        conv_channels=values["encoder.conv_channels"],
        conv_kernels=values["encoder.conv_kernels"],
        conv_strides=values["encoder.conv_strides"],
        conv_paddings=values["encoder.conv_paddings"],
        k_c=values["encoder.k_c"],
        k_r=values["encoder.k_r"],
        patch_len=values["encoder.patch_len"],
        patch_stride=values["encoder.patch_stride"],
        d_model=values["encoder.d_model"],
        n_layers=values["encoder.n_layers"],
        n_heads=values["encoder.n_heads"],
        d_ff=values["encoder.d_ff"],
        gn_groups=values["encoder.gn_groups"],
        n_pos_max=values["encoder.n_pos_max"],
    )
    return PretrainConfig(
        encoder=encoder,
        states=values["train.states"],
        mask_ratio=values["train.mask_ratio"],
        margin=values["train.margin"],
        peak_lr=values["train.peak_lr"],
        min_lr=values["train.min_lr"],
        warmup_epochs=values["train.warmup_epochs"],
        total_epochs=values["train.total_epochs"],
        weight_decay=values["train.weight_decay"],
        beta1=values["train.beta1"],
        beta2=values["train.beta2"],
        grad_clip=values["train.grad_clip"],
        decoder_layers=values["decoder.layers"],
        batch_size=values["train.batch_size"],
        seed=values["train.seed"],
        save_every=values["train.save_every"],
    )


def build_adapt_config(values: dict[str, object]) -> AdaptConfig:
    return AdaptConfig(
        encoder_subset=values["task.encoders"],
        merge_mode=values["task.merge_mode"],
        hidden_factor=values["task.hidden_factor"],
        dropout=values["task.dropout"],
        lr=values["task.lr"],
        epochs=values["task.epochs"],
        batch_size=values["task.batch_size"],
        label_smoothing=values["task.label_smoothing"],
        seeds=values["task.seeds"],
        freeze_encoders=values["task.freeze_encoders"],
        weight_decay=values["task.weight_decay"],
        min_lr=values["task.min_lr"],
        grad_clip=values["task.grad_clip"],
    )


def load_pretrain_file(path, environ=None) -> tuple[PretrainConfig, dict[str, object]]:
    """Returns the training config plus the full resolved key map."""
    values = resolve(PRETRAIN_SCHEMA, read_kv_file(path), environ)
    try:
        return build_pretrain_config(values), values
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_finetune_file(path, environ=None) -> tuple[AdaptConfig, dict[str, object]]:
    values = resolve(FINETUNE_SCHEMA, read_kv_file(path), environ)
    try:
        return build_adapt_config(values), values
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
