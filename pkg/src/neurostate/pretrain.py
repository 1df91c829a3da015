"""Parallel-encoder masked pretraining.

One shared encoder and one encoder per brain state see the same masked
input; only the shared and the batch-state branches receive gradients.
A per-state decoder fuses the two token streams and reconstructs the
raw segment, supervised by a prior-weighted MSE on masked positions
plus a margin-based cosine decoupling loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt_io
from .encoder import (
    EncoderConfig,
    HierarchicalEncoder,
    TransformerBlock,
    apply_mask,
)
from .montage import N_TEMPLATE_CHANNELS, MontageMap, state_prior
from .pipeline import Batch, Segment, batch_by_dataset

STATES = ("affect", "motor", "others")


class PretrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    states: tuple[str, ...] = STATES
    mask_ratio: float = 0.5
    margin: float = 0.1
    peak_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_epochs: int = 2
    total_epochs: int = 30
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    grad_clip: float = 3.0
    decoder_layers: int = 2
    batch_size: int = 64
    seed: int = 0
    save_every: int = 10

    def __post_init__(self):
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ValueError("mask_ratio must lie in [0, 1]")
        if not self.states:
            raise ValueError("at least one state is required")
        if self.warmup_epochs < 1 or self.total_epochs < self.warmup_epochs:
            raise ValueError("need 1 <= warmup_epochs <= total_epochs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["states"] = list(self.states)
        for k, v in d["encoder"].items():
            if isinstance(v, tuple):
                d["encoder"][k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        enc = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("encoder").items()}
        d["states"] = tuple(d["states"])
        return cls(encoder=EncoderConfig(**enc), **d)


# ---------------------------------------------------------------------------
# masking

@dataclass(frozen=True)
class MaskPlan:
    """Which patches of one token sequence are masked."""

    masked_patches: tuple[int, ...]
    n_patches: int
    ratio: float

    def patch_mask(self) -> torch.Tensor:
        m = torch.zeros(self.n_patches, dtype=torch.bool)
        if self.masked_patches:
            m[list(self.masked_patches)] = True
        return m

    def time_mask(self, t: int, patch_len: int, patch_stride: int) -> torch.Tensor:
        """Boolean (t,) marking samples inside masked patch windows."""
        m = torch.zeros(t, dtype=torch.bool)
        for i in self.masked_patches:
            m[i * patch_stride:i * patch_stride + patch_len] = True
        return m


def plan_mask(n_patches: int, ratio: float, generator: torch.Generator) -> MaskPlan:
    """Sample floor(ratio * n_patches) patch indices without replacement."""
    if not (0.0 <= ratio <= 1.0):
        raise ValueError("ratio must lie in [0, 1]")
    count = int(math.floor(ratio * n_patches))
    chosen = torch.randperm(n_patches, generator=generator)[:count]
    return MaskPlan(tuple(sorted(chosen.tolist())), n_patches, ratio)


def positions_mask(plans: list[MaskPlan], n_channels: int, t: int, patch_len: int, patch_stride: int) -> torch.Tensor:
    """Materialize M: (B, C, T) boolean, all channels in masked windows."""
    times = torch.stack([p.time_mask(t, patch_len, patch_stride) for p in plans])
    return times.unsqueeze(1).expand(len(plans), n_channels, t).clone()


# ---------------------------------------------------------------------------
# losses

def weight_schedule(w, epoch: int):
    """0.5 + logistic(epoch * (w - 0.5)); sharpens toward {0.5, 1.5} as epochs grow."""
    if isinstance(w, torch.Tensor):
        return 0.5 + torch.sigmoid(epoch * (w - 0.5))
    if isinstance(w, np.ndarray):
        return 0.5 + 1.0 / (1.0 + np.exp(-epoch * (w - 0.5)))
    return 0.5 + 1.0 / (1.0 + math.exp(-epoch * (w - 0.5)))


def loss_rec(x: torch.Tensor, x_hat: torch.Tensor, masked: torch.Tensor, channel_weights: torch.Tensor) -> torch.Tensor:
    """Weighted MSE over masked positions, averaged by |M| (unweighted count)."""
    if x.shape != x_hat.shape or x.shape != masked.shape:
        raise PretrainError(f"shape mismatch: {x.shape} vs {x_hat.shape} vs {masked.shape}")
    count = masked.sum()
    if count == 0:
        return x_hat.new_zeros(())
    err = (x - x_hat).pow(2) * masked
    w = channel_weights.view(1, -1, 1).to(err.dtype)
    return (w * err).sum() / count


def token_mean(z: torch.Tensor) -> torch.Tensor:
    return z.mean(dim=-2)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine along the last dim; zero-norm inputs give 0 by definition."""
    dot = (a * b).sum(dim=-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    safe = denom.clamp_min(torch.finfo(a.dtype).tiny)
    return dot / safe * (denom > 0)


def loss_dec(
    z_shared: torch.Tensor,
    z_active: torch.Tensor,
    z_inactive: list[torch.Tensor],
    margin: float = 0.1,
) -> torch.Tensor:
    """Margin hinges on pooled cosines: shared vs active, active vs each inactive."""
    s = token_mean(z_shared)
    a = token_mean(z_active)
    total = F.relu(_cosine(s, a) - margin)
    for z in z_inactive:
        total = total + F.relu(_cosine(a, token_mean(z).detach()) - margin)
    return total.mean()


# ---------------------------------------------------------------------------
# model

class StateDecoder(nn.Module):
    """Fusion projection, a small pre-norm transformer, and a patch head.

    The head always emits all 60 template rows per patch; callers gather
    the montage's rows, so one decoder serves every electrode layout.
    """

    def __init__(self, config: PretrainConfig):
        super().__init__()
        enc = config.encoder
        self.patch_len = enc.patch_len
        self.fusion = nn.Linear(2 * enc.d_model, enc.d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(enc.d_model, enc.n_heads, enc.d_ff)
            for _ in range(config.decoder_layers)
        )
        self.head = nn.Linear(enc.d_model, N_TEMPLATE_CHANNELS * enc.patch_len)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, z_active: torch.Tensor, z_shared: torch.Tensor) -> torch.Tensor:
        """(B, N_p, d) x2 -> per-patch template maps (B, N_p, 60, P)."""
        z = self.fusion(torch.cat([z_active, z_shared], dim=-1))
        for blk in self.blocks:
            z = blk(z)
        out = self.head(z)
        b, n_p, _ = out.shape
        return out.reshape(b, n_p, N_TEMPLATE_CHANNELS, self.patch_len)


def place_patches(patch_maps: torch.Tensor, t: int, patch_len: int, patch_stride: int) -> torch.Tensor:
    """Scatter per-patch maps (B, N_p, C, P) back onto (B, C, T).

    Overlapping windows (stride < patch length) are averaged; positions
    not covered by any patch stay zero.
    """
    b, n_p, c, p = patch_maps.shape
    acc = patch_maps.new_zeros(b, c, t)
    cover = torch.zeros(t, dtype=patch_maps.dtype)
    for i in range(n_p):
        lo = i * patch_stride
        acc[:, :, lo:lo + p] = acc[:, :, lo:lo + p] + patch_maps[:, i]
        cover[lo:lo + p] += 1
    return acc / cover.clamp(min=1)


class PretrainModel(nn.Module):
    def __init__(self, config: PretrainConfig):
        super().__init__()
        self.config = config
        self.shared_encoder = HierarchicalEncoder(config.encoder)
        self.state_encoders = nn.ModuleDict(
            {s: HierarchicalEncoder(config.encoder) for s in config.states}
        )
        self.decoders = nn.ModuleDict({s: StateDecoder(config) for s in config.states})
        self.mask_embedding = nn.Parameter(torch.empty(config.encoder.patch_width))
        nn.init.trunc_normal_(self.mask_embedding, std=0.02)

    def forward_parallel(
        self,
        x: torch.Tensor,
        montage: MontageMap,
        state: str,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, dict[str, torch.Tensor]]:
        """Run all encoders; inactive-state outputs carry no graph."""
        if state not in self.state_encoders:
            raise PretrainError(f"unknown state {state!r}; have {list(self.state_encoders)}")
        z_shared = self.shared_encoder.encode(x, montage, mask, self.mask_embedding)
        z_active = self.state_encoders[state].encode(x, montage, mask, self.mask_embedding)
        z_inactive: dict[str, torch.Tensor] = {}
        with torch.no_grad():
            for name, enc in self.state_encoders.items():
                if name != state:
                    z_inactive[name] = enc.encode(x, montage, mask, self.mask_embedding)
        return z_shared, z_active, z_inactive

    def decode_reconstruct(
        self,
        z_active: torch.Tensor,
        z_shared: torch.Tensor,
        state: str,
        montage: MontageMap,
        t: int,
    ) -> torch.Tensor:
        """(B, N_p, d) x2 -> reconstruction (B, C, T) on the montage's rows."""
        enc = self.config.encoder
        maps = self.decoders[state](z_active, z_shared)
        rows = torch.as_tensor(montage.template_indices, device=maps.device)
        gathered = maps.index_select(2, rows)
        return place_patches(gathered, t, enc.patch_len, enc.patch_stride)


# ---------------------------------------------------------------------------
# optimization

def lr_at_epoch(epoch: int, config: PretrainConfig) -> float:
    """Linear warmup to peak, then cosine decay to min_lr at total_epochs."""
    if epoch < 1:
        raise ValueError("epoch is 1-based")
    if epoch <= config.warmup_epochs:
        return config.peak_lr * epoch / config.warmup_epochs
    span = max(config.total_epochs - config.warmup_epochs, 1)
    progress = (epoch - config.warmup_epochs) / span
    return config.min_lr + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


def param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """Decay on matrices; none on biases, norms, positional and mask embeddings."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith("pos_embed"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_optimizer(model: nn.Module, config: PretrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        param_groups(model, config.weight_decay),
        lr=config.peak_lr,
        betas=(config.beta1, config.beta2),
    )


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def batch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def pretrain_step(
    model: PretrainModel,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    epoch: int,
    mask_generator: torch.Generator,
    template=None,
) -> dict:
    """One optimization step (Algorithm steps: mask, parallel encode,
    fusion decode, losses, clip and update)."""
    cfg = model.config
    enc = cfg.encoder
    x = torch.from_numpy(batch.stacked()).to(torch.float32)
    b, c, t = x.shape
    n_p = enc.n_patches(t)

    plans = [plan_mask(n_p, cfg.mask_ratio, mask_generator) for _ in range(b)]
    mask = torch.stack([p.patch_mask() for p in plans])
    masked_positions = positions_mask(plans, c, t, enc.patch_len, enc.patch_stride)

    z_shared, z_active, z_inactive = model.forward_parallel(x, batch.montage, batch.state, mask)
    x_hat = model.decode_reconstruct(z_active, z_shared, batch.state, batch.montage, t)

    prior = torch.from_numpy(state_prior(batch.state, batch.montage, template)).to(torch.float32)
    weights = weight_schedule(prior, epoch)
    l_rec = loss_rec(x, x_hat, masked_positions, weights)
    l_dec = loss_dec(z_shared, z_active, list(z_inactive.values()), cfg.margin)
    total = l_rec + l_dec

    if not torch.isfinite(total):
        raise PretrainError(
            f"non-finite loss at epoch {epoch} (rec={l_rec.item()}, dec={l_dec.item()}, "
            f"state={batch.state}, dataset={batch.dataset_tag})"
        )

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return {
        "loss_total": total.item(),
        "loss_rec": l_rec.item(),
        "loss_dec": l_dec.item(),
        "state": batch.state,
    }


# ---------------------------------------------------------------------------
# checkpoint plumbing

def make_checkpoint(
    model: PretrainModel,
    optimizer: torch.optim.Optimizer,
    epoch: int,
    global_step: int,
    mask_generator: torch.Generator,
) -> ckpt_io.Checkpoint:
    moments, steps = ckpt_io.snapshot_optimizer(model, optimizer)
    return ckpt_io.Checkpoint(
        config=model.config.to_dict(),
        epoch=epoch,
        global_step=global_step,
        seeds={"seed": model.config.seed},
        rng_states={"mask_generator": bytes(mask_generator.get_state().numpy().tobytes())},
        params=ckpt_io.snapshot_model(model),
        opt_moments=moments,
        opt_steps=steps,
    )


def restore_checkpoint(
    ckpt: ckpt_io.Checkpoint,
    model: PretrainModel,
    optimizer: torch.optim.Optimizer | None = None,
    mask_generator: torch.Generator | None = None,
) -> None:
    if ckpt.config != model.config.to_dict():
        raise ckpt_io.CheckpointError("checkpoint config does not match the model config")
    ckpt_io.restore_model(model, ckpt.params)
    if optimizer is not None:
        ckpt_io.restore_optimizer(model, optimizer, ckpt.opt_moments, ckpt.opt_steps)
    if mask_generator is not None and "mask_generator" in ckpt.rng_states:
        state = torch.frombuffer(bytearray(ckpt.rng_states["mask_generator"]), dtype=torch.uint8)
        mask_generator.set_state(state.clone())


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> PretrainModel:
    config = PretrainConfig.from_dict(ckpt.config)
    model = PretrainModel(config)
    ckpt_io.restore_model(model, ckpt.params)
    return model


# ---------------------------------------------------------------------------
# training loop

def run_pretraining(
    segments: list[Segment],
    config: PretrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    template=None,
    log_every: int = 1,
    stop_after_epoch: int | None = None,
) -> dict:
    """Train over the segment corpus; returns per-epoch mean losses.

    Writes `train_log.jsonl`, a `checkpoint_last.bin` each epoch, and
    numbered checkpoints every `save_every` epochs.  On a non-finite
    loss the step diagnostics land in `diagnostic_dump.json`.
    ``stop_after_epoch`` pauses the schedule early without altering it,
    for later resumption from the saved checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    model = PretrainModel(config)
    optimizer = build_optimizer(model, config)
    mask_generator = torch.Generator()
    mask_generator.manual_seed(config.seed)

    start_epoch = 1
    global_step = 0
    if resume is not None:
        ckpt = ckpt_io.load(resume)
        restore_checkpoint(ckpt, model, optimizer, mask_generator)
        start_epoch = ckpt.epoch + 1
        global_step = ckpt.global_step

    last_epoch = config.total_epochs
    if stop_after_epoch is not None:
        last_epoch = min(last_epoch, stop_after_epoch)

    history: list[dict] = []
    log_path = out / "train_log.jsonl"
    with open(log_path, "a") as log:
        for epoch in range(start_epoch, last_epoch + 1):
            lr = lr_at_epoch(epoch, config)
            set_lr(optimizer, lr)
            batches = batch_by_dataset(segments, config.batch_size, batch_seed(config.seed, epoch), epoch)
            epoch_stats: list[dict] = []
            for batch in batches:
                try:
                    stats = pretrain_step(model, optimizer, batch, epoch, mask_generator, template)
                except PretrainError as err:
                    dump = {
                        "error": str(err),
                        "epoch": epoch,
                        "global_step": global_step,
                        "lr": lr,
                        "state": batch.state,
                        "dataset": batch.dataset_tag,
                    }
                    (out / "diagnostic_dump.json").write_text(json.dumps(dump, indent=2))
                    raise
                global_step += 1
                epoch_stats.append(stats)
                if global_step % log_every == 0:
                    record = {
                        "step": global_step,
                        "epoch": epoch,
                        "lr": lr,
                        "loss_rec": stats["loss_rec"],
                        "loss_dec": stats["loss_dec"],
                        "loss_total": stats["loss_total"],
                        "state": stats["state"],
                    }
                    log.write(json.dumps(record) + "\n")
                    log.flush()
            summary = {
                "epoch": epoch,
                "lr": lr,
                "mean_loss_total": float(np.mean([s["loss_total"] for s in epoch_stats])),
                "mean_loss_rec": float(np.mean([s["loss_rec"] for s in epoch_stats])),
                "mean_loss_dec": float(np.mean([s["loss_dec"] for s in epoch_stats])),
                "n_steps": len(epoch_stats),
            }
            history.append(summary)
            ckpt = make_checkpoint(model, optimizer, epoch, global_step, mask_generator)
            ckpt_io.save(out / "checkpoint_last.bin", ckpt)
            if config.save_every and epoch % config.save_every == 0:
                ckpt_io.save(out / f"checkpoint_epoch{epoch:03d}.bin", ckpt)
    return {"epochs": history, "global_step": global_step}


__all__ = [
    "STATES",
    "PretrainError",
    "PretrainConfig",
    "MaskPlan",
    "plan_mask",
    "apply_mask",
    "positions_mask",
    "weight_schedule",
    "loss_rec",
    "loss_dec",
    "token_mean",
    "StateDecoder",
    "place_patches",
    "PretrainModel",
    "lr_at_epoch",
    "param_groups",
    "build_optimizer",
    "set_lr",
    "batch_seed",
    "pretrain_step",
    "make_checkpoint",
    "restore_checkpoint",
    "model_from_checkpoint",
    "run_pretraining",
]
