"""Finite-difference validation of analytic gradients.

Builds a small float64 pretraining model, evaluates the full training
objective on one fixed batch, and compares autograd against central
differences on sampled entries of every active-path parameter tensor.
Inactive state branches enter the objective through a stop-gradient, so
their outputs are held fixed while differencing; the routing contract
(exactly zero gradients for inactive branches) is validated separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoder import EncoderConfig
from .montage import resolve_montage, state_prior
from .pretrain import (
    PretrainConfig,
    PretrainModel,
    loss_dec,
    loss_rec,
    plan_mask,
    positions_mask,
    weight_schedule,
)

CHECK_CHANNELS = ["FP1", "F3", "CZ", "C4", "P3", "PZ", "O1", "O2"]


def check_config(d_model: int = 16) -> PretrainConfig:
    enc = EncoderConfig(
        conv_channels=(8, 8),
        conv_kernels=(15, 3),
        conv_strides=(1, 1),
        conv_paddings=(7, 1),
        k_c=8,
        k_r=8,
        patch_len=20,
        patch_stride=20,
        d_model=d_model,
        n_layers=2,
        n_heads=4,
        d_ff=32,
        gn_groups=4,
        n_pos_max=32,
    )
    return PretrainConfig(encoder=enc, decoder_layers=2, total_epochs=30)


@dataclass
class GradCheckResult:
    name: str
    checked: int
    max_rel_err: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def run_gradcheck(
    seed: int = 0,
    tol: float = 1e-4,
    directions_per_param: int = 2,
    eps: float = 1e-4,
    config: PretrainConfig | None = None,
    state: str = "affect",
    t: int = 200,
    batch_size: int = 2,
) -> tuple[list[GradCheckResult], bool]:
    """Returns per-parameter results and whether all passed ``tol``.

    Each tensor is probed along random unit directions plus its
    largest-gradient entry.  Central differences are Richardson
    extrapolated ((4*D(h) - D(2h)) / 3) so a step of ~1e-4 keeps both
    truncation and float64 cancellation noise far below ``tol`` even for
    gradients of order 1e-7.  Relative error is
    |a - n| / max(1e-8, |a|, |n|) with a = autograd, n = numeric.
    """
    cfg = config if config is not None else check_config()
    torch.manual_seed(seed)
    model = PretrainModel(cfg).double()
    montage = resolve_montage(CHECK_CHANNELS)
    c = montage.n_channels

    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.normal(size=(batch_size, c, t))).double()
    mask_gen = torch.Generator()
    mask_gen.manual_seed(seed)
    n_p = cfg.encoder.n_patches(t)
    plans = [plan_mask(n_p, cfg.mask_ratio, mask_gen) for _ in range(batch_size)]
    mask = torch.stack([p.patch_mask() for p in plans])
    masked_positions = positions_mask(plans, c, t, cfg.encoder.patch_len, cfg.encoder.patch_stride)
    epoch = 3
    prior = torch.from_numpy(state_prior(state, montage)).double()
    weights = weight_schedule(prior, epoch)

    # inactive outputs are constants of the objective (stop-gradient)
    with torch.no_grad():
        frozen_inactive = [
            model.state_encoders[s].encode(x, montage, mask, model.mask_embedding)
            for s in cfg.states
            if s != state
        ]

    def objective() -> torch.Tensor:
        z_shared = model.shared_encoder.encode(x, montage, mask, model.mask_embedding)
        z_active = model.state_encoders[state].encode(x, montage, mask, model.mask_embedding)
        x_hat = model.decode_reconstruct(z_active, z_shared, state, montage, t)
        return loss_rec(x, x_hat, masked_positions, weights) + loss_dec(
            z_shared, z_active, frozen_inactive, cfg.margin
        )

    model.zero_grad(set_to_none=True)
    objective().backward()

    skip_prefixes = tuple(
        p for s in cfg.states if s != state for p in (f"state_encoders.{s}.", f"decoders.{s}.")
    )
    def numeric_along(p: torch.Tensor, direction: torch.Tensor, h: float) -> float:
        base = p.detach().clone()
        vals = []
        for step in (h, -h, 2.0 * h, -2.0 * h):
            p.detach().copy_(base + step * direction)
            vals.append(objective().item())
        p.detach().copy_(base)
        d_h = (vals[0] - vals[1]) / (2.0 * h)
        d_2h = (vals[2] - vals[3]) / (4.0 * h)
        return (4.0 * d_h - d_2h) / 3.0

    results = []
    for name, p in model.named_parameters():
        if name.startswith(skip_prefixes):
            continue
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        max_rel = 0.0
        checked = 0
        with torch.no_grad():
            probes = []
            for _ in range(directions_per_param):
                v = torch.from_numpy(rng.normal(size=tuple(p.shape))).double()
                probes.append(v / v.norm())
            peak = int(torch.argmax(grad.abs().reshape(-1)).item())
            basis = torch.zeros_like(p).reshape(-1)
            basis[peak] = 1.0
            probes.append(basis.reshape(p.shape))
            for v in probes:
                analytic = float((grad * v).sum().item())
                numeric = numeric_along(p, v, eps)
                rel = abs(analytic - numeric) / max(1e-8, abs(analytic), abs(numeric))
                max_rel = max(max_rel, rel)
                checked += 1
        results.append(GradCheckResult(name, checked, max_rel))
    all_ok = all(r.ok(tol) for r in results)
    return results, all_ok
