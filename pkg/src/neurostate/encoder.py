"""Hierarchical EEG encoder.

Four stages: per-channel temporal convolutions, retrieval-based spatial
filtering against the fixed electrode template (channel filters plus
region filters), patch tokenization with a learned projection and
positional embeddings, and a pre-norm transformer.  The montage decides
which filter-bank rows participate, so one parameter set serves any
electrode layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .montage import N_REGIONS, N_TEMPLATE_CHANNELS, MontageMap, UniversalTemplate


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters.

    ``conv_channels`` are the output widths of the temporal conv blocks;
    the last one is the temporal feature depth K_T.  Convolutions must
    preserve length (stride 1, symmetric padding).
    """

    conv_channels: tuple[int, ...] = (32, 32, 32)
    conv_kernels: tuple[int, ...] = (15, 3, 3)
    conv_strides: tuple[int, ...] = (1, 1, 1)
    conv_paddings: tuple[int, ...] = (7, 1, 1)
    k_c: int = 32  # channel-filter count
    k_r: int = 32  # region-filter count
    patch_len: int = 20
    patch_stride: int = 20
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 32
    d_ff: int = 64
    gn_groups: int = 4
    n_pos_max: int = 512

    def __post_init__(self):
        specs = (self.conv_channels, self.conv_kernels, self.conv_strides, self.conv_paddings)
        if len({len(s) for s in specs}) != 1 or not self.conv_channels:
            raise EncoderError("conv block specs must be non-empty and equal-length")
        for ch, k, s, p in zip(*specs):
            if min(ch, k) < 1 or s != 1 or 2 * p != k - 1:
                raise EncoderError(
                    "conv blocks must preserve length (stride 1, padding (k-1)/2)"
                )
            if ch % self.gn_groups:
                raise EncoderError("gn_groups must divide every conv width")
        for name in ("k_c", "k_r", "patch_len", "patch_stride", "d_model",
                     "n_layers", "n_heads", "d_ff", "gn_groups", "n_pos_max"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise EncoderError("n_heads must divide d_model")
        if self.k_c % self.gn_groups or self.k_r % self.gn_groups:
            raise EncoderError("gn_groups must divide k_c and k_r")

    @property
    def k_t(self) -> int:
        return self.conv_channels[-1]

    @property
    def k_total(self) -> int:
        return self.k_c + self.k_r

    @property
    def d_spatial(self) -> int:
        """Row count of the assembled spatial feature map."""
        return self.k_t * self.k_total

    @property
    def patch_width(self) -> int:
        """Flattened patch input width, d_spatial * patch_len."""
        return self.d_spatial * self.patch_len

    @property
    def min_t(self) -> int:
        return max(max(self.conv_kernels), self.patch_len)

    def n_patches(self, t: int) -> int:
        if t < self.patch_len:
            raise EncoderError(f"T={t} is shorter than one patch (P={self.patch_len})")
        return (t - self.patch_len) // self.patch_stride + 1


def apply_mask(patch_inputs: torch.Tensor, mask: torch.Tensor, mask_embedding: torch.Tensor) -> torch.Tensor:
    """Replace masked patches' flattened inputs with the mask embedding.

    ``patch_inputs`` is (B, N_p, D), ``mask`` a boolean (B, N_p) or
    (N_p,); unmasked rows pass through bit-identically.
    """
    if mask.dim() == 1:
        mask = mask.unsqueeze(0)
    return torch.where(mask.unsqueeze(-1), mask_embedding.to(patch_inputs.dtype), patch_inputs)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (d_model // n_heads) ** -0.5
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class HierarchicalEncoder(nn.Module):
    """One complete encoder; montage-agnostic by construction.

    Channels are internally processed in template-index order so encoding
    is bit-exactly invariant to the input channel permutation.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = 1
        for out_ch, k, s, p in zip(config.conv_channels, config.conv_kernels,
                                   config.conv_strides, config.conv_paddings):
            layers += [
                nn.Conv1d(in_ch, out_ch, k, stride=s, padding=p, bias=False),
                nn.GroupNorm(config.gn_groups, out_ch),
                nn.GELU(),
            ]
            in_ch = out_ch
        self.temporal = nn.Sequential(*layers)
        self.bank_c = nn.Parameter(torch.empty(N_TEMPLATE_CHANNELS, config.k_c))
        self.bank_r = nn.Parameter(torch.empty(N_REGIONS, config.k_r))
        self.norm_c = nn.GroupNorm(config.gn_groups, config.k_c)
        self.norm_r = nn.GroupNorm(config.gn_groups, config.k_r)
        self.embed = nn.Linear(config.patch_width, config.d_model)
        self.pos_embed = nn.Parameter(torch.empty(config.n_pos_max, config.d_model))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_model, config.n_heads, config.d_ff)
            for _ in range(config.n_layers)
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv1d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            elif isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.bank_c, std=0.02)
        nn.init.trunc_normal_(self.bank_r, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def temporal_encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, T) -> (B, K_T, C, T), each channel independent."""
        b, c, t = x.shape
        if t < max(self.config.conv_kernels):
            raise EncoderError(f"T={t} below the largest conv kernel")
        h = self.temporal(x.reshape(b * c, 1, t))
        return h.reshape(b, c, self.config.k_t, t).permute(0, 2, 1, 3)

    @staticmethod
    def flatten_temporal(h_temp: torch.Tensor) -> torch.Tensor:
        """(B, K_T, C, T) -> (B, C, K_T*T), row-major over (K_T, T)."""
        b, k_t, c, t = h_temp.shape
        return h_temp.permute(0, 2, 1, 3).reshape(b, c, k_t * t)

    def _validate_rows(self, h_flat: torch.Tensor, montage: MontageMap) -> torch.Tensor:
        if h_flat.shape[1] != montage.n_channels:
            raise EncoderError(
                f"expected {montage.n_channels} channel rows, got {h_flat.shape[1]}"
            )
        idx = torch.as_tensor(montage.template_indices, device=h_flat.device)
        if idx.numel() and (idx.min() < 0 or idx.max() >= N_TEMPLATE_CHANNELS):
            raise EncoderError("template index out of range")
        return idx

    def _canonical(self, h_flat: torch.Tensor, montage: MontageMap) -> tuple[torch.Tensor, torch.Tensor]:
        """Reorder mapped channels by template index; fixes the reduction order."""
        idx = self._validate_rows(h_flat, montage)
        order = torch.argsort(idx)
        return h_flat[:, order], idx[order]

    def channel_pre(self, h_flat: torch.Tensor, montage: MontageMap) -> torch.Tensor:
        """Pre-activation channel retrieval: W_C[I_ch]^T H, (B, K_C, K_T*T)."""
        h, idx = self._canonical(h_flat, montage)
        w = self.bank_c.index_select(0, idx)
        return torch.matmul(w.transpose(0, 1).to(h.dtype), h)

    def channel_spatial(self, h_flat: torch.Tensor, montage: MontageMap) -> torch.Tensor:
        return F.gelu(self.norm_c(self.channel_pre(h_flat, montage)))

    def region_pre(self, h_flat: torch.Tensor, montage: MontageMap) -> torch.Tensor:
        """Pre-activation region retrieval: W_R[R_uniq]^T M_region, (B, K_R, K_T*T)."""
        self._validate_rows(h_flat, montage)
        # member positions are stored template-index-sorted, which pins the
        # mean's reduction order independent of the input channel order
        means = torch.stack(
            [h_flat[:, list(m)].mean(dim=1) for m in montage.region_members], dim=1
        )
        idx = torch.as_tensor(montage.unique_regions, device=h_flat.device)
        w = self.bank_r.index_select(0, idx)
        return torch.matmul(w.transpose(0, 1).to(h_flat.dtype), means)

    def region_spatial(self, h_flat: torch.Tensor, montage: MontageMap) -> torch.Tensor:
        return F.gelu(self.norm_r(self.region_pre(h_flat, montage)))

    def assemble_spatial(self, h_c: torch.Tensor, h_r: torch.Tensor) -> torch.Tensor:
        """Concatenate filter outputs and reshape to (B, K_T*K_total, T).

        Filter-major layout: output row f*K_T + k is temporal feature k of
        filter f, with channel filters first.
        """
        if h_c.shape[-1] != h_r.shape[-1]:
            raise EncoderError("channel/region feature widths differ")
        k_t = self.config.k_t
        b, _, w = h_c.shape
        if w % k_t:
            raise EncoderError("feature width is not a multiple of K_T")
        t = w // k_t
        cat = torch.cat([h_c, h_r], dim=1)
        return cat.reshape(b, self.config.k_total, k_t, t).reshape(b, self.config.d_spatial, t)

    def patchify(self, h_spatial: torch.Tensor) -> torch.Tensor:
        """(B, D_s, T) -> flattened patch inputs (B, N_p, D_s*P)."""
        cfg = self.config
        t = h_spatial.shape[-1]
        n_p = cfg.n_patches(t)
        if n_p > cfg.n_pos_max:
            raise EncoderError(f"N_p={n_p} exceeds the positional table ({cfg.n_pos_max})")
        patches = h_spatial.unfold(2, cfg.patch_len, cfg.patch_stride)  # (B, D_s, N_p, P)
        return patches.permute(0, 2, 1, 3).reshape(h_spatial.shape[0], n_p, cfg.patch_width)

    def embed_tokens(self, patch_inputs: torch.Tensor) -> torch.Tensor:
        n_p = patch_inputs.shape[1]
        return self.embed(patch_inputs) + self.pos_embed[:n_p].to(patch_inputs.dtype)

    def patchify_embed(
        self,
        h_spatial: torch.Tensor,
        mask: torch.Tensor | None = None,
        mask_embedding: torch.Tensor | None = None,
    ) -> torch.Tensor:
        patches = self.patchify(h_spatial)
        if mask is not None:
            patches = apply_mask(patches, mask, mask_embedding)
        return self.embed_tokens(patches)

    def transformer_encode(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.config.d_model:
            raise EncoderError("token width must equal d_model")
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens

    def encode(
        self,
        x: torch.Tensor,
        montage: MontageMap,
        mask: torch.Tensor | None = None,
        mask_embedding: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Full forward pass: (B, C, T) or (C, T) -> (B, N_p, d) or (N_p, d)."""
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        h_temp = self.temporal_encode(x)
        h_flat = self.flatten_temporal(h_temp)
        h_c = self.channel_spatial(h_flat, montage)
        h_r = self.region_spatial(h_flat, montage)
        h_spatial = self.assemble_spatial(h_c, h_r)
        z = self.patchify_embed(h_spatial, mask, mask_embedding)
        z = self.transformer_encode(z)
        return z.squeeze(0) if single else z

    forward = encode


def export_filter_banks(encoder: HierarchicalEncoder, template: UniversalTemplate, path) -> int:
    """Write both filter banks as tabular text; returns the row count.

    Channel-bank rows carry the electrode name and its region; region-bank
    rows carry the region name in both columns.
    """
    w_c = encoder.bank_c.detach().cpu().numpy()
    w_r = encoder.bank_r.detach().cpu().numpy()
    n = 0
    with open(path, "w") as f:
        f.write("bank\tname\tregion\tfilter_index\tweight\n")
        for i, name in enumerate(template.channel_names):
            region = template.region_names[template.region_of[i]]
            for j in range(w_c.shape[1]):
                f.write(f"channel\t{name}\t{region}\t{j}\t{w_c[i, j]:.8g}\n")
                n += 1
        for r, rname in enumerate(template.region_names):
            for j in range(w_r.shape[1]):
                f.write(f"region\t{rname}\t{rname}\t{j}\t{w_r[r, j]:.8g}\n")
                n += 1
    return n
