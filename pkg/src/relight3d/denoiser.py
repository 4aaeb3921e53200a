"""Multi-view multi-domain noise predictor.

A small UNet (channels 32/64/128 over resolutions 32/16/8) run on all 8
images of an object (4 views x 2 domains) jointly. At the 8x8 bottleneck the
tokens of all 8 images form one sequence for self-attention, placed before
cross-attention onto the prompt tokens. Time, camera, and domain embeddings
are summed per image and injected into every residual block. Positional
encodings are per-pixel (shared across views), so jointly permuting views and
their cameras permutes the prediction identically.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .core import attention
from .scenes import MAX_PROMPT_LEN, VOCAB

IMAGE_RES = 32
N_VIEWS = 4
N_DOMAINS = 2
N_IMAGES = N_VIEWS * N_DOMAINS
EMB_DIM = 128
ATTN_RES = 8
ATTN_HEADS = 4


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Standard sin/cos features of scalars x (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype) / half)
    args = x.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def grid_positions(res: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Per-pixel 2D sinusoidal positions, (res*res, dim); rows use the first
    half of the channels, columns the second."""
    rows = torch.arange(res, dtype=dtype)
    emb_r = sinusoidal_embedding(rows, dim // 2)
    emb_c = sinusoidal_embedding(rows, dim - dim // 2)
    grid = torch.cat(
        [
            emb_r[:, None, :].expand(res, res, dim // 2),
            emb_c[None, :, :].expand(res, res, dim - dim // 2),
        ],
        dim=-1,
    )
    return grid.reshape(res * res, dim)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int = EMB_DIM):
        super().__init__()
        groups = 8
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Pre-norm attention with a zero-initialized output projection, so the
    block starts as (and can be ablated to) the identity."""

    def __init__(self, dim: int, heads: int = ATTN_HEADS):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm(x)
        ctx = h if context is None else context
        att = attention(self.q(h), self.k(ctx), self.v(ctx), heads=self.heads)
        return x + self.out(att)


class MultiViewDenoiser(nn.Module):
    def __init__(self, emb_dim: int = EMB_DIM):
        super().__init__()
        ch = (32, 64, 128)
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.camera_mlp = nn.Sequential(nn.Linear(12, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.domain_mlp = nn.Sequential(nn.Linear(N_DOMAINS, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.prompt_embed = nn.Embedding(len(VOCAB), ch[2])

        self.in_conv = nn.Conv2d(3, ch[0], 3, padding=1)
        self.res_a = ResBlock(ch[0], ch[0], emb_dim)
        self.down1 = nn.Conv2d(ch[0], ch[1], 3, stride=2, padding=1)
        self.res_b = ResBlock(ch[1], ch[1], emb_dim)
        self.down2 = nn.Conv2d(ch[1], ch[2], 3, stride=2, padding=1)
        self.res_c = ResBlock(ch[2], ch[2], emb_dim)

        self.joint_attn = AttentionBlock(ch[2])
        self.prompt_attn = AttentionBlock(ch[2])

        self.res_d = ResBlock(ch[2], ch[2], emb_dim)
        self.up1 = nn.Conv2d(ch[2], ch[1], 3, padding=1)
        self.res_e = ResBlock(ch[1] * 2, ch[1], emb_dim)
        self.up2 = nn.Conv2d(ch[1], ch[0], 3, padding=1)
        self.res_f = ResBlock(ch[0] * 2, ch[0], emb_dim)
        self.out_norm = nn.GroupNorm(8, ch[0])
        self.out_conv = nn.Conv2d(ch[0], 3, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        pos = grid_positions(ATTN_RES, ch[2])
        self.register_buffer("token_pos", pos, persistent=False)
        prompt_pos = sinusoidal_embedding(torch.arange(MAX_PROMPT_LEN, dtype=torch.float32), ch[2])
        self.register_buffer("prompt_pos", prompt_pos, persistent=False)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        cams: torch.Tensor,
        domain_labels: torch.Tensor,
        prompt: torch.Tensor,
    ) -> torch.Tensor:
        """Predict the noise for the full 8-image stack of each object.

        x_t: (B, 8, 3, H, W) in diffusion space; t: (B,) long; cams: (B, 4, 12);
        domain_labels: (B, 8) long in {0=albedo, 1=normal}; prompt: (B, L) long.
        """
        if x_t.ndim != 5 or x_t.shape[1] != N_IMAGES:
            raise ValueError(
                f"joint prediction needs all {N_IMAGES} images (4 views x 2 domains); got shape {tuple(x_t.shape)}"
            )
        if cams.shape[-2:] != (N_VIEWS, 12):
            raise ValueError(f"cams must be (B, {N_VIEWS}, 12); got {tuple(cams.shape)}")
        for dom in (0, 1):
            if not (domain_labels == dom).any():
                raise ValueError("both domains must be present in the image stack")
        B = x_t.shape[0]
        dtype = x_t.dtype

        t_emb = self.time_mlp(sinusoidal_embedding(t.to(dtype), self.emb_dim))  # B x E
        cam_emb = self.camera_mlp(cams.to(dtype))  # B x 4 x E
        cam_emb = cam_emb.repeat(1, N_DOMAINS, 1)  # image k uses camera k % 4
        dom_onehot = torch.nn.functional.one_hot(domain_labels.long(), N_DOMAINS).to(dtype)
        dom_emb = self.domain_mlp(dom_onehot)  # B x 8 x E
        emb = t_emb[:, None, :] + cam_emb + dom_emb  # B x 8 x E
        emb = emb.reshape(B * N_IMAGES, self.emb_dim)

        x = x_t.reshape(B * N_IMAGES, *x_t.shape[2:])
        h0 = self.res_a(self.in_conv(x), emb)
        h1 = self.res_b(self.down1(h0), emb)
        h2 = self.res_c(self.down2(h1), emb)

        c = h2.shape[1]
        tokens = h2.reshape(B, N_IMAGES, c, -1).permute(0, 1, 3, 2)  # B x 8 x 64 x C
        tokens = tokens + self.token_pos.to(dtype)[None, None, :, :]
        tokens = tokens.reshape(B, N_IMAGES * ATTN_RES * ATTN_RES, c)
        tokens = self.joint_attn(tokens)
        ctx = self.prompt_embed(prompt.long()) + self.prompt_pos.to(dtype)[None, : prompt.shape[1], :]
        tokens = self.prompt_attn(tokens, context=ctx)
        h2 = tokens.reshape(B, N_IMAGES, ATTN_RES * ATTN_RES, c).permute(0, 1, 3, 2)
        h2 = h2.reshape(B * N_IMAGES, c, ATTN_RES, ATTN_RES)

        h2 = self.res_d(h2, emb)
        u1 = self.up1(torch.nn.functional.interpolate(h2, scale_factor=2, mode="nearest"))
        u1 = self.res_e(torch.cat([u1, h1], dim=1), emb)
        u2 = self.up2(torch.nn.functional.interpolate(u1, scale_factor=2, mode="nearest"))
        u2 = self.res_f(torch.cat([u2, h0], dim=1), emb)
        out = self.out_conv(torch.nn.functional.silu(self.out_norm(u2)))
        return out.reshape(B, N_IMAGES, *x_t.shape[2:])


def create_denoiser(seed: int = 0) -> MultiViewDenoiser:
    """Seeded construction so checkpoints are reproducible from scratch."""
    torch.manual_seed(seed)
    return MultiViewDenoiser()


class RgbDenoiser(nn.Module):
    """Single-domain noise predictor for shaded RGB view stacks.

    Same UNet trunk and conditioning as the albedo/normal model, but with one
    image per camera and no domain embedding. Serves as the frozen score for
    material distillation.
    """

    def __init__(self, emb_dim: int = EMB_DIM):
        super().__init__()
        ch = (32, 64, 128)
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.camera_mlp = nn.Sequential(nn.Linear(12, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.prompt_embed = nn.Embedding(len(VOCAB), ch[2])

        self.in_conv = nn.Conv2d(3, ch[0], 3, padding=1)
        self.res_a = ResBlock(ch[0], ch[0], emb_dim)
        self.down1 = nn.Conv2d(ch[0], ch[1], 3, stride=2, padding=1)
        self.res_b = ResBlock(ch[1], ch[1], emb_dim)
        self.down2 = nn.Conv2d(ch[1], ch[2], 3, stride=2, padding=1)
        self.res_c = ResBlock(ch[2], ch[2], emb_dim)

        self.joint_attn = AttentionBlock(ch[2])
        self.prompt_attn = AttentionBlock(ch[2])

        self.res_d = ResBlock(ch[2], ch[2], emb_dim)
        self.up1 = nn.Conv2d(ch[2], ch[1], 3, padding=1)
        self.res_e = ResBlock(ch[1] * 2, ch[1], emb_dim)
        self.up2 = nn.Conv2d(ch[1], ch[0], 3, padding=1)
        self.res_f = ResBlock(ch[0] * 2, ch[0], emb_dim)
        self.out_norm = nn.GroupNorm(8, ch[0])
        self.out_conv = nn.Conv2d(ch[0], 3, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        pos = grid_positions(ATTN_RES, ch[2])
        self.register_buffer("token_pos", pos, persistent=False)
        prompt_pos = sinusoidal_embedding(torch.arange(MAX_PROMPT_LEN, dtype=torch.float32), ch[2])
        self.register_buffer("prompt_pos", prompt_pos, persistent=False)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        cams: torch.Tensor,
        prompt: torch.Tensor,
    ) -> torch.Tensor:
        """x_t: (B, V, 3, H, W), one image per camera; cams: (B, V, 12)."""
        if x_t.ndim != 5 or cams.ndim != 3 or x_t.shape[1] != cams.shape[1]:
            raise ValueError(
                f"need one image per camera; got images {tuple(x_t.shape)}, cams {tuple(cams.shape)}"
            )
        B, V = x_t.shape[:2]
        dtype = x_t.dtype

        t_emb = self.time_mlp(sinusoidal_embedding(t.to(dtype), self.emb_dim))
        cam_emb = self.camera_mlp(cams.to(dtype))
        emb = (t_emb[:, None, :] + cam_emb).reshape(B * V, self.emb_dim)

        x = x_t.reshape(B * V, *x_t.shape[2:])
        h0 = self.res_a(self.in_conv(x), emb)
        h1 = self.res_b(self.down1(h0), emb)
        h2 = self.res_c(self.down2(h1), emb)

        c = h2.shape[1]
        tokens = h2.reshape(B, V, c, -1).permute(0, 1, 3, 2)
        tokens = tokens + self.token_pos.to(dtype)[None, None, :, :]
        tokens = tokens.reshape(B, V * ATTN_RES * ATTN_RES, c)
        tokens = self.joint_attn(tokens)
        ctx = self.prompt_embed(prompt.long()) + self.prompt_pos.to(dtype)[None, : prompt.shape[1], :]
        tokens = self.prompt_attn(tokens, context=ctx)
        h2 = tokens.reshape(B, V, ATTN_RES * ATTN_RES, c).permute(0, 1, 3, 2)
        h2 = h2.reshape(B * V, c, ATTN_RES, ATTN_RES)

        h2 = self.res_d(h2, emb)
        u1 = self.up1(torch.nn.functional.interpolate(h2, scale_factor=2, mode="nearest"))
        u1 = self.res_e(torch.cat([u1, h1], dim=1), emb)
        u2 = self.up2(torch.nn.functional.interpolate(u1, scale_factor=2, mode="nearest"))
        u2 = self.res_f(torch.cat([u2, h0], dim=1), emb)
        out = self.out_conv(torch.nn.functional.silu(self.out_norm(u2)))
        return out.reshape(B, V, *x_t.shape[2:])


def create_rgb_denoiser(seed: int = 0) -> RgbDenoiser:
    torch.manual_seed(seed)
    return RgbDenoiser()


def denoise_predict(
    model: MultiViewDenoiser,
    x_t: torch.Tensor,
    t: torch.Tensor,
    cams: torch.Tensor,
    domain_labels: torch.Tensor,
    prompt: torch.Tensor,
) -> torch.Tensor:
    return model(x_t, t, cams, domain_labels, prompt)
