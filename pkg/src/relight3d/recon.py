"""Transformer that maps 4 posed albedo views to a triplane field.

Each 64x64 view is patch-embedded (8x8 patches, 64 tokens), camera-modulated
with a zero-initialized scale/shift head (identity at init), and concatenated.
Learnable plane tokens run through M blocks of {cross-attention onto the image
tokens, self-attention, MLP}; the final tokens form 3 coarse feature grids that
are bilinearly upsampled into triplane planes. The NeRF decoder that renders
those planes is part of the same parameter set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .cameras import CameraPose, pixel_rays
from .core import AdamHyper, ParamStore, adam_step, attention
from .denoiser import grid_positions
from .scenes import PrimitiveScene, trace_rays
from .triplane import PLANE_CHANNELS, PLANE_RES, RenderSettings, Triplane, render_rays
from .utils import NonFiniteError, derive_seed

D_MODEL = 128
PATCH = 8
INPUT_RES = 64
TOKENS_PER_VIEW = (INPUT_RES // PATCH) ** 2
TOKEN_GRID = 16  # 16x16 tokens per plane, upsampled to PLANE_RES
N_BLOCKS = 4
CANONICAL_RADIUS = 2.0
DENSITY_SCALE = 25.0
# fixed gain on the zero-init plane head: Adam updates are scale-invariant per
# parameter, so the gain sets how far the emitted field moves per step at the
# pinned learning rate without touching the optimizer
PLANE_GAIN = 10.0


class TransformerBlock(nn.Module):
    """{cross-attention, self-attention, MLP}, all pre-norm residual."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(dim)
        self.cross_q = nn.Linear(dim, dim)
        self.cross_k = nn.Linear(dim, dim)
        self.cross_v = nn.Linear(dim, dim)
        self.cross_out = nn.Linear(dim, dim)
        self.norm_s = nn.LayerNorm(dim)
        self.self_q = nn.Linear(dim, dim)
        self.self_k = nn.Linear(dim, dim)
        self.self_v = nn.Linear(dim, dim)
        self.self_out = nn.Linear(dim, dim)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim))

    def forward(self, tokens: torch.Tensor, image_tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm_q(tokens)
        tokens = tokens + self.cross_out(
            attention(self.cross_q(h), self.cross_k(image_tokens), self.cross_v(image_tokens), self.heads)
        )
        h = self.norm_s(tokens)
        tokens = tokens + self.self_out(attention(self.self_q(h), self.self_k(h), self.self_v(h), self.heads))
        return tokens + self.mlp(self.norm_m(tokens))


class ViewSetReconstructor(nn.Module):
    def __init__(self, dim: int = D_MODEL):
        super().__init__()
        self.dim = dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=PATCH, stride=PATCH)
        self.cam_mod = nn.Sequential(nn.Linear(12, dim), nn.SiLU(), nn.Linear(dim, 2 * dim))
        nn.init.zeros_(self.cam_mod[-1].weight)  # modulation starts as identity
        nn.init.zeros_(self.cam_mod[-1].bias)
        self.plane_tokens = nn.Parameter(torch.randn(3 * TOKEN_GRID * TOKEN_GRID, dim) * 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(dim) for _ in range(N_BLOCKS)])
        self.head_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, PLANE_CHANNELS)
        nn.init.zeros_(self.head.weight)  # neutral field at init
        nn.init.zeros_(self.head.bias)

        # shared NeRF decoder, trained jointly with the transformer. The head
        # above is the only zero-init layer: with zero biases a zero dec_w3
        # would also kill the gradient into the planes (hiddens are exactly 0
        # at init), freezing everything but dec_b3.
        hidden = 64
        self.dec_w1 = nn.Parameter(torch.randn(hidden, PLANE_CHANNELS) / math.sqrt(PLANE_CHANNELS))
        self.dec_b1 = nn.Parameter(torch.zeros(hidden))
        self.dec_w2 = nn.Parameter(torch.randn(hidden, hidden) / math.sqrt(hidden))
        self.dec_b2 = nn.Parameter(torch.zeros(hidden))
        self.dec_w3 = nn.Parameter(torch.randn(4, hidden) / math.sqrt(hidden))
        self.dec_b3 = nn.Parameter(torch.zeros(4))

        pos = grid_positions(INPUT_RES // PATCH, dim)
        self.register_buffer("patch_pos", pos, persistent=False)

    def encode_views(self, images: torch.Tensor, cam_vecs: torch.Tensor) -> torch.Tensor:
        """Images (V, H, W, 3) in [0,1], cam_vecs (V, 12) radius-normalized.

        Returns the concatenated image tokens (V * TOKENS_PER_VIEW, dim).
        """
        if images.ndim != 4 or images.shape[0] != cam_vecs.shape[0]:
            raise ValueError(f"need one camera per view; got {tuple(images.shape)} vs {tuple(cam_vecs.shape)}")
        if images.shape[1] != INPUT_RES or images.shape[2] != INPUT_RES:
            raise ValueError(f"expected {INPUT_RES}x{INPUT_RES} inputs, got {tuple(images.shape)}")
        x = images.permute(0, 3, 1, 2)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # V x 64 x dim
        tokens = tokens + self.patch_pos.to(tokens.dtype)[None]
        mod = self.cam_mod(cam_vecs.to(tokens.dtype))  # V x 2*dim
        scale, shift = mod.chunk(2, dim=-1)
        tokens = (1.0 + scale[:, None, :]) * tokens + shift[:, None, :]
        return tokens.reshape(-1, self.dim)

    def forward(self, images: torch.Tensor, cam_vecs: torch.Tensor) -> torch.Tensor:
        """Returns triplane planes (3, C, R, R), graph-connected to the model."""
        image_tokens = self.encode_views(images, cam_vecs).unsqueeze(0)
        tokens = self.plane_tokens.unsqueeze(0)
        for block in self.blocks:
            tokens = block(tokens, image_tokens)
        feats = self.head(self.head_norm(tokens))[0]  # (3*16*16, C)
        grids = feats.reshape(3, TOKEN_GRID, TOKEN_GRID, PLANE_CHANNELS).permute(0, 3, 1, 2)
        planes = torch.nn.functional.interpolate(
            grids, size=(PLANE_RES, PLANE_RES), mode="bilinear", align_corners=True
        )
        return PLANE_GAIN * planes

    def decoder_params(self) -> dict[str, torch.Tensor]:
        return {
            "dec.w1": self.dec_w1,
            "dec.b1": self.dec_b1,
            "dec.w2": self.dec_w2,
            "dec.b2": self.dec_b2,
            "dec.w3": self.dec_w3,
            "dec.b3": self.dec_b3,
        }


def create_reconstructor(seed: int = 0) -> ViewSetReconstructor:
    torch.manual_seed(seed)
    return ViewSetReconstructor()


def normalize_cams(cams: list[CameraPose]) -> torch.Tensor:
    """Radius-normalized extrinsic 12-vectors (intrinsics are never encoded)."""
    return torch.stack([torch.as_tensor(c.normalized(CANONICAL_RADIUS).vec12) for c in cams])


def trm_infer(model: ViewSetReconstructor, images: torch.Tensor, cams: list[CameraPose]) -> Triplane:
    """Build the reconstructed Triplane; density uses the model's scale/bias."""
    planes = model(images, normalize_cams(cams).to(images.dtype))
    params = {"planes": planes, **model.decoder_params()}
    return Triplane(params, density_scale=DENSITY_SCALE)


@dataclass
class ReconTrainConfig:
    steps: int = 2000
    peak_lr: float = 4e-4
    warmup_steps: int = 300
    weight_decay: float = 0.05
    adam_beta2: float = 0.95
    seed: int = 0
    rays_per_view: int = 768
    supervision_views: int = 2
    samples_per_ray: int = 48
    normal_topk: int = 16
    normal_weight: float = 0.5
    opacity_weight: float = 0.1


def lr_at(step: int, cfg: ReconTrainConfig) -> float:
    """Linear warm-up to peak, then cosine decay to zero."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    left = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(left, 1.0)))


def sample_crop_rays(
    cam: CameraPose,
    rng: np.random.Generator,
    n_rays: int,
    crop: int = INPUT_RES,
    scale_range: tuple[int, int] = (64, 128),
):
    """Rays of a random 64x64 crop from a virtual render at a random scale.

    Returns (origins, dirs) for `n_rays` rays sampled inside the crop window;
    matches cropping a full-resolution render at the same scale exactly.
    """
    scale = int(rng.integers(scale_range[0], scale_range[1] + 1))
    row0 = int(rng.integers(0, scale - crop + 1))
    col0 = int(rng.integers(0, scale - crop + 1))
    o, d = pixel_rays(cam, crop, crop, row0=row0, col0=col0, full_height=scale, full_width=scale)
    idx = rng.choice(crop * crop, size=min(n_rays, crop * crop), replace=False)
    return o.reshape(-1, 3)[idx], d.reshape(-1, 3)[idx]


def supervision_loss(
    tp: Triplane,
    scene: PrimitiveScene,
    cams: list[CameraPose],
    cfg: ReconTrainConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Crop-ray reconstruction loss against the geometry oracle."""
    settings = RenderSettings(
        samples_per_ray=cfg.samples_per_ray, normal_topk=cfg.normal_topk
    )
    dtype = tp.dtype
    total = None
    for cam in cams:
        o, d = sample_crop_rays(cam, rng, cfg.rays_per_view)
        gt = trace_rays(scene, o, d)
        out = render_rays(
            tp,
            torch.as_tensor(o, dtype=dtype),
            torch.as_tensor(d, dtype=dtype),
            settings,
        )
        albedo_gt = torch.as_tensor(gt.albedo, dtype=dtype)
        mask_gt = torch.as_tensor(gt.mask, dtype=dtype)
        normal_gt = torch.as_tensor((gt.normal + 1.0) * 0.5, dtype=dtype)
        loss = ((out["albedo"] - albedo_gt) ** 2).mean()
        fg = mask_gt > 0.5
        if fg.any():
            loss = loss + cfg.normal_weight * ((out["normal"][fg] - normal_gt[fg]) ** 2).mean()
        loss = loss + cfg.opacity_weight * ((out["opacity"] - mask_gt) ** 2).mean()
        total = loss if total is None else total + loss
    return total / len(cams)


def random_supervision_cams(rng: np.random.Generator, n: int) -> list[CameraPose]:
    return [
        CameraPose(float(rng.uniform(0.0, 360.0)), float(rng.uniform(0.0, 30.0)), CANONICAL_RADIUS)
        for _ in range(n)
    ]


def trm_train_step(
    model: ViewSetReconstructor,
    store: ParamStore,
    record,
    step: int,
    cfg: ReconTrainConfig,
) -> float:
    """One step: infer the triplane from input views, supervise novel crops.

    `record` is a dataset.SceneRecord with hires views loaded.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, "trm-step", step))
    images = torch.as_tensor(record.albedo_hi, dtype=torch.float32)
    tp = trm_infer(model, images, record.cams)
    cams = random_supervision_cams(rng, cfg.supervision_views)
    store.zero_grad()
    loss = supervision_loss(tp, record.scene, cams, cfg, rng)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"reconstruction loss non-finite at step {step}")
    loss.backward()
    # The short second-moment horizon matters: per-token plane gradients are
    # sparse, and beta2=0.999 keeps stale curvature long enough to stall the
    # decoder at the mean-color solution.
    hyper = AdamHyper(
        learning_rate=lr_at(step, cfg), beta2=cfg.adam_beta2, weight_decay=cfg.weight_decay
    )
    adam_step(store, store.grads(), hyper)
    store.zero_grad()
    return float(loss.detach())


def train_reconstructor(
    records: list,
    cfg: ReconTrainConfig,
    model: ViewSetReconstructor | None = None,
    out_dir=None,
) -> tuple[ViewSetReconstructor, list[float]]:
    if model is None:
        model = create_reconstructor(seed=derive_seed(cfg.seed, "recon-init"))
    store = ParamStore.from_module(model)
    losses = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(derive_seed(cfg.seed, "trm-pick", step))
        rec = records[int(rng.integers(len(records)))]
        losses.append(trm_train_step(model, store, rec, step, cfg))

    if out_dir is not None:
        import csv
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "train_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss"])
            for i, v in enumerate(losses):
                writer.writerow([i, f"{v:.6f}"])
        from .report import save_loss_curve

        save_loss_curve(losses, out_dir / "loss_curve.png", title="reconstructor training loss")
    return model, losses


def render_albedo_view(tp: Triplane, cam: CameraPose, res: int = INPUT_RES, samples: int = 48) -> np.ndarray:
    """Full-view albedo render as a numpy image (evaluation helper)."""
    from .triplane import render_views

    settings = RenderSettings(resolution=res, samples_per_ray=samples, normal_topk=16)
    with torch.no_grad():
        out = render_views(tp, [cam], settings, domains=("albedo",))
    return out["albedo"][0].numpy()
