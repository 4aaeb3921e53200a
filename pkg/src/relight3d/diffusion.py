"""Training loop and ancestral sampler for the multi-view denoiser.

Diffusion space is [-1, 1]: albedo images map via 2*img - 1, normal images are
already the encoded normals, whose [-1, 1] values are the world components.
One timestep is drawn per object, one noise sample per image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import AdamHyper, ParamStore, adam_step
from .dataset import load_scene
from .denoiser import (
    IMAGE_RES,
    N_IMAGES,
    N_VIEWS,
    MultiViewDenoiser,
    RgbDenoiser,
    create_denoiser,
    create_rgb_denoiser,
)
from .schedule import DdpmSchedule, ddpm_forward, strided_timesteps
from .utils import NonFiniteError, derive_seed

CAMERA_LR_SCALE = 10.0


@dataclass
class TrainConfig:
    steps: int = 3000
    objects_per_batch: int = 2
    learning_rate: float = 1e-4
    seed: int = 0
    log_every: int = 50


@dataclass
class SceneTensors:
    """One scene packed for diffusion: x0 (8,3,H,W), cams (4,12), prompt (L,)."""

    x0: torch.Tensor
    cams: torch.Tensor
    prompt: torch.Tensor


def pack_scene(root, index: int) -> SceneTensors:
    rec = load_scene(root, index)
    albedo = torch.as_tensor(rec.albedo, dtype=torch.float32).permute(0, 3, 1, 2) * 2.0 - 1.0
    normal = torch.as_tensor(rec.normal_img, dtype=torch.float32).permute(0, 3, 1, 2) * 2.0 - 1.0
    x0 = torch.cat([albedo, normal], dim=0)
    cams = torch.stack([torch.as_tensor(c.vec12) for c in rec.cams])
    prompt = torch.tensor(rec.tokens, dtype=torch.long)
    return SceneTensors(x0=x0, cams=cams, prompt=prompt)


def load_pack(root, indices: list[int]) -> list[SceneTensors]:
    return [pack_scene(root, i) for i in indices]


DOMAIN_LABELS = torch.tensor([0] * N_VIEWS + [1] * N_VIEWS, dtype=torch.long)


def make_batch(scenes: list[SceneTensors]):
    x0 = torch.stack([s.x0 for s in scenes])
    cams = torch.stack([s.cams for s in scenes])
    prompt = torch.stack([s.prompt for s in scenes])
    domains = DOMAIN_LABELS.unsqueeze(0).expand(len(scenes), N_IMAGES)
    return x0, cams, domains, prompt


def noise_prediction_loss(
    model: MultiViewDenoiser,
    scenes: list[SceneTensors],
    schedule: DdpmSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    x0, cams, domains, prompt = make_batch(scenes)
    B = x0.shape[0]
    t = torch.randint(0, schedule.T, (B,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = ddpm_forward(x0, t, eps, schedule)
    eps_hat = model(x_t, t, cams, domains, prompt)
    return ((eps_hat - eps) ** 2).mean()


def train_step(
    model,
    store: ParamStore,
    scenes: list[SceneTensors],
    schedule: DdpmSchedule,
    gen: torch.Generator,
    hyper: AdamHyper,
    loss_fn=noise_prediction_loss,
) -> float:
    store.zero_grad()
    loss = loss_fn(model, scenes, schedule, gen)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"training loss non-finite at step {store.step_count + 1}")
    loss.backward()
    adam_step(store, store.grads(), hyper)
    store.zero_grad()
    return float(loss.detach())


def camera_lr_scales(model: MultiViewDenoiser) -> dict[str, float]:
    return {name: CAMERA_LR_SCALE for name, _ in model.named_parameters() if name.startswith("camera_mlp")}


def train_denoiser(
    data_root,
    train_indices: list[int],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    model: MultiViewDenoiser | None = None,
) -> tuple[MultiViewDenoiser, list[float]]:
    """Train on the listed scenes; returns the model and per-step losses.

    When `out_dir` is given, writes train_log.csv and a loss-curve figure.
    """
    if model is None:
        model = create_denoiser(seed=derive_seed(config.seed, "denoiser-init"))
    store = ParamStore.from_module(model, lr_scales=camera_lr_scales(model))
    hyper = AdamHyper(learning_rate=config.learning_rate)
    schedule = DdpmSchedule()
    scenes = load_pack(data_root, train_indices)

    losses: list[float] = []
    for step in range(config.steps):
        gen = torch.Generator().manual_seed(derive_seed(config.seed, "anmvm-step", step))
        pick = torch.randperm(len(scenes), generator=gen)[: config.objects_per_batch].tolist()
        losses.append(train_step(model, store, [scenes[i] for i in pick], schedule, gen, hyper))

    if out_dir is not None:
        _write_train_log(losses, out_dir)
    return model, losses


def _write_train_log(losses: list[float], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, f"{v:.6f}"])
    from .report import save_loss_curve

    save_loss_curve(losses, out_dir / "loss_curve.png", title="denoiser training loss")


def pack_scene_shaded(root, index: int, env) -> SceneTensors:
    """Shaded RGB views of a dataset scene as a (4, 3, H, W) stack.

    Linear radiance is clamped to [0, 1] before the [-1, 1] mapping, matching
    what the material stage feeds back through the same score model.
    """
    from .scenes import render_shaded

    rec = load_scene(root, index)
    imgs = np.stack([render_shaded(rec.scene, cam, env, IMAGE_RES, IMAGE_RES) for cam in rec.cams])
    x0 = torch.as_tensor(np.clip(imgs, 0.0, 1.0), dtype=torch.float32).permute(0, 3, 1, 2) * 2.0 - 1.0
    cams = torch.stack([torch.as_tensor(c.vec12) for c in rec.cams])
    prompt = torch.tensor(rec.tokens, dtype=torch.long)
    return SceneTensors(x0=x0, cams=cams, prompt=prompt)


def rgb_noise_prediction_loss(
    model: RgbDenoiser,
    scenes: list[SceneTensors],
    schedule: DdpmSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    x0 = torch.stack([s.x0 for s in scenes])
    cams = torch.stack([s.cams for s in scenes])
    prompt = torch.stack([s.prompt for s in scenes])
    t = torch.randint(0, schedule.T, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = ddpm_forward(x0, t, eps, schedule)
    eps_hat = model(x_t, t, cams, prompt)
    return ((eps_hat - eps) ** 2).mean()


def train_rgb_denoiser(
    data_root,
    train_indices: list[int],
    config: TrainConfig,
    env=None,
    out_dir: str | Path | None = None,
    model: RgbDenoiser | None = None,
) -> tuple[RgbDenoiser, list[float]]:
    """Train the RGB score model on shaded renders of the listed scenes."""
    if env is None:
        from .envmap import studio_env

        env = studio_env()
    if model is None:
        model = create_rgb_denoiser(seed=derive_seed(config.seed, "rgb-denoiser-init"))
    store = ParamStore.from_module(model, lr_scales=camera_lr_scales(model))
    hyper = AdamHyper(learning_rate=config.learning_rate)
    schedule = DdpmSchedule()
    scenes = [pack_scene_shaded(data_root, i, env) for i in train_indices]

    losses: list[float] = []
    for step in range(config.steps):
        gen = torch.Generator().manual_seed(derive_seed(config.seed, "rgb-step", step))
        pick = torch.randperm(len(scenes), generator=gen)[: config.objects_per_batch].tolist()
        losses.append(
            train_step(model, store, [scenes[i] for i in pick], schedule, gen, hyper, loss_fn=rgb_noise_prediction_loss)
        )

    if out_dir is not None:
        _write_train_log(losses, out_dir)
    return model, losses


def heldout_loss(
    model: MultiViewDenoiser,
    data_root,
    indices: list[int],
    seed: int = 1234,
    repeats: int = 4,
) -> float:
    """Noise-prediction MSE on held-out scenes with fixed noise draws."""
    schedule = DdpmSchedule()
    scenes = load_pack(data_root, indices)
    total = 0.0
    count = 0
    with torch.no_grad():
        for r in range(repeats):
            for i, s in enumerate(scenes):
                gen = torch.Generator().manual_seed(derive_seed(seed, "heldout", r, i))
                total += float(noise_prediction_loss(model, [s], schedule, gen))
                count += 1
    return total / count


def sample_multiview(
    model: MultiViewDenoiser,
    prompt: torch.Tensor,
    cams: torch.Tensor,
    schedule: DdpmSchedule,
    steps: int = 250,
    seed: int = 0,
) -> torch.Tensor:
    """Ancestral DDPM sampling of the joint 8-image stack.

    prompt: (L,) and cams: (4, 12) for a single object. Returns (8, 3, H, W)
    images in [0, 1], deterministic per seed.
    """
    from .denoiser import IMAGE_RES

    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, N_IMAGES, 3, IMAGE_RES, IMAGE_RES, generator=gen)
    prompt_b = prompt.unsqueeze(0)
    cams_b = cams.unsqueeze(0)
    domains = DOMAIN_LABELS.unsqueeze(0)
    ts = strided_timesteps(schedule, steps)
    ab = schedule.alpha_bar
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_tensor = torch.tensor([t])
            eps_hat = model(x, t_tensor, cams_b, domains, prompt_b)
            ab_t = float(ab[t])
            ab_prev = float(ab[ts[i + 1]]) if i + 1 < len(ts) else 1.0
            alpha_eff = ab_t / ab_prev
            mean = (x - (1.0 - alpha_eff) / (1.0 - ab_t) ** 0.5 * eps_hat) / alpha_eff**0.5
            if i + 1 < len(ts):
                var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha_eff)
                noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
                x = mean + var**0.5 * noise
            else:
                x = mean
    return (x[0].clamp(-1.0, 1.0) + 1.0) * 0.5
