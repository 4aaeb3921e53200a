"""Score distillation refinement of a triplane field.

Four albedo and four normal views are rendered at the diffusion working
resolution, noised, and handed to a frozen score source (a trained multi-view
denoiser or an analytic point-mass oracle). The weighted residual
w(t) * (eps_hat - eps) is injected as the gradient of the rendered images, so
the score model itself never receives gradient.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .cameras import CameraPose
from .core import AdamHyper, ParamStore, adam_step
from .denoiser import MultiViewDenoiser
from .diffusion import DOMAIN_LABELS
from .materials import AlbedoField, fit_albedo_field
from .meshrender import mesh_render
from .schedule import DdpmSchedule
from .tetmesh import TetGrid, TriMesh, density_to_sdf_init, marching_tets
from .triplane import RenderSettings, Triplane, render_views
from .utils import NonFiniteError, derive_seed, torch_generator

ALBEDO_WEIGHT = 0.8
NORMAL_WEIGHT = 0.2


@dataclass
class SdsConfig:
    t_lo: float = 0.02
    t_hi: float = 0.98
    t_hi_final: float = 0.5  # upper bound anneals linearly to this
    albedo_weight: float = ALBEDO_WEIGHT
    normal_weight: float = NORMAL_WEIGHT
    iters_nerf: int = 600
    iters_dmtet: int = 300
    unsharp_last: int = 100
    unsharp_sigma: float = 1.0
    unsharp_amount: float = 0.5
    lr_nerf: float = 0.01
    lr_dmtet: float = 0.01
    azimuth_jitter_deg: float = 45.0
    resolution: int = 32
    samples_per_ray: int = 48
    normal_topk: int = 16
    skip_abort_fraction: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.t_lo < self.t_hi <= 1.0):
            raise ValueError(f"need 0 <= t_lo < t_hi <= 1, got [{self.t_lo}, {self.t_hi}]")
        if self.albedo_weight <= 0 or self.normal_weight <= 0:
            raise ValueError("domain weights must be positive")

    def t_upper(self, iteration: int, total_iters: int) -> float:
        frac = iteration / max(1, total_iters - 1)
        return self.t_hi + (self.t_hi_final - self.t_hi) * min(1.0, frac)


@dataclass
class ScoreSource:
    """Frozen noise predictor: a trained denoiser or a point-mass oracle.

    For the oracle, the data distribution is a delta at `targets`, whose exact
    posterior noise estimate is eps_hat = (x_t - sqrt(ab)*x*) / sqrt(1-ab).
    """

    kind: str  # "model" | "oracle"
    schedule: DdpmSchedule = field(default_factory=DdpmSchedule)
    model: MultiViewDenoiser | None = None
    prompt: torch.Tensor | None = None  # (L,) token ids, model mode
    targets: torch.Tensor | None = None  # (8, 3, H, W) in [-1, 1], oracle mode

    def __post_init__(self):
        if self.kind == "model":
            if self.model is None or self.prompt is None:
                raise ValueError("model score needs model and prompt")
        elif self.kind == "oracle":
            if self.targets is None:
                raise ValueError("oracle score needs target images")
        else:
            raise ValueError(f"unknown score kind {self.kind!r}")

    def eps_hat(self, x_t: torch.Tensor, t: int, cam_vecs: torch.Tensor) -> torch.Tensor:
        """x_t: (8, 3, H, W); cam_vecs: (4, 12). Evaluated without gradients."""
        with torch.no_grad():
            if self.kind == "oracle":
                if self.targets.shape != x_t.shape:
                    raise ValueError(
                        f"oracle targets {tuple(self.targets.shape)} do not match renders {tuple(x_t.shape)}"
                    )
                sa, sn = self.schedule.gather(t, dtype=x_t.dtype)
                return (x_t - sa * self.targets.to(x_t.dtype)) / sn
            labels = DOMAIN_LABELS.unsqueeze(0)
            t_b = torch.tensor([t], dtype=torch.long)
            out = self.model(
                x_t[None].to(torch.float32),
                t_b,
                cam_vecs[None].to(torch.float32),
                labels,
                self.prompt[None],
            )
            return out[0].to(x_t.dtype)


def make_oracle_score(albedo: torch.Tensor, normal: torch.Tensor, schedule: DdpmSchedule | None = None) -> ScoreSource:
    """Targets from per-view albedo/normal images (V, H, W, 3) in [0, 1]."""
    stack = torch.cat([albedo, normal], dim=0).permute(0, 3, 1, 2) * 2.0 - 1.0
    return ScoreSource(kind="oracle", schedule=schedule or DdpmSchedule(), targets=stack)


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding; img (..., H, W, C)."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=img.dtype)
    kernel = torch.exp(-0.5 * (xs / sigma) ** 2)
    kernel = kernel / kernel.sum()
    lead = img.shape[:-3]
    h, w, c = img.shape[-3:]
    x = img.reshape(-1, h, w, c).permute(0, 3, 1, 2)
    kh = kernel.reshape(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = kernel.reshape(1, 1, 1, -1).expand(c, 1, 1, -1)
    x = torch.nn.functional.pad(x, (0, 0, radius, radius), mode="replicate")
    x = torch.nn.functional.conv2d(x, kh, groups=c)
    x = torch.nn.functional.pad(x, (radius, radius, 0, 0), mode="replicate")
    x = torch.nn.functional.conv2d(x, kw, groups=c)
    return x.permute(0, 2, 3, 1).reshape(*lead, h, w, c)


def unsharp(img: torch.Tensor, sigma: float = 1.0, amount: float = 0.5) -> torch.Tensor:
    """clamp(img + amount * (img - blur(img, sigma)), 0, 1)."""
    return torch.clamp(img + amount * (img - gaussian_blur(img, sigma)), 0.0, 1.0)


def render_domain_stack(tp: Triplane, cams: list[CameraPose], cfg: SdsConfig, sharpen: bool) -> torch.Tensor:
    """Render 4 albedo + 4 normal images as one (8, 3, H, W) batch in [0, 1]."""
    settings = RenderSettings(
        resolution=cfg.resolution,
        samples_per_ray=cfg.samples_per_ray,
        normal_topk=cfg.normal_topk,
    )
    out = render_views(tp, cams, settings, domains=("albedo", "normal"))
    stack = torch.cat([out["albedo"], out["normal"]], dim=0)
    if sharpen:
        stack = unsharp(stack, cfg.unsharp_sigma, cfg.unsharp_amount)
    return stack.permute(0, 3, 1, 2)


def score_residuals(
    x: torch.Tensor,
    eps_hat: torch.Tensor,
    eps: torch.Tensor,
    cfg: SdsConfig,
) -> torch.Tensor:
    """The gradient injected at the rendered images (w(t) = 1).

    First 4 images are albedo, last 4 normal; each residual is scaled by its
    domain weight, so the pixel gradient scales exactly with that weight.
    """
    r = eps_hat - eps
    weights = torch.tensor(
        [cfg.albedo_weight] * 4 + [cfg.normal_weight] * 4, dtype=r.dtype
    ).reshape(8, 1, 1, 1)
    return r * weights / x[0].numel()


def draw_timestep_and_noise(
    gen: torch.Generator,
    cfg: SdsConfig,
    schedule: DdpmSchedule,
    iteration: int,
    total_iters: int,
    shape,
    dtype,
) -> tuple[int, torch.Tensor]:
    """One shared timestep and per-image noise, in a fixed draw order."""
    lo = int(cfg.t_lo * schedule.T)
    hi = max(lo + 1, int(cfg.t_upper(iteration, total_iters) * schedule.T))
    t = int(torch.randint(lo, hi, (1,), generator=gen).item())
    eps = torch.randn(shape, generator=gen, dtype=dtype)
    return t, eps


@dataclass
class SdsStepResult:
    pseudo_loss: float
    timestep: int
    skipped: bool


def _score_gradient(
    x: torch.Tensor,
    score: ScoreSource,
    cams: list[CameraPose],
    cfg: SdsConfig,
    iteration: int,
    total_iters: int,
    gen: torch.Generator,
) -> tuple[torch.Tensor, int, float]:
    """Noise the renders, query the score, return (pixel gradient, t, pseudo-loss)."""
    schedule = score.schedule
    t, eps = draw_timestep_and_noise(gen, cfg, schedule, iteration, total_iters, x.shape, x.dtype)
    sa, sn = schedule.gather(t, dtype=x.dtype)
    x_t = sa * x.detach() + sn * eps
    cam_vecs = torch.stack([torch.as_tensor(c.vec12) for c in cams])
    eps_hat = score.eps_hat(x_t, t, cam_vecs)
    grad_x = score_residuals(x, eps_hat, eps, cfg)
    if score.kind == "oracle":
        pseudo = float(((x.detach() - score.targets.to(x.dtype)) ** 2).mean())
    else:
        pseudo = float((grad_x.detach() ** 2).mean())
    return grad_x, t, pseudo


def _apply_gradient(
    x: torch.Tensor,
    grad_x: torch.Tensor,
    t: int,
    pseudo: float,
    store: ParamStore,
    learning_rate: float,
) -> SdsStepResult:
    if not bool(torch.isfinite(grad_x).all()) or not math.isfinite(pseudo):
        return SdsStepResult(pseudo_loss=float("nan"), timestep=t, skipped=True)
    store.zero_grad()
    x.backward(gradient=grad_x)
    adam_step(store, store.grads(), AdamHyper(learning_rate=learning_rate))
    store.zero_grad()
    return SdsStepResult(pseudo_loss=pseudo, timestep=t, skipped=False)


def sds_step(
    tp: Triplane,
    score: ScoreSource,
    store: ParamStore,
    cams: list[CameraPose],
    cfg: SdsConfig,
    iteration: int,
    total_iters: int,
    base_seed: int,
    learning_rate: float,
) -> SdsStepResult:
    """One distillation update; deterministic given (base_seed, iteration)."""
    gen = torch_generator(derive_seed(base_seed, "sds-step", iteration))
    sharpen = cfg.unsharp_last > 0 and iteration >= total_iters - cfg.unsharp_last
    x01 = render_domain_stack(tp, cams, cfg, sharpen)
    x = x01 * 2.0 - 1.0
    grad_x, t, pseudo = _score_gradient(x, score, cams, cfg, iteration, total_iters, gen)
    return _apply_gradient(x, grad_x, t, pseudo, store, learning_rate)


def jittered_rig(base_cams: list[CameraPose], offset_deg: float) -> list[CameraPose]:
    return [
        CameraPose(c.azimuth_deg + offset_deg, c.elevation_deg, c.radius) for c in base_cams
    ]


def refine_nerf(
    tp: Triplane,
    score: ScoreSource,
    cams: list[CameraPose],
    cfg: SdsConfig,
    seed: int = 0,
    iters: int | None = None,
    out_dir=None,
) -> tuple[Triplane, list[float]]:
    """Distillation on the volume field; returns (tp, per-iteration pseudo-loss).

    Camera azimuth jitter only applies with a model score: oracle targets are
    locked to the given rig, so jitter would supervise views against the wrong
    images.
    """
    n = cfg.iters_nerf if iters is None else iters
    store = tp.param_store()
    losses: list[float] = []
    skipped = 0
    for it in range(n):
        rig = cams
        if score.kind == "model" and cfg.azimuth_jitter_deg > 0:
            jit_gen = torch_generator(derive_seed(seed, "sds-jitter", it))
            off = (torch.rand((), generator=jit_gen).item() * 2.0 - 1.0) * cfg.azimuth_jitter_deg
            rig = jittered_rig(cams, off)
        res = sds_step(tp, score, store, rig, cfg, it, n, seed, cfg.lr_nerf)
        if res.skipped:
            skipped += 1
            if skipped > cfg.skip_abort_fraction * n:
                raise NonFiniteError(
                    f"aborting: {skipped} non-finite distillation steps out of {it + 1}"
                )
            losses.append(losses[-1] if losses else float("nan"))
        else:
            losses.append(res.pseudo_loss)
    if out_dir is not None:
        write_loss_log(losses, out_dir)
    return tp, losses


@dataclass
class DmtetState:
    """Surface stage: grid sdf values plus a surface albedo field, both trainable."""

    grid: TetGrid
    sdf: torch.Tensor  # (n_grid_vertices,), requires_grad
    albedo_field: AlbedoField

    @classmethod
    def from_triplane(
        cls, tp: Triplane, resolution: int = 32, seed: int = 0, albedo_iters: int = 300
    ) -> "DmtetState":
        grid = TetGrid.build(resolution)
        sdf = density_to_sdf_init(tp, grid)
        mesh = marching_tets(grid, sdf)
        albedo_field = fit_albedo_field(tp, mesh, seed=seed, iters=albedo_iters, freeze=False)
        return cls(grid=grid, sdf=sdf.requires_grad_(True), albedo_field=albedo_field)

    def mesh(self) -> TriMesh:
        return marching_tets(self.grid, self.sdf)

    def param_store(self) -> ParamStore:
        params = {"sdf": self.sdf}
        params.update({f"albedo.{k}": v for k, v in self.albedo_field.named_parameters()})
        return ParamStore(params)


def mesh_domain_stack(
    mesh: TriMesh, albedo_field, cams: list[CameraPose], cfg: SdsConfig, sharpen: bool
) -> torch.Tensor:
    """Ray-traced 4 albedo + 4 normal views as one (8, 3, H, W) batch in [0, 1].

    Misses render white albedo and zero normals, so the normal encoding
    (n + 1) / 2 lands on the same 0.5 background the denoiser was trained on.
    """
    albedos, normals = [], []
    for cam in cams:
        gb = mesh_render(mesh, albedo_field, cam, cfg.resolution)
        albedos.append(gb.albedo)
        normals.append((gb.normal + 1.0) * 0.5)
    stack = torch.stack(albedos + normals, dim=0)
    if sharpen:
        stack = unsharp(stack, cfg.unsharp_sigma, cfg.unsharp_amount)
    return stack.permute(0, 3, 1, 2)


def sds_mesh_step(
    state: DmtetState,
    score: ScoreSource,
    store: ParamStore,
    cams: list[CameraPose],
    cfg: SdsConfig,
    iteration: int,
    total_iters: int,
    base_seed: int,
    learning_rate: float,
) -> SdsStepResult:
    """One surface-stage update: extract, render, inject the score residual.

    Geometry gradient reaches the sdf through crossing positions and the
    interpolated shading normals; visibility (the hit mask) stays fixed within
    the step, so silhouette growth is driven by the sdf moving crossings, not
    by mask gradients.
    """
    gen = torch_generator(derive_seed(base_seed, "sds-step", iteration))
    sharpen = cfg.unsharp_last > 0 and iteration >= total_iters - cfg.unsharp_last
    mesh = state.mesh()
    if len(mesh.triangles) == 0:
        raise RuntimeError(
            f"surface collapsed: marching tets produced 0 triangles at iteration {iteration}; "
            "sdf no longer crosses zero inside the grid"
        )
    x01 = mesh_domain_stack(mesh, state.albedo_field, cams, cfg, sharpen)
    x = x01 * 2.0 - 1.0
    grad_x, t, pseudo = _score_gradient(x, score, cams, cfg, iteration, total_iters, gen)
    return _apply_gradient(x, grad_x, t, pseudo, store, learning_rate)


def refine_dmtet(
    state: DmtetState,
    score: ScoreSource,
    cams: list[CameraPose],
    cfg: SdsConfig,
    seed: int = 0,
    iters: int | None = None,
    out_dir=None,
) -> tuple[DmtetState, list[float]]:
    """Distillation on the extracted surface; returns (state, pseudo-losses)."""
    n = cfg.iters_dmtet if iters is None else iters
    store = state.param_store()
    losses: list[float] = []
    skipped = 0
    for it in range(n):
        rig = cams
        if score.kind == "model" and cfg.azimuth_jitter_deg > 0:
            jit_gen = torch_generator(derive_seed(seed, "sds-jitter", it))
            off = (torch.rand((), generator=jit_gen).item() * 2.0 - 1.0) * cfg.azimuth_jitter_deg
            rig = jittered_rig(cams, off)
        res = sds_mesh_step(state, score, store, rig, cfg, it, n, seed, cfg.lr_dmtet)
        if res.skipped:
            skipped += 1
            if skipped > cfg.skip_abort_fraction * n:
                raise NonFiniteError(
                    f"aborting: {skipped} non-finite distillation steps out of {it + 1}"
                )
            losses.append(losses[-1] if losses else float("nan"))
        else:
            losses.append(res.pseudo_loss)
    if out_dir is not None:
        write_loss_log(losses, out_dir, stem="sds_dmtet")
    return state, losses


def write_loss_log(losses: list[float], out_dir, stem: str = "sds") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "pseudo_loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, f"{v:.8f}"])
    from .report import save_loss_curve

    save_loss_curve(losses, out_dir / f"{stem}_curve.png", title="distillation pseudo-loss")


def window_non_increasing(values: list[float], window: int = 50, tolerance: float = 0.05) -> bool:
    """values[i + window] <= values[i] * (1 + tolerance) for every valid i."""
    for i in range(len(values) - window):
        if values[i + window] > values[i] * (1.0 + tolerance):
            return False
    return True
