"""Material fields, learnable environment, and the PBR optimization stage.

Surface properties live in multi-resolution hash-grid fields: a frozen albedo
field distilled from the refined radiance field, and a roughness/metalness
field trained here. Lighting is a single-channel magnitude grid with fixed
white chroma, prefiltered through the differentiable split-sum operators every
iteration. Geometry is frozen, so per-view G-buffers are traced once and the
whole stage runs on the cached hit points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .cameras import CameraPose
from .core import AdamHyper, ParamStore, adam_step
from .envmap import ENV_HEIGHT, ENV_WIDTH, EnvMap, studio_env
from .meshrender import mesh_hits
from .shading import shade
from .triplane import Triplane, decode
from .utils import NonFiniteError, derive_seed, srgb_encode

HASH_LEVELS = 8
HASH_BASE_RES = 4
HASH_GROWTH = 1.5
HASH_TABLE_SIZE = 2**14
HASH_FEATURES = 2
_HASH_PRIMES = (1, 2654435761, 805459861)

ROUGHNESS_RANGE = (0.0, 0.9)
METALNESS_RANGE = (0.08, 0.9)
# logit temperature for the material sigmoids: Adam moves the MLP by ~lr per
# step, and at the pinned lr of 0.1 a plain sigmoid rails against the clamp
# range within a few iterations and stops receiving gradient
RM_LOGIT_TEMPERATURE = 0.2


class HashGrid(nn.Module):
    """Multi-resolution trilinear hash encoding over [-1, 1]^3.

    Every level is spatially hashed into one shared-size table (no dense
    fallback at coarse levels; collisions are the MLP's problem).
    """

    def __init__(
        self,
        levels: int = HASH_LEVELS,
        base_res: int = HASH_BASE_RES,
        growth: float = HASH_GROWTH,
        table_size: int = HASH_TABLE_SIZE,
        features: int = HASH_FEATURES,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.resolutions = [int(math.floor(base_res * growth**l)) for l in range(levels)]
        self.table_size = table_size
        self.features = features
        self.tables = nn.Parameter(torch.empty(levels, table_size, features, dtype=dtype).uniform_(-1e-4, 1e-4))

    @property
    def out_dim(self) -> int:
        return len(self.resolutions) * self.features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = x.to(self.tables.dtype).reshape(-1, 3)
        outs = []
        for level, res in enumerate(self.resolutions):
            u = (p + 1.0) * 0.5 * res
            c0 = torch.floor(u).long().clamp(0, res - 1)
            frac = u - c0
            feats = torch.zeros(p.shape[0], self.features, dtype=self.tables.dtype)
            for corner in range(8):
                offs = torch.tensor([(corner >> k) & 1 for k in range(3)], dtype=torch.long)
                c = c0 + offs
                idx = (
                    c[:, 0] * _HASH_PRIMES[0] ^ c[:, 1] * _HASH_PRIMES[1] ^ c[:, 2] * _HASH_PRIMES[2]
                ) % self.table_size
                w = torch.ones(p.shape[0], dtype=self.tables.dtype)
                for k in range(3):
                    w = w * (frac[:, k] if offs[k] else 1.0 - frac[:, k])
                feats = feats + w.unsqueeze(-1) * self.tables[level, idx]
            outs.append(feats)
        return torch.cat(outs, dim=-1).reshape(*x.shape[:-1], self.out_dim)


def _mlp(in_dim: int, out_dim: int, hidden: int = 32, dtype: torch.dtype = torch.float64) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden, dtype=dtype),
        nn.SiLU(),
        nn.Linear(hidden, hidden, dtype=dtype),
        nn.SiLU(),
        nn.Linear(hidden, out_dim, dtype=dtype),
    )


class AlbedoField(nn.Module):
    """Hash-grid albedo in [0,1]^3; distilled once, frozen afterwards."""

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(derive_seed(seed, "albedo-field"))
        self.grid = HashGrid()
        self.mlp = _mlp(self.grid.out_dim, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(self.grid(x)))


class RmField(nn.Module):
    """Hash-grid (k_r, k_m), sigmoid-rescaled into the legal material ranges."""

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(derive_seed(seed, "rm-field"))
        self.grid = HashGrid()
        self.mlp = _mlp(self.grid.out_dim, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raw = torch.sigmoid(RM_LOGIT_TEMPERATURE * self.mlp(self.grid(x)))
        k_r = ROUGHNESS_RANGE[0] + (ROUGHNESS_RANGE[1] - ROUGHNESS_RANGE[0]) * raw[..., 0]
        k_m = METALNESS_RANGE[0] + (METALNESS_RANGE[1] - METALNESS_RANGE[0]) * raw[..., 1]
        return torch.stack([k_r, k_m], dim=-1)


class LearnableEnv(nn.Module):
    """Single-channel light magnitude on the equirect grid, chroma fixed white."""

    def __init__(self, height: int = ENV_HEIGHT, width: int = ENV_WIDTH):
        super().__init__()
        self.raw = nn.Parameter(torch.zeros(height, width, dtype=torch.float64))

    @classmethod
    def from_magnitude(cls, magnitude: torch.Tensor) -> "LearnableEnv":
        env = cls(magnitude.shape[0], magnitude.shape[1])
        mag = torch.as_tensor(magnitude, dtype=torch.float64).clamp_min(1e-6)
        with torch.no_grad():
            env.raw.copy_(torch.log(torch.expm1(mag)))
        return env

    @classmethod
    def studio_init(cls) -> "LearnableEnv":
        return cls.from_magnitude(studio_env().radiance[..., 0])

    def magnitude(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.raw)

    def effective_radiance(self) -> torch.Tensor:
        return self.magnitude().unsqueeze(-1) * torch.ones(3, dtype=torch.float64)

    def envmap(self) -> EnvMap:
        return EnvMap.from_radiance(self.effective_radiance())


def tv_reg(magnitude: torch.Tensor) -> torch.Tensor:
    """Sum of squared neighbor differences; azimuth wraps, poles clamp."""
    dh = magnitude - torch.roll(magnitude, shifts=-1, dims=1)
    dv = magnitude[1:] - magnitude[:-1]
    return (dh * dh).sum() + (dv * dv).sum()


def surface_samples(mesh, rng: np.random.Generator, count: int) -> torch.Tensor:
    """Area-weighted barycentric samples on the mesh, jittered along normals."""
    verts = mesh.vertices_np
    tris = verts[mesh.triangles]
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=-1)
    probs = areas / areas.sum()
    pick = rng.choice(len(tris), size=count, p=probs)
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=-1)
    pts = (tris[pick] * bary[..., None]).sum(axis=1)
    normals = np.cross(tris[pick, 1] - tris[pick, 0], tris[pick, 2] - tris[pick, 0])
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True).clip(1e-20)
    pts = pts + normals * rng.uniform(-0.08, 0.08, size=(count, 1))
    return torch.as_tensor(np.clip(pts, -1.0, 1.0))


def fit_albedo_field(
    tp: Triplane,
    mesh,
    seed: int = 0,
    iters: int = 300,
    batch: int = 4096,
    lr: float = 5e-3,
    freeze: bool = True,
) -> AlbedoField:
    """Distill the radiance field's albedo into a hash-grid field near the surface.

    freeze=False keeps the field trainable (the surface distillation stage
    continues to update it alongside the geometry).
    """
    albedo_field = AlbedoField(seed=seed)
    store = ParamStore.from_module(albedo_field)
    for it in range(iters):
        rng = np.random.default_rng(derive_seed(seed, "albedo-fit", it))
        pts = surface_samples(mesh, rng, batch)
        ball = torch.as_tensor(rng.uniform(-1.0, 1.0, size=(batch // 8, 3)))
        pts = torch.cat([pts, ball], dim=0)
        with torch.no_grad():
            target = decode(tp, pts.to(torch.float32))[1].to(torch.float64)
        store.zero_grad()
        loss = ((albedo_field(pts) - target) ** 2).mean()
        loss.backward()
        adam_step(store, store.grads(), AdamHyper(learning_rate=lr))
    if freeze:
        for p in albedo_field.parameters():
            p.requires_grad_(False)
    return albedo_field


@dataclass
class PbrConfig:
    iters: int = 400
    resolution: int = 64
    fov_deg: float = 50.0
    tv_weight: float = 0.01
    seed: int = 0
    lr_hash: float = 1e-4
    lr_mlp: float = 0.1
    lr_env: float = 0.01
    sds_resolution: int = 32
    sds_t_lo: float = 0.02
    sds_t_hi: float = 0.98

    def __post_init__(self) -> None:
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")


@dataclass
class ViewBuffers:
    """Frozen per-view geometry: everything shade() needs except materials."""

    camera: CameraPose
    res: int
    hit_idx: torch.Tensor  # (M,) flat pixel indices
    points: torch.Tensor  # (M, 3) float64
    normals: torch.Tensor
    views: torch.Tensor
    albedo: torch.Tensor  # frozen field, evaluated once
    reference: torch.Tensor | None = None  # (M, 3) linear target pixels


def trace_view_buffers(
    mesh,
    albedo_field: AlbedoField,
    camera: CameraPose,
    res: int,
    fov_deg: float = 50.0,
    reference: np.ndarray | None = None,
) -> ViewBuffers:
    hit, buffers = mesh_hits(mesh, camera, res, fov_deg=fov_deg)
    if buffers is None:
        raise ValueError("camera sees no triangles; cannot build view buffers")
    idx = torch.as_tensor(np.flatnonzero(hit), dtype=torch.long)
    points = buffers["points"].detach().to(torch.float64)
    normals = buffers["normal"].detach().to(torch.float64)
    views = buffers["view"].detach().to(torch.float64)
    with torch.no_grad():
        albedo = albedo_field(points)
    ref = None
    if reference is not None:
        flat = torch.as_tensor(np.asarray(reference, dtype=np.float64)).reshape(-1, 3)
        ref = flat[idx]
    return ViewBuffers(camera, res, idx, points, normals, views, albedo, ref)


def shade_buffers(vb: ViewBuffers, rm: torch.Tensor, env: EnvMap) -> torch.Tensor:
    return shade(vb.albedo, vb.normals, vb.views, rm[..., 0], rm[..., 1], env)


def compose_image(vb: ViewBuffers, values: torch.Tensor, background: float = 0.0) -> torch.Tensor:
    img = torch.full((vb.res * vb.res, 3), background, dtype=values.dtype)
    img = img.index_copy(0, vb.hit_idx, values)
    return img.reshape(vb.res, vb.res, 3)


@dataclass
class PbrResult:
    rm_field: RmField
    env: LearnableEnv
    losses: list = field(default_factory=list)


def sds_material_rig() -> list[CameraPose]:
    """The fixed views traced for score-driven material optimization."""
    from .cameras import make_camera_rig

    return make_camera_rig(elevation_deg=15.0, radius=2.0)


@dataclass
class RgbScore:
    """Frozen RGB noise predictor queried over the fixed material rig."""

    model: object
    prompt: torch.Tensor  # (L,) token ids
    cam_vecs: torch.Tensor  # (V, 12), one per traced view
    schedule: object

    @classmethod
    def from_model(cls, model, prompt, schedule=None) -> "RgbScore":
        from .schedule import DdpmSchedule

        cam_vecs = torch.stack([torch.as_tensor(c.vec12) for c in sds_material_rig()])
        return cls(
            model=model,
            prompt=torch.as_tensor(prompt, dtype=torch.long),
            cam_vecs=cam_vecs,
            schedule=schedule or DdpmSchedule(),
        )

    def eps_hat(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        with torch.no_grad():
            t_b = torch.tensor([t], dtype=torch.long)
            out = self.model(
                x_t[None].to(torch.float32), t_b, self.cam_vecs[None].to(torch.float32), self.prompt[None]
            )
            return out[0].to(x_t.dtype)


def optimize_materials(
    mesh,
    albedo_field: AlbedoField,
    mode: str,
    cfg: PbrConfig,
    refs: list | None = None,
    score=None,
) -> PbrResult:
    """Optimize the rm field and light magnitude over frozen geometry/albedo.

    photometric mode fits L2 against `refs`, a list of (camera, linear image)
    pairs; sds mode drives renders with an RGB denoiser's score residuals.
    """
    if mode == "photometric":
        if not refs:
            raise ValueError("photometric mode requires reference shaded views")
        buffers = [
            trace_view_buffers(mesh, albedo_field, cam, cfg.resolution, cfg.fov_deg, reference=img)
            for cam, img in refs
        ]
    elif mode == "sds":
        if score is None or getattr(score, "model", None) is None:
            raise ValueError("sds mode requires a trained RGB denoiser checkpoint")
        from .denoiser import IMAGE_RES

        if cfg.sds_resolution != IMAGE_RES:
            raise ValueError(
                f"sds mode renders at the score model's resolution {IMAGE_RES}, got {cfg.sds_resolution}"
            )
        buffers = [
            trace_view_buffers(mesh, albedo_field, cam, cfg.sds_resolution, cfg.fov_deg)
            for cam in sds_material_rig()
        ]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    rm_field = RmField(seed=cfg.seed)
    env = LearnableEnv.studio_init()
    store = ParamStore(
        {
            **{f"rm.{k}": v for k, v in rm_field.named_parameters()},
            "env.raw": env.raw,
        },
        lr_scales=_pbr_lr_scales(rm_field, cfg),
    )
    hyper = AdamHyper(learning_rate=1.0)

    losses: list[float] = []
    for it in range(cfg.iters):
        store.zero_grad()
        env_map = env.envmap()
        if mode == "photometric":
            loss = torch.zeros((), dtype=torch.float64)
            for vb in buffers:
                out = shade_buffers(vb, rm_field(vb.points), env_map)
                loss = loss + ((out - vb.reference) ** 2).mean()
            loss = loss / len(buffers) + cfg.tv_weight * tv_reg(env.magnitude())
            loss.backward()
        else:
            loss = _sds_material_step(buffers, rm_field, env, env_map, score, cfg, it)
        if not math.isfinite(float(loss)):
            raise NonFiniteError(f"material loss non-finite at iteration {it}")
        adam_step(store, store.grads(), hyper)
        losses.append(float(loss))
    return PbrResult(rm_field=rm_field, env=env, losses=losses)


def _pbr_lr_scales(rm_field: RmField, cfg: PbrConfig) -> dict[str, float]:
    scales = {}
    for name, _ in rm_field.named_parameters():
        scales[f"rm.{name}"] = cfg.lr_hash if name.startswith("grid.") else cfg.lr_mlp
    scales["env.raw"] = cfg.lr_env
    return scales


def _sds_material_step(buffers, rm_field, env, env_map, score, cfg, iteration) -> torch.Tensor:
    """Score-residual step on tonemap-free shaded renders (Eq. 2 form)."""
    from .distill import SdsConfig, draw_timestep_and_noise

    renders = []
    for vb in buffers:
        out = shade_buffers(vb, rm_field(vb.points), env_map)
        img = compose_image(vb, out.clamp(0.0, 1.0))
        renders.append(img.permute(2, 0, 1))
    x = torch.stack(renders).to(torch.float32) * 2.0 - 1.0

    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "pbr-sds", iteration))
    sds_cfg = SdsConfig(t_lo=cfg.sds_t_lo, t_hi=cfg.sds_t_hi, t_hi_final=cfg.sds_t_hi)
    t, eps = draw_timestep_and_noise(gen, sds_cfg, score.schedule, iteration, max(cfg.iters, 1), x.shape, x.dtype)
    sa, sn = score.schedule.gather(t, dtype=x.dtype)
    x_t = sa * x.detach() + sn * eps
    eps_hat = score.eps_hat(x_t, t)
    grad_x = (eps_hat - eps) / x[0].numel()
    if not torch.isfinite(grad_x).all():
        raise NonFiniteError(f"sds residual non-finite at iteration {iteration}")
    x.backward(gradient=grad_x)
    reg = cfg.tv_weight * tv_reg(env.magnitude())
    reg.backward()
    return (grad_x.detach() ** 2).mean() * x[0].numel()


def relight(
    mesh,
    albedo_field: AlbedoField,
    rm_field: RmField,
    env: EnvMap,
    camera: CameraPose,
    res: int = 64,
    fov_deg: float = 50.0,
) -> dict:
    """Shade frozen materials under a new environment; black background.

    Returns linear radiance, the clamp+sRGB tonemapped image, and the
    light-independent albedo/material channels.
    """
    vb = trace_view_buffers(mesh, albedo_field, camera, res, fov_deg)
    with torch.no_grad():
        rm = rm_field(vb.points)
        shaded = shade_buffers(vb, rm, env)
        linear = compose_image(vb, shaded).numpy()
        albedo = compose_image(vb, vb.albedo, background=1.0).numpy()
        rm_img = compose_image(
            vb, torch.cat([rm, torch.zeros_like(rm[..., :1])], dim=-1)
        ).numpy()
    mask = np.zeros((res * res,), dtype=np.float64)
    mask[vb.hit_idx.numpy()] = 1.0
    return {
        "linear": linear,
        "image": srgb_encode(np.clip(linear, 0.0, 1.0)),
        "albedo": albedo,
        "materials": rm_img,
        "mask": mask.reshape(res, res),
    }


def bake_textures(mesh, albedo_field: AlbedoField, rm_field: RmField, res: int = 256) -> dict:
    """World-space triplanar bake: orthographic raycasts along each axis.

    Returns {albedo,orm}_{x,y,z} images; ORM packs (occlusion=1, k_r, k_m).
    Pixels whose ray misses the mesh stay mid-gray.
    """
    from .meshrender import raycast

    verts = mesh.vertices_np
    tris = mesh.triangles
    images = {}
    lin = np.linspace(-1.0, 1.0, res)
    uu, vv = np.meshgrid(lin, lin, indexing="ij")
    flat_uv = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)
    for axis, name in enumerate("xyz"):
        origins = np.zeros((res * res, 3))
        origins[:, axis] = 2.0
        other = [i for i in range(3) if i != axis]
        origins[:, other[0]] = flat_uv[:, 0]
        origins[:, other[1]] = flat_uv[:, 1]
        dirs = np.zeros_like(origins)
        dirs[:, axis] = -1.0
        hit_tri, hit_t = raycast(verts, tris, origins, dirs)
        hit = hit_tri >= 0
        points = origins[hit] + dirs[hit] * hit_t[hit, None]
        albedo = np.full((res * res, 3), 0.5)
        orm = np.full((res * res, 3), 0.5)
        if hit.any():
            pts = torch.as_tensor(points)
            with torch.no_grad():
                albedo[hit] = albedo_field(pts).numpy()
                rm = rm_field(pts).numpy()
            orm[hit] = np.stack([np.ones(len(rm)), rm[:, 0], rm[:, 1]], axis=-1)
        images[f"albedo_{name}"] = albedo.reshape(res, res, 3)
        images[f"orm_{name}"] = orm.reshape(res, res, 3)
    return images
