"""Triplane neural field and differentiable volume renderer.

A field is three C-channel feature planes plus a small MLP decoder with a
softplus density head and a sigmoid albedo head. Density support is the unit
ball: samples outside it contribute nothing, so empty space stays empty
regardless of what the decoder emits for the zero feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .cameras import DEFAULT_FOV_DEG, CameraPose, pixel_rays
from .core import ParamStore

PLANE_CHANNELS = 16
PLANE_RES = 32
DECODER_HIDDEN = 64


class Triplane:
    """Three feature planes (3, C, R, R) and a 2-hidden-layer decoder MLP."""

    def __init__(self, params: dict[str, torch.Tensor], density_scale: float = 1.0):
        required = {"planes", "dec.w1", "dec.b1", "dec.w2", "dec.b2", "dec.w3", "dec.b3"}
        missing = required - set(params)
        if missing:
            raise KeyError(f"triplane params missing {sorted(missing)}")
        self.params = params
        self.density_scale = density_scale

    @classmethod
    def create(
        cls,
        seed: int = 0,
        channels: int = PLANE_CHANNELS,
        resolution: int = PLANE_RES,
        hidden: int = DECODER_HIDDEN,
        plane_std: float = 0.1,
        dtype: torch.dtype = torch.float32,
        density_scale: float = 1.0,
    ) -> "Triplane":
        gen = torch.Generator().manual_seed(seed)

        def rand(*shape, std):
            return (torch.randn(*shape, generator=gen, dtype=torch.float64) * std).to(dtype)

        params = {
            "planes": rand(3, channels, resolution, resolution, std=plane_std),
            "dec.w1": rand(hidden, channels, std=1.0 / math.sqrt(channels)),
            "dec.b1": torch.zeros(hidden, dtype=dtype),
            "dec.w2": rand(hidden, hidden, std=1.0 / math.sqrt(hidden)),
            "dec.b2": torch.zeros(hidden, dtype=dtype),
            # zero-init final layer: neutral field (sigma = softplus(0), gray albedo)
            "dec.w3": torch.zeros(4, hidden, dtype=dtype),
            "dec.b3": torch.zeros(4, dtype=dtype),
        }
        for p in params.values():
            p.requires_grad_(True)
        return cls(params, density_scale=density_scale)

    @property
    def resolution(self) -> int:
        return self.params["planes"].shape[-1]

    @property
    def channels(self) -> int:
        return self.params["planes"].shape[1]

    @property
    def dtype(self) -> torch.dtype:
        return self.params["planes"].dtype

    def param_store(self, lr_scales: dict[str, float] | None = None) -> ParamStore:
        return ParamStore(self.params, lr_scales=lr_scales)

    def detached_copy(self) -> "Triplane":
        params = {k: v.detach().clone().requires_grad_(True) for k, v in self.params.items()}
        return Triplane(params, density_scale=self.density_scale)

    def to_dtype(self, dtype: torch.dtype) -> "Triplane":
        params = {k: v.detach().clone().to(dtype).requires_grad_(True) for k, v in self.params.items()}
        return Triplane(params, density_scale=self.density_scale)


def _bilinear_plane(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample a (C, R, R) plane at continuous (row=v, col=u) in [0, R-1]."""
    R = plane.shape[-1]
    u0 = u.floor().clamp(0, R - 2)
    v0 = v.floor().clamp(0, R - 2)
    fu = (u - u0).clamp(0.0, 1.0)
    fv = (v - v0).clamp(0.0, 1.0)
    u0l, v0l = u0.long(), v0.long()
    p00 = plane[:, v0l, u0l]
    p01 = plane[:, v0l, u0l + 1]
    p10 = plane[:, v0l + 1, u0l]
    p11 = plane[:, v0l + 1, u0l + 1]
    w00 = (1 - fv) * (1 - fu)
    w01 = (1 - fv) * fu
    w10 = fv * (1 - fu)
    w11 = fv * fu
    return (p00 * w00 + p01 * w01 + p10 * w10 + p11 * w11).transpose(0, 1)  # (N, C)


def sample_triplane(tp: Triplane, p: torch.Tensor) -> torch.Tensor:
    """Sum of bilinear samples of the three planes at points p (..., 3) in [-1,1]^3.

    Points outside the unit cube return a zero feature. Grid node (i, j) sits
    at normalized coordinate 2*j/(R-1) - 1 (align-corners convention).
    """
    planes = tp.params["planes"]
    R = planes.shape[-1]
    shape = p.shape[:-1]
    pf = p.reshape(-1, 3)
    inside = (pf.abs() <= 1.0).all(dim=-1)
    coords = (pf.clamp(-1.0, 1.0) + 1.0) * 0.5 * (R - 1)
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    # plane 0: (x, y); plane 1: (x, z); plane 2: (y, z)
    feat = (
        _bilinear_plane(planes[0], x, y)
        + _bilinear_plane(planes[1], x, z)
        + _bilinear_plane(planes[2], y, z)
    )
    feat = feat * inside.unsqueeze(-1).to(feat.dtype)
    return feat.reshape(*shape, planes.shape[1])


def decode(tp: Triplane, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(sigma >= 0, albedo in [0,1]^3) at points p (..., 3)."""
    feat = sample_triplane(tp, p)
    h = torch.nn.functional.silu(feat @ tp.params["dec.w1"].T + tp.params["dec.b1"])
    h = torch.nn.functional.silu(h @ tp.params["dec.w2"].T + tp.params["dec.b2"])
    out = h @ tp.params["dec.w3"].T + tp.params["dec.b3"]
    sigma = torch.nn.functional.softplus(out[..., 0]) * tp.density_scale
    albedo = torch.sigmoid(out[..., 1:4])
    return sigma, albedo


def density(tp: Triplane, p: torch.Tensor) -> torch.Tensor:
    """Density with its support applied: zero outside the unit ball."""
    sigma = decode(tp, p)[0]
    inside = p.norm(dim=-1) <= 1.0
    return sigma * inside.to(sigma.dtype)


def field_normal(tp: Triplane, p: torch.Tensor, h: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit normal n = -grad(sigma)/|grad(sigma)| via central differences.

    The step defaults to one plane cell (2/R). Returns (normals, degenerate)
    where degenerate flags samples whose gradient norm fell below 1e-8; those
    get the fallback normal (0, 0, 1).
    """
    if h is None:
        h = 2.0 / tp.resolution
    grads = []
    for axis in range(3):
        off = torch.zeros(3, dtype=p.dtype)
        off[axis] = h
        grads.append(density(tp, p + off) - density(tp, p - off))
    grad = torch.stack(grads, dim=-1)
    norm = grad.norm(dim=-1, keepdim=True)
    degenerate = norm.squeeze(-1) <= 1e-8
    n = -grad / norm.clamp_min(1e-8)
    fallback = torch.zeros_like(n)
    fallback[..., 2] = 1.0
    n = torch.where(degenerate.unsqueeze(-1), fallback, n)
    return n, degenerate


@dataclass
class RenderSettings:
    resolution: int = 32
    samples_per_ray: int = 64
    near: float = 1.0
    far: float = 3.0
    fov_deg: float = DEFAULT_FOV_DEG
    normal_topk: int | None = None  # None = exact normals at every sample

    def __post_init__(self) -> None:
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.samples_per_ray < 1:
            raise ValueError("samples_per_ray must be >= 1")


@dataclass
class VolumeRender:
    image: torch.Tensor  # H x W x 3
    opacity: torch.Tensor  # H x W
    depth: torch.Tensor  # H x W, opacity-weighted ray distance


NORMAL_BACKGROUND = 0.5  # encoded zero vector
ALBEDO_BACKGROUND = 1.0  # white


def _ray_points(cams: list[CameraPose], settings: RenderSettings, dtype: torch.dtype):
    """Sample points shared by all domains: midpoints of equal ray bins."""
    res = settings.resolution
    origins, dirs = [], []
    for cam in cams:
        o, d = pixel_rays(cam, res, res, settings.fov_deg)
        origins.append(o.reshape(-1, 3))
        dirs.append(d.reshape(-1, 3))
    o = torch.as_tensor(np.stack(origins), dtype=dtype)  # V x N x 3
    d = torch.as_tensor(np.stack(dirs), dtype=dtype)
    n = settings.samples_per_ray
    delta = (settings.far - settings.near) / n
    t_mid = settings.near + (torch.arange(n, dtype=dtype) + 0.5) * delta
    pts = o[:, :, None, :] + t_mid[None, None, :, None] * d[:, :, None, :]  # V x N x S x 3
    return pts, t_mid, delta


def render_views(
    tp: Triplane,
    cams: list[CameraPose],
    settings: RenderSettings,
    domains: tuple[str, ...] = ("albedo", "normal"),
) -> dict[str, torch.Tensor]:
    """Render all cameras and domains off one shared ray march.

    Returns a dict with per-domain images (V, H, W, 3) plus "opacity" and
    "depth" (V, H, W). Differentiable w.r.t. planes and decoder weights.
    """
    for dom in domains:
        if dom not in ("albedo", "normal"):
            raise ValueError(f"unknown domain {dom!r}")
    dtype = tp.dtype
    res = settings.resolution
    pts, t_mid, delta = _ray_points(cams, settings, dtype)
    V, N, S, _ = pts.shape
    inside = (pts.reshape(-1, 3).norm(dim=-1) <= 1.0).reshape(V, N, S)
    sigma, albedo = decode(tp, pts.reshape(-1, 3))
    sigma = sigma.reshape(V, N, S) * inside.to(dtype)
    albedo = albedo.reshape(V, N, S, 3)

    alpha = 1.0 - torch.exp(-sigma * delta)
    trans = torch.cumprod(1.0 - alpha + 1e-10, dim=-1)
    trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    w = trans * alpha
    acc = w.sum(dim=-1)

    out: dict[str, torch.Tensor] = {
        "opacity": acc.reshape(V, res, res),
        "depth": (w * t_mid).sum(dim=-1).reshape(V, res, res),
    }
    if "albedo" in domains:
        img = (w.unsqueeze(-1) * albedo).sum(dim=-2) + (1.0 - acc).unsqueeze(-1) * ALBEDO_BACKGROUND
        out["albedo"] = img.reshape(V, res, res, 3)
    if "normal" in domains:
        if settings.normal_topk is None or settings.normal_topk >= S:
            n, _ = field_normal(tp, pts.reshape(-1, 3))
            n_enc = (n.reshape(V, N, S, 3) + 1.0) * 0.5
            img = (w.unsqueeze(-1) * n_enc).sum(dim=-2) + (1.0 - acc).unsqueeze(-1) * NORMAL_BACKGROUND
        else:
            # normals only at the k highest-weight samples per ray; the rest of
            # the weight mass composites to background
            k = settings.normal_topk
            top = torch.topk(w.detach(), k, dim=-1).indices
            pts_k = torch.gather(pts, 2, top.unsqueeze(-1).expand(V, N, k, 3))
            w_k = torch.gather(w, 2, top)
            n, _ = field_normal(tp, pts_k.reshape(-1, 3))
            n_enc = (n.reshape(V, N, k, 3) + 1.0) * 0.5
            img = (w_k.unsqueeze(-1) * n_enc).sum(dim=-2) + (1.0 - w_k.sum(dim=-1)).unsqueeze(-1) * NORMAL_BACKGROUND
        out["normal"] = img.reshape(V, res, res, 3)
    return out


def volume_render(tp: Triplane, camera: CameraPose, settings: RenderSettings, domain: str = "albedo") -> VolumeRender:
    """Single-camera single-domain render (exact normals unless topk is set)."""
    res = render_views(tp, [camera], settings, domains=(domain,))
    return VolumeRender(image=res[domain][0], opacity=res["opacity"][0], depth=res["depth"][0])


def render_rays(
    tp: Triplane,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    settings: RenderSettings,
    domains: tuple[str, ...] = ("albedo", "normal"),
) -> dict[str, torch.Tensor]:
    """Render arbitrary rays (N, 3): the ray-subset path used by training.

    Same quadrature and compositing as `render_views`, flat ray list instead
    of camera grids.
    """
    dtype = tp.dtype
    n = settings.samples_per_ray
    delta = (settings.far - settings.near) / n
    t_mid = settings.near + (torch.arange(n, dtype=dtype) + 0.5) * delta
    pts = origins[:, None, :] + t_mid[None, :, None] * dirs[:, None, :]  # N x S x 3
    inside = (pts.reshape(-1, 3).norm(dim=-1) <= 1.0).reshape(pts.shape[:2])
    sigma, albedo = decode(tp, pts.reshape(-1, 3))
    sigma = sigma.reshape(pts.shape[:2]) * inside.to(dtype)
    albedo = albedo.reshape(*pts.shape[:2], 3)

    alpha = 1.0 - torch.exp(-sigma * delta)
    trans = torch.cumprod(1.0 - alpha + 1e-10, dim=-1)
    trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    w = trans * alpha
    acc = w.sum(dim=-1)
    out: dict[str, torch.Tensor] = {"opacity": acc, "depth": (w * t_mid).sum(dim=-1)}
    if "albedo" in domains:
        out["albedo"] = (w.unsqueeze(-1) * albedo).sum(dim=-2) + (1.0 - acc).unsqueeze(-1) * ALBEDO_BACKGROUND
    if "normal" in domains:
        k = settings.normal_topk
        if k is None or k >= n:
            nrm, _ = field_normal(tp, pts.reshape(-1, 3))
            n_enc = (nrm.reshape(*pts.shape[:2], 3) + 1.0) * 0.5
            out["normal"] = (w.unsqueeze(-1) * n_enc).sum(dim=-2) + (1.0 - acc).unsqueeze(-1) * NORMAL_BACKGROUND
        else:
            top = torch.topk(w.detach(), k, dim=-1).indices
            pts_k = torch.gather(pts, 1, top.unsqueeze(-1).expand(-1, k, 3))
            w_k = torch.gather(w, 1, top)
            nrm, _ = field_normal(tp, pts_k.reshape(-1, 3))
            n_enc = (nrm.reshape(-1, k, 3) + 1.0) * 0.5
            out["normal"] = (w_k.unsqueeze(-1) * n_enc).sum(dim=-2) + (1.0 - w_k.sum(dim=-1)).unsqueeze(-1) * NORMAL_BACKGROUND
    return out
