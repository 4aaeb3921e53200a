"""Equirectangular environment maps with split-sum prefiltered products.

Prefiltering (cosine irradiance, GGX specular mips) is expressed as fixed
linear operators over the radiance texels. The operators depend only on the
grid geometry and sampling pattern, so they are built once per resolution and
cached; applying them is a matrix product, which keeps every product
differentiable with respect to the radiance (the learnable-environment path).

Directions use z-up: row maps to polar angle theta in [0, pi] (0 at +z), and
column to azimuth phi in [-pi, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

ENV_HEIGHT = 32
ENV_WIDTH = 64
ROUGHNESS_LEVELS = (0.0, 0.225, 0.45, 0.675, 0.9)
FG_RES = 32
IRRADIANCE_SAMPLES = 4096
SPECULAR_SAMPLES = 512
FG_SAMPLES = 1024

_OPERATOR_CACHE: dict = {}


def texel_directions(height: int, width: int) -> np.ndarray:
    """Unit direction at every texel center, shape (H*W, 3)."""
    i = (np.arange(height) + 0.5) / height
    j = (np.arange(width) + 0.5) / width
    theta = i * math.pi
    phi = j * 2.0 * math.pi - math.pi
    st, ct = np.sin(theta), np.cos(theta)
    dirs = np.stack(
        [
            st[:, None] * np.cos(phi)[None, :],
            st[:, None] * np.sin(phi)[None, :],
            ct[:, None] * np.ones_like(phi)[None, :],
        ],
        axis=-1,
    )
    return dirs.reshape(-1, 3)


def direction_uv(dirs: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Fractional (row, col) for unit directions; azimuth wraps, poles clamp."""
    d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    row = theta / math.pi * height - 0.5
    col = (phi + math.pi) / (2.0 * math.pi) * width - 0.5
    return row, col


def _bilinear_scatter(matrix: np.ndarray, out_idx: np.ndarray, row: np.ndarray, col: np.ndarray, w: np.ndarray, height: int, width: int) -> None:
    """Accumulate weights into the 4 bilinear texels of (row, col)."""
    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = np.clip(r0 + dr, 0, height - 1)
        cc = (c0 + dc) % width
        np.add.at(matrix, (out_idx, rr * width + cc), w * wt)


def hammersley(n: int) -> np.ndarray:
    """(n, 2) low-discrepancy points: (i/n, radical inverse base 2)."""
    i = np.arange(n, dtype=np.uint32)
    bits = i.copy()
    bits = ((bits << 16) | (bits >> 16)) & 0xFFFFFFFF
    bits = ((bits & 0x55555555) << 1) | ((bits & 0xAAAAAAAA) >> 1)
    bits = ((bits & 0x33333333) << 2) | ((bits & 0xCCCCCCCC) >> 2)
    bits = ((bits & 0x0F0F0F0F) << 4) | ((bits & 0xF0F0F0F0) >> 4)
    bits = ((bits & 0x00FF00FF) << 8) | ((bits & 0xFF00FF00) >> 8)
    return np.stack([i / n, bits / 2**32], axis=-1)


def _orthonormal_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tangent/bitangent per normal (N, 3), robust near the poles."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.999, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t = np.cross(helper, n)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def _irradiance_operator(height: int, width: int, samples: int) -> np.ndarray:
    """Row-stochastic matrix: cosine-hemisphere quasi-Monte Carlo gather."""
    normals = texel_directions(height, width)
    t, b = _orthonormal_frame(normals)
    uv = hammersley(samples)
    # cosine-weighted hemisphere: the estimator is the plain sample mean
    phi = 2.0 * math.pi * uv[:, 0]
    cos_t = np.sqrt(1.0 - uv[:, 1])
    sin_t = np.sqrt(uv[:, 1])
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
    matrix = np.zeros((height * width, height * width))
    chunk = 128
    for lo in range(0, len(normals), chunk):
        nn = normals[lo : lo + chunk]
        dirs = (
            local[None, :, 0:1] * t[lo : lo + chunk, None]
            + local[None, :, 1:2] * b[lo : lo + chunk, None]
            + local[None, :, 2:3] * nn[:, None]
        )
        m = dirs.reshape(-1, 3)
        row, col = direction_uv(m, height, width)
        out_idx = np.repeat(np.arange(lo, lo + len(nn)), samples)
        _bilinear_scatter(matrix, out_idx, row, col, np.full(len(m), 1.0 / samples), height, width)
    return matrix


def ggx_sample_half(uv: np.ndarray, alpha: float) -> np.ndarray:
    """GGX-distributed half vectors around +z for 2D low-discrepancy points."""
    phi = 2.0 * math.pi * uv[:, 0]
    ct = np.sqrt((1.0 - uv[:, 1]) / (1.0 + (alpha * alpha - 1.0) * uv[:, 1]))
    st = np.sqrt(np.maximum(0.0, 1.0 - ct * ct))
    return np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=-1)


def _specular_operator(height: int, width: int, roughness: float, samples: int) -> np.ndarray:
    """Karis prefilter (n = v = reflection direction), weight n.l, row-normalized."""
    if roughness <= 0.0:
        return np.eye(height * width)
    normals = texel_directions(height, width)
    t, b = _orthonormal_frame(normals)
    alpha = roughness * roughness
    half_local = ggx_sample_half(hammersley(samples), alpha)
    matrix = np.zeros((height * width, height * width))
    chunk = 128
    for lo in range(0, len(normals), chunk):
        nn = normals[lo : lo + chunk]
        h = (
            half_local[None, :, 0:1] * t[lo : lo + chunk, None]
            + half_local[None, :, 1:2] * b[lo : lo + chunk, None]
            + half_local[None, :, 2:3] * nn[:, None]
        )
        v = nn[:, None, :]
        l = 2.0 * (v * h).sum(-1, keepdims=True) * h - v
        nol = (nn[:, None, :] * l).sum(-1)
        keep = nol > 0
        m = l[keep]
        w = nol[keep]
        row, col = direction_uv(m, height, width)
        out_idx = np.repeat(np.arange(lo, lo + len(nn)), samples)[keep.reshape(-1)]
        _bilinear_scatter(matrix, out_idx, row, col, w, height, width)
    sums = matrix.sum(axis=1, keepdims=True)
    return matrix / np.clip(sums, 1e-12, None)


def _smith_g_ibl(no_x: np.ndarray, k: float) -> np.ndarray:
    return no_x / (no_x * (1.0 - k) + k)


def _fg_table(res: int, samples: int) -> np.ndarray:
    """Split-sum scale/bias (A, B) over (cos theta_v, roughness), (res, res, 2)."""
    uv = hammersley(samples)
    table = np.zeros((res, res, 2))
    for i in range(res):
        nov = (i + 0.5) / res
        v = np.array([math.sqrt(1.0 - nov * nov), 0.0, nov])
        for j in range(res):
            rough = (j + 0.5) / res
            alpha = rough * rough
            # Smith-Schlick k for image-based lighting; alpha^2/2 overshoots
            # shadowing at grazing angles (A+B up to ~2.7)
            k = alpha / 2.0
            h = ggx_sample_half(uv, alpha)
            l = 2.0 * (h @ v)[:, None] * h - v[None, :]
            nol = l[:, 2]
            noh = np.clip(h[:, 2], 1e-8, None)
            voh = np.clip(h @ v, 1e-8, None)
            keep = nol > 0
            g = _smith_g_ibl(nol[keep], k) * _smith_g_ibl(nov, k)
            g_vis = g * voh[keep] / (noh[keep] * nov)
            fc = (1.0 - voh[keep]) ** 5
            table[i, j, 0] = ((1.0 - fc) * g_vis).sum() / samples
            table[i, j, 1] = (fc * g_vis).sum() / samples
    return table


def prefilter_operators(height: int = ENV_HEIGHT, width: int = ENV_WIDTH) -> dict:
    """Cached linear prefilter operators + FG table for one resolution."""
    key = (height, width)
    if key not in _OPERATOR_CACHE:
        ops = {
            "irradiance": torch.as_tensor(_irradiance_operator(height, width, IRRADIANCE_SAMPLES)),
            "mips": [
                torch.as_tensor(_specular_operator(height, width, r, SPECULAR_SAMPLES))
                for r in ROUGHNESS_LEVELS
            ],
            "fg": torch.as_tensor(_fg_table(FG_RES, FG_SAMPLES)),
        }
        _OPERATOR_CACHE[key] = ops
    return _OPERATOR_CACHE[key]


def sample_equirect(tex: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (H, W, C) at unit directions (N, 3); wraps azimuth."""
    h, w, _ = tex.shape
    d = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-20)
    theta = torch.acos(d[..., 2].clamp(-1.0, 1.0))
    phi = torch.atan2(d[..., 1], d[..., 0])
    row = theta / math.pi * h - 0.5
    col = (phi + math.pi) / (2.0 * math.pi) * w - 0.5
    r0 = torch.floor(row)
    c0 = torch.floor(col)
    fr = (row - r0).unsqueeze(-1)
    fc = (col - c0).unsqueeze(-1)
    r0 = r0.long()
    c0 = c0.long()
    flat = tex.reshape(-1, tex.shape[-1])

    def grab(ri, ci):
        rr = ri.clamp(0, h - 1)
        cc = ci % w
        return flat[rr * w + cc]

    return (
        grab(r0, c0) * (1 - fr) * (1 - fc)
        + grab(r0, c0 + 1) * (1 - fr) * fc
        + grab(r0 + 1, c0) * fr * (1 - fc)
        + grab(r0 + 1, c0 + 1) * fr * fc
    )


@dataclass
class EnvMap:
    """Radiance plus split-sum products; all tensors differentiable lenses."""

    radiance: torch.Tensor  # (H, W, 3)
    irradiance: torch.Tensor  # (H, W, 3)
    mips: list  # 5 x (H, W, 3), keyed to ROUGHNESS_LEVELS
    fg: torch.Tensor  # (FG_RES, FG_RES, 2)

    @classmethod
    def from_radiance(cls, radiance) -> "EnvMap":
        rad = torch.as_tensor(radiance, dtype=torch.float64)
        if rad.ndim != 3 or rad.shape[-1] != 3:
            raise ValueError(f"radiance must be (H, W, 3), got {tuple(rad.shape)}")
        if not bool(torch.isfinite(rad.detach()).all()) or bool((rad.detach() < 0).any()):
            raise ValueError("radiance must be finite and non-negative")
        h, w, _ = rad.shape
        ops = prefilter_operators(h, w)
        flat = rad.reshape(-1, 3)
        irr = (ops["irradiance"] @ flat).reshape(h, w, 3)
        mips = [(m @ flat).reshape(h, w, 3) for m in ops["mips"]]
        return cls(radiance=rad, irradiance=irr, mips=mips, fg=ops["fg"])

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    def irradiance_at(self, normals: torch.Tensor) -> torch.Tensor:
        return sample_equirect(self.irradiance, normals)

    def specular_at(self, dirs: torch.Tensor, roughness: torch.Tensor) -> torch.Tensor:
        """Lookup in the mip stack, linear between the two bracketing levels."""
        levels = torch.as_tensor(ROUGHNESS_LEVELS, dtype=dirs.dtype)
        r = torch.as_tensor(roughness, dtype=dirs.dtype).clamp(levels[0], levels[-1])
        r = r.expand(dirs.shape[:-1]) if r.ndim == 0 else r
        out = torch.zeros(dirs.shape[:-1] + (3,), dtype=dirs.dtype)
        for lo in range(len(ROUGHNESS_LEVELS) - 1):
            a, b = float(levels[lo]), float(levels[lo + 1])
            sel = (r >= a) & (r <= b) if lo == 0 else (r > a) & (r <= b)
            if not bool(sel.any()):
                continue
            frac = ((r[sel] - a) / (b - a)).unsqueeze(-1)
            lo_val = sample_equirect(self.mips[lo].to(dirs.dtype), dirs[sel])
            hi_val = sample_equirect(self.mips[lo + 1].to(dirs.dtype), dirs[sel])
            out[sel] = (1 - frac) * lo_val + frac * hi_val
        return out

    def fg_at(self, cos_theta: torch.Tensor, roughness: torch.Tensor) -> torch.Tensor:
        """Bilinear (A, B) lookup over (cos theta_v, roughness)."""
        res = self.fg.shape[0]
        x = (cos_theta.clamp(0.0, 1.0) * res - 0.5).clamp(0.0, res - 1.0)
        y = (roughness.clamp(0.0, 1.0) * res - 0.5).clamp(0.0, res - 1.0)
        x0 = torch.floor(x).long().clamp(0, res - 2)
        y0 = torch.floor(y).long().clamp(0, res - 2)
        fx = (x - x0).unsqueeze(-1)
        fy = (y - y0).unsqueeze(-1)
        t = self.fg.to(cos_theta.dtype)
        return (
            t[x0, y0] * (1 - fx) * (1 - fy)
            + t[x0, y0 + 1] * (1 - fx) * fy
            + t[x0 + 1, y0] * fx * (1 - fy)
            + t[x0 + 1, y0 + 1] * fx * fy
        )


def white_env(value: float = 1.0, height: int = ENV_HEIGHT, width: int = ENV_WIDTH) -> EnvMap:
    return EnvMap.from_radiance(torch.full((height, width, 3), float(value), dtype=torch.float64))


def purple_env(height: int = ENV_HEIGHT, width: int = ENV_WIDTH) -> EnvMap:
    chroma = torch.tensor([0.6, 0.2, 0.9], dtype=torch.float64)
    return EnvMap.from_radiance(chroma.expand(height, width, 3).clone())


def studio_env(height: int = ENV_HEIGHT, width: int = ENV_WIDTH) -> EnvMap:
    """Analytic three-point studio rig: gray base with three Gaussian lobes."""
    base, peak = 0.3, 2.0
    lobes = [
        (45.0, 40.0, 0.35),  # key
        (200.0, 25.0, 0.45),  # fill
        (320.0, 55.0, 0.40),  # rim
    ]
    dirs = texel_directions(height, width)
    rad = np.full(len(dirs), base)
    for az, el, sigma in lobes:
        a, e = math.radians(az), math.radians(el)
        center = np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
        ang = np.arccos(np.clip(dirs @ center, -1.0, 1.0))
        rad += peak * np.exp(-0.5 * (ang / sigma) ** 2)
    rgb = np.repeat(rad[:, None], 3, axis=1).reshape(height, width, 3)
    return EnvMap.from_radiance(rgb)


def write_hdr(path, radiance: np.ndarray) -> None:
    """Radiance RGBE, flat (uncompressed) scanlines."""
    h, w, _ = radiance.shape
    rgb = np.maximum(radiance, 0.0).astype(np.float64)
    maxc = rgb.max(axis=-1)
    nz = maxc > 1e-32
    _, exp = np.frexp(maxc)
    scale = np.where(nz, 2.0 ** (8 - exp.astype(np.float64)), 0.0)
    mant = np.clip(rgb * scale[..., None], 0, 255).astype(np.uint8)
    rgbe = np.concatenate([mant, (exp + 128)[..., None].astype(np.uint8) * nz[..., None]], axis=-1)
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rgbe.tobytes())


def read_hdr(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"#?RADIANCE"):
        raise ValueError("not a Radiance HDR file")
    pos = data.index(b"\n\n") + 2
    eol = data.index(b"\n", pos)
    dims = data[pos:eol].decode("ascii").split()
    if dims[0] != "-Y" or dims[2] != "+X":
        raise ValueError(f"unsupported HDR orientation {dims}")
    h, w = int(dims[1]), int(dims[3])
    rgbe = np.frombuffer(data[eol + 1 :], dtype=np.uint8)
    if len(rgbe) != h * w * 4:
        raise ValueError("unexpected HDR payload size (only flat scanlines supported)")
    rgbe = rgbe.reshape(h, w, 4).astype(np.float64)
    exp = rgbe[..., 3]
    scale = np.where(exp > 0, 2.0 ** (exp - 128 - 8), 0.0)
    return rgbe[..., :3] * scale[..., None]


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian color PFM, rows bottom-to-top."""
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(image[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"PF":
        raise ValueError("not a color PFM file")
    w, h = (int(x) for x in parts[1].split())
    if float(parts[2]) >= 0:
        raise ValueError("big-endian PFM not supported")
    img = np.frombuffer(parts[3][: h * w * 12], dtype="<f4").reshape(h, w, 3)
    return img[::-1].astype(np.float64)
