"""Ray-traced mesh G-buffers with a fixed-visibility differentiable path.

Visibility is resolved by a chunked, gradient-free ray/triangle pass over
detached geometry; the winning (ray, triangle) pairs are then re-intersected
in torch so positions, interpolated normals, and field lookups stay
differentiable with respect to mesh vertices (and through them the sdf) and
field parameters. Silhouette changes therefore carry no gradient, by design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import CameraPose, pixel_rays
from .tetmesh import TriMesh

RAY_EPS = 1e-9
ALBEDO_BACKGROUND = 1.0


def raycast(
    vertices: np.ndarray,
    triangles: np.ndarray,
    origins: np.ndarray,
    dirs: np.ndarray,
    ray_chunk: int = 512,
    tri_chunk: int = 8192,
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit indices and distances; -1 / +inf where a ray misses."""
    n = len(origins)
    hit_tri = np.full(n, -1, dtype=np.int64)
    hit_t = np.full(n, np.inf)
    a = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - a
    e2 = vertices[triangles[:, 2]] - a
    for r0 in range(0, n, ray_chunk):
        o = origins[r0 : r0 + ray_chunk][:, None, :]
        d = dirs[r0 : r0 + ray_chunk][:, None, :]
        best_t = hit_t[r0 : r0 + ray_chunk]
        best_i = hit_tri[r0 : r0 + ray_chunk]
        for f0 in range(0, len(triangles), tri_chunk):
            A = a[None, f0 : f0 + tri_chunk]
            E1 = e1[None, f0 : f0 + tri_chunk]
            E2 = e2[None, f0 : f0 + tri_chunk]
            pvec = np.cross(d, E2)
            det = np.einsum("rfk,rfk->rf", E1, pvec)
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tvec = o - A
            u = np.einsum("rfk,rfk->rf", tvec, pvec) * inv
            qvec = np.cross(tvec, E1)
            v = np.einsum("rk,rfk->rf", dirs[r0 : r0 + ray_chunk], qvec) * inv
            t = np.einsum("rfk,rfk->rf", E2, qvec) * inv
            ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > RAY_EPS)
            t = np.where(ok, t, np.inf)
            fmin = t.argmin(axis=1)
            tmin = t[np.arange(len(t)), fmin]
            better = tmin < best_t
            best_t[better] = tmin[better]
            best_i[better] = fmin[better] + f0
        hit_t[r0 : r0 + ray_chunk] = best_t
        hit_tri[r0 : r0 + ray_chunk] = best_i
    return hit_tri, hit_t


@dataclass
class MeshGBuffer:
    albedo: torch.Tensor  # (H, W, 3), background white
    normal: torch.Tensor  # (H, W, 3) unit vectors, zero at misses
    depth: torch.Tensor  # (H, W) ray distance, 0 at misses
    mask: torch.Tensor  # (H, W) float {0, 1}, no gradient
    points: torch.Tensor  # (H, W, 3) hit positions, 0 at misses


def mesh_hits(mesh: TriMesh, camera: CameraPose, res: int, fov_deg: float = 50.0):
    """Fixed-visibility hit set with a differentiable re-intersection.

    Returns (mask_flat bool (N,), hit data dict) where the dict tensors cover
    only hit rays: points, normal, depth, tri (indices), bary (u, v).
    """
    if len(mesh.triangles) == 0:
        raise ValueError("mesh has no triangles")
    o_np, d_np = pixel_rays(camera, res, res, fov_deg=fov_deg)
    o_np = o_np.reshape(-1, 3)
    d_np = d_np.reshape(-1, 3)
    tri_idx, _ = raycast(mesh.vertices_np, mesh.triangles, o_np, d_np)
    hit = tri_idx >= 0
    if not hit.any():
        return hit, None

    dtype = mesh.vertices.dtype
    tris = mesh.triangles[tri_idx[hit]]
    va = mesh.vertices[tris[:, 0]]
    vb = mesh.vertices[tris[:, 1]]
    vc = mesh.vertices[tris[:, 2]]
    o = torch.as_tensor(o_np[hit], dtype=dtype)
    d = torch.as_tensor(d_np[hit], dtype=dtype)
    e1 = vb - va
    e2 = vc - va
    pvec = torch.cross(d, e2, dim=-1)
    det = (e1 * pvec).sum(-1)
    inv = 1.0 / det
    tvec = o - va
    u = (tvec * pvec).sum(-1) * inv
    qvec = torch.cross(tvec, e1, dim=-1)
    v = (d * qvec).sum(-1) * inv
    t = (e2 * qvec).sum(-1) * inv
    points = o + t.unsqueeze(-1) * d

    vn = mesh.vertex_normals()
    n = (
        (1.0 - u - v).unsqueeze(-1) * vn[tris[:, 0]]
        + u.unsqueeze(-1) * vn[tris[:, 1]]
        + v.unsqueeze(-1) * vn[tris[:, 2]]
    )
    n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-20)
    return hit, {"points": points, "normal": n, "depth": t, "tri": tri_idx[hit], "view": -d}


def mesh_render(
    mesh: TriMesh,
    albedo_field,
    camera: CameraPose,
    res: int,
    fov_deg: float = 50.0,
) -> MeshGBuffer:
    """G-buffer via nearest-hit ray tracing; albedo_field(points)->(N, 3)."""
    hit, data = mesh_hits(mesh, camera, res, fov_deg)
    dtype = mesh.vertices.dtype
    albedo = torch.full((res * res, 3), ALBEDO_BACKGROUND, dtype=dtype)
    normal = torch.zeros(res * res, 3, dtype=dtype)
    depth = torch.zeros(res * res, dtype=dtype)
    points = torch.zeros(res * res, 3, dtype=dtype)
    mask = torch.zeros(res * res, dtype=dtype)
    if data is not None:
        idx = torch.as_tensor(np.nonzero(hit)[0])
        albedo = albedo.index_copy(0, idx, albedo_field(data["points"]).to(dtype))
        normal = normal.index_copy(0, idx, data["normal"])
        depth = depth.index_copy(0, idx, data["depth"])
        points = points.index_copy(0, idx, data["points"])
        mask[idx] = 1.0
    return MeshGBuffer(
        albedo=albedo.reshape(res, res, 3),
        normal=normal.reshape(res, res, 3),
        depth=depth.reshape(res, res),
        mask=mask.reshape(res, res),
        points=points.reshape(res, res, 3),
    )
