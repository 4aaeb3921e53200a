"""Split-sum physically based shading.

Outgoing radiance for albedo k_d, roughness k_r, metalness k_m under a
prefiltered environment:

    L = k_d (1 - k_m) irradiance(n) + (F0 * A + B) specular(reflect(-v, n), k_r)

with F0 = 0.04 (1 - k_m) + k_d k_m and (A, B) the Fresnel scale/bias table
looked up at (cos theta_v, k_r). Everything is linear in the environment's
radiance before any tonemapping.
"""

from __future__ import annotations

import torch

from .envmap import EnvMap

DIELECTRIC_F0 = 0.04


def reflect(view: torch.Tensor, normal: torch.Tensor) -> torch.Tensor:
    """Mirror direction of -view about normal; view points away from surface."""
    return 2.0 * (view * normal).sum(-1, keepdim=True) * normal - view


def shade(
    albedo: torch.Tensor,
    normal: torch.Tensor,
    view: torch.Tensor,
    roughness: torch.Tensor,
    metalness: torch.Tensor,
    env: EnvMap,
) -> torch.Tensor:
    """Shade flat batches of surface points, returning linear radiance (N, 3).

    albedo (N, 3) in [0, 1]; normal/view (N, 3) unit, view toward the eye;
    roughness/metalness (N,) or scalar.
    """
    n = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-20)
    v = view / view.norm(dim=-1, keepdim=True).clamp_min(1e-20)
    k_r = torch.as_tensor(roughness, dtype=albedo.dtype)
    k_m = torch.as_tensor(metalness, dtype=albedo.dtype)
    if k_r.ndim == 0:
        k_r = k_r.expand(albedo.shape[0])
    if k_m.ndim == 0:
        k_m = k_m.expand(albedo.shape[0])

    cos_v = (n * v).sum(-1).clamp(0.0, 1.0)
    f0 = DIELECTRIC_F0 * (1.0 - k_m).unsqueeze(-1) + albedo * k_m.unsqueeze(-1)
    ab = env.fg_at(cos_v, k_r)
    diffuse = albedo * (1.0 - k_m).unsqueeze(-1) * env.irradiance_at(n)
    specular = (f0 * ab[..., 0:1] + ab[..., 1:2]) * env.specular_at(reflect(v, n), k_r)
    return diffuse + specular
