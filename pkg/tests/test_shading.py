import math

import numpy as np
import pytest
import torch

from relight3d.envmap import (
    ENV_HEIGHT,
    ENV_WIDTH,
    EnvMap,
    ggx_sample_half,
    hammersley,
    sample_equirect,
    studio_env,
    white_env,
)
from relight3d.shading import DIELECTRIC_F0, reflect, shade


@pytest.fixture(scope="module")
def studio():
    return studio_env()


def probe_pixels():
    """8 probe pixels of a unit-sphere render: camera rays from +x hitting the
    visible disk (center plus two rings, inside the silhouette band)."""
    eye = torch.tensor([3.0, 0.0, 0.0], dtype=torch.float64)
    half_angle = math.asin(1.0 / 3.0)
    probes = [(0.0, 0.0), (0.45, 0.0), (0.45, 120.0), (0.45, 240.0)] + [
        (0.85, phi) for phi in (45.0, 135.0, 225.0, 315.0)
    ]
    dirs = []
    for frac, phi_deg in probes:
        beta = frac * half_angle
        phi = math.radians(phi_deg)
        dirs.append([-math.cos(beta), math.sin(beta) * math.cos(phi), math.sin(beta) * math.sin(phi)])
    d = torch.tensor(dirs, dtype=torch.float64)
    # nearest intersection of |eye + t d| = 1
    b = (eye * d).sum(-1)
    t = -b - torch.sqrt(b * b - (eye @ eye - 1.0))
    points = eye + t.unsqueeze(-1) * d
    normals = points / points.norm(dim=-1, keepdim=True)
    view = -d
    albedo = torch.tensor(
        [[0.8, 0.3, 0.2]] * 4 + [[0.2, 0.5, 0.7]] * 4, dtype=torch.float64
    )
    return albedo, normals, view


def brute_force_reference(albedo, normal, view, k_r, k_m, env, samples=200_000):
    """Hemisphere-integrated GGX reference, importance sampled per pixel."""
    uv = torch.as_tensor(hammersley(samples))
    out = torch.zeros_like(albedo)
    alpha = k_r * k_r
    k = alpha / 2.0
    half_local = torch.as_tensor(ggx_sample_half(uv.numpy(), alpha))
    phi = 2.0 * math.pi * uv[:, 0]
    cos_t = torch.sqrt(1.0 - uv[:, 1])
    sin_t = torch.sqrt(uv[:, 1])
    cos_local = torch.stack([sin_t * torch.cos(phi), sin_t * torch.sin(phi), cos_t], dim=-1)
    for i in range(albedo.shape[0]):
        n, v = normal[i], view[i]
        helper = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
        if abs(float(n[2])) > 0.999:
            helper = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        t = torch.cross(helper, n, dim=0)
        t = t / t.norm()
        b = torch.cross(n, t, dim=0)
        frame = torch.stack([t, b, n], dim=0)

        # diffuse: cosine importance, estimator is the plain mean of L
        l_diff = cos_local @ frame
        diffuse = albedo[i] * (1.0 - k_m) * sample_equirect(env.radiance, l_diff).mean(0)

        # specular: GGX half-vector importance, UE4 reference estimator
        h = half_local @ frame
        voh = (h * v).sum(-1)
        l = 2.0 * voh.unsqueeze(-1) * h - v
        nol = (l * n).sum(-1)
        keep = (nol > 0) & (voh > 0)
        nov = float((n * v).sum().clamp(1e-8, 1.0))
        noh = (h * n).sum(-1).clamp_min(1e-8)
        f0 = DIELECTRIC_F0 * (1.0 - k_m) + albedo[i] * k_m
        fresnel = f0 + (1.0 - f0) * (1.0 - voh[keep].clamp(0, 1)).unsqueeze(-1) ** 5
        g = (nol[keep] / (nol[keep] * (1 - k) + k)) * (nov / (nov * (1 - k) + k))
        weight = g * voh[keep] / (noh[keep] * nov)
        radiance = sample_equirect(env.radiance, l[keep])
        specular = (radiance * fresnel * weight.unsqueeze(-1)).sum(0) / samples
        out[i] = diffuse + specular
    return out


class TestShadeBasics:
    def test_zero_env_gives_zero(self):
        env = white_env(0.0)
        albedo, normals, view = probe_pixels()
        out = shade(albedo, normals, view, 0.4, 0.5, env)
        assert torch.equal(out, torch.zeros_like(out))

    def test_max_metal_zero_albedo_is_fresnel_specular_only(self, studio):
        albedo, normals, view = probe_pixels()
        zero_albedo = torch.zeros_like(albedo)
        out = shade(zero_albedo, normals, view, 0.4, 0.9, studio)
        cos_v = (normals * view).sum(-1).clamp(0, 1)
        ab = studio.fg_at(cos_v, torch.full((8,), 0.4, dtype=torch.float64))
        f0 = DIELECTRIC_F0 * (1.0 - 0.9)
        spec = studio.specular_at(reflect(view, normals), torch.full((8,), 0.4, dtype=torch.float64))
        expect = (f0 * ab[..., 0:1] + ab[..., 1:2]) * spec
        assert torch.allclose(out, expect, atol=1e-12)

    def test_white_env_closed_form(self):
        env = white_env(1.0)
        albedo, normals, view = probe_pixels()
        k_r = torch.full((8,), 0.5, dtype=torch.float64)
        k_m = torch.full((8,), 0.3, dtype=torch.float64)
        out = shade(albedo, normals, view, k_r, k_m, env)
        cos_v = (normals * view).sum(-1).clamp(0, 1)
        ab = env.fg_at(cos_v, k_r)
        f0 = DIELECTRIC_F0 * (1 - k_m).unsqueeze(-1) + albedo * k_m.unsqueeze(-1)
        irr = env.irradiance_at(normals)
        spec = env.specular_at(reflect(view, normals), k_r)
        expect = albedo * (1 - k_m).unsqueeze(-1) * irr + (f0 * ab[..., :1] + ab[..., 1:]) * spec
        assert torch.allclose(out, expect, atol=1e-12)

    def test_reflect_mirrors_about_normal(self):
        n = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        v = torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64)
        v = v / v.norm()
        r = reflect(v, n)
        assert torch.allclose(r, torch.tensor([[-1.0, 0.0, 1.0]], dtype=torch.float64) / math.sqrt(2))


class TestShadeInvariants:
    def test_linearity_in_env_exact(self, studio):
        albedo, normals, view = probe_pixels()
        doubled = EnvMap.from_radiance(studio.radiance * 2.0)
        one = shade(albedo, normals, view, 0.3, 0.6, studio)
        two = shade(albedo, normals, view, 0.3, 0.6, doubled)
        assert torch.allclose(two, 2.0 * one, rtol=1e-12, atol=1e-12)

    def test_diffuse_strictly_decreases_in_metalness(self, studio):
        albedo, normals, view = probe_pixels()
        low_albedo = torch.full_like(albedo, 0.03)
        vals = []
        for k_m in (0.1, 0.4, 0.7, 0.9):
            out = shade(low_albedo, normals, view, 0.8, k_m, studio)
            vals.append(float(out.sum()))
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_differentiable_in_materials(self, studio):
        albedo, normals, view = probe_pixels()
        k_r = torch.full((8,), 0.5, dtype=torch.float64, requires_grad=True)
        k_m = torch.full((8,), 0.5, dtype=torch.float64, requires_grad=True)
        shade(albedo, normals, view, k_r, k_m, studio).sum().backward()
        assert torch.isfinite(k_r.grad).all() and float(k_r.grad.abs().sum()) > 0
        assert torch.isfinite(k_m.grad).all() and float(k_m.grad.abs().sum()) > 0


class TestGgxOracle:
    @pytest.mark.parametrize("k_r", [0.3, 0.6])
    def test_split_sum_matches_brute_force(self, studio, k_r):
        albedo, normals, view = probe_pixels()
        k_m = 0.5
        got = shade(albedo, normals, view, k_r, k_m, studio)
        ref = brute_force_reference(albedo, normals, view, k_r, k_m, studio)
        rel = ((got - ref).norm(dim=-1) / ref.norm(dim=-1).clamp_min(1e-9)).mean()
        assert float(rel) < 0.05

    def test_silhouette_probe_degrades_gracefully(self, studio):
        # the prefilter assumes n = v = R, which stretches highlights at
        # grazing view; a near-silhouette probe only gets a loose bound
        eye = torch.tensor([3.0, 0.0, 0.0], dtype=torch.float64)
        beta = 0.98 * math.asin(1.0 / 3.0)
        d = torch.tensor([[-math.cos(beta), math.sin(beta), 0.0]], dtype=torch.float64)
        b = (eye * d).sum(-1)
        t = -b - torch.sqrt(b * b - (eye @ eye - 1.0))
        normal = eye + t.unsqueeze(-1) * d
        albedo = torch.tensor([[0.6, 0.4, 0.3]], dtype=torch.float64)
        got = shade(albedo, normal, -d, 0.6, 0.5, studio)
        ref = brute_force_reference(albedo, normal, -d, 0.6, 0.5, studio)
        rel = (got - ref).norm() / ref.norm()
        assert float(rel) < 0.25
