"""Procedural SDF scenes with known materials, plus the sphere-tracing oracle.

A scene is a union of rigid-transformed primitives (sphere, box, torus,
capsule), each carrying a solid or two-color checker albedo and scalar
roughness/metalness. Scenes are normalized into the unit ball. The renderer
sphere-traces pixel rays and emits albedo, world-space normal, depth, and mask
buffers; shaded renders with an environment light live in `render_shaded`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cameras import DEFAULT_FOV_DEG, CameraPose, pixel_rays
from .utils import derive_seed

PRIMITIVE_KINDS = ("sphere", "box", "torus", "capsule")

ROUGHNESS_RANGE = (0.0, 0.9)
METALNESS_RANGE = (0.08, 0.9)

CHECKER_SECOND_COLOR = (0.9, 0.9, 0.9)

# closed color vocabulary; linear RGB
PALETTE = {
    "red": (0.70, 0.05, 0.05),
    "green": (0.08, 0.45, 0.08),
    "blue": (0.05, 0.10, 0.60),
    "yellow": (0.80, 0.70, 0.05),
    "orange": (0.85, 0.35, 0.03),
    "purple": (0.35, 0.05, 0.55),
    "cyan": (0.05, 0.55, 0.55),
    "magenta": (0.65, 0.05, 0.45),
    "pink": (0.85, 0.40, 0.50),
    "brown": (0.30, 0.16, 0.05),
    "gray": (0.35, 0.35, 0.35),
    "white": (0.85, 0.85, 0.85),
    "black": (0.02, 0.02, 0.02),
    "teal": (0.03, 0.35, 0.30),
    "navy": (0.03, 0.05, 0.25),
    "olive": (0.30, 0.30, 0.05),
    "maroon": (0.30, 0.03, 0.06),
    "lime": (0.40, 0.75, 0.06),
    "coral": (0.80, 0.30, 0.22),
    "gold": (0.75, 0.55, 0.08),
    "salmon": (0.85, 0.45, 0.35),
    "violet": (0.50, 0.25, 0.70),
    "indigo": (0.18, 0.05, 0.45),
    "turquoise": (0.10, 0.60, 0.55),
    "beige": (0.75, 0.70, 0.55),
    "crimson": (0.60, 0.04, 0.12),
    "mint": (0.40, 0.75, 0.50),
    "rust": (0.45, 0.15, 0.04),
}

SPECIAL_TOKENS = ("<pad>", "a", ",", "3D", "asset", "checker")

VOCAB = list(SPECIAL_TOKENS) + sorted(PALETTE) + list(PRIMITIVE_KINDS)
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_TO_ID["<pad>"]
MAX_PROMPT_LEN = 8


@dataclass
class Primitive:
    kind: str
    position: np.ndarray  # world center, (3,)
    rotation: np.ndarray  # 3x3 local-to-world
    size: dict[str, float]
    color_name: str
    checker: bool
    checker_scale: float
    roughness: float
    metalness: float

    def __post_init__(self) -> None:
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.color_name not in PALETTE:
            raise ValueError(f"unknown color {self.color_name!r}")
        if not ROUGHNESS_RANGE[0] <= self.roughness <= ROUGHNESS_RANGE[1]:
            raise ValueError(f"roughness {self.roughness} outside {ROUGHNESS_RANGE}")
        if not METALNESS_RANGE[0] <= self.metalness <= METALNESS_RANGE[1]:
            raise ValueError(f"metalness {self.metalness} outside {METALNESS_RANGE}")
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    def local_points(self, p: np.ndarray) -> np.ndarray:
        return (p - self.position) @ self.rotation

    def sdf(self, p: np.ndarray) -> np.ndarray:
        """Signed distance at world points p (..., 3)."""
        q = self.local_points(np.asarray(p, dtype=np.float64))
        s = self.size
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - s["radius"]
        if self.kind == "box":
            half = np.array([s["hx"], s["hy"], s["hz"]])
            d = np.abs(q) - half
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(np.max(d, axis=-1), 0.0)
            return outside + inside
        if self.kind == "torus":
            ring = np.hypot(q[..., 0], q[..., 1]) - s["major"]
            return np.hypot(ring, q[..., 2]) - s["minor"]
        # capsule along the local z axis
        h, r = s["half_height"], s["radius"]
        z = np.clip(q[..., 2], -h, h)
        seg = q.copy()
        seg[..., 2] -= z
        return np.linalg.norm(seg, axis=-1) - r

    def bound_radius(self) -> float:
        s = self.size
        if self.kind == "sphere":
            local = s["radius"]
        elif self.kind == "box":
            local = math.sqrt(s["hx"] ** 2 + s["hy"] ** 2 + s["hz"] ** 2)
        elif self.kind == "torus":
            local = s["major"] + s["minor"]
        else:
            local = s["half_height"] + s["radius"]
        return float(np.linalg.norm(self.position)) + local

    def scaled(self, factor: float) -> "Primitive":
        return Primitive(
            kind=self.kind,
            position=self.position * factor,
            rotation=self.rotation.copy(),
            size={k: v * factor for k, v in self.size.items()},
            color_name=self.color_name,
            checker=self.checker,
            checker_scale=self.checker_scale * factor,
            roughness=self.roughness,
            metalness=self.metalness,
        )

    def albedo_at(self, p: np.ndarray) -> np.ndarray:
        base = np.array(PALETTE[self.color_name], dtype=np.float64)
        if not self.checker:
            return np.broadcast_to(base, np.asarray(p).shape).copy()
        q = self.local_points(np.asarray(p, dtype=np.float64)) / self.checker_scale
        parity = np.floor(q).sum(axis=-1).astype(np.int64) % 2
        second = np.array(CHECKER_SECOND_COLOR, dtype=np.float64)
        return np.where(parity[..., None] == 0, base, second)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "position": self.position.tolist(),
            "rotation": self.rotation.tolist(),
            "size": self.size,
            "color": self.color_name,
            "checker": self.checker,
            "checker_scale": self.checker_scale,
            "roughness": self.roughness,
            "metalness": self.metalness,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Primitive":
        return cls(
            kind=d["kind"],
            position=np.array(d["position"]),
            rotation=np.array(d["rotation"]),
            size=dict(d["size"]),
            color_name=d["color"],
            checker=bool(d["checker"]),
            checker_scale=float(d["checker_scale"]),
            roughness=float(d["roughness"]),
            metalness=float(d["metalness"]),
        )


@dataclass
class PrimitiveScene:
    primitives: list[Primitive]
    elevation_deg: float = 15.0
    prompt_kind: str | None = None  # shape named in the prompt; defaults to primitive 0

    def sdf(self, p: np.ndarray) -> np.ndarray:
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        return values.min(axis=0)

    def nearest_primitive(self, p: np.ndarray) -> np.ndarray:
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        return values.argmin(axis=0)

    def bound_radius(self) -> float:
        return max(prim.bound_radius() for prim in self.primitives)

    def normalized(self, target: float = 0.9) -> "PrimitiveScene":
        """Uniformly scale so the bounding sphere radius becomes `target` (≤ 1)."""
        factor = target / self.bound_radius()
        return PrimitiveScene(
            [prim.scaled(factor) for prim in self.primitives],
            elevation_deg=self.elevation_deg,
            prompt_kind=self.prompt_kind,
        )

    def material_at(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(albedo, roughness, metalness) of the nearest primitive at world points."""
        idx = self.nearest_primitive(p)
        albedo = np.zeros(np.asarray(p).shape, dtype=np.float64)
        rough = np.zeros(idx.shape, dtype=np.float64)
        metal = np.zeros(idx.shape, dtype=np.float64)
        for i, prim in enumerate(self.primitives):
            sel = idx == i
            if not np.any(sel):
                continue
            albedo[sel] = prim.albedo_at(np.asarray(p)[sel])
            rough[sel] = prim.roughness
            metal[sel] = prim.metalness
        return albedo, rough, metal

    def normal_at(self, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
        """Central-difference SDF gradient, normalized."""
        p = np.asarray(p, dtype=np.float64)
        grad = np.zeros_like(p)
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = h
            grad[..., axis] = self.sdf(p + offset) - self.sdf(p - offset)
        norm = np.linalg.norm(grad, axis=-1, keepdims=True)
        return grad / np.maximum(norm, 1e-12)

    def to_json(self) -> dict:
        return {
            "primitives": [prim.to_json() for prim in self.primitives],
            "elevation_deg": self.elevation_deg,
            "prompt_kind": self.prompt_kind,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PrimitiveScene":
        return cls(
            [Primitive.from_json(p) for p in d["primitives"]],
            elevation_deg=float(d["elevation_deg"]),
            prompt_kind=d.get("prompt_kind"),
        )


def sdf_eval(scene: PrimitiveScene, p: np.ndarray) -> np.ndarray:
    """Union (min) signed distance of the scene at world points."""
    return scene.sdf(p)


@dataclass
class GBuffer:
    albedo: np.ndarray  # H x W x 3 in [0,1]
    normal: np.ndarray  # H x W x 3 world-space unit vectors (0 off-mask)
    depth: np.ndarray  # H x W, distance from camera center; 0 = background
    mask: np.ndarray  # H x W in {0,1}
    roughness: np.ndarray = field(default=None)  # type: ignore[assignment]
    metalness: np.ndarray = field(default=None)  # type: ignore[assignment]
    points: np.ndarray = field(default=None)  # type: ignore[assignment]

    ALBEDO_BACKGROUND = 1.0  # white


def trace_rays(
    scene: PrimitiveScene,
    origins: np.ndarray,
    dirs: np.ndarray,
    max_steps: int = 128,
    hit_threshold: float = 1e-4,
    far: float | None = None,
) -> GBuffer:
    """Sphere-trace arbitrary rays; buffers come back flat (N, ...).

    Rays that fail to converge within `max_steps` are background. Normals are
    world-space central-difference gradients of the SDF at hit points.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    if far is None:
        far = float(np.linalg.norm(origins, axis=-1).max()) + 2.0

    t = np.zeros(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        d = scene.sdf(p)
        idx = np.flatnonzero(active)
        converged = d < hit_threshold
        hit[idx[converged]] = True
        t[idx] += np.maximum(d, 0.0)
        escaped = t[idx] > far
        active[idx[converged | escaped]] = False

    points = origins + t[:, None] * dirs
    albedo = np.full((n, 3), GBuffer.ALBEDO_BACKGROUND, dtype=np.float64)
    normal = np.zeros((n, 3), dtype=np.float64)
    rough = np.zeros(n, dtype=np.float64)
    metal = np.zeros(n, dtype=np.float64)
    depth = np.zeros(n, dtype=np.float64)
    if hit.any():
        hp = points[hit]
        a, r, m = scene.material_at(hp)
        albedo[hit] = a
        rough[hit] = r
        metal[hit] = m
        normal[hit] = scene.normal_at(hp)
        depth[hit] = t[hit]
    return GBuffer(
        albedo=albedo,
        normal=normal,
        depth=depth,
        mask=hit.astype(np.float64),
        roughness=rough,
        metalness=metal,
        points=points,
    )


def render_gbuffer(
    scene: PrimitiveScene,
    camera: CameraPose,
    height: int,
    width: int,
    fov_deg: float = DEFAULT_FOV_DEG,
    max_steps: int = 128,
    hit_threshold: float = 1e-4,
) -> GBuffer:
    """Sphere-trace the camera's pixel rays into H x W buffers."""
    origins, dirs = pixel_rays(camera, height, width, fov_deg)
    flat = trace_rays(
        scene,
        origins,
        dirs,
        max_steps=max_steps,
        hit_threshold=hit_threshold,
        far=float(np.linalg.norm(camera.center)) + 2.0,
    )
    shape = (height, width)
    return GBuffer(
        albedo=flat.albedo.reshape(*shape, 3),
        normal=flat.normal.reshape(*shape, 3),
        depth=flat.depth.reshape(shape),
        mask=flat.mask.reshape(shape),
        roughness=flat.roughness.reshape(shape),
        metalness=flat.metalness.reshape(shape),
        points=flat.points.reshape(*shape, 3),
    )


def render_shaded(scene: PrimitiveScene, camera: CameraPose, env, height: int, width: int, fov_deg: float = DEFAULT_FOV_DEG) -> np.ndarray:
    """Forward render with the scene's true materials under a prefiltered env light.

    Background is black (the light integral of an empty pixel). Linear output.
    """
    import torch

    from .shading import shade

    gb = render_gbuffer(scene, camera, height, width, fov_deg)
    out = np.zeros((height, width, 3), dtype=np.float64)
    sel = gb.mask > 0.5
    if sel.any():
        to_t = lambda a: torch.as_tensor(a, dtype=torch.float64)
        view = camera.center[None, :] - gb.points[sel]
        view = view / np.linalg.norm(view, axis=-1, keepdims=True)
        rgb = shade(
            albedo=to_t(gb.albedo[sel]),
            normal=to_t(gb.normal[sel]),
            view=to_t(view),
            roughness=to_t(gb.roughness[sel]),
            metalness=to_t(gb.metalness[sel]),
            env=env,
        )
        out[sel] = rgb.detach().cpu().numpy()
    return out


def prompt_text(scene: PrimitiveScene) -> str:
    prim = scene.primitives[0]
    kind = scene.prompt_kind or prim.kind
    words = ["a", prim.color_name]
    if prim.checker:
        words.append("checker")
    words.append(kind)
    return " ".join(words) + ", 3D asset"


def tokenize(text: str, pad_to: int | None = MAX_PROMPT_LEN, ensure_suffix: bool = True) -> list[int]:
    """Map a grammar prompt to token ids over the closed vocabulary.

    Commas are standalone tokens. Every prompt is suffixed with ", 3D asset"
    unless already present, then right-padded with the pad token.
    """
    words = text.replace(",", " , ").split()
    if ensure_suffix and words[-3:] != [",", "3D", "asset"]:
        words += [",", "3D", "asset"]
    ids = []
    for w in words:
        if w not in TOKEN_TO_ID:
            raise ValueError(f"unknown prompt token {w!r} (vocabulary is closed)")
        ids.append(TOKEN_TO_ID[w])
    if pad_to is not None:
        if len(ids) > pad_to:
            raise ValueError(f"prompt longer than {pad_to} tokens: {text!r}")
        ids = ids + [PAD_ID] * (pad_to - len(ids))
    return ids


def prompt_tokens(scene: PrimitiveScene, pad_to: int | None = MAX_PROMPT_LEN) -> list[int]:
    return tokenize(prompt_text(scene), pad_to=pad_to)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    w, x, y, z = quat
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_scene(base_seed: int, index: int) -> PrimitiveScene:
    """One normalized single-primitive scene, deterministic in (base_seed, index)."""
    rng = np.random.default_rng(derive_seed(base_seed, "scene", index))
    kind = PRIMITIVE_KINDS[rng.integers(len(PRIMITIVE_KINDS))]
    color = sorted(PALETTE)[rng.integers(len(PALETTE))]
    checker = bool(rng.random() < 0.35)
    if kind == "sphere":
        size = {"radius": float(rng.uniform(0.5, 1.0))}
    elif kind == "box":
        size = {k: float(rng.uniform(0.35, 0.9)) for k in ("hx", "hy", "hz")}
    elif kind == "torus":
        major = float(rng.uniform(0.5, 0.9))
        size = {"major": major, "minor": float(rng.uniform(0.18, 0.42)) * major}
    else:
        size = {"half_height": float(rng.uniform(0.35, 0.8)), "radius": float(rng.uniform(0.25, 0.5))}
    prim = Primitive(
        kind=kind,
        position=rng.uniform(-0.1, 0.1, size=3),
        rotation=_random_rotation(rng),
        size=size,
        color_name=color,
        checker=checker,
        checker_scale=float(rng.uniform(0.25, 0.5)),
        roughness=float(rng.uniform(*ROUGHNESS_RANGE)),
        metalness=float(rng.uniform(*METALNESS_RANGE)),
    )
    scene = PrimitiveScene([prim], elevation_deg=float(rng.uniform(0.0, 30.0)))
    return scene.normalized()
