"""Dataset builder: multi-view albedo/normal renders of procedural scenes.

Each scene directory holds four views of albedo and world-space normal images
at two resolutions (32 for diffusion, 64 for reconstruction), the camera
12-vectors, the prompt, and the full scene description with ground-truth
materials. Output is deterministic under the config seed, byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import CameraPose, make_camera_rig
from .images import encode_normal, load_png, save_png
from .scenes import PrimitiveScene, prompt_text, prompt_tokens, random_scene, render_gbuffer

DIFFUSION_RES = 32
RECON_RES = 64
VIEWS_PER_SCENE = 4
RIG_RADIUS = 2.0


@dataclass
class DatasetConfig:
    scenes: int = 64
    seed: int = 0
    resolution: int = DIFFUSION_RES
    recon_resolution: int = RECON_RES
    views: int = VIEWS_PER_SCENE
    radius: float = RIG_RADIUS

    def __post_init__(self) -> None:
        if self.scenes < 1:
            raise ValueError("need at least one scene")
        if self.views < 1:
            raise ValueError("need at least one view")


def scene_dir(root: str | Path, index: int) -> Path:
    return Path(root) / "scenes" / f"{index:04d}"


def build_scene_views(scene: PrimitiveScene, radius: float = RIG_RADIUS, views: int = VIEWS_PER_SCENE) -> list[CameraPose]:
    return make_camera_rig(scene.elevation_deg, radius, n=views)


def write_scene(root: Path, index: int, scene: PrimitiveScene, config: DatasetConfig) -> None:
    out = scene_dir(root, index)
    out.mkdir(parents=True, exist_ok=True)
    cams = build_scene_views(scene, config.radius, config.views)
    for k, cam in enumerate(cams):
        for res, suffix in ((config.resolution, ""), (config.recon_resolution, "64")):
            gb = render_gbuffer(scene, cam, res, res)
            save_png(out / f"albedo{suffix}_{k}.png", gb.albedo, color_space="srgb")
            save_png(out / f"normal{suffix}_{k}.png", encode_normal(gb.normal, gb.mask), color_space="linear")
    cams_json = {
        "fov_deg": 50.0,
        "radius": config.radius,
        "elevation_deg": scene.elevation_deg,
        "vec12": [cam.vec12.tolist() for cam in cams],
    }
    (out / "cams.json").write_text(json.dumps(cams_json, indent=1, sort_keys=True))
    prompt_json = {"text": prompt_text(scene), "tokens": prompt_tokens(scene)}
    (out / "prompt.json").write_text(json.dumps(prompt_json, indent=1, sort_keys=True))
    (out / "scene.json").write_text(json.dumps(scene.to_json(), indent=1, sort_keys=True))


def build_dataset(root: str | Path, config: DatasetConfig) -> Path:
    """Render `config.scenes` scenes under `root`; deterministic per seed."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(config.scenes):
        scene = random_scene(config.seed, i)
        write_scene(root, i, scene, config)
    meta = {
        "scenes": config.scenes,
        "seed": config.seed,
        "resolution": config.resolution,
        "recon_resolution": config.recon_resolution,
        "views": config.views,
        "radius": config.radius,
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


@dataclass
class SceneRecord:
    """One scene's views loaded back from disk, in linear [0,1] floats."""

    albedo: np.ndarray  # V x H x W x 3
    normal_img: np.ndarray  # V x H x W x 3, encoded (n+1)/2
    cams: list[CameraPose]
    tokens: list[int]
    text: str
    scene: PrimitiveScene
    albedo_hi: np.ndarray | None = None
    normal_hi: np.ndarray | None = None


def load_scene(root: str | Path, index: int, with_hires: bool = False) -> SceneRecord:
    out = scene_dir(root, index)
    cams_json = json.loads((out / "cams.json").read_text())
    cams = [CameraPose.from_vec12(np.array(v)) for v in cams_json["vec12"]]
    prompt_json = json.loads((out / "prompt.json").read_text())
    views = len(cams)
    albedo = np.stack([load_png(out / f"albedo_{k}.png", "srgb") for k in range(views)])
    normal = np.stack([load_png(out / f"normal_{k}.png", "linear") for k in range(views)])
    rec = SceneRecord(
        albedo=albedo,
        normal_img=normal,
        cams=cams,
        tokens=list(prompt_json["tokens"]),
        text=prompt_json["text"],
        scene=PrimitiveScene.from_json(json.loads((out / "scene.json").read_text())),
    )
    if with_hires:
        rec.albedo_hi = np.stack([load_png(out / f"albedo64_{k}.png", "srgb") for k in range(views)])
        rec.normal_hi = np.stack([load_png(out / f"normal64_{k}.png", "linear") for k in range(views)])
    return rec


def dataset_size(root: str | Path) -> int:
    return json.loads((Path(root) / "dataset.json").read_text())["scenes"]
