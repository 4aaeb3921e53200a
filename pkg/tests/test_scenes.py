import math

import numpy as np
import pytest

from relight3d.cameras import CameraPose, make_camera_rig, pixel_rays, project_to_pixels
from relight3d.scenes import (
    PALETTE,
    TOKEN_TO_ID,
    Primitive,
    PrimitiveScene,
    prompt_text,
    prompt_tokens,
    random_scene,
    render_gbuffer,
    sdf_eval,
    tokenize,
)


def sphere(radius=1.0, center=(0.0, 0.0, 0.0), **overrides) -> Primitive:
    kwargs = dict(
        kind="sphere",
        position=np.array(center, dtype=np.float64),
        rotation=np.eye(3),
        size={"radius": radius},
        color_name="red",
        checker=False,
        checker_scale=0.3,
        roughness=0.4,
        metalness=0.1,
    )
    kwargs.update(overrides)
    return Primitive(**kwargs)


class TestSdf:
    def test_unit_sphere_outside(self):
        scene = PrimitiveScene([sphere()])
        assert sdf_eval(scene, np.array([2.0, 0.0, 0.0])) == pytest.approx(1.0)

    def test_unit_sphere_center(self):
        scene = PrimitiveScene([sphere()])
        assert sdf_eval(scene, np.array([0.0, 0.0, 0.0])) == pytest.approx(-1.0)

    def test_union_of_two_spheres(self):
        scene = PrimitiveScene([sphere(), sphere(center=(3.0, 0.0, 0.0))])
        assert sdf_eval(scene, np.array([1.5, 0.0, 0.0])) == pytest.approx(0.5)

    def test_box_faces_and_corner(self):
        box = sphere(kind="box", size={"hx": 1.0, "hy": 2.0, "hz": 3.0})
        scene = PrimitiveScene([box])
        assert sdf_eval(scene, np.array([2.0, 0.0, 0.0])) == pytest.approx(1.0)
        assert sdf_eval(scene, np.array([0.0, 0.0, 0.0])) == pytest.approx(-1.0)
        # outside past a corner: euclidean distance to the corner
        d = sdf_eval(scene, np.array([2.0, 3.0, 4.0]))
        assert d == pytest.approx(math.sqrt(3.0))

    def test_torus_ring(self):
        torus = sphere(kind="torus", size={"major": 1.0, "minor": 0.25})
        scene = PrimitiveScene([torus])
        assert sdf_eval(scene, np.array([1.0, 0.0, 0.0])) == pytest.approx(-0.25)
        assert sdf_eval(scene, np.array([0.0, 0.0, 0.0])) == pytest.approx(0.75)

    def test_capsule_cap_and_side(self):
        cap = sphere(kind="capsule", size={"half_height": 1.0, "radius": 0.5})
        scene = PrimitiveScene([cap])
        assert sdf_eval(scene, np.array([0.0, 0.0, 2.0])) == pytest.approx(0.5)
        assert sdf_eval(scene, np.array([1.0, 0.0, 0.5])) == pytest.approx(0.5)

    def test_rigid_transform_preserves_distance(self):
        rng = np.random.default_rng(0)
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(rot) < 0:
            rot[:, 0] *= -1
        prim = sphere(kind="box", size={"hx": 0.5, "hy": 0.5, "hz": 0.5})
        moved = sphere(
            kind="box",
            size={"hx": 0.5, "hy": 0.5, "hz": 0.5},
            position=np.array([0.3, -0.2, 0.5]),
        )
        moved.rotation = rot
        p = rng.normal(size=(50, 3))
        base = PrimitiveScene([prim]).sdf(rot.T @ np.zeros(3) + (p - moved.position) @ rot)
        assert np.allclose(PrimitiveScene([moved]).sdf(p), base, atol=1e-12)

    def test_material_ranges_enforced(self):
        with pytest.raises(ValueError):
            sphere(roughness=1.5)
        with pytest.raises(ValueError):
            sphere(metalness=0.0)  # below the 0.08 floor

    def test_normalized_scene_fits_unit_ball(self):
        for i in range(10):
            scene = random_scene(123, i)
            assert scene.bound_radius() <= 1.0 + 1e-9
            rng = np.random.default_rng(i)
            p = rng.normal(size=(200, 3))
            p = p / np.linalg.norm(p, axis=-1, keepdims=True) * 1.001
            assert (scene.sdf(p) > 0).all()


class TestCameras:
    def test_rig_azimuths(self):
        rig = make_camera_rig(10.0, 2.0, n=4, azimuth0_deg=0.0)
        assert [c.azimuth_deg for c in rig] == [0.0, 90.0, 180.0, 270.0]

    def test_rotation_orthonormal(self):
        for cam in make_camera_rig(25.0, 2.0, n=4, azimuth0_deg=33.0):
            rtr = cam.rotation.T @ cam.rotation
            assert np.allclose(rtr, np.eye(3), atol=1e-6)
            assert np.linalg.det(cam.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_front_camera_center_and_origin_mapping(self):
        cam = CameraPose(0.0, 0.0, 2.0)
        assert np.allclose(cam.center, [2.0, 0.0, 0.0], atol=1e-12)
        origin_cam = cam.world_to_camera(np.zeros(3))
        assert np.allclose(origin_cam, [0.0, 0.0, -2.0], atol=1e-12)

    def test_radius_matches_configured(self):
        for cam in make_camera_rig(17.0, 2.0, n=6):
            assert np.linalg.norm(cam.center) == pytest.approx(2.0, abs=1e-6)

    def test_vec12_round_trip_exact(self):
        cam = CameraPose(42.0, 18.0, 2.0)
        vec = cam.vec12
        back = CameraPose.from_vec12(vec)
        assert np.array_equal(back.vec12, vec)

    def test_world_is_z_up(self):
        # elevated camera sees world +z pointing up in the image (+y in camera space)
        cam = CameraPose(0.0, 30.0, 2.0)
        up_world = np.array([0.0, 0.0, 1.0])
        up_cam = cam.rotation @ up_world
        assert up_cam[1] > 0.5

    def test_center_pixel_ray_hits_origin(self):
        cam = CameraPose(70.0, 12.0, 2.0)
        origins, dirs = pixel_rays(cam, 33, 33)
        d = dirs[16, 16]
        expected = -cam.center / np.linalg.norm(cam.center)
        assert np.allclose(d, expected, atol=1e-2)

    def test_crop_rays_match_full_image(self):
        cam = CameraPose(10.0, 5.0, 2.0)
        full_o, full_d = pixel_rays(cam, 64, 64)
        crop_o, crop_d = pixel_rays(cam, 16, 16, row0=8, col0=24, full_height=64, full_width=64)
        assert np.allclose(crop_d, full_d[8:24, 24:40], atol=1e-15)
        assert np.allclose(crop_o, full_o[8:24, 24:40], atol=1e-15)

    def test_project_inverts_rays(self):
        cam = CameraPose(33.0, 21.0, 2.0)
        origins, dirs = pixel_rays(cam, 24, 24)
        pts = origins + 1.7 * dirs
        rc, depth = project_to_pixels(cam, pts.reshape(-1, 3), 24, 24)
        rows, cols = np.meshgrid(np.arange(24), np.arange(24), indexing="ij")
        expected = np.stack([rows, cols], axis=-1).reshape(-1, 2)
        assert np.allclose(rc, expected, atol=1e-9)
        assert np.allclose(depth, 1.7, atol=1e-12)


class TestRenderGbuffer:
    def test_center_pixel_normal_points_at_camera(self):
        scene = PrimitiveScene([sphere(radius=0.8)])
        cam = CameraPose(0.0, 0.0, 2.0)
        gb = render_gbuffer(scene, cam, 33, 33)
        n = gb.normal[16, 16]
        to_cam = cam.center / np.linalg.norm(cam.center)
        angle = math.degrees(math.acos(np.clip(n @ to_cam, -1, 1)))
        assert gb.mask[16, 16] == 1.0
        assert angle < 1.0

    def test_corner_pixel_is_background(self):
        scene = PrimitiveScene([sphere(radius=0.5)])
        gb = render_gbuffer(scene, CameraPose(0.0, 0.0, 2.0), 32, 32)
        assert gb.mask[0, 0] == 0.0
        assert gb.depth[0, 0] == 0.0
        assert np.allclose(gb.albedo[0, 0], 1.0)
        assert np.allclose(gb.normal[0, 0], 0.0)

    def test_checker_albedo_uses_exactly_two_colors(self):
        prim = sphere(radius=0.9, checker=True, color_name="blue", checker_scale=0.3)
        scene = PrimitiveScene([prim])
        gb = render_gbuffer(scene, CameraPose(15.0, 10.0, 2.0), 48, 48)
        on = gb.albedo[gb.mask > 0.5]
        blue = np.array(PALETTE["blue"])
        second = np.array([0.9, 0.9, 0.9])
        is_blue = np.all(np.abs(on - blue) < 1e-12, axis=-1)
        is_second = np.all(np.abs(on - second) < 1e-12, axis=-1)
        assert np.all(is_blue | is_second)
        assert is_blue.any() and is_second.any()

    def test_unit_normals_on_mask(self):
        scene = random_scene(5, 2)
        gb = render_gbuffer(scene, CameraPose(40.0, 20.0, 2.0), 32, 32)
        norms = np.linalg.norm(gb.normal[gb.mask > 0.5], axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-4)

    def test_depth_matches_analytic_sphere(self):
        scene = PrimitiveScene([sphere(radius=0.6)])
        cam = CameraPose(0.0, 0.0, 2.0)
        gb = render_gbuffer(scene, cam, 33, 33)
        assert gb.depth[16, 16] == pytest.approx(2.0 - 0.6, abs=1e-3)


class TestPrompts:
    def test_red_sphere_tokens(self):
        scene = PrimitiveScene([sphere(color_name="red")])
        ids = prompt_tokens(scene, pad_to=None)
        expected = [TOKEN_TO_ID[w] for w in ["a", "red", "sphere", ",", "3D", "asset"]]
        assert ids == expected

    def test_deterministic(self):
        scene = random_scene(9, 4)
        assert prompt_tokens(scene) == prompt_tokens(scene)

    def test_checker_differs_by_one_token(self):
        plain = PrimitiveScene([sphere(kind="box", size={"hx": 1, "hy": 1, "hz": 1}, color_name="blue")])
        check = PrimitiveScene(
            [sphere(kind="box", size={"hx": 1, "hy": 1, "hz": 1}, color_name="blue", checker=True)]
        )
        t_plain = prompt_tokens(plain, pad_to=None)
        t_check = prompt_tokens(check, pad_to=None)
        assert t_check[2] == TOKEN_TO_ID["checker"]
        assert t_check[:2] == t_plain[:2]
        assert t_check[3:] == t_plain[2:]

    def test_unknown_token_rejected(self):
        with pytest.raises(ValueError, match="unknown prompt token"):
            tokenize("a glowing sphere")

    def test_suffix_always_appended(self):
        ids = tokenize("a red sphere", pad_to=None)
        tail = [TOKEN_TO_ID[w] for w in [",", "3D", "asset"]]
        assert ids[-3:] == tail
        # idempotent when the suffix is already present
        assert tokenize("a red sphere, 3D asset", pad_to=None) == ids

    def test_pad_to_fixed_length(self):
        ids = tokenize("a red sphere")
        assert len(ids) == 8
        assert ids[6] == 0 and ids[7] == 0

    def test_prompt_text_matches_scene(self):
        scene = PrimitiveScene([sphere(color_name="teal", checker=True)])
        assert prompt_text(scene) == "a teal checker sphere, 3D asset"


class TestCrossViewConsistency:
    def test_adjacent_view_normals_agree(self):
        # world-space normals at corresponding surface points across the rig
        from relight3d.metrics import cross_view_normal_consistency

        scene = random_scene(21, 0)
        cams = make_camera_rig(scene.elevation_deg, 2.0, n=4)
        gbs = [render_gbuffer(scene, cam, 64, 64) for cam in cams]
        normals = np.stack([gb.normal for gb in gbs])
        depths = np.stack([gb.depth for gb in gbs])
        masks = np.stack([gb.mask for gb in gbs])
        deg = cross_view_normal_consistency(normals, depths, masks, cams)
        assert deg < 2.0
