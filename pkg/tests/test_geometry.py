import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from avopt.geometry import (Aabb, CameraModel, NotProjectableError, Ray, load_cameras, look_at, pixel_ray,
                            pixel_rays, project, project_points, project_torch, ray_aabb_intersect,
                            save_cameras)


def unit_camera(res=(4, 4)):
    return CameraModel(np.eye(3), np.eye(3), np.zeros(3), res)


def rig_camera(angle=0.3):
    R, t = look_at([3 * np.sin(angle), 1.2, 3 * np.cos(angle)], [0, 0.9, 0])
    K = np.array([[300.0, 0, 128], [0, 300.0, 128], [0, 0, 1]])
    return CameraModel(K, R, t, (256, 256))


def test_project_on_axis():
    assert np.allclose(project(unit_camera(), [0, 0, 1]), [0, 0])


def test_project_similar_triangles():
    assert np.allclose(project(unit_camera(), [1, 0, 2]), [0.5, 0])


def test_project_behind_camera():
    with pytest.raises(NotProjectableError):
        project(unit_camera(), [0, 0, -1])
    assert np.isnan(project_points(unit_camera(), np.array([[0, 0, -1.0]]))).all()


def test_principal_pixel_is_optical_axis():
    K = np.array([[2.0, 0, 2], [0, 2.0, 2], [0, 0, 1]])
    cam = CameraModel(K, np.eye(3), np.zeros(3), (4, 4))
    assert np.allclose(pixel_ray(cam, (2, 2)).direction, [0, 0, 1])


def test_rotated_camera_flips_axis():
    K = np.array([[2.0, 0, 2], [0, 2.0, 2], [0, 0, 1]])
    Ry = np.diag([-1.0, 1.0, -1.0])
    cam = CameraModel(K, Ry, np.zeros(3), (4, 4))
    assert np.allclose(pixel_ray(cam, (2, 2)).direction, [0, 0, -1])


@given(st.floats(0.0, 256.0), st.floats(0.0, 256.0), st.floats(-np.pi, np.pi))
def test_pixel_ray_round_trip(u, v, angle):
    cam = rig_camera(angle)
    r = pixel_ray(cam, (u, v))
    assert np.allclose(project(cam, r.point_at(2.0)), [u, v], atol=1e-6)


def test_project_torch_matches_numpy(rng):
    cam = rig_camera()
    pts = rng.normal(0, 0.5, (20, 3)) + [0, 0.9, 0]
    assert np.allclose(project_torch(cam, torch.as_tensor(pts)).numpy(), project_points(cam, pts))


def test_slab_hit():
    box = Aabb(-0.5 * np.ones(3), 0.5 * np.ones(3))
    assert np.allclose(ray_aabb_intersect(Ray([-2, 0, 0], [1, 0, 0]), box), (1.5, 2.5))


def test_slab_miss():
    box = Aabb(-0.5 * np.ones(3), 0.5 * np.ones(3))
    assert ray_aabb_intersect(Ray([-2, 5, 0], [1, 0, 0]), box) is None


def test_slab_interior_origin():
    box = Aabb(-0.5 * np.ones(3), 0.5 * np.ones(3))
    t0, t1 = ray_aabb_intersect(Ray([0, 0, 0], [1, 0, 0], near=0.1), box)
    assert t0 == 0.1 and np.isclose(t1, 0.5)


def test_slab_against_march():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        lo = rng.uniform(-1, 0, 3)
        box = Aabb(lo, lo + rng.uniform(0.2, 1.5, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ray = Ray(rng.uniform(-3, 3, 3), d)
        step = 1e-4 * box.diagonal
        ts = np.arange(0, 8, step)
        inside = box.contains(ray.origin + ts[:, None] * d)
        hit = ray_aabb_intersect(ray, box)
        if not inside.any():
            # a march can only miss a box the slab test grazes
            assert hit is None or hit[1] - hit[0] < 2 * step
            continue
        assert hit is not None
        assert abs(hit[0] - ts[inside][0]) <= 2e-4 * box.diagonal
        assert abs(hit[1] - ts[inside][-1]) <= 2e-4 * box.diagonal


def test_invalid_camera():
    with pytest.raises(ValueError):
        CameraModel(np.zeros((3, 3)), np.eye(3), np.zeros(3), (4, 4))
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), 2 * np.eye(3), np.zeros(3), (4, 4))


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [2, 0, 0])


def test_aabb_ops():
    a = Aabb(np.zeros(3), np.ones(3))
    b = Aabb(0.5 * np.ones(3), 2 * np.ones(3))
    assert np.allclose(a.intersection(b).min, 0.5)
    assert a.intersection(Aabb(2 * np.ones(3), 3 * np.ones(3))) is None
    assert np.allclose(a.union(b).max, 2)
    with pytest.raises(ValueError):
        Aabb(np.ones(3), np.zeros(3))


def test_camera_json_round_trip(tmp_path):
    cams = [rig_camera(a) for a in (0.0, 1.0)]
    save_cameras(tmp_path / "c.json", cams)
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        assert np.array_equal(a.intrinsics, b.intrinsics) and np.array_equal(a.rotation, b.rotation)
        assert a.resolution == b.resolution


def test_pixel_rays_unit():
    o, d = pixel_rays(rig_camera(), np.array([[0.5, 0.5], [100.0, 30.0]]))
    assert np.allclose(np.linalg.norm(d, axis=1), 1)
