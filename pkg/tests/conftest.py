import numpy as np
import pytest

from splatscan.geometry import SphericalCamera
from splatscan.se3 import SE3Pose
from splatscan.splats import SplatModel, orthonormal_tangents


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def full_cam():
    return SphericalCamera(64, 16, -np.pi, np.pi,
                           -np.deg2rad(20.0), np.deg2rad(15.0))


def random_model(n, rng, rmin=2.0, rmax=8.0, scale=(0.05, 0.4),
                 opacity=(0.3, 0.95), behind_frac=0.0):
    """Splats scattered on a shell around the origin, random orientations."""
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if behind_frac > 0:
        k = int(n * behind_frac)
        dirs[:k, 0] = -np.abs(dirs[:k, 0])
    radii = rng.uniform(rmin, rmax, n)
    centers = dirs * radii[:, None]
    ta, tb = orthonormal_tangents(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))
    scales = rng.uniform(*scale, (n, 2))
    opac = rng.uniform(*opacity, n)
    m = SplatModel()
    m.append(centers, ta, tb, scales, opac, 0)
    return m


def surface_model(scene, viewpoint, n, rng, scale=0.10, opacity=0.95):
    """Splats seeded on a scene's visible surfaces, aligned to the surface."""
    pts, normals = scene.visible_surface_points(
        n * 3, np.asarray(viewpoint, dtype=float).reshape(1, 3), rng)
    idx = rng.choice(pts.shape[0], min(n, pts.shape[0]), replace=False)
    pts, normals = pts[idx], normals[idx]
    ref = np.where(np.abs(normals[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    ta = np.cross(normals, ref)
    ta /= np.linalg.norm(ta, axis=1, keepdims=True)
    tb = np.cross(normals, ta)
    m = SplatModel()
    m.append(pts, ta, tb, np.full((pts.shape[0], 2), scale),
             np.full(pts.shape[0], opacity), 0)
    return m
