import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from gsmvps.scene import Camera, Gaussian2D, GaussianScene, deactivate

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def origin_camera(width=16, height=16, focal=1.0, cx=None, cy=None) -> Camera:
    """Camera at the origin looking down +z."""
    k = np.array([[focal, 0.0, (width - 1) / 2 if cx is None else cx],
                  [0.0, focal, (height - 1) / 2 if cy is None else cy],
                  [0.0, 0.0, 1.0]])
    return Camera(k, np.eye(4), width, height)


def splat(p, tu=(1, 0, 0), tv=(0, 1, 0), su=1.0, sv=1.0, o=0.5, color=(0.5, 0.5, 0.5), albedo=(0.5, 0.5, 0.5),
          metallic=0.1, roughness=0.7) -> Gaussian2D:
    sh = np.zeros((16, 3))
    sh[0] = (np.asarray(color, dtype=np.float64) - 0.5) / 0.28209479177387814
    return Gaussian2D(np.asarray(p, float), np.asarray(tu, float), np.asarray(tv, float), su, sv, o, sh,
                      np.asarray(albedo, float), metallic, roughness)


def random_scene(rng: np.random.Generator, n: int, camera: Camera, depth=(2.0, 4.0), dtype=torch.float64,
                 scale=(0.15, 0.5)) -> GaussianScene:
    """Random splats in front of ``camera`` (camera at origin looking +z)."""
    splats = []
    for _ in range(n):
        z = rng.uniform(*depth)
        half = z * (camera.width / 2) / camera.intrinsics[0, 0] * 0.8
        p = np.array([rng.uniform(-half, half), rng.uniform(-half, half), z])
        q = rng.normal(size=(3, 3))
        q, _ = np.linalg.qr(q)
        # keep splats roughly facing the camera to avoid grazing configurations
        n_ = np.array([0, 0, -1.0]) + 0.6 * rng.normal(size=3)
        n_ /= np.linalg.norm(n_)
        tu = np.cross(n_, q[0])
        tu /= np.linalg.norm(tu)
        tv = np.cross(n_, tu)
        sh = rng.normal(scale=0.3, size=(16, 3))
        splats.append(Gaussian2D(p, tu, tv, rng.uniform(*scale) * half, rng.uniform(*scale) * half,
                                 rng.uniform(0.3, 0.9), sh, rng.uniform(0.1, 0.9, 3), rng.uniform(0.05, 0.95),
                                 rng.uniform(0.2, 0.9)))
    return deactivate(splats, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(f, x: torch.Tensor, analytic: torch.Tensor, h: float = 1e-4, idx=None):
    """Central differences of scalar ``f`` w.r.t. entries of ``x``; returns (numeric, analytic) arrays."""
    flat = x.detach().reshape(-1)
    ana = analytic.detach().reshape(-1)
    idx = range(flat.numel()) if idx is None else idx
    num, sel = [], []
    for i in idx:
        xp = flat.clone(); xp[i] += h
        xm = flat.clone(); xm[i] -= h
        num.append((float(f(xp.reshape(x.shape))) - float(f(xm.reshape(x.shape)))) / (2 * h))
        sel.append(float(ana[i]))
    return np.array(num), np.array(sel)


def rel_close(num, ana, rtol=1e-3, atol=1e-6) -> bool:
    return bool(np.all(np.abs(num - ana) <= rtol * np.maximum(np.abs(num), np.abs(ana)) + atol))
