"""Synthetic multi-view multi-light scenes with closed-form geometry.

Spheres and rectangles are ray cast exactly, shadows come from exact shadow
rays, and shading goes through :mod:`gsmvps.shading`. The same module builds
splat models that approximate those shapes by construction, which the tests
use as oracles for the splatting pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import Config
from .data import MVPSDataset, View, save_dataset
from .lightfield import LightMLP, flat_parameters
from .io import encode_normals, float_to_raw, linear_to_srgb
from .raster import rasterize
from .raytrace import SplatArrays, build_bvh, visibility_map
from .scene import Camera, DirectionalLight, Gaussian2D, GaussianScene, deactivate, splats_from_scene
from .shading import ShadePoint, shade_points, shade_sdl

GOLDEN = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class Material:
    albedo: tuple[float, float, float] = (0.8, 0.6, 0.4)
    metallic: float = 0.0
    roughness: float = 0.5
    lambertian: bool = True


@dataclass
class Sphere:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    material: Material = field(default_factory=Material)

    def intersect(self, o: np.ndarray, d: np.ndarray):
        c = np.asarray(self.center)
        oc = o - c
        b = np.einsum("...k,...k->...", oc, d)
        cc = np.einsum("...k,...k->...", oc, oc) - self.radius ** 2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        pos = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        n = (pos - c) / self.radius
        return t, n


@dataclass
class Rect:
    """Rectangle ``center + a * half_u + b * half_v`` for |a|, |b| <= 1."""

    center: tuple[float, float, float]
    half_u: tuple[float, float, float]
    half_v: tuple[float, float, float]
    material: Material = field(default_factory=Material)

    def intersect(self, o: np.ndarray, d: np.ndarray):
        c, hu, hv = (np.asarray(x, dtype=np.float64) for x in (self.center, self.half_u, self.half_v))
        n = np.cross(hu, hv)
        n /= np.linalg.norm(n)
        denom = d @ n
        ok = np.abs(denom) > 1e-12
        t = np.where(ok, ((c - o) @ n) / np.where(ok, denom, 1.0), np.inf)
        pos = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        rel = pos - c
        a = rel @ hu / (hu @ hu)
        b = rel @ hv / (hv @ hv)
        inside = (np.abs(a) <= 1) & (np.abs(b) <= 1) & (t > 1e-9)
        t = np.where(inside, t, np.inf)
        return t, np.broadcast_to(n, pos.shape).copy()


def cast(shapes, o: np.ndarray, d: np.ndarray):
    """Closest hit: (t, normal, shape index); t is inf on a miss."""
    best_t = np.full(o.shape[:-1] if o.ndim > 1 else d.shape[:-1], np.inf)
    best_n = np.zeros(best_t.shape + (3,))
    best_i = np.full(best_t.shape, -1)
    for i, s in enumerate(shapes):
        t, n = s.intersect(o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_i = np.where(closer, i, best_i)
    return best_t, best_n, best_i


def occluded(shapes, points: np.ndarray, light_dir: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    t, _, _ = cast(shapes, points + eps * light_dir, np.broadcast_to(light_dir, points.shape))
    return np.isfinite(t)


def world_rays(camera: Camera, ss: int = 1) -> np.ndarray:
    """Unit world ray directions for ss x ss subpixel samples, [H, W, ss*ss, 3]."""
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    ys, xs = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    px = xs[..., None] + ox.reshape(-1)
    py = ys[..., None] + oy.reshape(-1)
    pix = np.stack([px, py, np.ones_like(px)], axis=-1)
    cam = pix @ np.linalg.inv(camera.intrinsics).T
    d = cam @ camera.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class RenderedView:
    images: list[np.ndarray]  # linear radiance per light
    coverage: np.ndarray
    normal: np.ndarray  # world frame, pixel centers
    albedo: np.ndarray
    depth: np.ndarray
    lit_fraction: np.ndarray
    shadow_masks: list[np.ndarray]  # cast-shadow mask per light at pixel centers


def _shade(shapes, pos, n, idx, wo, light: DirectionalLight, shadows: bool) -> np.ndarray:
    out = np.zeros(pos.shape)
    for i, s in enumerate(shapes):
        sel = idx == i
        if not sel.any():
            continue
        m = s.material
        p = ShadePoint(
            position=torch.as_tensor(pos[sel]),
            normal=torch.as_tensor(n[sel]),
            outgoing=torch.as_tensor(wo[sel]),
            albedo=torch.as_tensor(np.broadcast_to(m.albedo, (int(sel.sum()), 3)).copy()),
            metallic=torch.full((int(sel.sum()),), float(m.metallic), dtype=torch.float64),
            roughness=torch.full((int(sel.sum()),), float(m.roughness), dtype=torch.float64),
        )
        vis = np.ones((int(sel.sum()), 3))
        if shadows:
            vis *= ~occluded(shapes, pos[sel], light.direction)[:, None]
        rad = shade_points(p, torch.as_tensor(light.direction), torch.as_tensor(light.intensity),
                           torch.as_tensor(vis), specular=not m.lambertian)
        out[sel] = rad.numpy()
    return out


def render_analytic(shapes, camera: Camera, lights: list[DirectionalLight], ss: int = 3,
                    shadows: bool = True) -> RenderedView:
    """Exact ray-cast render: supersampled images plus pixel-center ground truth."""
    center = camera.center

    def trace(dirs):
        o = np.broadcast_to(center, dirs.shape)
        t, n, idx = cast(shapes, o, dirs)
        hit = np.isfinite(t)
        pos = o + np.where(hit, t, 0.0)[..., None] * dirs
        # two-sided surfaces: face the viewer
        n = np.where((np.einsum("...k,...k->...", n, dirs) > 0)[..., None], -n, n)
        return hit, pos, n, idx

    dirs = world_rays(camera, ss)
    hit, pos, n, idx = trace(dirs)
    wo = -dirs
    images = []
    for light in lights:
        rad = np.zeros(dirs.shape)
        rad[hit] = _shade(shapes, pos[hit], n[hit], idx[hit], wo[hit], light, shadows)
        images.append(rad.mean(axis=2))
    coverage = hit.mean(axis=2)

    cdirs = world_rays(camera, 1)[:, :, 0]
    chit, cpos, cn, cidx = trace(cdirs)
    albedo = np.zeros(cpos.shape)
    for i, s in enumerate(shapes):
        albedo[cidx == i] = s.material.albedo
    depth = np.where(chit, (cpos - center) @ camera.rotation[2], 0.0)
    shadow_masks, lit = [], np.zeros(chit.shape)
    for light in lights:
        sh = np.zeros(chit.shape, dtype=bool)
        if shadows and chit.any():
            sh[chit] = occluded(shapes, cpos[chit], light.direction)
        shadow_masks.append(sh)
        facing = np.einsum("...k,k->...", cn, light.direction) > 0
        lit += (facing & ~sh & chit)
    return RenderedView(images, coverage, np.where(chit[..., None], cn, 0.0), albedo, depth,
                        lit / max(len(lights), 1), shadow_masks)


def ring_cameras(n: int, radius: float, elevation_deg: float, focal: float, res: int,
                 target=(0.0, 0.0, 0.0), phase: float = 0.0, elevation_jitter: float = 0.0) -> list[Camera]:
    cams = []
    for i in range(n):
        az = 2 * math.pi * i / n + phase
        el = math.radians(elevation_deg + (elevation_jitter if i % 2 else -elevation_jitter))
        eye = np.asarray(target) + radius * np.array([math.cos(el) * math.cos(az),
                                                      math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, target, (0, 0, 1), focal, res, res))
    return cams


def default_lights(n: int, intensity: float = 3.0, polar_deg=(25.0, 60.0)) -> list[DirectionalLight]:
    """Upper-hemisphere directions on a spiral; world frame, +z up."""
    out = []
    for i in range(n):
        frac = (i + 0.5) / n
        polar = math.radians(polar_deg[0] + (polar_deg[1] - polar_deg[0]) * frac)
        az = i * GOLDEN * 2.0
        d = np.array([math.sin(polar) * math.cos(az), math.sin(polar) * math.sin(az), math.cos(polar)])
        out.append(DirectionalLight(d / np.linalg.norm(d), np.full(3, intensity)))
    return out


def perturb_normals(n: np.ndarray, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate each normal by a N(0, sigma) angle about a random perpendicular axis."""
    if sigma_deg <= 0:
        return n.copy()
    rand = rng.normal(size=n.shape)
    axis = np.cross(n, rand)
    axis /= np.maximum(np.linalg.norm(axis, axis=-1, keepdims=True), 1e-12)
    ang = np.radians(sigma_deg) * rng.normal(size=n.shape[:-1])[..., None]
    # Rodrigues with axis perpendicular to n
    out = n * np.cos(ang) + np.cross(axis, n) * np.sin(ang)
    return out / np.maximum(np.linalg.norm(out, axis=-1, keepdims=True), 1e-12)


def sphere_scene(material: Material | None = None, radius: float = 1.0) -> list:
    return [Sphere((0.0, 0.0, 0.0), radius, material or Material())]


def plane_pair_scene() -> list:
    """Ground square at z=0 and a smaller square occluder hovering above it."""
    return [
        Rect((0.0, 0.0, 0.0), (1.2, 0.0, 0.0), (0.0, 1.2, 0.0), Material((0.7, 0.7, 0.7))),
        Rect((0.0, 0.0, 0.5), (0.35, 0.0, 0.0), (0.0, 0.35, 0.0), Material((0.3, 0.5, 0.8))),
    ]


def scene_from_spec(kind: str, material: Material | None = None) -> list:
    if kind == "sphere":
        return sphere_scene(material)
    if kind == "plane-pair":
        return plane_pair_scene()
    raise ValueError(f"unknown analytic scene kind {kind!r}")


def generate_synthetic(root: str | Path | None, kind: str = "sphere", num_views: int = 8, num_lights: int = 8,
                       resolution: int = 64, noise_deg: float = 3.0, num_test_views: int = 4,
                       seed: int = 0, ss: int = 3, material: Material | None = None,
                       splats: GaussianScene | None = None) -> MVPSDataset:
    """Render a dataset (train views first, then test views) and optionally write it to ``root``.

    ``kind`` is ``sphere``, ``plane-pair`` or ``splat-list`` (rendered through
    the splatting pipeline from ``splats``).
    """
    rng = np.random.default_rng(seed)
    if kind == "plane-pair":
        dist, focal, elev = 4.0, resolution * 1.0, 55.0
    else:
        dist, focal, elev = 4.0, resolution * 1.6, 25.0
    cams = ring_cameras(num_views, dist, elev, focal, resolution, elevation_jitter=10.0)
    cams += ring_cameras(num_test_views, dist, elev + 5.0, focal, resolution,
                         phase=math.pi / max(num_views, 1))
    lights = default_lights(num_lights)
    views = []
    for vi, cam in enumerate(cams):
        if kind == "splat-list":
            rv = _render_splats(splats, cam, lights)
        else:
            rv = render_analytic(scene_from_spec(kind, material), cam, lights, ss=ss)
        mask = (rv.coverage >= 0.5)
        n_cam = rv.normal @ cam.rotation.T
        guide = perturb_normals(n_cam, noise_deg, rng)
        guide[~mask] = 0.0
        imgs = [float_to_raw(linear_to_srgb(im), 16) for im in rv.images]
        gt = {"normal": rv.normal.astype(np.float32), "albedo": rv.albedo.astype(np.float32),
              "depth": rv.depth.astype(np.float32), "lit_fraction": rv.lit_fraction.astype(np.float32)}
        views.append(View(f"view_{vi:03d}", cam, (mask * 255).astype(np.uint8), list(lights), imgs,
                          encode_normals(guide, 16), gt))
    splits = {"train_views": list(range(num_views)),
              "test_views": list(range(num_views, num_views + num_test_views)),
              "train_lights": list(range(num_lights)), "test_lights": list(range(num_lights))}
    ds = MVPSDataset(views, "srgb", True, splits)
    if root is not None:
        save_dataset(ds, root)
    return ds


def _render_splats(splats: GaussianScene, cam: Camera, lights) -> RenderedView:
    with torch.no_grad():
        gb = rasterize(splats, cam, "gbuffer")
        arrays = SplatArrays.from_scene(splats)
        bvh = build_bvh(arrays)
        images, masks = [], []
        lit = np.zeros((cam.height, cam.width))
        fg = gb.opacity[..., 0].numpy() > 0.5
        n = gb.normal.numpy()
        for light in lights:
            vis = visibility_map(gb, cam, light, bvh, arrays)
            inc = torch.as_tensor(np.repeat(vis[..., None], 3, axis=-1))
            images.append(shade_sdl(gb, cam, light, inc).numpy())
            masks.append(fg & (vis < 0.5))
            lit += fg & (vis >= 0.5) & (n @ light.direction > 0)
        o = np.maximum(gb.opacity.numpy(), 1e-8)
    return RenderedView(images, gb.opacity[..., 0].numpy(), np.where(fg[..., None], n, 0.0),
                        np.where(fg[..., None], gb.albedo.numpy() / o, 0.0),
                        np.where(fg, gb.depth[..., 0].numpy(), 0.0), lit / len(lights), masks)


# ---- splat models fitted by construction ----------------------------------

def _frame(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(normal[..., 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    tu = np.cross(helper, normal)
    tu /= np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = np.cross(normal, tu)
    return tu, tv


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def splats_on_sphere(n: int = 3000, radius: float = 1.0, center=(0.0, 0.0, 0.0), material: Material | None = None,
                     sigma_factor: float = 0.6, opacity: float = 0.995, dtype=torch.float64) -> GaussianScene:
    """Surfels tangent to a sphere on a Fibonacci lattice, sized to the lattice spacing."""
    material = material or Material()
    dirs = fibonacci_sphere(n)
    tu, tv = _frame(dirs)
    spacing = math.sqrt(4 * math.pi * radius ** 2 / n)
    sigma = sigma_factor * spacing
    splats = [Gaussian2D(np.asarray(center) + radius * d, a, b, sigma, sigma, opacity,
                         albedo=np.asarray(material.albedo), metallic=max(material.metallic, 1e-6),
                         roughness=material.roughness)
              for d, a, b in zip(dirs, tu, tv)]
    return deactivate(splats, dtype=dtype)


def splats_on_rect(rect: Rect, spacing: float, sigma_factor: float = 0.6, opacity: float = 0.995) -> list[Gaussian2D]:
    c, hu, hv = (np.asarray(x, dtype=np.float64) for x in (rect.center, rect.half_u, rect.half_v))
    lu, lv = np.linalg.norm(hu), np.linalg.norm(hv)
    eu, ev = hu / lu, hv / lv
    nu = int(round(2 * lu / spacing)) + 1
    nv = int(round(2 * lv / spacing)) + 1
    out = []
    for a in np.linspace(-1, 1, nu):
        for b in np.linspace(-1, 1, nv):
            out.append(Gaussian2D(c + a * hu + b * hv, eu, ev, sigma_factor * spacing, sigma_factor * spacing,
                                  opacity, albedo=np.asarray(rect.material.albedo), metallic=1e-6,
                                  roughness=rect.material.roughness))
    return out


def splats_for_shapes(shapes, spacing: float = 0.05, sphere_count: int = 3000, dtype=torch.float64) -> GaussianScene:
    splats: list[Gaussian2D] = []
    for s in shapes:
        if isinstance(s, Rect):
            splats += splats_on_rect(s, spacing)
        elif isinstance(s, Sphere):
            sc = splats_on_sphere(sphere_count, s.radius, s.center, s.material)
            splats += splats_from_scene(sc)
    return deactivate(splats, dtype=dtype)


def oracle_checkpoint(scene: GaussianScene, config: Config | None = None) -> Checkpoint:
    """Stage II checkpoint whose lighting network predicts a unit transport factor everywhere."""
    config = config or Config()
    net = LightMLP(config.light_field, dtype=scene.dtype)
    with torch.no_grad():
        # softplus(log(e - 1)) = 1
        net.layers[-1].bias.fill_(math.log(math.expm1(1.0)))
    return Checkpoint(scene.clone(), 2, 0, config.to_dict(), flat_parameters(net), meta={"extent": 1.0})
