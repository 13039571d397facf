"""Deferred physically based shading of a G-buffer under directional lights.

BRDF: Lambertian diffuse scaled by ``1 - metallic`` plus a GGX specular lobe
with height-correlated Smith masking and Schlick Fresnel,
``F0 = lerp(0.04, albedo, metallic)``, ``alpha_g = roughness^2``.
All quantities are linear radiance.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .config import ShadingConfig
from .errors import InvalidPixelError
from .raster import GBuffer, camera_tensors
from .scene import Camera, DirectionalLight


class BRDFSample(NamedTuple):
    diffuse: torch.Tensor
    specular: torch.Tensor
    cosine: torch.Tensor


class ShadePoint(NamedTuple):
    position: torch.Tensor
    normal: torch.Tensor
    outgoing: torch.Tensor
    albedo: torch.Tensor
    metallic: torch.Tensor
    roughness: torch.Tensor


def _dot(a, b):
    return (a * b).sum(-1)


def _normalize(v):
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def unproject(pixel, depth: float, camera: Camera) -> np.ndarray:
    """World position of ``pixel`` at camera-space depth ``depth``."""
    if not depth > 0:
        raise InvalidPixelError(f"depth must be positive, got {depth}")
    x, y = pixel
    cam = depth * (np.linalg.inv(camera.intrinsics) @ np.array([x, y, 1.0]))
    return camera.rotation.T @ (cam - camera.translation)


def project(point, camera: Camera) -> np.ndarray:
    pix, _ = camera.project(np.asarray(point, dtype=np.float64))
    return pix


def unproject_depth(depth: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Depth map [H, W, 1] -> world positions [H, W, 3]."""
    rot, trans, _, _ = camera_tensors(camera, depth.dtype)
    rays = torch.as_tensor(camera.pixel_rays(), dtype=depth.dtype)
    cam = rays * depth
    return (cam - trans) @ rot


def ggx_distribution(n_dot_h, alpha_g):
    a2 = alpha_g * alpha_g
    d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * d * d)


def smith_height_correlated(n_dot_l, n_dot_v, alpha_g):
    """Height-correlated Smith masking-shadowing G2 (not the visibility form)."""
    a2 = alpha_g * alpha_g
    lam_v = n_dot_l * torch.sqrt(a2 + (1.0 - a2) * n_dot_v * n_dot_v)
    lam_l = n_dot_v * torch.sqrt(a2 + (1.0 - a2) * n_dot_l * n_dot_l)
    denom = lam_v + lam_l
    return 2.0 * n_dot_l * n_dot_v / torch.where(denom > 0, denom, torch.ones_like(denom))


def schlick_fresnel(f0, v_dot_h):
    return f0 + (1.0 - f0) * (1.0 - v_dot_h).clamp(0.0, 1.0)[..., None] ** 5


def eval_brdf(point: ShadePoint, incoming: torch.Tensor, config: ShadingConfig | None = None) -> BRDFSample:
    """Evaluate diffuse and specular BRDF values (batched over leading dims)."""
    config = config or ShadingConfig()
    n, wo, wi = point.normal, point.outgoing, incoming
    n_dot_l_raw = _dot(n, wi)
    lit = n_dot_l_raw > 0
    n_dot_l = n_dot_l_raw.clamp_min(0.0)
    n_dot_v = _dot(n, wo).clamp_min(0.0)
    h = _normalize(wi + wo)
    n_dot_h = _dot(n, h).clamp(0.0, 1.0)
    v_dot_h = _dot(wo, h).clamp(0.0, 1.0)

    metallic = point.metallic
    rough = point.roughness.clamp_min(config.roughness_floor)
    alpha_g = rough * rough
    f0 = 0.04 * (1.0 - metallic[..., None]) + point.albedo * metallic[..., None]
    d = ggx_distribution(n_dot_h, alpha_g)
    g = smith_height_correlated(n_dot_l, n_dot_v, alpha_g)
    f = schlick_fresnel(f0, v_dot_h)
    denom = (4.0 * n_dot_l * n_dot_v).clamp_min(config.denom_floor)
    specular = f * (d * g / denom)[..., None]
    diffuse = (1.0 - metallic[..., None]) * point.albedo / math.pi
    lit3 = lit[..., None]
    zero = torch.zeros_like(diffuse)
    return BRDFSample(torch.where(lit3, diffuse, zero), torch.where(lit3, specular, zero), n_dot_l)


def shade_points(point: ShadePoint, light_dir: torch.Tensor, intensity: torch.Tensor,
                 incident: torch.Tensor, specular: bool = True,
                 config: ShadingConfig | None = None) -> torch.Tensor:
    """Radiance ``intensity * incident * f * cos`` for flattened shade points [P, ...]."""
    wi = light_dir.expand_as(point.normal)
    s = eval_brdf(point, wi, config)
    f = s.diffuse + s.specular if specular else s.diffuse
    return intensity * incident * f * s.cosine[..., None]


def gbuffer_points(gbuffer: GBuffer, camera: Camera) -> ShadePoint:
    """Shade points for every pixel of a G-buffer, flattened to [H*W]."""
    dtype = gbuffer.depth.dtype
    _, _, _, center = camera_tensors(camera, dtype)
    pos = unproject_depth(gbuffer.depth, camera).reshape(-1, 3)
    wo = _normalize(center - pos)
    return ShadePoint(
        position=pos,
        normal=_normalize(gbuffer.normal.reshape(-1, 3)),
        outgoing=wo,
        albedo=gbuffer.albedo.reshape(-1, 3),
        metallic=gbuffer.metallic.reshape(-1),
        roughness=gbuffer.roughness.reshape(-1),
    )


def foreground(gbuffer: GBuffer, config: ShadingConfig | None = None) -> torch.Tensor:
    config = config or ShadingConfig()
    return (gbuffer.opacity.reshape(-1) > config.mask_threshold).detach()


def shade_sdl(gbuffer: GBuffer, camera: Camera, light: DirectionalLight,
              incident: torch.Tensor | None = None, specular: bool = True,
              config: ShadingConfig | None = None) -> torch.Tensor:
    """Shade every foreground pixel under one directional light -> [H, W, 3].

    ``incident`` is the per-pixel transport factor (visibility-like, [H, W, 3]
    or broadcastable); it multiplies the light's RGB intensity.
    """
    config = config or ShadingConfig()
    dtype = gbuffer.depth.dtype
    h, w = gbuffer.height, gbuffer.width
    if incident is None:
        incident = torch.ones((h, w, 3), dtype=dtype)
    incident = torch.as_tensor(incident, dtype=dtype).expand(h, w, 3).reshape(-1, 3)
    mask = foreground(gbuffer, config)
    pts = gbuffer_points(gbuffer, camera)
    pts = ShadePoint(*(t[mask] for t in pts))
    radiance = shade_points(pts, torch.as_tensor(light.direction, dtype=dtype),
                            torch.as_tensor(light.intensity, dtype=dtype), incident[mask], specular, config)
    out = torch.zeros((h * w, 3), dtype=dtype).index_put((mask.nonzero()[:, 0],), radiance)
    return out.reshape(h, w, 3)


def shade_multi_light(gbuffer: GBuffer, camera: Camera, lights: Sequence[DirectionalLight],
                      incident: Sequence[torch.Tensor] | None = None, specular: bool = True,
                      config: ShadingConfig | None = None) -> torch.Tensor:
    """Sum of :func:`shade_sdl` over a set of lights."""
    if len(lights) == 0:
        raise ValueError("shade_multi_light needs at least one light")
    total = None
    for i, light in enumerate(lights):
        img = shade_sdl(gbuffer, camera, light, None if incident is None else incident[i], specular, config)
        total = img if total is None else total + img
    return total
