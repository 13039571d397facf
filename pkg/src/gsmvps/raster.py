"""Differentiable 2D Gaussian splatting on the CPU.

Each pixel ray is intersected with every splat whose screen bounding box
covers it, hits are sorted front to back (ties broken by splat index) and
alpha blended. The forward pass runs in two phases: a no-grad culling pass
that finds and orders the hits, and a differentiable pass that recomputes
the intersection quantities for the surviving (pixel, splat) pairs only.
Gradients come from torch autograd over the second phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .config import RasterConfig
from .errors import ContractError
from .scene import (Camera, Gaussian2D, GaussianScene, activate_parameters, deactivate,
                    oriented_normals)
from .sh import eval_sh

DET_EPS = 1e-12

MAP_CHANNELS = {
    "color": 3, "albedo": 3, "metallic": 1, "roughness": 1, "normal": 3, "depth": 1,
    "opacity": 1, "tangent_u": 3, "tangent_v": 3, "scales": 2,
}


class RaySplatHit(NamedTuple):
    u: float
    v: float
    z: float
    weight: float


def camera_tensors(camera: Camera, dtype=torch.float64):
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    trans = torch.as_tensor(camera.translation, dtype=dtype)
    k = torch.as_tensor(camera.intrinsics, dtype=dtype)
    center = torch.as_tensor(camera.center, dtype=dtype)
    return rot, trans, k, center


def ray_splat(xt, yt, cu, cv, cp):
    """Solve the homogeneous ray-splat system.

    ``xt, yt`` are normalized image coordinates of the ray and ``cu, cv, cp``
    the camera-space columns ``W (s_u t_u)``, ``W (s_v t_v)`` and ``W p`` of
    the splat-to-camera transform. Returns ``(u, v, z, det)``.
    """
    a1 = xt * cu[..., 2] - cu[..., 0]
    b1 = xt * cv[..., 2] - cv[..., 0]
    c1 = xt * cp[..., 2] - cp[..., 0]
    a2 = yt * cu[..., 2] - cu[..., 1]
    b2 = yt * cv[..., 2] - cv[..., 1]
    c2 = yt * cp[..., 2] - cp[..., 1]
    det = a1 * b2 - b1 * a2
    safe = torch.where(det.abs() > DET_EPS, det, torch.ones_like(det))
    u = (b1 * c2 - c1 * b2) / safe
    v = (c1 * a2 - a1 * c2) / safe
    z = cu[..., 2] * u + cv[..., 2] * v + cp[..., 2]
    return u, v, z, det


def intersect(g: Gaussian2D, camera: Camera, pixel, config: RasterConfig | None = None) -> RaySplatHit | None:
    """Intersect the ray through ``pixel`` with one splat; ``None`` on a miss."""
    config = config or RasterConfig()
    x, y = pixel
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel {pixel} outside the image")
    rot, trans, k, _ = camera_tensors(camera)
    xt = (x - k[0, 2] - k[0, 1] * (y - k[1, 2]) / k[1, 1]) / k[0, 0]
    yt = (y - k[1, 2]) / k[1, 1]
    tu = torch.as_tensor(g.tangent_u, dtype=torch.float64)
    tv = torch.as_tensor(g.tangent_v, dtype=torch.float64)
    cu = rot @ (g.scale_u * tu)
    cv = rot @ (g.scale_v * tv)
    cp = rot @ torch.as_tensor(g.position, dtype=torch.float64) + trans
    u, v, z, det = ray_splat(xt, yt, cu, cv, cp)
    if abs(float(det)) <= DET_EPS or float(z) <= config.near:
        return None
    weight = math.exp(-0.5 * float(u * u + v * v))
    if weight < config.weight_cutoff:
        return None
    return RaySplatHit(float(u), float(v), float(z), weight)


@dataclass
class GBuffer:
    """Per-pixel maps, each a tensor of shape [H, W, C]."""

    opacity: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    color: torch.Tensor | None = None
    albedo: torch.Tensor | None = None
    metallic: torch.Tensor | None = None
    roughness: torch.Tensor | None = None
    tangent_u: torch.Tensor | None = None
    tangent_v: torch.Tensor | None = None
    scales: torch.Tensor | None = None
    cache: dict | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.opacity.shape[0]

    @property
    def width(self) -> int:
        return self.opacity.shape[1]

    def maps(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in MAP_CHANNELS if getattr(self, name) is not None}

    def detach(self) -> "GBuffer":
        return GBuffer(**{k: v.detach() for k, v in self.maps().items()})


class HitList(NamedTuple):
    """Sorted (pixel, splat) pairs; ``pixel`` ascending, then depth, then splat index."""

    pixel: torch.Tensor
    splat: torch.Tensor
    rank: torch.Tensor
    max_hits: int


def _splat_columns(a, rot, trans):
    cu = (a.tangent_u * a.scales[:, 0:1]) @ rot.T
    cv = (a.tangent_v * a.scales[:, 1:2]) @ rot.T
    cp = a.means @ rot.T + trans
    return cu, cv, cp


def _screen_bounds(a, cu, cv, cp, k, camera: Camera, config: RasterConfig):
    """Integer pixel boxes [x0, x1] x [y0, y1] covering each splat's support."""
    n = cp.shape[0]
    if config.weight_cutoff > 0:
        radius = math.sqrt(-2.0 * math.log(config.weight_cutoff))
    else:
        radius = math.inf
    full = torch.tensor([0, camera.width - 1, 0, camera.height - 1]).expand(n, 4).clone()
    if not math.isfinite(radius):
        return full
    signs = torch.tensor([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=cp.dtype)
    corners = cp[:, None, :] + radius * (signs[None, :, 0:1] * cu[:, None, :] + signs[None, :, 1:2] * cv[:, None, :])
    z = corners[..., 2]
    behind = (z <= config.near).any(dim=1)
    zs = torch.where(z > config.near, z, torch.ones_like(z))
    px = (k[0, 0] * corners[..., 0] + k[0, 1] * corners[..., 1]) / zs + k[0, 2]
    py = k[1, 1] * corners[..., 1] / zs + k[1, 2]
    x0, x1 = px.min(1).values, px.max(1).values
    y0, y1 = py.min(1).values, py.max(1).values
    if config.min_footprint_px > 0:
        # low-pass filter support around the projected center of subpixel splats
        small = _subpixel(a, cp, k, config)
        zc = torch.where(cp[:, 2] > config.near, cp[:, 2], torch.ones_like(cp[:, 2]))
        cx = (k[0, 0] * cp[:, 0] + k[0, 1] * cp[:, 1]) / zc + k[0, 2]
        cy = k[1, 1] * cp[:, 1] / zc + k[1, 2]
        r = torch.where(small, radius * config.min_footprint_px, 0.0)
        x0, x1 = torch.minimum(x0, cx - r), torch.maximum(x1, cx + r)
        y0, y1 = torch.minimum(y0, cy - r), torch.maximum(y1, cy + r)
    box = torch.stack([torch.floor(x0), torch.ceil(x1), torch.floor(y0), torch.ceil(y1)], dim=1)
    box = torch.nan_to_num(box, nan=0.0, posinf=1e9, neginf=-1e9).clamp(-1e9, 1e9).long()
    box[:, 0].clamp_(min=0)
    box[:, 1].clamp_(max=camera.width - 1)
    box[:, 2].clamp_(min=0)
    box[:, 3].clamp_(max=camera.height - 1)
    return torch.where(behind[:, None], full, box)


def _candidate_pairs(box: torch.Tensor, width: int):
    w = (box[:, 1] - box[:, 0] + 1).clamp_min(0)
    h = (box[:, 3] - box[:, 2] + 1).clamp_min(0)
    counts = w * h
    total = int(counts.sum())
    splat = torch.repeat_interleave(torch.arange(box.shape[0]), counts)
    start = torch.cumsum(counts, 0) - counts
    local = torch.arange(total) - torch.repeat_interleave(start, counts)
    ws = w[splat]
    px = box[splat, 0] + local % ws.clamp_min(1)
    py = box[splat, 2] + local // ws.clamp_min(1)
    return splat, py * width + px


def _subpixel(a, cp, k, config: RasterConfig) -> torch.Tensor:
    """Splats whose projected size is below the minimum footprint (in front of the camera)."""
    with torch.no_grad():
        zc = cp[:, 2]
        size = torch.minimum(k[0, 0], k[1, 1]) * a.scales.max(dim=1).values / zc.clamp_min(config.near)
        return (zc > config.near) & (size < config.min_footprint_px)


def _pair_terms(a, cu, cv, cp, k, splat, pixel, width: int, config: RasterConfig):
    """Intersection depth and blending weight G for each (splat, pixel) pair."""
    px = (pixel % width).to(cp.dtype)
    py = (pixel // width).to(cp.dtype)
    yt = (py - k[1, 2]) / k[1, 1]
    xt = (px - k[0, 2] - k[0, 1] * yt) / k[0, 0]
    u, v, z, det = ray_splat(xt, yt, cu[splat], cv[splat], cp[splat])
    rho = u * u + v * v
    if config.min_footprint_px > 0:
        small = _subpixel(a, cp, k, config)[splat]
        zc = cp[splat, 2]
        zc_safe = torch.where(zc > config.near, zc, torch.ones_like(zc))
        cx = (k[0, 0] * cp[splat, 0] + k[0, 1] * cp[splat, 1]) / zc_safe + k[0, 2]
        cy = k[1, 1] * cp[splat, 1] / zc_safe + k[1, 2]
        rho2d = ((px - cx) ** 2 + (py - cy) ** 2) / config.min_footprint_px ** 2
        rho2d = torch.where(small, rho2d, torch.full_like(rho2d, math.inf))
        rho = torch.minimum(rho, rho2d)
    gauss = torch.exp(-0.5 * rho)
    valid = (det.abs() > DET_EPS) & (z > config.near) & (gauss >= config.weight_cutoff)
    return z, gauss, valid


def build_hit_list(scene: GaussianScene, camera: Camera, config: RasterConfig | None = None) -> HitList:
    """Cull, intersect and sort all (pixel, splat) hits without building a graph."""
    config = config or RasterConfig()
    with torch.no_grad():
        a = activate_parameters(scene)
        rot, trans, k, _ = camera_tensors(camera, scene.dtype)
        cu, cv, cp = _splat_columns(a, rot, trans)
        box = _screen_bounds(a, cu, cv, cp, k, camera, config)
        splat, pixel = _candidate_pairs(box, camera.width)
        z, _, valid = _pair_terms(a, cu, cv, cp, k, splat, pixel, camera.width, config)
        splat, pixel, z = splat[valid], pixel[valid], z[valid]
        # stable sorts: candidates are generated in splat order, so ties in
        # depth keep the lower splat index first
        order = torch.sort(z, stable=True).indices
        splat, pixel = splat[order], pixel[order]
        order = torch.sort(pixel, stable=True).indices
        splat, pixel = splat[order], pixel[order]
        npix = camera.width * camera.height
        counts = torch.bincount(pixel, minlength=npix)
        start = torch.cumsum(counts, 0) - counts
        rank = torch.arange(pixel.shape[0]) - start[pixel]
        max_hits = int(counts.max()) if pixel.numel() else 0
    return HitList(pixel, splat, rank, max_hits)


def _as_scene(scene) -> GaussianScene:
    if isinstance(scene, GaussianScene):
        return scene
    return deactivate(list(scene))


def background_gbuffer(camera: Camera, mode: str = "gbuffer", dtype=torch.float64) -> GBuffer:
    """All-zero maps, i.e. what an empty scene renders to."""
    names = ("opacity", "depth", "normal") + (("color",) if mode == "color" else
                                              ("albedo", "metallic", "roughness", "tangent_u", "tangent_v", "scales"))
    return GBuffer(**{n: torch.zeros((camera.height, camera.width, MAP_CHANNELS[n]), dtype=dtype) for n in names})


def rasterize(scene, camera: Camera, mode: str = "gbuffer", config: RasterConfig | None = None,
              cache: bool = False, hits: HitList | None = None) -> GBuffer:
    """Render the splats into a :class:`GBuffer`.

    ``mode`` is ``"color"`` (Stage I SH color plus depth/normal/opacity) or
    ``"gbuffer"`` (material, normal, depth, opacity and the tangent/scale
    features for the lighting network). With ``cache=True`` the raw
    parameters are copied into fresh leaves so that
    :func:`rasterize_backward` can be called on the result.
    """
    if mode not in ("color", "gbuffer"):
        raise ValueError(f"unknown raster mode {mode!r}")
    config = config or RasterConfig()
    scene = _as_scene(scene)
    if len(scene) == 0:
        raise ValueError("cannot rasterize an empty scene")
    leaves = None
    if cache:
        scene = scene.clone().requires_grad_(True)
        leaves = scene
    if hits is None:
        hits = build_hit_list(scene, camera, config)

    dtype = scene.dtype
    height, width = camera.height, camera.width
    npix = height * width
    a = activate_parameters(scene)
    rot, trans, k, center = camera_tensors(camera, dtype)
    cu, cv, cp = _splat_columns(a, rot, trans)
    z, gauss, _ = _pair_terms(a, cu, cv, cp, k, hits.splat, hits.pixel, width, config)
    alpha = a.opacity[hits.splat] * gauss

    kmax = max(hits.max_hits, 1)
    padded = torch.zeros((npix, kmax), dtype=dtype).index_put((hits.pixel, hits.rank), alpha)
    trans_incl = torch.cumprod(1.0 - padded, dim=1)
    trans_excl = torch.cat([torch.ones((npix, 1), dtype=dtype), trans_incl[:, :-1]], dim=1)
    t_pair = trans_excl[hits.pixel, hits.rank]
    keep = (t_pair >= config.transmittance_cutoff).to(dtype)
    w = alpha * t_pair * keep

    def blend(values: torch.Tensor) -> torch.Tensor:
        if values.dim() == 1:
            values = values[:, None]
        out = torch.zeros((npix, values.shape[1]), dtype=dtype)
        return out.index_add(0, hits.pixel, w[:, None] * values)

    opacity = blend(w.new_ones(w.shape[0]))
    safe_o = torch.where(opacity > 0, opacity, torch.ones_like(opacity))
    depth = blend(z)
    if config.normalize_depth:
        depth = depth / safe_o
    normals = oriented_normals(a.tangent_u, a.tangent_v, a.means, center)
    normal = blend(normals[hits.splat])
    if config.normalize_normal:
        norm = normal.norm(dim=1, keepdim=True)
        normal = normal / torch.where(norm > 1e-12, norm, torch.ones_like(norm))

    def to_map(t):
        return t.reshape(height, width, -1)

    out = GBuffer(opacity=to_map(opacity), depth=to_map(depth), normal=to_map(normal))
    if mode == "color":
        dirs = a.means - center
        dirs = dirs / dirs.norm(dim=1, keepdim=True).clamp_min(1e-12)
        degree = int(round(math.sqrt(a.sh.shape[1]))) - 1
        rgb = (eval_sh(degree, a.sh, dirs) + 0.5).clamp_min(0.0)
        out.color = to_map(blend(rgb[hits.splat]))
    else:
        material = torch.cat([a.albedo, a.metallic[:, None], a.roughness[:, None]], dim=1)
        mat = blend(material[hits.splat])
        if config.normalize_material:
            mat = mat / safe_o
        out.albedo = to_map(mat[:, 0:3])
        out.metallic = to_map(mat[:, 3:4])
        out.roughness = to_map(mat[:, 4:5])
        feats = blend(torch.cat([a.tangent_u, a.tangent_v, a.scales], dim=1)[hits.splat])
        out.tangent_u = to_map(feats[:, 0:3])
        out.tangent_v = to_map(feats[:, 3:6])
        out.scales = to_map(feats[:, 6:8])
    if leaves is not None:
        out.cache = {"leaves": leaves, "hits": hits}
    return out


def rasterize_backward(gbuffer: GBuffer, upstream: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of ``sum(upstream[name] * gbuffer.<name>)`` w.r.t. every raw parameter."""
    if gbuffer.cache is None or "leaves" not in gbuffer.cache:
        raise ContractError("rasterize_backward needs a forward pass run with cache=True")
    leaves: GaussianScene = gbuffer.cache["leaves"]
    outputs, grads = [], []
    for name, g in upstream.items():
        m = getattr(gbuffer, name, None)
        if m is None:
            raise ContractError(f"gbuffer has no map named {name!r}")
        if m.requires_grad:
            outputs.append(m)
            grads.append(torch.as_tensor(g, dtype=m.dtype).expand_as(m))
    params = leaves.params()
    if not outputs:
        return {k: torch.zeros_like(v) for k, v in params.items()}
    res = torch.autograd.grad(outputs, list(params.values()), grads, retain_graph=True, allow_unused=True)
    return {k: (torch.zeros_like(v) if r is None else r) for (k, v), r in zip(params.items(), res)}


def to_numpy_maps(gbuffer: GBuffer) -> dict[str, np.ndarray]:
    return {k: v.detach().double().numpy() for k, v in gbuffer.maps().items()}
