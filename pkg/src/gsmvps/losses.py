"""Training objectives for both optimization stages."""

from __future__ import annotations

import logging

import torch

from .config import LossWeights
from .errors import MissingVisibilityError, NumericalError
from .metrics import ssim_torch
from .raster import GBuffer
from .scene import Camera
from .shading import unproject_depth

log = logging.getLogger(__name__)

OPACITY_EPS = 1e-6


def loss_rgb(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """0.8 * L1 + 0.2 * (1 - SSIM) over the full frame."""
    if rendered.shape != target.shape:
        raise ValueError(f"resolution mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    if mask is not None:
        m = mask.reshape(*mask.shape[:2], 1).to(rendered.dtype)
        rendered, target = rendered * m, target * m
    l1 = (rendered - target).abs().mean()
    return 0.8 * l1 + 0.2 * (1.0 - ssim_torch(rendered, target))


def depth_normals(depth: torch.Tensor, camera: Camera) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space normals from central differences of the unprojected depth map.

    Returns ``(normals [H, W, 3], valid [H, W])``; border pixels are invalid.
    Normals face the camera, matching the splat orientation rule.
    """
    pts = unproject_depth(depth, camera)
    h, w = depth.shape[:2]
    dx = torch.zeros_like(pts)
    dy = torch.zeros_like(pts)
    dx[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = torch.linalg.cross(dy, dx, dim=-1)
    norm = n.norm(dim=-1, keepdim=True)
    valid = torch.zeros((h, w), dtype=torch.bool)
    valid[1:-1, 1:-1] = True
    valid &= norm[..., 0] > 0
    n = n / torch.where(norm > 0, norm, torch.ones_like(norm))
    return n, valid


def _foreground(opacity: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Pixels whose 4-neighbourhood is fully foreground."""
    fg = (opacity[..., 0] > threshold).detach()
    out = torch.zeros_like(fg)
    out[1:-1, 1:-1] = fg[1:-1, 1:-1] & fg[:-2, 1:-1] & fg[2:, 1:-1] & fg[1:-1, :-2] & fg[1:-1, 2:]
    return out


def loss_normal_consistency(gbuffer: GBuffer, camera: Camera, threshold: float = 0.5) -> torch.Tensor:
    """Mean of ``1 - N . N_d`` over foreground pixels."""
    nd, valid = depth_normals(gbuffer.depth, camera)
    mask = _foreground(gbuffer.opacity, threshold) & valid
    if not mask.any():
        return gbuffer.depth.sum() * 0.0
    dot = (gbuffer.normal * nd).sum(-1)
    return (1.0 - dot)[mask].mean()


def guidance_to_world(guidance: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Apply the camera-to-world rotation to a camera-frame normal map."""
    rot = torch.as_tensor(camera.rotation, dtype=guidance.dtype)
    return guidance @ rot


def loss_normal_reg(rendered: torch.Tensor, guidance: torch.Tensor | None, camera: Camera,
                    mask: torch.Tensor, kind: str = "l1") -> torch.Tensor | None:
    """Per-pixel distance between rendered normals and world-frame guidance, averaged over ``mask``.

    Returns ``None`` (and logs a warning) when the view has no guidance map.
    """
    if guidance is None:
        log.warning("no guidance normals for this view; skipping the normal regularization term")
        return None
    target = guidance_to_world(torch.as_tensor(guidance, dtype=rendered.dtype), camera)
    mask = mask.bool() & (target.norm(dim=-1) > 0.5)
    if not mask.any():
        return rendered.sum() * 0.0
    diff = rendered[mask] - target[mask]
    if kind == "l1":
        per_pixel = diff.abs().sum(-1)
    elif kind == "l2":
        per_pixel = (diff ** 2).sum(-1)
    elif kind == "cosine":
        per_pixel = 1.0 - (rendered[mask] * target[mask]).sum(-1)
    else:
        raise ValueError(f"unknown normal regularization kind {kind!r}")
    return per_pixel.mean()


def loss_mask(opacity: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy between accumulated opacity and the object mask."""
    o = opacity.reshape(mask.shape).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS)
    m = mask.to(o.dtype)
    return (-m * torch.log(o) - (1.0 - m) * torch.log(1.0 - o)).mean()


def loss_incident(incident: torch.Tensor, visibility: torch.Tensor | None, mask: torch.Tensor) -> torch.Tensor:
    """Mean L1 between predicted incident transport [H, W, 3] and traced visibility [H, W]."""
    if visibility is None:
        raise MissingVisibilityError("no cached visibility map; run `gsmvps trace-visibility` first")
    vis = torch.as_tensor(visibility, dtype=incident.dtype)
    if vis.ndim == incident.ndim - 1:
        vis = vis[..., None]
    mask = mask.bool()
    if not mask.any():
        return incident.sum() * 0.0
    return (incident - vis.expand_as(incident)).abs()[mask].mean()


STAGE1_TERMS = ("rgb", "normal_consistency", "normal_reg", "mask")
STAGE2_TERMS = STAGE1_TERMS + ("incident",)
_WEIGHT_NAMES = {"normal_consistency": "normal_consistency", "normal_reg": "normal_reg",
                 "mask": "mask", "incident": "incident"}


def weighted_total(terms: dict[str, torch.Tensor | None], weights: LossWeights, stage: int) -> torch.Tensor:
    """``L_c + sum_k lambda_k L_k`` over the stage's terms; ``None`` terms are skipped."""
    names = STAGE1_TERMS if stage == 1 else STAGE2_TERMS
    total = None
    for name in names:
        value = terms.get(name)
        if value is None:
            continue
        if not torch.isfinite(value).all():
            raise NumericalError(f"loss term '{name}' is not finite ({float(value)})")
        w = 1.0 if name == "rgb" else getattr(weights, _WEIGHT_NAMES[name])
        contrib = value * w
        total = contrib if total is None else total + contrib
    if total is None:
        raise ValueError("no loss terms given")
    return total


def total_loss_stage1(terms: dict[str, torch.Tensor | None], weights: LossWeights) -> torch.Tensor:
    return weighted_total(terms, weights, 1)


def total_loss_stage2(terms: dict[str, torch.Tensor | None], weights: LossWeights) -> torch.Tensor:
    return weighted_total(terms, weights, 2)
