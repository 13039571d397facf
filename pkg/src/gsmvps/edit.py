"""Material and geometry edits on Stage II checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ContractError
from .scene import GaussianScene

log = logging.getLogger(__name__)

OPS = ("material-replace", "material-scale", "remove-region")
# material values are clipped away from {0, 1} before taking the logit
EPS = 1e-7


@dataclass
class Region:
    """Axis-aligned box (``lo``/``hi``) or sphere (``center``/``radius``) in world space."""

    kind: str
    lo: tuple[float, float, float] | None = None
    hi: tuple[float, float, float] | None = None
    center: tuple[float, float, float] | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.kind == "box":
            if self.lo is None or self.hi is None or len(self.lo) != 3 or len(self.hi) != 3:
                raise ValueError("box region needs 3D lo and hi corners")
        elif self.kind == "sphere":
            if self.center is None or len(self.center) != 3 or self.radius is None or self.radius < 0:
                raise ValueError("sphere region needs a 3D center and a nonnegative radius")
        else:
            raise ValueError(f"unknown region kind {self.kind!r}")

    def contains(self, points: torch.Tensor) -> torch.Tensor:
        p = points.detach().double()
        if self.kind == "box":
            lo = torch.tensor(self.lo, dtype=torch.float64)
            hi = torch.tensor(self.hi, dtype=torch.float64)
            return ((p >= lo) & (p <= hi)).all(dim=1)
        c = torch.tensor(self.center, dtype=torch.float64)
        return ((p - c) ** 2).sum(dim=1) <= self.radius ** 2


@dataclass
class EditSpec:
    """One edit; ``region=None`` selects every splat.

    ``material-replace`` sets the given material values, ``material-scale``
    multiplies the activated values by the factors (clipped to [0, 1]) and
    ``remove-region`` deletes the selected splats.
    """

    op: str
    region: Region | None = None
    albedo: tuple[float, float, float] | None = None
    metallic: float | None = None
    roughness: float | None = None
    albedo_scale: float = 1.0
    metallic_scale: float = 1.0
    roughness_scale: float = 1.0

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown edit {self.op!r}; expected one of {', '.join(OPS)}")
        if self.op == "material-replace":
            if self.albedo is None and self.metallic is None and self.roughness is None:
                raise ValueError("material-replace needs at least one of albedo, metallic, roughness")
            if self.albedo is not None and len(self.albedo) != 3:
                raise ValueError("albedo must have 3 components")
            values = list(self.albedo or []) + [v for v in (self.metallic, self.roughness) if v is not None]
            if any(not 0.0 <= v <= 1.0 for v in values):
                raise ValueError("material values must lie in [0, 1]")
        if self.op == "material-scale":
            if any(not np.isfinite(s) or s < 0 for s in (self.albedo_scale, self.metallic_scale,
                                                          self.roughness_scale)):
                raise ValueError("scale factors must be finite and nonnegative")
        if self.op == "remove-region" and self.region is None:
            log.info("remove-region without a region removes every splat")


def _logit(values: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    v = values.double().clamp(EPS, 1.0 - EPS)
    return (torch.log(v) - torch.log1p(-v)).to(dtype)


def select(scene: GaussianScene, region: Region | None) -> torch.Tensor:
    if region is None:
        return torch.ones(len(scene), dtype=torch.bool)
    return region.contains(scene.means)


@torch.no_grad()
def apply_edit(ckpt: Checkpoint, spec: EditSpec) -> Checkpoint:
    """Return the edited checkpoint; an empty selection returns ``ckpt`` itself with a warning."""
    if not ckpt.has_pbr:
        raise ContractError("edits need a Stage II checkpoint with material parameters")
    scene = ckpt.scene
    mask = select(scene, spec.region)
    if not mask.any():
        log.warning("edit selects no splats; checkpoint left unchanged")
        return ckpt
    out = scene.clone()
    if spec.op == "remove-region":
        out = out.select(~mask)
    elif spec.op == "material-replace":
        for name, value in (("albedo", spec.albedo), ("metallic", spec.metallic), ("roughness", spec.roughness)):
            if value is None:
                continue
            field = getattr(out, name)
            target = torch.as_tensor(value, dtype=torch.float64).reshape(1, -1).expand(int(mask.sum()), -1)
            field[mask] = _logit(target, field.dtype)
    else:
        for name, factor in (("albedo", spec.albedo_scale), ("metallic", spec.metallic_scale),
                             ("roughness", spec.roughness_scale)):
            if factor == 1.0:
                continue
            field = getattr(out, name)
            field[mask] = _logit(torch.sigmoid(field[mask].double()) * factor, field.dtype)
    log.info("%s applied to %d of %d splats", spec.op, int(mask.sum()), len(scene))
    return Checkpoint(out, ckpt.stage, ckpt.iteration, dict(ckpt.config),
                      {k: v.clone() for k, v in ckpt.mlp.items()}, dict(ckpt.extra), dict(ckpt.meta))
