"""Scene representation: 2D Gaussian surfels, cameras and directional lights.

Splat parameters are stored unconstrained ("raw") in a :class:`GaussianScene`,
one tensor per field, and mapped to their constrained values by
:func:`activate_parameters`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np
import torch

from .errors import ParameterCorruptionError
from .sh import num_coeffs

SH_DEGREE = 3

# Fixed order of the raw parameter row; the checkpoint format relies on it.
RAW_FIELDS: tuple[tuple[str, int], ...] = (
    ("means", 3),
    ("tangent_u", 3),
    ("tangent_v", 3),
    ("log_scales", 2),
    ("opacity", 1),
    ("sh", 3 * num_coeffs(SH_DEGREE)),
    ("albedo", 3),
    ("metallic", 1),
    ("roughness", 1),
)
ROW_WIDTH = sum(w for _, w in RAW_FIELDS)

# Stage II material initialization: gray albedo, rough, mostly dielectric.
INIT_ALBEDO = 0.5
INIT_ROUGHNESS = 0.7
INIT_METALLIC = 0.1


def logit(x):
    if isinstance(x, torch.Tensor):
        return torch.log(x) - torch.log1p(-x)
    x = np.asarray(x, dtype=np.float64)
    return np.log(x) - np.log1p(-x)


@dataclass
class Camera:
    """Pinhole camera. Pixel (x, y) looks along ``K^-1 (x, y, 1)`` in camera space."""

    intrinsics: np.ndarray
    world_to_cam: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        rot = self.world_to_cam[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise ValueError("world_to_cam rotation block is not a proper rotation")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def cam_to_world(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.T
        out[:3, 3] = self.center
        return out

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int) -> "Camera":
        """OpenCV convention: +z forward, +x right, +y down."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        k = np.array([[focal, 0.0, (width - 1) / 2.0],
                      [0.0, focal, (height - 1) / 2.0],
                      [0.0, 0.0, 1.0]])
        return cls(k, w2c, width, height)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points [..., 3] -> (pixel coords [..., 2], camera depth [...])."""
        cam = points @ self.rotation.T + self.translation
        z = cam[..., 2]
        uvw = cam @ self.intrinsics.T
        return uvw[..., :2] / uvw[..., 2:3], z

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions with unit z, shape [H, W, 3]."""
        ys, xs = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1).astype(np.float64)
        return pix @ np.linalg.inv(self.intrinsics).T

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.tolist(), "world_to_cam": self.world_to_cam.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["intrinsics"]), np.array(d["world_to_cam"]), int(d["width"]), int(d["height"]))


@dataclass
class DirectionalLight:
    """Distant light; ``direction`` points from the surface toward the light."""

    direction: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.intensity = np.broadcast_to(np.asarray(self.intensity, dtype=np.float64), (3,)).copy()
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError(f"light direction must be unit length, got {self.direction}")
        if np.any(self.intensity < 0):
            raise ValueError("light intensity must be nonnegative")

    def scaled(self, factor: float) -> "DirectionalLight":
        return replace(self, intensity=self.intensity * factor)


@dataclass
class Gaussian2D:
    """One activated surfel (constrained values)."""

    position: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    opacity: float = 1.0
    sh: np.ndarray | None = None
    albedo: np.ndarray | None = None
    metallic: float = INIT_METALLIC
    roughness: float = INIT_ROUGHNESS

    def __post_init__(self):
        for name in ("position", "tangent_u", "tangent_v"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.sh is None:
            self.sh = np.zeros((num_coeffs(SH_DEGREE), 3))
        if self.albedo is None:
            self.albedo = np.full(3, INIT_ALBEDO)


class SplatNormalResult(NamedTuple):
    normal: np.ndarray


def splat_normal(g: Gaussian2D, cam_position) -> SplatNormalResult:
    """Unit normal ``t_u x t_v`` flipped to face the camera."""
    n = np.cross(g.tangent_u, g.tangent_v)
    n = n / np.linalg.norm(n)
    view = g.position - np.asarray(cam_position, dtype=np.float64)
    if np.dot(n, view) > 0:
        n = -n
    return SplatNormalResult(n)


def oriented_normals(tu: torch.Tensor, tv: torch.Tensor, means: torch.Tensor,
                     cam_center: torch.Tensor) -> torch.Tensor:
    """Batched :func:`splat_normal`."""
    n = torch.linalg.cross(tu, tv, dim=-1)
    n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    facing = ((means - cam_center) * n).sum(-1, keepdim=True)
    return torch.where(facing > 0, -n, n)


class Activated(NamedTuple):
    means: torch.Tensor
    tangent_u: torch.Tensor
    tangent_v: torch.Tensor
    scales: torch.Tensor
    opacity: torch.Tensor
    sh: torch.Tensor
    albedo: torch.Tensor
    metallic: torch.Tensor
    roughness: torch.Tensor


def gram_schmidt(tu: torch.Tensor, tv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    tu = tu / tu.norm(dim=-1, keepdim=True)
    tv = tv - (tv * tu).sum(-1, keepdim=True) * tu
    tv = tv / tv.norm(dim=-1, keepdim=True)
    return tu, tv


@dataclass
class GaussianScene:
    """Raw (unconstrained) parameter block, one row per splat."""

    means: torch.Tensor
    tangent_u: torch.Tensor
    tangent_v: torch.Tensor
    log_scales: torch.Tensor
    opacity: torch.Tensor
    sh: torch.Tensor
    albedo: torch.Tensor
    metallic: torch.Tensor
    roughness: torch.Tensor

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    def params(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn) -> "GaussianScene":
        return GaussianScene(**{k: fn(v) for k, v in self.params().items()})

    def clone(self) -> "GaussianScene":
        return self.map(lambda t: t.detach().clone())

    def requires_grad_(self, flag: bool = True) -> "GaussianScene":
        for t in self.params().values():
            t.requires_grad_(flag)
        return self

    def select(self, index) -> "GaussianScene":
        return self.map(lambda t: t[index])

    def to_rows(self) -> torch.Tensor:
        """Flatten to the documented [N, ROW_WIDTH] raw row layout."""
        n = len(self)
        return torch.cat([getattr(self, name).reshape(n, width) for name, width in RAW_FIELDS], dim=1)

    @classmethod
    def from_rows(cls, rows: torch.Tensor) -> "GaussianScene":
        if rows.ndim != 2 or rows.shape[1] != ROW_WIDTH:
            raise ParameterCorruptionError(f"expected rows of width {ROW_WIDTH}, got {tuple(rows.shape)}")
        out, col = {}, 0
        for name, width in RAW_FIELDS:
            block = rows[:, col:col + width]
            col += width
            if name == "sh":
                block = block.reshape(-1, num_coeffs(SH_DEGREE), 3)
            out[name] = block.clone()
        return cls(**out)

    @classmethod
    def from_splats(cls, splats: list[Gaussian2D], dtype=torch.float64) -> "GaussianScene":
        return deactivate([g for g in splats], dtype=dtype)

    def orthonormalize_(self) -> None:
        """Re-orthonormalize the stored tangents in place (after an optimizer step)."""
        with torch.no_grad():
            tu, tv = gram_schmidt(self.tangent_u, self.tangent_v)
            self.tangent_u.copy_(tu)
            self.tangent_v.copy_(tv)


def activate_parameters(scene: GaussianScene) -> Activated:
    """Map the raw block to constrained values.

    Sigmoid for opacity and material logits, exp for log-scales and
    Gram-Schmidt for the tangent pair.
    """
    for name, t in scene.params().items():
        if not torch.isfinite(t).all():
            raise ParameterCorruptionError(f"non-finite values in raw parameter '{name}'")
    tu, tv = gram_schmidt(scene.tangent_u, scene.tangent_v)
    return Activated(
        means=scene.means,
        tangent_u=tu,
        tangent_v=tv,
        scales=torch.exp(scene.log_scales),
        opacity=torch.sigmoid(scene.opacity[:, 0]),
        sh=scene.sh,
        albedo=torch.sigmoid(scene.albedo),
        metallic=torch.sigmoid(scene.metallic[:, 0]),
        roughness=torch.sigmoid(scene.roughness[:, 0]),
    )


def deactivate(splats: list[Gaussian2D], dtype=torch.float64) -> GaussianScene:
    """Inverse of :func:`activate_parameters` for a list of surfels."""
    if not splats:
        n = 0
    else:
        n = len(splats)

    def stack(fn, width):
        if n == 0:
            return torch.zeros((0, width), dtype=dtype)
        return torch.tensor(np.stack([np.asarray(fn(g), dtype=np.float64).reshape(width) for g in splats]),
                            dtype=dtype)

    eps = 1e-12
    clip = lambda x: np.clip(x, eps, 1 - eps)
    sh = stack(lambda g: g.sh, 3 * num_coeffs(SH_DEGREE)).reshape(n, num_coeffs(SH_DEGREE), 3)
    return GaussianScene(
        means=stack(lambda g: g.position, 3),
        tangent_u=stack(lambda g: g.tangent_u, 3),
        tangent_v=stack(lambda g: g.tangent_v, 3),
        log_scales=stack(lambda g: np.log([g.scale_u, g.scale_v]), 2),
        opacity=stack(lambda g: logit(clip(g.opacity)), 1),
        sh=sh,
        albedo=stack(lambda g: logit(clip(g.albedo)), 3),
        metallic=stack(lambda g: logit(clip(g.metallic)), 1),
        roughness=stack(lambda g: logit(clip(g.roughness)), 1),
    )


def splats_from_scene(scene: GaussianScene) -> list[Gaussian2D]:
    with torch.no_grad():
        a = activate_parameters(scene)
    out = []
    for i in range(len(scene)):
        out.append(Gaussian2D(
            position=a.means[i].double().numpy(),
            tangent_u=a.tangent_u[i].double().numpy(),
            tangent_v=a.tangent_v[i].double().numpy(),
            scale_u=float(a.scales[i, 0]),
            scale_v=float(a.scales[i, 1]),
            opacity=float(a.opacity[i]),
            sh=a.sh[i].double().numpy(),
            albedo=a.albedo[i].double().numpy(),
            metallic=float(a.metallic[i]),
            roughness=float(a.roughness[i]),
        ))
    return out


def init_materials_(scene: GaussianScene) -> None:
    """Reset material logits to the Stage II starting point."""
    with torch.no_grad():
        scene.albedo.fill_(float(logit(INIT_ALBEDO)))
        scene.metallic.fill_(float(logit(INIT_METALLIC)))
        scene.roughness.fill_(float(logit(INIT_ROUGHNESS)))


def empty_scene(dtype=torch.float64) -> GaussianScene:
    return deactivate([], dtype=dtype)
