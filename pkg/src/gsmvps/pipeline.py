"""Deferred physically based rendering of a splat scene under directional lights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .config import Config
from .lightfield import LightMLP, assemble_inputs
from .raster import GBuffer, HitList, background_gbuffer, rasterize
from .scene import DirectionalLight, Camera, GaussianScene
from .shading import ShadePoint, foreground, gbuffer_points, shade_points


@dataclass
class PBRRender:
    images: torch.Tensor  # [L, H, W, 3]
    incident: torch.Tensor  # [L, P, 3] at the foreground pixels
    fg: torch.Tensor  # [H*W] bool
    gbuffer: GBuffer


def mlp_inputs(gbuffer: GBuffer, camera: Camera, fg: torch.Tensor) -> tuple[ShadePoint, dict[str, torch.Tensor]]:
    """Shade points and lighting-network geometry features at the foreground pixels."""
    pts = gbuffer_points(gbuffer, camera)
    pts = ShadePoint(*(t[fg] for t in pts))
    feats = {
        "position": pts.position,
        "tangent_u": gbuffer.tangent_u.reshape(-1, 3)[fg],
        "tangent_v": gbuffer.tangent_v.reshape(-1, 3)[fg],
        "scales": gbuffer.scales.reshape(-1, 2)[fg],
        "normal": pts.normal,
        "view_dir": pts.outgoing,
    }
    return pts, feats


def predict_all_lights(net: LightMLP, feats: dict[str, torch.Tensor],
                       lights: Sequence[DirectionalLight]) -> torch.Tensor:
    """Transport factor for every (light, point) pair in one batched pass -> [L, P, 3]."""
    dtype = feats["position"].dtype
    p = feats["position"].shape[0]
    dirs = torch.as_tensor(np.stack([l.direction for l in lights]), dtype=dtype)
    # encode the geometry once and append the light direction per light
    geo = assemble_inputs(net, feats["position"], feats["tangent_u"], feats["tangent_v"], feats["scales"],
                          feats["normal"], torch.zeros(3, dtype=dtype), feats["view_dir"])
    n_light_col = geo.shape[-1] - 6
    rows = geo.unsqueeze(0).expand(len(lights), p, geo.shape[-1])
    light_cols = dirs[:, None, :].expand(len(lights), p, 3)
    rows = torch.cat([rows[..., :n_light_col], light_cols, rows[..., n_light_col + 3:]], dim=-1)
    return net(rows.reshape(-1, rows.shape[-1])).reshape(len(lights), p, 3)


def render_pbr(scene: GaussianScene, net: LightMLP | None, camera: Camera, lights: Sequence[DirectionalLight],
               config: Config | None = None, incident: Sequence[torch.Tensor] | None = None,
               hits: HitList | None = None, specular: bool = True) -> PBRRender:
    """Render every light from a single rasterization.

    ``incident`` (per light, [H, W] or [H, W, 3]) replaces the network's
    transport factor, e.g. with traced visibility; otherwise ``net`` is used.
    """
    config = config or Config()
    if len(lights) == 0:
        raise ValueError("render_pbr needs at least one light")
    h, w = camera.height, camera.width
    if len(scene) == 0:
        gb = background_gbuffer(camera, "gbuffer", scene.dtype)
        return PBRRender(torch.zeros((len(lights), h, w, 3), dtype=scene.dtype),
                         torch.zeros((len(lights), 0, 3), dtype=scene.dtype), torch.zeros(h * w, dtype=torch.bool), gb)
    gb = rasterize(scene, camera, "gbuffer", config.raster, hits=hits)
    dtype = gb.depth.dtype
    fg = foreground(gb, config.shading)
    pts, feats = mlp_inputs(gb, camera, fg)
    if incident is not None:
        inc = torch.stack([torch.as_tensor(v, dtype=dtype).reshape(h, w, -1).expand(h, w, 3).reshape(-1, 3)[fg]
                           for v in incident])
    elif net is not None:
        inc = predict_all_lights(net, feats, lights) if fg.any() else torch.zeros((len(lights), 0, 3), dtype=dtype)
    else:
        inc = torch.ones((len(lights), int(fg.sum()), 3), dtype=dtype)
    index = fg.nonzero()[:, 0]
    images = []
    for i, light in enumerate(lights):
        rad = shade_points(pts, torch.as_tensor(light.direction, dtype=dtype),
                           torch.as_tensor(light.intensity, dtype=dtype), inc[i], specular, config.shading)
        images.append(torch.zeros((h * w, 3), dtype=dtype).index_put((index,), rad).reshape(h, w, 3))
    return PBRRender(torch.stack(images), inc, fg, gb)
