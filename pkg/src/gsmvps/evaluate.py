"""Held-out evaluation and relighting of trained checkpoints."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import Config
from .data import MVPSDataset, light_average
from .errors import ContractError
from .metrics import normal_mae, psnr, ssim
from .pipeline import render_pbr
from .raster import background_gbuffer, rasterize
from .raytrace import SplatArrays, build_bvh, visibility_map
from .scene import Camera, DirectionalLight
from .train import load_mlp

NOTES = "LPIPS omitted (needs a pretrained network)."


@dataclass
class ViewScore:
    view: int
    psnr: float
    ssim: float
    normal_mae: float | None
    albedo_mae: float | None = None
    shadow_albedo_error: float | None = None


@dataclass
class EvalReport:
    per_view: list[ViewScore]
    psnr: float
    ssim: float
    normal_mae: float | None
    albedo_mae: float | None
    shadow_albedo_error: float | None
    num_gaussians: int
    stage: int
    runtime_seconds: float = 0.0
    notes: str = NOTES

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime_seconds")
        return d

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)

    def table(self) -> str:
        fmt = lambda x, spec: "-" if x is None else format(x, spec)
        lines = [f"{'view':>6} {'PSNR':>8} {'SSIM':>7} {'MAE':>7} {'albedo':>8} {'shadow':>8}"]
        for s in self.per_view:
            lines.append(f"{s.view:>6} {s.psnr:8.2f} {s.ssim:7.4f} {fmt(s.normal_mae, '7.2f')} "
                         f"{fmt(s.albedo_mae, '8.4f')} {fmt(s.shadow_albedo_error, '8.4f')}")
        lines.append(f"{'mean':>6} {self.psnr:8.2f} {self.ssim:7.4f} {fmt(self.normal_mae, '7.2f')} "
                     f"{fmt(self.albedo_mae, '8.4f')} {fmt(self.shadow_albedo_error, '8.4f')}")
        lines.append(f"gaussians {self.num_gaussians}  stage {self.stage}  runtime {self.runtime_seconds:.1f}s")
        lines.append(self.notes)
        return "\n".join(lines)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _is_training_light(light: DirectionalLight, training: list[DirectionalLight]) -> bool:
    return any(np.allclose(light.direction, t.direction, atol=1e-9) for t in training)


def render_view(ckpt: Checkpoint, camera: Camera, lights: list[DirectionalLight], config: Config | None = None,
                training_lights: list[DirectionalLight] | None = None, retrace: bool = True):
    """Stage II images for ``lights`` -> (images [L, H, W, 3], gbuffer).

    Training lights use the lighting network; other lights use traced
    visibility when ``retrace`` is set and the network otherwise.
    """
    if not ckpt.has_pbr:
        raise ContractError("checkpoint has no PBR parameters (Stage I only); train Stage II first")
    config = config or (Config.from_dict(ckpt.config) if ckpt.config else Config())
    net = load_mlp(ckpt, config)
    scene = ckpt.scene
    training = training_lights or []
    novel = [i for i, l in enumerate(lights) if retrace and training_lights is not None
             and not _is_training_light(l, training)]
    with torch.no_grad():
        out = render_pbr(scene, net, camera, lights, config)
        if not novel or len(scene) == 0:
            return out.images, out.gbuffer
        geo = scene.map(lambda t: t.double())
        arrays = SplatArrays.from_scene(geo)
        bvh = build_bvh(arrays, config.trace)
        gb64 = rasterize(geo, camera, "gbuffer", config.raster)
        vis = [visibility_map(gb64, camera, lights[i], bvh, arrays, config.trace, config.shading.mask_threshold)
               for i in novel]
        traced = render_pbr(scene, None, camera, [lights[i] for i in novel], config, incident=vis)
        images = out.images.clone()
        for j, i in enumerate(novel):
            images[i] = traced.images[j]
        return images, out.gbuffer


def relight(ckpt: Checkpoint, camera: Camera, lights: list[DirectionalLight], config: Config | None = None,
            retrace: bool = False) -> torch.Tensor:
    """Render under new lights -> [L, H, W, 3] linear radiance.

    The lighting network supplies the transport factor unless ``retrace``
    is set, in which case every light uses traced visibility.
    """
    images, _ = render_view(ckpt, camera, lights, config, [] if retrace else None, retrace)
    return images


def evaluate(ckpt: Checkpoint, dataset: MVPSDataset, config: Config | None = None,
             views: list[int] | None = None, lights: list[int] | None = None, retrace: bool = True) -> EvalReport:
    """Score a checkpoint on held-out views (default: the dataset's test split)."""
    start = time.perf_counter()
    config = config or (Config.from_dict(ckpt.config) if ckpt.config else Config())
    split = dataset.split()
    views = split["test_views"] if views is None else views
    lights = split["test_lights"] if lights is None else lights
    train_lights = split["train_lights"]
    scores = []
    for v in views:
        view = dataset.views[v]
        cam = view.camera
        if ckpt.has_pbr:
            training = [view.lights[l] for l in train_lights if l < view.num_lights]
            images, gb = render_view(ckpt, cam, [view.lights[l] for l in lights], config, training, retrace)
            preds = [images[i].double().clamp(0, 1).numpy() for i in range(len(lights))]
            targets = [dataset.image(v, l) for l in lights]
        else:
            with torch.no_grad():
                gb = (rasterize(ckpt.scene, cam, "color", config.raster) if len(ckpt.scene)
                      else background_gbuffer(cam, "color", ckpt.scene.dtype))
            preds = [gb.color.double().clamp(0, 1).numpy()]
            targets = [light_average(dataset, v)]
        p = float(np.mean([psnr(a, b) for a, b in zip(preds, targets)]))
        s = float(np.mean([ssim(a, b) for a, b in zip(preds, targets)]))
        mae = albedo = shadow = None
        mask = view.mask
        if "normal" in view.gt and mask.any():
            n = gb.normal.double().numpy()
            n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
            mae = normal_mae(n, view.gt["normal"].astype(np.float64), mask)
        if ckpt.has_pbr and "albedo" in view.gt:
            o = np.maximum(gb.opacity.double().numpy(), 1e-8)
            est = gb.albedo.double().numpy() / o
            fg = mask & (gb.opacity.double().numpy()[..., 0] > config.shading.mask_threshold)
            err = np.abs(est - view.gt["albedo"].astype(np.float64)).mean(-1)
            if fg.any():
                albedo = float(err[fg].mean())
            if "lit_fraction" in view.gt:
                lf = view.gt["lit_fraction"]
                region = fg & (lf > 0) & (lf < 1)
                if region.any():
                    shadow = float(err[region].mean())
        scores.append(ViewScore(v, p, s, mae, albedo, shadow))
    return EvalReport(
        per_view=scores,
        psnr=_mean([s.psnr for s in scores]) or 0.0,
        ssim=_mean([s.ssim for s in scores]) or 0.0,
        normal_mae=_mean([s.normal_mae for s in scores]),
        albedo_mae=_mean([s.albedo_mae for s in scores]),
        shadow_albedo_error=_mean([s.shadow_albedo_error for s in scores]),
        num_gaussians=len(ckpt.scene),
        stage=ckpt.stage,
        runtime_seconds=time.perf_counter() - start,
    )

