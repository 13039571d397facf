"""Two-stage optimization.

Stage I fits geometry and SH color to light-averaged images. Stage II swaps
color for deferred physically based shading, adds per-splat materials and
the lighting network, traces visibility once on the Stage I geometry and
fits every training (view, light) pair.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .config import Config
from .data import MVPSDataset, light_average
from .errors import DatasetError, MissingVisibilityError, NumericalError
from .lightfield import LightMLP, flat_parameters
from .losses import (loss_incident, loss_mask, loss_normal_consistency, loss_normal_reg, loss_rgb,
                     total_loss_stage1, total_loss_stage2)
from .metrics import psnr
from .optim import (Adam, TrainState, accumulate_screen_gradients, densify_and_prune, means_lr, reset_opacity,
                    scene_learning_rates)
from .pipeline import render_pbr
from .raster import build_hit_list, rasterize
from .raytrace import SplatArrays, VisibilityCache, build_bvh, scene_hash, visibility_map
from .scene import Camera, GaussianScene, init_materials_, logit
from .sh import num_coeffs, rgb_to_dc

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


# ---- initialization -------------------------------------------------------

def scene_bounds(cameras: list[Camera]) -> tuple[np.ndarray, float]:
    """Point nearest to all optical axes and the half-size of a cube seen by every camera."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.rotation[2]
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ cam.center
    center = np.linalg.lstsq(a, b, rcond=None)[0]
    radius = math.inf
    for cam in cameras:
        k = cam.intrinsics
        half = min(cam.width / k[0, 0], cam.height / k[1, 1]) / 2.0
        radius = min(radius, np.linalg.norm(cam.center - center) * half)
    return center, float(radius)


def visual_hull(dataset: MVPSDataset, views: list[int], resolution: int = 48) -> dict:
    """Carve a voxel grid with the view masks; returns surface points and outward normals."""
    cams = [dataset.views[v].camera for v in views]
    center, radius = scene_bounds(cams)
    ax = np.linspace(-radius, radius, resolution)
    grid = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3) + center
    inside = np.ones(grid.shape[0], dtype=bool)
    for v in views:
        cam = dataset.views[v].camera
        mask = dataset.views[v].mask
        pix, z = cam.project(grid)
        x = np.rint(pix[:, 0]).astype(np.int64)
        y = np.rint(pix[:, 1]).astype(np.int64)
        ok = (z > 0) & (x >= 0) & (x < cam.width) & (y >= 0) & (y < cam.height)
        hit = np.zeros_like(inside)
        hit[ok] = mask[y[ok], x[ok]]
        inside &= hit
    occ = inside.reshape((resolution,) * 3).astype(np.float64)
    padded = np.pad(occ, 1)
    core = padded[1:-1, 1:-1, 1:-1]
    full_nbrs = np.ones_like(occ, dtype=bool)
    for axis in range(3):
        for shift in (-1, 1):
            full_nbrs &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1] > 0
    surface = (core > 0) & ~full_nbrs
    # smoothed occupancy gradient points inward
    smooth = occ.copy()
    for _ in range(2):
        p = np.pad(smooth, 1, mode="edge")
        smooth = sum(np.roll(p, s, axis=a)[1:-1, 1:-1, 1:-1] for a in range(3) for s in (-1, 1)) / 6.0
    grads = np.stack(np.gradient(smooth), axis=-1)
    normals = -grads[surface]
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    pts = grid.reshape((resolution,) * 3 + (3,))[surface]
    fallback = pts - center
    normals = np.where(norm > 1e-9, normals / np.maximum(norm, 1e-12), fallback / np.maximum(
        np.linalg.norm(fallback, axis=1, keepdims=True), 1e-12))
    voxel = 2 * radius / (resolution - 1)
    return {"points": pts, "normals": normals, "center": center, "radius": radius,
            "area": surface.sum() * voxel ** 2}


def _tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    return tu, np.cross(n, tu)


def initial_colors(dataset: MVPSDataset, views: list[int], points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Average light-averaged color over the views facing each point."""
    acc = np.zeros((points.shape[0], 3))
    cnt = np.zeros(points.shape[0])
    for v in views:
        cam = dataset.views[v].camera
        img = light_average(dataset, v)
        pix, z = cam.project(points)
        facing = ((cam.center - points) * normals).sum(1) > 0
        x = np.rint(pix[:, 0]).astype(np.int64)
        y = np.rint(pix[:, 1]).astype(np.int64)
        ok = facing & (z > 0) & (x >= 0) & (x < cam.width) & (y >= 0) & (y < cam.height)
        acc[ok] += img[y[ok], x[ok]]
        cnt[ok] += 1
    mean = acc / np.maximum(cnt, 1)[:, None]
    return np.where(cnt[:, None] > 0, mean, 0.5)


def initialize_scene(dataset: MVPSDataset, config: Config, views: list[int]) -> tuple[GaussianScene, float]:
    """Surfels on the visual hull of the masks; returns the scene and the scene extent."""
    hull = visual_hull(dataset, views)
    pts, normals = hull["points"], hull["normals"]
    if pts.shape[0] == 0:
        raise DatasetError("masks carve an empty visual hull; check the cameras and masks")
    rng = np.random.default_rng(config.train.seed)
    n = min(config.train.num_init_points, pts.shape[0])
    idx = np.sort(rng.choice(pts.shape[0], size=n, replace=False))
    pts, normals = pts[idx], normals[idx]
    spacing = math.sqrt(hull["area"] / n)
    tu, tv = _tangent_frame(normals)
    colors = initial_colors(dataset, views, pts, normals)
    k = num_coeffs(config.train.sh_degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rgb_to_dc(torch.as_tensor(colors)).numpy()
    dtype = DTYPES[config.train.dtype]
    scene = GaussianScene(
        means=torch.as_tensor(pts, dtype=dtype),
        tangent_u=torch.as_tensor(tu, dtype=dtype),
        tangent_v=torch.as_tensor(tv, dtype=dtype),
        log_scales=torch.full((n, 2), math.log(0.5 * spacing), dtype=dtype),
        opacity=torch.full((n, 1), float(logit(0.5)), dtype=dtype),
        sh=torch.as_tensor(sh, dtype=dtype),
        albedo=torch.zeros((n, 3), dtype=dtype),
        metallic=torch.zeros((n, 1), dtype=dtype),
        roughness=torch.zeros((n, 1), dtype=dtype),
    )
    init_materials_(scene)
    return scene, hull["radius"]


# ---- bookkeeping ----------------------------------------------------------

@dataclass
class TrainResult:
    stage1: Checkpoint
    stage2: Checkpoint | None
    metrics: list[dict] = field(default_factory=list)
    runtime: float = 0.0
    events: list[dict] = field(default_factory=list)


class MetricsLog:
    """Append-only CSV; rows keep the first row's columns."""

    COLUMNS = ("stage", "iteration", "total", "rgb", "normal_consistency", "normal_reg", "mask", "incident",
               "psnr_probe", "num_splats")

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(self.COLUMNS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as f:
                csv.writer(f).writerow([row.get(c, "") for c in self.COLUMNS])


def _setup_determinism(config: Config) -> None:
    torch.use_deterministic_algorithms(bool(config.train.deterministic))


def _check_terms(terms: dict, scene: GaussianScene, out_dir: Path | None, stage: int, it: int, cfg: Config) -> None:
    for name, value in terms.items():
        if value is not None and not torch.isfinite(value).all():
            if out_dir is not None:
                save_checkpoint(out_dir / "abort_dump.ckpt",
                                Checkpoint(scene.clone(), stage, it, cfg.to_dict(), meta={"failed_term": name}))
            raise NumericalError(f"loss term '{name}' became non-finite at stage {stage} iteration {it}")


def _view_order(views: list[int], iters: int, gen: torch.Generator) -> list[int]:
    order: list[int] = []
    while len(order) < iters:
        perm = torch.randperm(len(views), generator=gen).tolist()
        order.extend(views[i] for i in perm)
    return order[:iters]


def _grads(scene: GaussianScene) -> dict[str, torch.Tensor | None]:
    return {k: (None if p.grad is None else p.grad.detach().clone()) for k, p in scene.params().items()}


def _zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---- Stage I --------------------------------------------------------------

def _stage1_targets(dataset: MVPSDataset, views: list[int], dtype) -> dict[int, dict]:
    out = {}
    for v in views:
        guide = dataset.guidance(v)
        out[v] = {
            "image": torch.as_tensor(light_average(dataset, v), dtype=dtype),
            "mask": torch.as_tensor(dataset.views[v].mask),
            "guidance": None if guide is None else torch.as_tensor(guide, dtype=dtype),
        }
    return out


def train_stage1(dataset: MVPSDataset, config: Config, scene: GaussianScene, extent: float,
                 metrics: MetricsLog, out_dir: Path | None = None) -> tuple[GaussianScene, list[dict]]:
    cfg = config.train
    views = dataset.split()["train_views"]
    dtype = scene.dtype
    targets = _stage1_targets(dataset, views, dtype)
    state = TrainState.create(scene, scene_learning_rates(cfg.lr, extent))
    gen = torch.Generator().manual_seed(cfg.seed)
    order = _view_order(views, cfg.stage1_iters, gen)
    dcfg = cfg.densify
    for it in range(cfg.stage1_iters):
        state.iteration = it
        v = order[it]
        cam = dataset.views[v].camera
        t = targets[v]
        scene.requires_grad_(True)
        hits = build_hit_list(scene, cam, config.raster)
        gb = rasterize(scene, cam, "color", config.raster, hits=hits)
        terms = {
            "rgb": loss_rgb(gb.color, t["image"]),
            "normal_consistency": loss_normal_consistency(gb, cam),
            "normal_reg": (loss_normal_reg(gb.normal, t["guidance"], cam, t["mask"], config.weights.normal_reg_kind)
                           if cfg.normal_reg else None),
            "mask": loss_mask(gb.opacity, t["mask"]),
        }
        _check_terms(terms, scene, out_dir, 1, it, config)
        total = total_loss_stage1(terms, config.weights)
        _zero_grads(scene.params().values())
        total.backward()
        grads = _grads(scene)
        scene.requires_grad_(False)
        lr = {"means": means_lr(cfg.lr, extent, it, cfg.stage1_iters)}
        state.optimizer.step(grads, lr)
        scene.orthonormalize_()
        if dcfg.interval > 0 and dcfg.start <= it < dcfg.stop:
            accumulate_screen_gradients(state, scene, grads["means"], cam, hits)
            if it > dcfg.start and (it - dcfg.start) % dcfg.interval == 0:
                scene = densify_and_prune(state, scene, dcfg, extent, gen)
            if dcfg.opacity_reset_interval > 0 and it > 0 and it % dcfg.opacity_reset_interval == 0:
                reset_opacity(state, scene)
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.stage1_iters - 1):
            _log_row(metrics, 1, it, total, terms, scene, _probe_psnr_stage1(scene, dataset, views[0], config,
                                                                            targets[views[0]]["image"]))
    return scene, state.events


def _probe_psnr_stage1(scene, dataset, view, config, target) -> float:
    with torch.no_grad():
        gb = rasterize(scene, dataset.views[view].camera, "color", config.raster)
    return psnr(gb.color.clamp(0, 1), target)


def _log_row(metrics: MetricsLog, stage: int, it: int, total, terms: dict, scene, probe: float) -> None:
    row = {"stage": stage, "iteration": it, "total": float(total.detach()), "psnr_probe": probe, "num_splats": len(scene)}
    for k, v in terms.items():
        row[k] = "" if v is None else float(v.detach())
    metrics.append(row)
    log.info("stage %d it %d loss %.5f psnr %.2f splats %d", stage, it, float(total.detach()), probe, len(scene))


# ---- Stage II -------------------------------------------------------------

def compute_visibility(dataset: MVPSDataset, scene: GaussianScene, config: Config, views: list[int],
                       lights: list[int], cache_dir: Path | None = None) -> dict[tuple[int, int], np.ndarray]:
    """Visibility maps for every (view, light) on the given geometry, reusing a matching disk cache."""
    key = scene_hash(scene)
    cache = VisibilityCache(cache_dir) if cache_dir else None
    if cache is not None:
        try:
            man = cache.manifest()
            if man.get("checkpoint_hash") == key:
                return {(v, l): cache.read(v, l) for v in views for l in lights}
        except MissingVisibilityError:
            pass
    geo = scene.map(lambda t: t.detach().double())
    arrays = SplatArrays.from_scene(geo)
    bvh = build_bvh(arrays, config.trace)
    out = {}
    with torch.no_grad():
        for v in views:
            cam = dataset.views[v].camera
            gb = rasterize(geo, cam, "gbuffer", config.raster)
            for l in lights:
                out[(v, l)] = visibility_map(gb, cam, dataset.views[v].lights[l], bvh, arrays, config.trace,
                                             config.shading.mask_threshold)
    if cache is not None:
        for (v, l), vis in out.items():
            cache.write(v, l, vis)
        cache.write_manifest(key, sorted(out))
        # round through the cache so cached and fresh runs see identical float32 maps
        out = {k: cache.read(*k) for k in out}
    else:
        out = {k: vis.astype(np.float32) for k, vis in out.items()}
    return out


def new_light_mlp(config: Config) -> LightMLP:
    return LightMLP(config.light_field, seed=config.train.seed, dtype=DTYPES[config.train.dtype])


def train_stage2(dataset: MVPSDataset, config: Config, scene: GaussianScene, extent: float,
                 metrics: MetricsLog, out_dir: Path | None = None,
                 visibility: dict | None = None) -> tuple[GaussianScene, LightMLP]:
    cfg = config.train
    split = dataset.split()
    views, lights = split["train_views"], split["train_lights"]
    dtype = scene.dtype
    init_materials_(scene)
    net = new_light_mlp(config)
    if visibility is None:
        visibility = compute_visibility(dataset, scene, config, views, lights,
                                        out_dir / "visibility" if out_dir else None)
    images = {v: torch.stack([torch.as_tensor(dataset.image(v, l), dtype=dtype) for l in lights]) for v in views}
    masks = {v: torch.as_tensor(dataset.views[v].mask) for v in views}
    guides = {v: (None if (g := dataset.guidance(v)) is None else torch.as_tensor(g, dtype=dtype)) for v in views}
    vis_t = {}
    for v in views:
        stack = torch.stack([torch.as_tensor(visibility[(v, l)], dtype=dtype) for l in lights])
        if config.weights.incident_target == "visibility_intensity":
            inten = torch.as_tensor(np.stack([dataset.views[v].lights[l].intensity for l in lights]), dtype=dtype)
            stack = stack[..., None] * inten[:, None, None, :]
        vis_t[v] = stack

    lrs = scene_learning_rates(cfg.lr, extent)
    state = TrainState.create(scene, lrs)
    mlp_params = dict(net.named_parameters())
    mlp_opt = Adam(mlp_params, cfg.lr.light_mlp)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    order = _view_order(views, cfg.stage2_iters, gen)
    for it in range(cfg.stage2_iters):
        state.iteration = it
        v = order[it]
        cam = dataset.views[v].camera
        if cfg.lights_per_step and cfg.lights_per_step < len(lights):
            sel = sorted(torch.randperm(len(lights), generator=gen)[:cfg.lights_per_step].tolist())
        else:
            sel = list(range(len(lights)))
        light_objs = [dataset.views[v].lights[lights[i]] for i in sel]
        scene.requires_grad_(True)
        out = render_pbr(scene, net, cam, light_objs, config)
        gb = out.gbuffer
        target = images[v][sel]
        h, w = cam.height, cam.width
        pred_ch = out.images.permute(1, 2, 0, 3).reshape(h, w, -1)
        tgt_ch = target.permute(1, 2, 0, 3).reshape(h, w, -1)
        inc_mask = masks[v].reshape(-1)[out.fg]
        vis_fg = vis_t[v][sel].reshape(len(sel), h * w, -1)[:, out.fg]
        terms = {
            "rgb": loss_rgb(pred_ch, tgt_ch),
            "normal_consistency": loss_normal_consistency(gb, cam),
            "normal_reg": (loss_normal_reg(gb.normal, guides[v], cam, masks[v], config.weights.normal_reg_kind)
                           if cfg.normal_reg else None),
            "mask": loss_mask(gb.opacity, masks[v]),
            "incident": (loss_incident(out.incident, vis_fg, inc_mask.expand(len(sel), -1))
                         if config.weights.incident > 0 else None),
        }
        _check_terms(terms, scene, out_dir, 2, it, config)
        total = total_loss_stage2(terms, config.weights)
        _zero_grads(list(scene.params().values()) + list(mlp_params.values()))
        total.backward()
        grads = _grads(scene)
        mgrads = {k: p.grad.detach().clone() if p.grad is not None else None for k, p in mlp_params.items()}
        scene.requires_grad_(False)
        with torch.no_grad():
            state.optimizer.step(grads, {"means": means_lr(cfg.lr, extent, it, cfg.stage2_iters)})
            mlp_opt.step(mgrads)
        scene.orthonormalize_()
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.stage2_iters - 1):
            with torch.no_grad():
                probe = render_pbr(scene, net, dataset.views[views[0]].camera,
                                   [dataset.views[views[0]].lights[lights[0]]], config)
            _log_row(metrics, 2, it, total, terms, scene,
                     psnr(probe.images[0].clamp(0, 1), images[views[0]][0]))
    for p in mlp_params.values():
        p.requires_grad_(False)
    return scene, net


# ---- orchestration --------------------------------------------------------

def stage_checkpoint(scene: GaussianScene, stage: int, iteration: int, config: Config,
                     net: LightMLP | None = None, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(scene.clone(), stage, iteration, config.to_dict(),
                      None if net is None else flat_parameters(net), meta=dict(meta or {}))


def train(dataset: MVPSDataset, config: Config | None = None, out_dir: str | Path | None = None,
          stage1: Checkpoint | None = None, stages: tuple[int, ...] = (1, 2)) -> TrainResult:
    """Run Stage I then Stage II; ``stage1`` resumes from a saved Stage I checkpoint."""
    config = config or Config()
    _setup_determinism(config)
    start = time.perf_counter()
    out = Path(out_dir) if out_dir else None
    metrics = MetricsLog(out / "metrics.csv" if out else None)
    views = dataset.split()["train_views"]
    if not views:
        raise DatasetError("dataset has no training views")
    if config.train.normal_reg and any(dataset.views[v].normal_raw is None for v in views):
        log.warning("some training views lack guidance normals; their normal regularization is skipped")
    events: list[dict] = []
    if stage1 is None:
        scene, extent = initialize_scene(dataset, config, views)
        if 1 in stages:
            scene, events = train_stage1(dataset, config, scene, extent, metrics, out)
        ck1 = stage_checkpoint(scene, 1, config.train.stage1_iters if 1 in stages else 0, config,
                               meta={"extent": extent})
    else:
        ck1 = stage1
        extent = float(ck1.meta.get("extent", 1.0))
    if out:
        save_checkpoint(out / "stage1.ckpt", ck1)
    ck2 = None
    if 2 in stages:
        scene2 = ck1.scene.map(lambda t: t.to(DTYPES[config.train.dtype]).clone())
        scene2, net = train_stage2(dataset, config, scene2, extent, metrics, out)
        ck2 = stage_checkpoint(scene2, 2, config.train.stage2_iters, config, net, meta={"extent": extent})
        if out:
            save_checkpoint(out / "stage2.ckpt", ck2)
    return TrainResult(ck1, ck2, metrics.rows, time.perf_counter() - start, events)


def load_mlp(ckpt: Checkpoint, config: Config | None = None) -> LightMLP:
    """Rebuild the lighting network stored in a Stage II checkpoint."""
    if ckpt.mlp is None:
        raise ValueError("checkpoint has no lighting network")
    if config is None:
        config = Config.from_dict(ckpt.config) if ckpt.config else Config()
    some = next(iter(ckpt.mlp.values()))
    net = LightMLP(config.light_field, dtype=some.dtype)
    net.load_state_dict(ckpt.mlp)
    for p in net.parameters():
        p.requires_grad_(False)
    return net
