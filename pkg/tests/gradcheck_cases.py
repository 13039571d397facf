"""Randomized finite-difference cases shared by the gradient tests and the acceptance run."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from gsmvps.config import Config, LightFieldConfig, LossWeights
from gsmvps.lightfield import LightMLP, mlp_backward, predict_incident
from gsmvps.losses import (loss_incident, loss_mask, loss_normal_consistency, loss_normal_reg, loss_rgb,
                           total_loss_stage2)
from gsmvps.pipeline import render_pbr
from gsmvps.raster import GBuffer, build_hit_list, rasterize, rasterize_backward
from gsmvps.scene import DirectionalLight, GaussianScene
from gsmvps.shading import shade_sdl

from conftest import origin_camera, random_scene

H = 1e-4
RTOL = 1e-3
ATOL = 1e-6


@dataclass
class CaseResult:
    kind: str
    seed: int
    max_rel: float
    checked: int
    ok: bool


def _compare(num: np.ndarray, ana: np.ndarray, kind: str, seed: int) -> CaseResult:
    err = np.abs(num - ana)
    scale = np.maximum(np.abs(num), np.abs(ana))
    ok = bool(np.all(err <= RTOL * scale + ATOL))
    rel = float(np.max(np.where(scale > 0, err / np.maximum(scale, 1e-300), 0.0))) if err.size else 0.0
    return CaseResult(kind, seed, rel, int(err.size), ok)


def _central(f, tensors: dict[str, torch.Tensor], picks: list[tuple[str, int]]) -> np.ndarray:
    out = []
    for name, i in picks:
        base = tensors[name]
        vals = []
        for sign in (1.0, -1.0):
            t = {k: v.detach().clone() for k, v in tensors.items()}
            t[name].view(-1)[i] += sign * H
            vals.append(float(f(t).detach()))
        out.append((vals[0] - vals[1]) / (2 * H))
    return np.array(out)


def _picks(rng, tensors: dict[str, torch.Tensor], per_tensor: int) -> list[tuple[str, int]]:
    picks = []
    for name, t in tensors.items():
        n = t.numel()
        for i in rng.choice(n, size=min(per_tensor, n), replace=False):
            picks.append((name, int(i)))
    return picks


def _scene_case(rng, n_splats: int, res: int):
    cam = origin_camera(res, res, focal=float(res))
    scene = random_scene(rng, n_splats, cam)
    return cam, scene


def case_rasterize(seed: int) -> CaseResult:
    rng = np.random.default_rng(seed)
    cam, scene = _scene_case(rng, int(rng.integers(1, 11)), int(rng.integers(4, 17)))
    mode = "color" if seed % 2 else "gbuffer"
    gb = rasterize(scene, cam, mode, cache=True)
    names = [k for k, v in gb.maps().items() if v is not None]
    up = {k: torch.as_tensor(rng.normal(size=tuple(getattr(gb, k).shape))) for k in names}
    grads = rasterize_backward(gb, up)

    # finite differences evaluate the same smooth piece: hit set and order frozen at the base point
    hits = gb.cache["hits"]

    def f(params):
        out = rasterize(GaussianScene(**params), cam, mode, hits=hits)
        return sum((getattr(out, k) * up[k]).sum() for k in names)

    params = {k: v.detach() for k, v in scene.params().items()}
    if mode == "gbuffer":
        params.pop("sh")
    else:
        for k in ("albedo", "metallic", "roughness"):
            params.pop(k)
    picks = _picks(rng, params, 3)
    full = scene.params()

    def f_full(sub):
        return f({**{k: v.detach() for k, v in full.items()}, **sub})

    num = _central(f_full, params, picks)
    ana = np.array([float(grads[n].reshape(-1)[i]) for n, i in picks])
    return _compare(num, ana, f"rasterize/{mode}", seed)


def _gbuffer_leaves(rng, res: int) -> tuple:
    cam, scene = _scene_case(rng, int(rng.integers(3, 11)), res)
    with torch.no_grad():
        gb = rasterize(scene, cam, "gbuffer")
    return cam, gb


def case_shade(seed: int) -> CaseResult:
    rng = np.random.default_rng(seed)
    res = int(rng.integers(4, 17))
    cam, gb = _gbuffer_leaves(rng, res)
    d = rng.normal(size=3) + np.array([0, 0, -2.0])
    light = DirectionalLight(d / np.linalg.norm(d), rng.uniform(0.5, 3.0, 3))
    leaves = {k: getattr(gb, k).detach().clone() for k in ("albedo", "metallic", "roughness", "normal", "depth")}
    leaves["incident"] = torch.as_tensor(rng.uniform(0.1, 1.5, size=(res, res, 3)))
    up = torch.as_tensor(rng.normal(size=(res, res, 3)))

    def f(t):
        g = GBuffer(opacity=gb.opacity, depth=t["depth"], normal=t["normal"], albedo=t["albedo"],
                    metallic=t["metallic"], roughness=t["roughness"])
        return (shade_sdl(g, cam, light, t["incident"]) * up).sum()

    req = {k: v.clone().requires_grad_(True) for k, v in leaves.items()}
    grads = dict(zip(req, torch.autograd.grad(f(req), list(req.values()), allow_unused=True)))
    picks = _picks(rng, leaves, 4)
    num = _central(f, leaves, picks)
    ana = np.array([0.0 if grads[n] is None else float(grads[n].reshape(-1)[i]) for n, i in picks])
    return _compare(num, ana, "shade_sdl", seed)


def case_mlp(seed: int) -> CaseResult:
    rng = np.random.default_rng(seed)
    net = LightMLP(LightFieldConfig(bands=int(rng.integers(0, 4)), hidden=16, depth=int(rng.integers(1, 4))), seed=seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.as_tensor(rng.normal(scale=0.5, size=tuple(p.shape))))
    n = 6
    unit = lambda: torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(n, 3))), dim=1)
    inputs = {"position": torch.as_tensor(rng.uniform(-1, 1, (n, 3))), "tangent_u": unit(), "tangent_v": unit(),
              "scales": torch.as_tensor(rng.uniform(0.01, 0.2, (n, 2))), "normal": unit(), "light_dir": unit(),
              "view_dir": unit()}
    up = torch.as_tensor(rng.normal(size=(n, 3)))
    out, cache = predict_incident(net, **inputs, cache=True)
    grads = mlp_backward(net, cache, up)
    weights = {k: v.detach().clone() for k, v in net.named_parameters()}

    def f(t):
        with torch.no_grad():
            for k, p in net.named_parameters():
                p.copy_(t[k])
            val = (predict_incident(net, **{k: t[k] for k in inputs}) * up).sum()
            for k, p in net.named_parameters():
                p.copy_(weights[k])
        return val

    tensors = {**weights, **{k: v.detach().clone() for k, v in inputs.items()}}
    picks = _picks(rng, tensors, 2)
    num = _central(f, tensors, picks)
    ana = np.array([float(grads[n].reshape(-1)[i]) for n, i in picks])
    return _compare(num, ana, "mlp", seed)


def case_losses(seed: int) -> CaseResult:
    rng = np.random.default_rng(seed)
    res = int(rng.integers(6, 13))
    cam, gb = _gbuffer_leaves(rng, res)
    which = ["rgb", "normal_consistency", "normal_reg", "mask", "incident"][(seed // len(CASES)) % 5]
    mask = torch.as_tensor(rng.uniform(size=(res, res)) > 0.3)
    if which == "rgb":
        tensors = {"a": torch.as_tensor(rng.uniform(size=(res, res, 3)))}
        target = torch.as_tensor(rng.uniform(size=(res, res, 3)))
        f = lambda t: loss_rgb(t["a"], target)
    elif which == "normal_consistency":
        tensors = {"depth": gb.depth.detach().clone(), "normal": gb.normal.detach().clone()}
        f = lambda t: loss_normal_consistency(GBuffer(opacity=gb.opacity, depth=t["depth"], normal=t["normal"]), cam)
    elif which == "normal_reg":
        guide = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(res, res, 3))), dim=-1)
        tensors = {"normal": torch.as_tensor(rng.normal(size=(res, res, 3)))}
        f = lambda t: loss_normal_reg(t["normal"], guide, cam, mask)
    elif which == "mask":
        tensors = {"o": torch.as_tensor(rng.uniform(0.05, 0.95, size=(res, res, 1)))}
        f = lambda t: loss_mask(t["o"], mask)
    else:
        vis = torch.as_tensor(rng.uniform(size=(res, res)))
        tensors = {"inc": torch.as_tensor(rng.uniform(0, 1.5, size=(res, res, 3)))}
        f = lambda t: loss_incident(t["inc"], vis, mask)
    req = {k: v.clone().requires_grad_(True) for k, v in tensors.items()}
    grads = dict(zip(req, torch.autograd.grad(f(req), list(req.values()), allow_unused=True)))
    picks = _picks(rng, tensors, 6)
    num = _central(f, tensors, picks)
    ana = np.array([0.0 if grads[n] is None else float(grads[n].reshape(-1)[i]) for n, i in picks])
    return _compare(num, ana, f"loss/{which}", seed)


def case_total(seed: int, n_splats: int = 5, res: int = 8) -> CaseResult:
    """End-to-end Stage II objective w.r.t. raw splat parameters."""
    rng = np.random.default_rng(seed)
    cam, scene = _scene_case(rng, n_splats, res)
    net = LightMLP(LightFieldConfig(bands=2, hidden=16, depth=2), seed=seed)
    with torch.no_grad():
        net.layers[-1].weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(seed))
    config = Config(light_field=net.config)
    d = rng.normal(size=3) + np.array([0, 0, -2.0])
    lights = [DirectionalLight(d / np.linalg.norm(d), 2.0)]
    target = torch.as_tensor(rng.uniform(size=(res, res, 3)))
    mask = torch.as_tensor(rng.uniform(size=(res, res)) > 0.4)
    guide = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(res, res, 3))), dim=-1)
    vis = torch.as_tensor(rng.uniform(size=(1, res * res, 1)))
    weights = LossWeights()

    hits = build_hit_list(scene, cam, config.raster)

    def f(params):
        out = render_pbr(GaussianScene(**params), net, cam, lights, config, hits=hits)
        gb = out.gbuffer
        terms = {
            "rgb": loss_rgb(out.images[0], target),
            "normal_consistency": loss_normal_consistency(gb, cam),
            "normal_reg": loss_normal_reg(gb.normal, guide, cam, mask),
            "mask": loss_mask(gb.opacity, mask),
            "incident": loss_incident(out.incident, vis[:, out.fg], mask.reshape(-1)[out.fg][None]),
        }
        return total_loss_stage2(terms, weights)

    params = {k: v.detach() for k, v in scene.params().items() if k != "sh"}
    req = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    grads = dict(zip(req, torch.autograd.grad(f({**req, "sh": scene.sh}), list(req.values()))))
    picks = _picks(rng, params, 3)
    num = _central(lambda t: f({**t, "sh": scene.sh}), params, picks)
    ana = np.array([float(grads[n].reshape(-1)[i]) for n, i in picks])
    return _compare(num, ana, "total_loss", seed)


CASES = (case_rasterize, case_shade, case_mlp, case_losses, case_total)


def run_suite(num_cases: int = 200, seed0: int = 0) -> list[CaseResult]:
    out = []
    for i in range(num_cases):
        out.append(CASES[i % len(CASES)](seed0 + i))
    return out
