"""Adam with per-group learning rates, plus splat densification and pruning.

Moments live next to the parameters they track so that densify/prune can
extend or compact both in one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .config import DensifyConfig, LearningRates
from .errors import ContractError
from .raster import HitList
from .scene import Camera, GaussianScene, activate_parameters

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15

# learning-rate group of each raw scene field
SCENE_GROUPS = {
    "means": "means",
    "tangent_u": "tangents",
    "tangent_v": "tangents",
    "log_scales": "log_scales",
    "opacity": "opacity",
    "sh": "sh",
    "albedo": "albedo",
    "metallic": "metallic",
    "roughness": "roughness",
}


class Adam:
    """Adam with bias correction over a dict of named tensors, updated in place."""

    def __init__(self, params: dict[str, torch.Tensor], lr: dict[str, float] | float,
                 betas: tuple[float, float] = (BETA1, BETA2), eps: float = EPS):
        self.params = dict(params)
        self.lr = lr if isinstance(lr, dict) else {k: float(lr) for k in params}
        missing = set(self.params) - set(self.lr)
        if missing:
            raise ContractError(f"no learning rate for {sorted(missing)}")
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}

    def check(self) -> None:
        for k, p in self.params.items():
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise ContractError(f"optimizer moments for '{k}' have shape {tuple(self.m[k].shape)}, "
                                    f"parameter has {tuple(p.shape)}")

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor | None], lr: dict[str, float] | None = None) -> None:
        self.check()
        lr = {**self.lr, **(lr or {})}
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(f"gradient for '{k}' has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m, v = self.m[k], self.v[k]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr[k] / c1)

    def replace(self, name: str, tensor: torch.Tensor, m: torch.Tensor, v: torch.Tensor) -> None:
        self.params[name] = tensor
        self.m[name] = m
        self.v[name] = v

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = state["m"][k].clone()
            self.v[k] = state["v"][k].clone()
        self.check()


def adam_step(optimizer: Adam, grads: dict[str, torch.Tensor | None], lr: dict[str, float] | None = None) -> None:
    optimizer.step(grads, lr)


def scene_learning_rates(lr: LearningRates, extent: float = 1.0) -> dict[str, float]:
    out = {k: getattr(lr, g) for k, g in SCENE_GROUPS.items()}
    out["means"] = lr.means * extent
    return out


def means_lr(lr: LearningRates, extent: float, step: int, total: int) -> float:
    """Log-linear decay of the position learning rate over a stage."""
    frac = 0.0 if total <= 1 else min(max(step / (total - 1), 0.0), 1.0)
    return lr.means * extent * math.exp(frac * math.log(lr.means_final_fraction))


@dataclass
class TrainState:
    iteration: int
    optimizer: Adam
    grad_accum: torch.Tensor
    grad_count: torch.Tensor
    events: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, scene: GaussianScene, lr: dict[str, float], iteration: int = 0) -> "TrainState":
        opt = Adam(scene.params(), lr)
        n = len(scene)
        return cls(iteration, opt, torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64))

    def check(self, scene: GaussianScene) -> None:
        n = len(scene)
        for k, p in scene.params().items():
            if self.optimizer.params.get(k) is not p:
                raise ContractError(f"optimizer is not bound to scene field '{k}'")
        self.optimizer.check()
        if self.grad_accum.shape[0] != n or self.grad_count.shape[0] != n:
            raise ContractError("densification statistics do not match the splat count")


@torch.no_grad()
def accumulate_screen_gradients(state: TrainState, scene: GaussianScene, mean_grad: torch.Tensor,
                                camera: Camera, hits: HitList) -> None:
    """Add each visible splat's screen-space positional gradient norm (NDC units)."""
    rot = torch.as_tensor(camera.rotation, dtype=mean_grad.dtype)
    trans = torch.as_tensor(camera.translation, dtype=mean_grad.dtype)
    g_cam = mean_grad @ rot.T
    z = (scene.means.detach() @ rot.T + trans)[:, 2].clamp_min(1e-6)
    fx, fy = camera.intrinsics[0, 0], camera.intrinsics[1, 1]
    # d(mean_cam.x) = z / fx d(pixel.x); d(ndc) = 2 / W d(pixel)
    gx = g_cam[:, 0] * z / fx * camera.width / 2.0
    gy = g_cam[:, 1] * z / fy * camera.height / 2.0
    norm = torch.sqrt(gx ** 2 + gy ** 2).double()
    visible = torch.zeros(len(scene), dtype=torch.bool)
    visible[hits.splat.unique()] = True
    state.grad_accum[visible] += norm[visible]
    state.grad_count[visible] += 1


def _rebuild(state: TrainState, scene: GaussianScene, keep: torch.Tensor,
             new_rows: dict[str, torch.Tensor]) -> GaussianScene:
    """Compact parameters, moments and statistics to ``keep`` and append ``new_rows``."""
    opt = state.optimizer
    out = {}
    for name, p in scene.params().items():
        extra = new_rows[name]
        t = torch.cat([p.detach()[keep], extra.to(p.dtype)], dim=0).contiguous()
        m = torch.cat([opt.m[name][keep], torch.zeros_like(extra, dtype=p.dtype)], dim=0)
        v = torch.cat([opt.v[name][keep], torch.zeros_like(extra, dtype=p.dtype)], dim=0)
        opt.replace(name, t, m, v)
        out[name] = t
    n_new = next(iter(new_rows.values())).shape[0]
    zeros = torch.zeros(n_new, dtype=torch.float64)
    state.grad_accum = torch.cat([state.grad_accum[keep], zeros])
    state.grad_count = torch.cat([state.grad_count[keep], zeros])
    return GaussianScene(**out)


@torch.no_grad()
def densify_and_prune(state: TrainState, scene: GaussianScene, config: DensifyConfig, extent: float,
                      generator: torch.Generator | None = None) -> GaussianScene:
    """Clone or split high-gradient splats, then prune transparent or oversized ones.

    Small splats are cloned in place with the opacity of each copy set to
    ``1 - sqrt(1 - o)``, so the pair composites to the original opacity.
    Large splats are replaced by two children sampled from their footprint
    with scales divided by 1.6. Returns the new scene; ``state`` is updated
    in place and stays aligned with it.
    """
    n = len(scene)
    a = activate_parameters(scene)
    avg = state.grad_accum / state.grad_count.clamp_min(1.0)
    candidates = avg >= config.grad_threshold
    room = max(config.max_gaussians - n, 0)
    if int(candidates.sum()) > room:
        # keep the strongest gradients, ties to the lower index
        order = torch.sort(-avg, stable=True).indices[:room]
        limited = torch.zeros_like(candidates)
        limited[order] = True
        candidates &= limited
    max_scale = a.scales.max(dim=1).values
    clone = candidates & (max_scale <= config.percent_dense * extent)
    split = candidates & ~clone

    raw = {k: v.detach() for k, v in scene.params().items()}
    new_rows = {k: v[:0] for k, v in raw.items()}

    if clone.any():
        o = a.opacity[clone].clamp(1e-6, 1.0 - 1e-6)
        o_half = 1.0 - torch.sqrt(1.0 - o)
        logit_half = torch.log(o_half) - torch.log1p(-o_half)
        raw["opacity"] = raw["opacity"].clone()
        raw["opacity"][clone, 0] = logit_half.to(raw["opacity"].dtype)
        rows = {k: v[clone].clone() for k, v in raw.items()}
        new_rows = {k: torch.cat([new_rows[k], rows[k]]) for k in raw}

    if split.any():
        idx = split.nonzero()[:, 0]
        children = []
        for _ in range(2):
            sample = torch.randn((idx.shape[0], 2), generator=generator, dtype=torch.float64).to(raw["means"].dtype)
            offset = (sample[:, 0:1] * a.scales[idx, 0:1] * a.tangent_u[idx]
                      + sample[:, 1:2] * a.scales[idx, 1:2] * a.tangent_v[idx])
            rows = {k: v[idx].clone() for k, v in raw.items()}
            rows["means"] = rows["means"] + offset
            rows["log_scales"] = rows["log_scales"] - math.log(1.6)
            children.append(rows)
        new_rows = {k: torch.cat([new_rows[k]] + [c[k] for c in children]) for k in raw}

    # prune pass on the pre-densify splats; freshly created rows are kept
    prune = (a.opacity < config.min_opacity) | (max_scale > config.max_scale_fraction * extent) | split
    keep = ~prune
    scene = _rebuild(state, GaussianScene(**raw), keep, new_rows)
    state.events.append({"iteration": state.iteration, "cloned": int(clone.sum()), "split": int(split.sum()),
                         "pruned": int((prune & ~split).sum()), "count": len(scene)})
    state.grad_accum.zero_()
    state.grad_count.zero_()
    state.check(scene)
    return scene


@torch.no_grad()
def reset_opacity(state: TrainState, scene: GaussianScene, ceiling: float = 0.01) -> None:
    """Clamp opacities to ``ceiling`` and clear their moments."""
    cap = math.log(ceiling) - math.log1p(-ceiling)
    scene.opacity.clamp_(max=cap)
    state.optimizer.m["opacity"].zero_()
    state.optimizer.v["opacity"].zero_()
