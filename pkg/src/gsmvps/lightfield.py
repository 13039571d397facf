"""Implicit incident-lighting network.

A ReLU MLP maps a Fourier-encoded position plus the local surfel frame
(tangents, scales, normal) and the light/view directions to a nonnegative
RGB transport factor. The factor multiplies the calibrated light intensity
at shading time.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .config import LightFieldConfig
from .errors import ContractError

GEOMETRY_DIMS = {"tangent_u": 3, "tangent_v": 3, "scales": 2, "normal": 3, "light_dir": 3, "view_dir": 3}


def fourier_encode(x: torch.Tensor, bands: int) -> torch.Tensor:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < bands; grouped per band."""
    if bands < 0:
        raise ValueError("bands must be >= 0")
    x = torch.as_tensor(x)
    parts = [x]
    for k in range(bands):
        arg = (2.0 ** k) * math.pi * x
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    return torch.cat(parts, dim=-1)


def encoded_dim(bands: int) -> int:
    return 3 + 6 * bands


class LightMLP(nn.Module):
    def __init__(self, config: LightFieldConfig | None = None, seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.config = config or LightFieldConfig()
        c = self.config
        self.in_dim = encoded_dim(c.bands) + sum(GEOMETRY_DIMS.values())
        dims = [self.in_dim] + [c.hidden] * c.depth + [3]
        self.layers = nn.ModuleList(nn.Linear(i, o, dtype=dtype) for i, o in zip(dims[:-1], dims[1:]))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.layers[:-1]:
                bound = math.sqrt(6.0 / layer.in_features)
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                layer.bias.zero_()
            # zero output layer: initial prediction is a flat softplus(0) = ln 2
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_dim:
            raise ContractError(f"light MLP expects {self.in_dim} input features, got {features.shape[-1]}")
        h = features
        for layer in self.layers[:-1]:
            h = F.relu(layer(h))
        return F.softplus(self.layers[-1](h))


def assemble_inputs(net: LightMLP, position, tangent_u, tangent_v, scales, normal, light_dir, view_dir) -> torch.Tensor:
    geo = {"tangent_u": tangent_u, "tangent_v": tangent_v, "scales": scales, "normal": normal,
           "light_dir": light_dir, "view_dir": view_dir}
    position = torch.as_tensor(position)
    if position.shape[-1] != 3:
        raise ContractError(f"position must have 3 components, got {position.shape[-1]}")
    lead = position.shape[:-1]
    parts = [fourier_encode(position, net.config.bands)]
    for name, dim in GEOMETRY_DIMS.items():
        t = torch.as_tensor(geo[name], dtype=position.dtype)
        if t.shape[-1] != dim:
            raise ContractError(f"{name} must have {dim} components, got {t.shape[-1]}")
        parts.append(t.expand(*lead, dim))
    return torch.cat(parts, dim=-1)


def predict_incident(net: LightMLP, position, tangent_u, tangent_v, scales, normal, light_dir, view_dir,
                     cache: bool = False):
    """Per-point RGB transport factor; with ``cache=True`` returns ``(value, cache)``."""
    if not cache:
        return net(assemble_inputs(net, position, tangent_u, tangent_v, scales, normal, light_dir, view_dir))
    inputs = {"position": position, "tangent_u": tangent_u, "tangent_v": tangent_v, "scales": scales,
              "normal": normal, "light_dir": light_dir, "view_dir": view_dir}
    leaves = {k: torch.as_tensor(v, dtype=net.layers[0].weight.dtype).detach().clone().requires_grad_(True)
              for k, v in inputs.items()}
    out = net(assemble_inputs(net, **leaves))
    return out, {"inputs": leaves, "output": out}


def mlp_backward(net: LightMLP, cache: dict | None, upstream: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of ``sum(upstream * output)`` w.r.t. every weight and every input."""
    if not cache or "output" not in cache:
        raise ContractError("mlp_backward needs a forward pass run with cache=True")
    out = cache["output"]
    named = dict(net.named_parameters())
    targets = list(named.values()) + list(cache["inputs"].values())
    grads = torch.autograd.grad(out, targets, torch.as_tensor(upstream, dtype=out.dtype).expand_as(out),
                                retain_graph=True, allow_unused=True)
    keys = list(named) + list(cache["inputs"])
    return {k: (torch.zeros_like(t) if g is None else g) for k, t, g in zip(keys, targets, grads)}


def flat_parameters(net: LightMLP) -> dict[str, torch.Tensor]:
    return {k: v.detach() for k, v in net.state_dict().items()}
