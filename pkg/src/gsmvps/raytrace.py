"""Shadow-ray tracing through 2D Gaussian splats for single directional lights.

A median-split BVH over the splats' support boxes accelerates the traversal.
Transmittance along a ray is the product of ``1 - o G`` over every splat
hit, sorted by distance, with an early exit once it drops below a
threshold. :func:`trace_brute_force` is the vectorized oracle.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import torch

from .config import TraceConfig
from .errors import MissingVisibilityError
from .io import read_float_map, write_float_map
from .raster import GBuffer
from .scene import Camera, DirectionalLight, GaussianScene, activate_parameters
from .shading import unproject_depth

DET_EPS = 1e-12


@dataclass
class SplatArrays:
    """Activated splat attributes needed for tracing, as float64 numpy arrays."""

    means: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray

    @classmethod
    def from_scene(cls, scene: GaussianScene) -> "SplatArrays":
        with torch.no_grad():
            a = activate_parameters(scene)
        f = lambda t: np.ascontiguousarray(t.detach().double().numpy())
        return cls(f(a.means), f(a.tangent_u), f(a.tangent_v), f(a.scales), f(a.opacity))

    def __len__(self) -> int:
        return self.means.shape[0]

    def boxes(self, support: float) -> tuple[np.ndarray, np.ndarray]:
        """Exact AABBs of the support parallelograms (which contain the support disks)."""
        ext = support * (self.scales[:, 0:1] * np.abs(self.tangent_u) + self.scales[:, 1:2] * np.abs(self.tangent_v))
        return self.means - ext, self.means + ext


@dataclass
class SplatBVH:
    box_min: np.ndarray  # [nodes, 3]
    box_max: np.ndarray
    left: np.ndarray  # child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray  # splat indices, grouped by leaf
    support: float

    @property
    def num_nodes(self) -> int:
        return self.box_min.shape[0]

    def leaves(self) -> list[int]:
        return [i for i in range(self.num_nodes) if self.left[i] < 0]


def build_bvh(scene, config: TraceConfig | None = None) -> SplatBVH:
    """Median split along the longest centroid axis until ``leaf_size`` splats remain."""
    config = config or TraceConfig()
    splats = scene if isinstance(scene, SplatArrays) else SplatArrays.from_scene(scene)
    n = len(splats)
    if n == 0:
        raise ValueError("cannot build a BVH over an empty scene")
    lo, hi = splats.boxes(config.support_sigma)
    centroid = splats.means
    order = np.arange(n)
    box_min, box_max, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        box_min.append(lo[idx].min(0))
        box_max.append(hi[idx].max(0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(box_min) - 1

    stack = [(new_node(0, n), 0, n)]
    while stack:
        node, s, e = stack.pop()
        if e - s <= config.leaf_size:
            continue
        idx = order[s:e]
        c = centroid[idx]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        # stable ordering keeps the build deterministic for equal centroids
        local = np.argsort(c[:, axis], kind="stable")
        order[s:e] = idx[local]
        mid = s + (e - s) // 2
        left[node] = new_node(s, mid)
        right[node] = new_node(mid, e)
        count[node] = 0
        stack.append((right[node], mid, e))
        stack.append((left[node], s, mid))
    return SplatBVH(np.array(box_min), np.array(box_max), np.array(left, dtype=np.int64),
                    np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
                    np.array(count, dtype=np.int64), order.astype(np.int64), config.support_sigma)


@numba.njit(cache=True)
def _hit(o, d, p, tu, tv, su, sv, support2, t_min):
    nx = tu[1] * tv[2] - tu[2] * tv[1]
    ny = tu[2] * tv[0] - tu[0] * tv[2]
    nz = tu[0] * tv[1] - tu[1] * tv[0]
    denom = nx * d[0] + ny * d[1] + nz * d[2]
    if abs(denom) < DET_EPS:
        return -1.0, 0.0
    t = (nx * (p[0] - o[0]) + ny * (p[1] - o[1]) + nz * (p[2] - o[2])) / denom
    if t <= t_min:
        return -1.0, 0.0
    rx = o[0] + t * d[0] - p[0]
    ry = o[1] + t * d[1] - p[1]
    rz = o[2] + t * d[2] - p[2]
    u = (tu[0] * rx + tu[1] * ry + tu[2] * rz) / su
    v = (tv[0] * rx + tv[1] * ry + tv[2] * rz) / sv
    rho = u * u + v * v
    if rho > support2:
        return -1.0, 0.0
    return t, np.exp(-0.5 * rho)


@numba.njit(cache=True)
def _slab(o, inv_d, bmin, bmax, t_min):
    t0 = t_min
    t1 = np.inf
    for a in range(3):
        ta = (bmin[a] - o[a]) * inv_d[a]
        tb = (bmax[a] - o[a]) * inv_d[a]
        if ta > tb:
            ta, tb = tb, ta
        # NaN (0 * inf) means the ray lies on the slab plane: keep it
        if ta == ta and ta > t0:
            t0 = ta
        if tb == tb and tb < t1:
            t1 = tb
    return t0 <= t1


@numba.njit(cache=True)
def _accumulate(ts, alphas, idxs, nhit, early_exit):
    order = np.argsort(ts[:nhit], kind="mergesort")
    # tie-break equal distances by splat index
    for i in range(1, nhit):
        j = i
        while j > 0 and ts[order[j]] == ts[order[j - 1]] and idxs[order[j]] < idxs[order[j - 1]]:
            order[j], order[j - 1] = order[j - 1], order[j]
            j -= 1
    vis = 1.0
    for k in range(nhit):
        vis *= 1.0 - alphas[order[k]]
        if vis < early_exit:
            break
    return vis


@numba.njit(cache=True)
def _traverse(o, d, t_min, box_min, box_max, left, right, start, count, order,
              means, tus, tvs, scales, opac, support2, ts, alphas, idxs, stack, inv_d):
    """Collect every splat hit by one ray into ``ts``/``alphas``/``idxs``; returns the hit count."""
    for a in range(3):
        inv_d[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
    nhit = 0
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _slab(o, inv_d, box_min[node], box_max[node], 0.0):
            continue
        if left[node] < 0:
            for k in range(start[node], start[node] + count[node]):
                j = order[k]
                t, g = _hit(o, d, means[j], tus[j], tvs[j], scales[j, 0], scales[j, 1], support2, t_min)
                if t > 0.0:
                    ts[nhit] = t
                    alphas[nhit] = opac[j] * g
                    idxs[nhit] = j
                    nhit += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return nhit


@numba.njit(cache=True)
def _trace_bvh(origins, dirs, t_mins, box_min, box_max, left, right, start, count, order,
               means, tus, tvs, scales, opac, support2, early_exit, out_vis, out_nhits):
    n = means.shape[0]
    ts = np.empty(n)
    alphas = np.empty(n)
    idxs = np.empty(n, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    inv_d = np.empty(3)
    for r in range(origins.shape[0]):
        nhit = _traverse(origins[r], dirs[r], t_mins[r], box_min, box_max, left, right, start, count, order,
                         means, tus, tvs, scales, opac, support2, ts, alphas, idxs, stack, inv_d)
        out_nhits[r] = nhit
        out_vis[r] = _accumulate(ts, alphas, idxs, nhit, early_exit)


@numba.njit(cache=True)
def _hits_one(o, d, t_min, box_min, box_max, left, right, start, count, order,
              means, tus, tvs, scales, opac, support2):
    n = means.shape[0]
    ts = np.empty(n)
    alphas = np.empty(n)
    idxs = np.empty(n, dtype=np.int64)
    nhit = _traverse(o, d, t_min, box_min, box_max, left, right, start, count, order, means, tus, tvs,
                     scales, opac, support2, ts, alphas, idxs, np.empty(128, dtype=np.int64), np.empty(3))
    return idxs[:nhit].copy(), ts[:nhit].copy()


def _ray_arrays(origins, dirs, exclude):
    origins = np.ascontiguousarray(np.atleast_2d(np.asarray(origins, dtype=np.float64)))
    dirs = np.ascontiguousarray(np.broadcast_to(np.asarray(dirs, dtype=np.float64), origins.shape))
    t_mins = np.ascontiguousarray(np.broadcast_to(np.asarray(exclude, dtype=np.float64), origins.shape[:1]))
    return origins, dirs, t_mins


def trace_rays(origins, dirs, bvh: SplatBVH, splats: SplatArrays, exclude_self_radius=0.0,
               config: TraceConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Transmittance and hit count for a batch of rays using the BVH."""
    config = config or TraceConfig()
    origins, dirs, t_mins = _ray_arrays(origins, dirs, exclude_self_radius)
    vis = np.ones(origins.shape[0])
    nh = np.zeros(origins.shape[0], dtype=np.int64)
    _trace_bvh(origins, dirs, t_mins, bvh.box_min, bvh.box_max, bvh.left, bvh.right, bvh.start, bvh.count,
               bvh.order, splats.means, splats.tangent_u, splats.tangent_v, splats.scales, splats.opacity,
               bvh.support ** 2, config.early_exit, vis, nh)
    return vis, nh


def trace_visibility(origin, direction, bvh: SplatBVH, scene, exclude_self_radius: float = 0.0,
                     config: TraceConfig | None = None) -> float:
    """Transmittance of one shadow ray; ``origin`` should already be offset off the surface."""
    splats = scene if isinstance(scene, SplatArrays) else SplatArrays.from_scene(scene)
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("ray direction must be unit length")
    vis, _ = trace_rays(origin, direction, bvh, splats, exclude_self_radius, config)
    return float(vis[0])


def bvh_hits(origin, direction, bvh: SplatBVH, splats: SplatArrays, exclude_self_radius: float = 0.0):
    """Indices and distances of every splat one ray hits, sorted by (distance, index)."""
    o = np.ascontiguousarray(np.asarray(origin, dtype=np.float64))
    d = np.ascontiguousarray(np.asarray(direction, dtype=np.float64))
    idx, t = _hits_one(o, d, float(exclude_self_radius), bvh.box_min, bvh.box_max, bvh.left, bvh.right,
                       bvh.start, bvh.count, bvh.order, splats.means, splats.tangent_u, splats.tangent_v,
                       splats.scales, splats.opacity, bvh.support ** 2)
    srt = np.lexsort((idx, t))
    return idx[srt], t[srt]


def brute_force_hits(origins, dirs, splats: SplatArrays, exclude_self_radius=0.0, support: float = 3.0):
    """Dense ray x splat intersection: (t [R, N], alpha [R, N], hit mask [R, N])."""
    origins, dirs, t_mins = _ray_arrays(origins, dirs, exclude_self_radius)
    n = np.cross(splats.tangent_u, splats.tangent_v)
    denom = dirs @ n.T
    rel = splats.means[None, :, :] - origins[:, None, :]
    num = np.einsum("rnk,nk->rn", rel, n)
    ok = np.abs(denom) >= DET_EPS
    t = np.where(ok, num / np.where(ok, denom, 1.0), -1.0)
    ok &= t > t_mins[:, None]
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :] - splats.means[None]
    u = np.einsum("rnk,nk->rn", x, splats.tangent_u) / splats.scales[:, 0]
    v = np.einsum("rnk,nk->rn", x, splats.tangent_v) / splats.scales[:, 1]
    rho = u * u + v * v
    ok &= rho <= support ** 2
    alpha = splats.opacity[None, :] * np.exp(-0.5 * rho)
    return t, alpha, ok


def trace_brute_force(origins, dirs, splats: SplatArrays, exclude_self_radius=0.0,
                      config: TraceConfig | None = None, chunk: int = 512) -> np.ndarray:
    """Oracle transmittance: every splat tested against every ray."""
    config = config or TraceConfig()
    origins, dirs, t_mins = _ray_arrays(origins, dirs, exclude_self_radius)
    out = np.ones(origins.shape[0])
    idx = np.arange(len(splats))
    for s in range(0, origins.shape[0], chunk):
        t, alpha, ok = brute_force_hits(origins[s:s + chunk], dirs[s:s + chunk], splats,
                                        t_mins[s:s + chunk], config.support_sigma)
        for r in range(t.shape[0]):
            hit = np.nonzero(ok[r])[0]
            if hit.size == 0:
                continue
            srt = hit[np.lexsort((idx[hit], t[r, hit]))]
            prod = np.cumprod(1.0 - alpha[r, srt])
            below = np.nonzero(prod < config.early_exit)[0]
            out[s + r] = prod[below[0]] if below.size else prod[-1]
    return out


def _local_self_radius(gbuffer: GBuffer, splats: SplatArrays, config: TraceConfig) -> np.ndarray:
    npix = gbuffer.height * gbuffer.width
    global_r = config.self_radius_factor * float(np.median(splats.scales))
    if gbuffer.scales is None:
        return np.full(npix, global_r)
    o = gbuffer.opacity.detach().double().numpy().reshape(-1)
    s = gbuffer.scales.detach().double().numpy().reshape(-1, 2).mean(1)
    local = config.self_radius_factor * s / np.maximum(o, 1e-8)
    return np.where(o > 1e-3, local, global_r)


def visibility_map(gbuffer: GBuffer, camera: Camera, light: DirectionalLight, bvh: SplatBVH, scene,
                   config: TraceConfig | None = None, mask_threshold: float = 0.5,
                   brute_force: bool = False) -> np.ndarray:
    """Per-pixel light visibility [H, W]; background pixels are 1."""
    config = config or TraceConfig()
    splats = scene if isinstance(scene, SplatArrays) else SplatArrays.from_scene(scene)
    h, w = gbuffer.height, gbuffer.width
    with torch.no_grad():
        depth = gbuffer.depth.detach().double()
        pos = unproject_depth(depth, camera).reshape(-1, 3).numpy()
    normal = gbuffer.normal.detach().double().numpy().reshape(-1, 3)
    fg = gbuffer.opacity.detach().double().numpy().reshape(-1) > mask_threshold
    radius = _local_self_radius(gbuffer, splats, config)
    origins = pos + radius[:, None] * normal
    out = np.ones(h * w)
    sel = np.nonzero(fg)[0]
    if sel.size:
        if brute_force:
            out[sel] = trace_brute_force(origins[sel], light.direction, splats, radius[sel], config)
        else:
            out[sel], _ = trace_rays(origins[sel], light.direction, bvh, splats, radius[sel], config)
    return out.reshape(h, w)


def scene_hash(scene: GaussianScene) -> str:
    return hashlib.sha256(scene.to_rows().detach().double().numpy().tobytes()).hexdigest()


class VisibilityCache:
    """Per-(view, light) float maps plus a manifest naming the source geometry."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def path(self, view: int, light: int) -> Path:
        return self.root / f"vis_view{view:03d}_light{light:03d}.bin"

    def write(self, view: int, light: int, vis: np.ndarray) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        write_float_map(self.path(view, light), vis.astype(np.float32))

    def write_manifest(self, checkpoint_hash: str, entries: list[tuple[int, int]]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        data = {"version": 1, "checkpoint_hash": checkpoint_hash,
                "entries": [{"view": v, "light": l, "file": self.path(v, l).name} for v, l in entries]}
        self.manifest_path.write_text(json.dumps(data, indent=2))

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            raise MissingVisibilityError(f"no visibility cache at {self.root}; run `gsmvps trace-visibility` first")
        return json.loads(self.manifest_path.read_text())

    def read(self, view: int, light: int) -> np.ndarray:
        p = self.path(view, light)
        if not p.exists():
            raise MissingVisibilityError(
                f"missing visibility map for view {view} light {light}; run `gsmvps trace-visibility` first")
        return read_float_map(p)[..., 0]
