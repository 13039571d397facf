"""Multi-view multi-light dataset: canonical on-disk layout, loading and saving.

Layout::

    root/cameras.json      {"version": 1, "views": [{"name", "intrinsics", "world_to_cam",
                                                     "width", "height"}], "splits": {...}?}
    root/lights.json       {"version": 1, "encoding": "srgb" | "linear",
                            "images": [{"view", "light", "file", "direction", "intensity"}]}
    root/<view>/light_###.png   8- or 16-bit RGB
    root/<view>/mask.png        8-bit, nonzero = foreground
    root/<view>/normal_ups.png  optional camera-frame guidance normals, (n + 1) / 2 * max
    root/<view>/gt/*.bin        optional ground truth float maps (synthetic data only)

``splits`` (optional) holds ``train_views``, ``test_views``, ``train_lights`` and
``test_lights`` as index lists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .io import (decode_normals, raw_to_float, read_float_map, read_png_raw, srgb_to_linear,
                 write_float_map, write_png_raw)
from .scene import Camera, DirectionalLight

GT_MAPS = ("normal", "albedo", "depth", "lit_fraction")


@dataclass
class View:
    name: str
    camera: Camera
    mask_raw: np.ndarray
    lights: list[DirectionalLight]
    images_raw: list[np.ndarray]
    normal_raw: np.ndarray | None = None
    gt: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        return self.mask_raw > 0

    @property
    def num_lights(self) -> int:
        return len(self.lights)


@dataclass
class MVPSDataset:
    views: list[View]
    encoding: str = "srgb"
    linearize: bool = True
    splits: dict[str, list[int]] | None = None

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.views), max((v.num_lights for v in self.views), default=0)

    def image(self, view: int, light: int) -> np.ndarray:
        """Float RGB image, linearized when the dataset is sRGB-encoded and ``linearize`` is set."""
        x = raw_to_float(self.views[view].images_raw[light])
        if self.linearize and self.encoding == "srgb":
            x = srgb_to_linear(x)
        return x

    def guidance(self, view: int) -> np.ndarray | None:
        raw = self.views[view].normal_raw
        if raw is None:
            return None
        n = decode_normals(raw)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)

    def split(self) -> dict[str, list[int]]:
        """Train/test view and light indices; 80/20 by view index when no split is stored."""
        if self.splits:
            return self.splits
        nv, nl = self.counts
        ntest = max(1, nv // 5) if nv > 1 else 0
        train = [i for i in range(nv) if nv - i > ntest] if ntest else list(range(nv))
        test = [i for i in range(nv) if i not in train]
        return {"train_views": train, "test_views": test,
                "train_lights": list(range(nl)), "test_lights": list(range(nl))}


def light_average(dataset: MVPSDataset, view: int) -> np.ndarray:
    """Per-pixel mean of the view's light images in linear space."""
    v = dataset.views[view]
    if v.num_lights == 0:
        raise DatasetError(f"view {v.name} has no light images")
    # sum in sorted order so the result does not depend on light order
    stack = np.stack([dataset.image(view, l) for l in range(v.num_lights)])
    stack = np.sort(stack, axis=0)
    return stack.sum(axis=0) / v.num_lights


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing {path.name} in {path.parent}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})") from e


def load_dataset(root: str | Path, linearize: bool | None = None) -> MVPSDataset:
    root = Path(root)
    cams = _load_json(root / "cameras.json")
    lights = _load_json(root / "lights.json")
    encoding = lights.get("encoding", "srgb")
    if encoding not in ("srgb", "linear"):
        raise DatasetError(f"unknown image encoding {encoding!r}")
    per_view: dict[str, list[dict]] = {}
    for entry in lights.get("images", []):
        for key in ("view", "light", "file", "direction", "intensity"):
            if key not in entry:
                raise DatasetError(f"lights.json entry missing {key!r}: {entry}")
        per_view.setdefault(entry["view"], []).append(entry)

    views = []
    for vd in cams.get("views", []):
        name = vd.get("name")
        for key in ("intrinsics", "world_to_cam", "width", "height"):
            if key not in vd:
                raise DatasetError(f"camera entry {name!r} missing {key!r}")
        try:
            camera = Camera.from_dict(vd)
        except ValueError as e:
            raise DatasetError(f"camera {name}: {e}") from e
        vdir = root / name
        mask_path = vdir / "mask.png"
        if not mask_path.exists():
            raise DatasetError(f"missing mask for view {name}")
        mask = read_png_raw(mask_path)
        if mask.ndim == 3:
            mask = mask[..., 0]
        shape = (camera.height, camera.width)
        if mask.shape != shape:
            raise DatasetError(f"view {name}: mask is {mask.shape}, camera expects {shape}")
        entries = sorted(per_view.pop(name, []), key=lambda e: e["light"])
        if not entries:
            raise DatasetError(f"view {name} has no light entries in lights.json")
        lts, imgs = [], []
        for e in entries:
            d = np.asarray(e["direction"], dtype=np.float64)
            if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-3:
                raise DatasetError(f"view {name} light {e['light']}: direction {e['direction']} is not unit length")
            inten = np.asarray(e["intensity"], dtype=np.float64)
            if np.any(inten < 0):
                raise DatasetError(f"view {name} light {e['light']}: negative intensity")
            lts.append(DirectionalLight(d / np.linalg.norm(d), inten))
            p = vdir / e["file"]
            if not p.exists():
                raise DatasetError(f"missing image {p}")
            img = read_png_raw(p)
            if img.shape[:2] != shape:
                raise DatasetError(f"{p}: resolution {img.shape[:2]} does not match mask {shape}")
            imgs.append(img)
        normal = None
        npath = vdir / "normal_ups.png"
        if npath.exists():
            normal = read_png_raw(npath)
            if normal.shape[:2] != shape:
                raise DatasetError(f"{npath}: resolution mismatch")
        gt = {}
        for key in GT_MAPS:
            gp = vdir / "gt" / f"{key}.bin"
            if gp.exists():
                arr = read_float_map(gp)
                # scalar maps are kept as [H, W], matching the generator
                gt[key] = arr[..., 0] if arr.shape[-1] == 1 else arr
        views.append(View(name, camera, mask, lts, imgs, normal, gt))
    if per_view:
        raise DatasetError(f"lights.json references unknown views: {sorted(per_view)}")
    if not views:
        raise DatasetError("dataset has no views")
    if linearize is None:
        linearize = encoding == "srgb"
    return MVPSDataset(views, encoding, linearize, cams.get("splits"))


def save_dataset(dataset: MVPSDataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cams = {"version": 1, "views": [{"name": v.name, **v.camera.to_dict()} for v in dataset.views]}
    if dataset.splits:
        cams["splits"] = dataset.splits
    images = []
    for v in dataset.views:
        vdir = root / v.name
        vdir.mkdir(exist_ok=True)
        write_png_raw(vdir / "mask.png", v.mask_raw)
        for l, (light, img) in enumerate(zip(v.lights, v.images_raw)):
            fname = f"light_{l:03d}.png"
            write_png_raw(vdir / fname, img)
            images.append({"view": v.name, "light": l, "file": fname,
                           "direction": light.direction.tolist(), "intensity": light.intensity.tolist()})
        if v.normal_raw is not None:
            write_png_raw(vdir / "normal_ups.png", v.normal_raw)
        if v.gt:
            (vdir / "gt").mkdir(exist_ok=True)
            for key, arr in v.gt.items():
                write_float_map(vdir / "gt" / f"{key}.bin", arr)
    (root / "cameras.json").write_text(json.dumps(cams, indent=2))
    (root / "lights.json").write_text(json.dumps({"version": 1, "encoding": dataset.encoding,
                                                   "images": images}, indent=2))
