#!/usr/bin/env python3
"""Convert public multi-view photometric-stereo layouts to the canonical dataset directory.

DiLiGenT-MV object directory (e.g. ``mvpmsData/bearPNG``)::

    Calib_Results.mat             KK, Rc_<i>, Tc_<i> (world-to-camera, i = 1..V)
    view_<ii>/<nnn>.png           16-bit linear images, one per light
    view_<ii>/mask.png
    view_<ii>/light_directions.txt   L x 3, camera frame (x right, y up, z toward the camera)
    view_<ii>/light_intensities.txt  L x 3 RGB

PS-NeRF synthetic object directory::

    params.json                   {"K": 3x3, "pose_c2w": V x 4 x 4 (x right, y up, z backward),
                                   "light_direction": L x 3 or V x L x 3 (camera frame, same axes),
                                   "light_intensity": optional, same leading shape}
    img/view_<ii>/<nnn>.png
    mask/view_<ii>.png

Optional guidance normals (``--guidance DIR``) are read from ``DIR/view_<ii>.png``
in the same camera axes as the light directions and re-encoded for our camera
frame (x right, y down, z forward).

Usage::

    python scripts/convert_mvps.py diligent-mv /data/mvpmsData/bearPNG /data/bear_gs
    python scripts/convert_mvps.py psnerf /data/psnerf/bunny /data/bunny_gs --normalize-intensity
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import click
import numpy as np

from gsmvps.data import MVPSDataset, View, load_dataset, save_dataset
from gsmvps.io import decode_normals, encode_normals, read_png_raw
from gsmvps.scene import Camera, DirectionalLight

# camera axes used by both public layouts (x right, y up, z toward the viewer) -> ours
GL_TO_CV = np.diag([1.0, -1.0, -1.0])


def _view_dirs(root: Path) -> list[Path]:
    dirs = [p for p in root.iterdir() if p.is_dir() and re.fullmatch(r"view_\d+", p.name)]
    return sorted(dirs, key=lambda p: int(p.name.split("_")[1]))


def _numbered_pngs(d: Path) -> list[Path]:
    files = [p for p in d.glob("*.png") if re.fullmatch(r"\d+", p.stem)]
    return sorted(files, key=lambda p: int(p.stem))


def _lights_world(dirs_cam: np.ndarray, intens: np.ndarray, rot: np.ndarray) -> list[DirectionalLight]:
    dirs = (dirs_cam @ GL_TO_CV.T) @ rot  # camera -> world: R^T d
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return [DirectionalLight(d, i) for d, i in zip(dirs, intens)]


def _normalize(images: list[np.ndarray], lights: list[DirectionalLight]):
    out_imgs, out_lights = [], []
    for img, light in zip(images, lights):
        scale = light.intensity
        x = img.astype(np.float64) / np.where(scale > 0, scale, 1.0)
        top = np.iinfo(img.dtype).max
        out_imgs.append(np.clip(np.round(x), 0, top).astype(img.dtype))
        out_lights.append(DirectionalLight(light.direction, np.ones(3)))
    return out_imgs, out_lights


def _guidance(guide_dir: Path | None, name: str, shape) -> np.ndarray | None:
    if guide_dir is None:
        return None
    p = guide_dir / f"{name}.png"
    if not p.exists():
        return None
    raw = read_png_raw(p)
    if raw.shape[:2] != shape:
        raise click.ClickException(f"{p}: resolution {raw.shape[:2]} does not match {shape}")
    n = decode_normals(raw) @ GL_TO_CV.T
    valid = np.linalg.norm(n, axis=-1) > 0.5
    n[~valid] = 0.0
    return encode_normals(n, 16)


def _mask(path: Path) -> np.ndarray:
    m = read_png_raw(path)
    if m.ndim == 3:
        m = m[..., 0]
    return ((m > 0) * 255).astype(np.uint8)


def _splits(num_views: int, num_lights: int, test_every: int, train_lights: int) -> dict:
    test = [i for i in range(num_views) if i % test_every == 1 % test_every]
    train = [i for i in range(num_views) if i not in test]
    step = max(num_lights // max(train_lights, 1), 1)
    tl = list(range(0, num_lights, step))[:train_lights]
    return {"train_views": train, "test_views": test, "train_lights": tl, "test_lights": list(range(num_lights))}


def convert_diligent_mv(src: Path, guide_dir: Path | None = None, normalize: bool = False) -> MVPSDataset:
    from scipy.io import loadmat

    calib = loadmat(str(src / "Calib_Results.mat"))
    k = np.asarray(calib["KK"], dtype=np.float64)
    views = []
    for vdir in _view_dirs(src):
        idx = int(vdir.name.split("_")[1])
        rot = np.asarray(calib[f"Rc_{idx}"], dtype=np.float64)
        trans = np.asarray(calib[f"Tc_{idx}"], dtype=np.float64).reshape(3)
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = trans
        mask = _mask(vdir / "mask.png")
        cam = Camera(k, w2c, mask.shape[1], mask.shape[0])
        dirs = np.loadtxt(vdir / "light_directions.txt", ndmin=2)
        intens = np.loadtxt(vdir / "light_intensities.txt", ndmin=2)
        images = [read_png_raw(p) for p in _numbered_pngs(vdir)]
        if not (len(images) == len(dirs) == len(intens)):
            raise click.ClickException(f"{vdir}: {len(images)} images, {len(dirs)} directions, {len(intens)} intensities")
        lights = _lights_world(dirs, intens, rot)
        if normalize:
            images, lights = _normalize(images, lights)
        name = f"view_{idx:03d}"
        views.append(View(name, cam, mask, lights, images, _guidance(guide_dir, vdir.name, mask.shape)))
    return MVPSDataset(views, "linear", False)


def convert_psnerf(src: Path, guide_dir: Path | None = None, normalize: bool = False) -> MVPSDataset:
    params = json.loads((src / "params.json").read_text())
    k = np.asarray(params["K"], dtype=np.float64)
    poses = np.asarray(params["pose_c2w"], dtype=np.float64)
    ldirs = np.asarray(params["light_direction"], dtype=np.float64)
    views = []
    for vdir in _view_dirs(src / "img"):
        idx = int(vdir.name.split("_")[1])
        c2w = poses[idx - 1].copy()
        c2w[:3, :3] = c2w[:3, :3] @ GL_TO_CV  # camera axes to ours
        w2c = np.linalg.inv(c2w)
        mask = _mask(src / "mask" / f"{vdir.name}.png")
        cam = Camera(k, w2c, mask.shape[1], mask.shape[0])
        dirs = ldirs[idx - 1] if ldirs.ndim == 3 else ldirs
        inten = params.get("light_intensity")
        inten = np.ones_like(dirs) if inten is None else np.asarray(inten, dtype=np.float64)
        inten = inten[idx - 1] if inten.ndim == 3 else inten
        images = [read_png_raw(p) for p in _numbered_pngs(vdir)]
        if len(images) != len(dirs):
            raise click.ClickException(f"{vdir}: {len(images)} images but {len(dirs)} light directions")
        lights = _lights_world(dirs, inten, w2c[:3, :3])
        if normalize:
            images, lights = _normalize(images, lights)
        views.append(View(f"view_{idx:03d}", cam, mask, lights, images,
                          _guidance(guide_dir, vdir.name, mask.shape)))
    encoding = params.get("encoding", "srgb")
    return MVPSDataset(views, encoding, encoding == "srgb")


@click.command()
@click.argument("layout", type=click.Choice(["diligent-mv", "psnerf"]))
@click.argument("src", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("dst", type=click.Path(file_okay=False, path_type=Path))
@click.option("--guidance", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None,
              help="Directory of per-view guidance normal PNGs named view_<ii>.png.")
@click.option("--normalize-intensity", is_flag=True, help="Divide images by the calibrated light intensity.")
@click.option("--test-every", default=4, show_default=True, help="Every n-th view (offset 1) is held out.")
@click.option("--train-lights", default=16, show_default=True, help="Evenly spaced training lights per view.")
def main(layout, src, dst, guidance, normalize_intensity, test_every, train_lights):
    """Convert SRC (LAYOUT) into the canonical dataset directory DST."""
    convert = convert_diligent_mv if layout == "diligent-mv" else convert_psnerf
    ds = convert(src, guidance, normalize_intensity)
    nv, nl = ds.counts
    ds.splits = _splits(nv, nl, test_every, min(train_lights, nl))
    save_dataset(ds, dst)
    check = load_dataset(dst)
    click.echo(f"wrote {dst}: {check.counts[0]} views x {check.counts[1]} lights")


if __name__ == "__main__":
    main()
