"""Command-line interface.

Every option can also be set through an environment variable named
``GSMVPS_<COMMAND>_<PARAMETER>`` (for example ``GSMVPS_TRAIN_CONFIG_PATH``
for ``train --config`` or ``GSMVPS_EVAL_JSON_PATH`` for ``eval --json``);
positional paths read ``GSMVPS_CHECKPOINT``, ``GSMVPS_DATASET`` and
``GSMVPS_OUT``. Failures print one line to stderr of the form::

    gsmvps-error code=<CODE> exit=<N> message="<text>"

with exit status 2 for bad input and 3 for numeric failures.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, apply_overrides, desk_config
from .data import MVPSDataset, load_dataset
from .edit import EditSpec, Region, apply_edit
from .errors import (CheckpointError, ContractError, DatasetError, InvalidPixelError, MissingVisibilityError,
                     NumericalError, ParameterCorruptionError)
from .evaluate import evaluate, relight, render_view
from .io import encode_normals, save_image, write_float_map, write_png_raw
from .raster import background_gbuffer, rasterize
from .raytrace import SplatArrays, build_bvh, visibility_map
from .scene import Camera, DirectionalLight
from .synthetic import generate_synthetic
from .train import train as run_training

ENV_PREFIX = "GSMVPS"
EXIT_BAD_INPUT = 2
EXIT_NUMERIC = 3

# (exception type, code, exit status); first match wins
ERROR_CODES = [
    (NumericalError, "NUMERIC", EXIT_NUMERIC),
    (ParameterCorruptionError, "PARAMETER_CORRUPTION", EXIT_NUMERIC),
    (FloatingPointError, "NUMERIC", EXIT_NUMERIC),
    (CheckpointError, "CHECKPOINT", EXIT_BAD_INPUT),
    (DatasetError, "DATASET", EXIT_BAD_INPUT),
    (ContractError, "CONTRACT", EXIT_BAD_INPUT),
    (MissingVisibilityError, "MISSING_VISIBILITY", EXIT_BAD_INPUT),
    (InvalidPixelError, "INVALID_PIXEL", EXIT_BAD_INPUT),
    (click.UsageError, "USAGE", EXIT_BAD_INPUT),
    (FileNotFoundError, "NOT_FOUND", EXIT_BAD_INPUT),
    (ValueError, "BAD_VALUE", EXIT_BAD_INPUT),
    (OSError, "IO", EXIT_BAD_INPUT),
]


def error_line(exc: BaseException) -> tuple[str, int]:
    for kind, code, status in ERROR_CODES:
        if isinstance(exc, kind):
            break
    else:
        code, status = "INTERNAL", 1
    message = " ".join(str(exc.format_message() if isinstance(exc, click.ClickException) else exc).split())
    return f"gsmvps-error code={code} exit={status} message={json.dumps(message)}", status


class Group(click.Group):
    """Maps library and usage errors to one-line messages and exit codes."""

    def main(self, args=None, prog_name=None, **extra):
        try:
            rv = super().main(args=args, prog_name=prog_name, standalone_mode=False,
                              auto_envvar_prefix=ENV_PREFIX, **extra)
        except click.exceptions.Exit as exc:
            sys.exit(exc.exit_code)
        except click.Abort:
            click.echo('gsmvps-error code=ABORTED exit=1 message="aborted"', err=True)
            sys.exit(1)
        except Exception as exc:  # noqa: BLE001 - every failure becomes one line
            line, status = error_line(exc)
            click.echo(line, err=True)
            sys.exit(status)
        sys.exit(rv if isinstance(rv, int) else 0)


def _floats(text: str, n: int, name: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise click.BadParameter(f"{name} must be {n} comma-separated numbers, got {text!r}") from None
    if len(values) != n or not all(np.isfinite(values)):
        raise click.BadParameter(f"{name} must be {n} finite comma-separated numbers, got {text!r}")
    return values


def _config(ckpt_config: dict | None, config_path: str | None, desk: bool, overrides: tuple[str, ...]) -> Config:
    if config_path:
        cfg = Config.load(config_path)
    elif desk:
        cfg = desk_config()
    elif ckpt_config:
        cfg = Config.from_dict(ckpt_config)
    else:
        cfg = Config()
    return apply_overrides(cfg, list(overrides))


def _camera(dataset: MVPSDataset | None, view: int | None, camera_path: str | None) -> Camera:
    if camera_path:
        try:
            return Camera.from_dict(json.loads(Path(camera_path).read_text()))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ValueError(f"camera file {camera_path} is not a valid camera: {exc}") from None
    if dataset is None or view is None:
        raise click.UsageError("give --camera, or --dataset together with --view")
    if not 0 <= view < len(dataset.views):
        raise ValueError(f"view {view} out of range (dataset has {len(dataset.views)} views)")
    return dataset.views[view].camera


def _light(direction: str, intensity: str) -> DirectionalLight:
    d = np.asarray(_floats(direction, 3, "light direction"))
    norm = np.linalg.norm(d)
    if norm == 0:
        raise click.BadParameter("light direction must be nonzero")
    parts = intensity.split(",")
    inten = _floats(intensity, len(parts), "intensity")
    if len(inten) not in (1, 3):
        raise click.BadParameter("intensity must be one or three numbers")
    return DirectionalLight(d / norm, np.asarray(inten))


def _write_maps(out: Path, maps: dict[str, np.ndarray]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in maps.items():
        write_float_map(out / f"{name}.bin", arr.astype(np.float32))


@click.group(cls=Group)
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Multi-view photometric stereo with 2D Gaussian splats."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("out", type=click.Path(file_okay=False), envvar=f"{ENV_PREFIX}_OUT")
@click.option("--kind", type=click.Choice(["sphere", "plane-pair"]), default="sphere", show_default=True)
@click.option("--views", "num_views", type=click.IntRange(1), default=8, show_default=True)
@click.option("--test-views", type=click.IntRange(0), default=4, show_default=True)
@click.option("--lights", "num_lights", type=click.IntRange(1), default=8, show_default=True)
@click.option("--resolution", type=click.IntRange(4), default=64, show_default=True)
@click.option("--noise-deg", type=click.FloatRange(0), default=3.0, show_default=True,
              help="Angular noise of the guidance normals.")
@click.option("--seed", type=int, default=0, show_default=True)
def synth(out, kind, num_views, test_views, num_lights, resolution, noise_deg, seed):
    """Render a synthetic dataset to OUT."""
    ds = generate_synthetic(out, kind, num_views, num_lights, resolution, noise_deg, test_views, seed)
    click.echo(f"wrote {len(ds.views)} views x {ds.counts[1]} lights to {out}")


@main.command()
@click.argument("dataset", type=click.Path(exists=True, file_okay=False), envvar=f"{ENV_PREFIX}_DATASET")
@click.argument("out", type=click.Path(file_okay=False), envvar=f"{ENV_PREFIX}_OUT")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Config JSON.")
@click.option("--desk", is_flag=True, help="Start from the reduced desk-scale schedule.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Config override, repeatable.")
@click.option("--stages", type=click.Choice(["1", "2", "both"]), default="both", show_default=True)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Stage I checkpoint to continue from.")
def train(dataset, out, config_path, desk, overrides, stages, resume):
    """Fit a splat model to DATASET; checkpoints and metrics.csv go to OUT."""
    cfg = _config(None, config_path, desk, overrides)
    ds = load_dataset(dataset)
    stage1 = load_checkpoint(resume) if resume else None
    wanted = {"1": (1,), "2": (2,), "both": (1, 2)}[stages]
    if wanted == (2,) and stage1 is None:
        raise click.UsageError("--stages 2 needs --resume with a Stage I checkpoint")
    Path(out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(out) / "config.json")
    result = run_training(ds, cfg, out, stage1=stage1, stages=wanted)
    click.echo(f"trained in {result.runtime:.1f}s; {len(result.stage1.scene)} splats; checkpoints in {out}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False), envvar=f"{ENV_PREFIX}_CHECKPOINT")
@click.argument("out", type=click.Path(file_okay=False), envvar=f"{ENV_PREFIX}_OUT")
@click.option("--dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--view", type=int)
@click.option("--camera", "camera_path", type=click.Path(exists=True, dir_okay=False), help="Camera JSON.")
@click.option("--lights", "light_ids", default="", help="Comma-separated dataset light indices to shade.")
def render(checkpoint, out, dataset, view, camera_path, light_ids):
    """Write the G-buffer (and shaded images) of CHECKPOINT to OUT."""
    ckpt = load_checkpoint(checkpoint)
    cfg = Config.from_dict(ckpt.config) if ckpt.config else Config()
    ds = load_dataset(dataset) if dataset else None
    cam = _camera(ds, view, camera_path)
    mode = "gbuffer" if ckpt.has_pbr else "color"
    with torch.no_grad():
        gb = (rasterize(ckpt.scene, cam, mode, cfg.raster) if len(ckpt.scene)
              else background_gbuffer(cam, mode, ckpt.scene.dtype))
    maps = {k: v.double().numpy() for k, v in gb.maps().items()}
    out = Path(out)
    _write_maps(out, maps)
    write_png_raw(out / "normal.png", encode_normals(maps["normal"], 16))
    if "color" in maps:
        save_image(out / "color.png", maps["color"])
    if "albedo" in maps:
        save_image(out / "albedo.png", maps["albedo"])
    ids = [int(x) for x in light_ids.split(",") if x.strip()]
    if ids:
        if ds is None:
            raise click.UsageError("--lights needs --dataset")
        lights = [ds.views[view].lights[i] for i in ids]
        images, _ = render_view(ckpt, cam, lights, cfg)
        for i, img in zip(ids, images):
            save_image(out / f"light_{i:03d}.png", img.double().numpy())
    click.echo(f"wrote {len(maps)} maps to {out}")


@main.command("relight")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False), envvar=f"{ENV_PREFIX}_CHECKPOINT")
@click.argument("out", type=click.Path(dir_okay=False), envvar=f"{ENV_PREFIX}_OUT")
@click.option("--light-dir", required=True, help="Direction toward the light, x,y,z (normalized).")
@click.option("--intensity", default="1.0", show_default=True, help="Scalar or r,g,b.")
@click.option("--dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--view", type=int)
@click.option("--camera", "camera_path", type=click.Path(exists=True, dir_okay=False), help="Camera JSON.")
@click.option("--retrace/--no-retrace", default=False, show_default=True,
              help="Use traced visibility instead of the lighting network.")
def relight_cmd(checkpoint, out, light_dir, intensity, dataset, view, camera_path, retrace):
    """Render CHECKPOINT under a new light; writes OUT (PNG) and OUT with .bin (linear radiance)."""
    ckpt = load_checkpoint(checkpoint)
    ds = load_dataset(dataset) if dataset else None
    cam = _camera(ds, view, camera_path)
    light = _light(light_dir, intensity)
    img = relight(ckpt, cam, [light], retrace=retrace)[0].double().numpy()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, img)
    write_float_map(out.with_suffix(".bin"), img.astype(np.float32))
    click.echo(f"wrote {out} and {out.with_suffix('.bin')}")


@main.command("trace-visibility")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False), envvar=f"{ENV_PREFIX}_CHECKPOINT")
@click.argument("out", type=click.Path(dir_okay=False), envvar=f"{ENV_PREFIX}_OUT")
@click.option("--light-dir", required=True, help="Direction toward the light, x,y,z (normalized).")
@click.option("--dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--view", type=int)
@click.option("--camera", "camera_path", type=click.Path(exists=True, dir_okay=False), help="Camera JSON.")
@click.option("--brute-force", is_flag=True, help="Test every splat instead of walking the BVH.")
def trace_visibility(checkpoint, out, light_dir, dataset, view, camera_path, brute_force):
    """Trace per-pixel light visibility; writes OUT (float map) and a PNG preview."""
    ckpt = load_checkpoint(checkpoint)
    cfg = Config.from_dict(ckpt.config) if ckpt.config else Config()
    ds = load_dataset(dataset) if dataset else None
    cam = _camera(ds, view, camera_path)
    light = _light(light_dir, "1")
    if len(ckpt.scene) == 0:
        vis = np.ones((cam.height, cam.width))
    else:
        geo = ckpt.scene.map(lambda t: t.detach().double())
        arrays = SplatArrays.from_scene(geo)
        bvh = build_bvh(arrays, cfg.trace)
        with torch.no_grad():
            gb = rasterize(geo, cam, "gbuffer", cfg.raster)
        vis = visibility_map(gb, cam, light, bvh, arrays, cfg.trace, cfg.shading.mask_threshold, brute_force)
    out = Path(out)
    write_float_map(out, vis.astype(np.float32))
    save_image(out.with_suffix(".png"), np.repeat(vis[..., None], 3, axis=-1), srgb=False)
    click.echo(f"wrote {out}; mean visibility {float(vis.mean()):.4f}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False), envvar=f"{ENV_PREFIX}_CHECKPOINT")
@click.argument("out", type=click.Path(dir_okay=False), envvar=f"{ENV_PREFIX}_OUT")
@click.option("--op", type=click.Choice(["material-replace", "material-scale", "remove-region"]), required=True)
@click.option("--box", help="Region lo_x,lo_y,lo_z,hi_x,hi_y,hi_z.")
@click.option("--sphere", help="Region c_x,c_y,c_z,radius.")
@click.option("--albedo", help="Replacement albedo r,g,b in [0, 1].")
@click.option("--metallic", type=click.FloatRange(0, 1))
@click.option("--roughness", type=click.FloatRange(0, 1))
@click.option("--albedo-scale", type=float, default=1.0, show_default=True)
@click.option("--metallic-scale", type=float, default=1.0, show_default=True)
@click.option("--roughness-scale", type=float, default=1.0, show_default=True)
def edit(checkpoint, out, op, box, sphere, albedo, metallic, roughness, albedo_scale, metallic_scale,
         roughness_scale):
    """Edit materials or remove splats of CHECKPOINT; writes the result to OUT."""
    if box and sphere:
        raise click.UsageError("give at most one of --box and --sphere")
    region = None
    if box:
        v = _floats(box, 6, "box")
        region = Region("box", lo=v[:3], hi=v[3:])
    elif sphere:
        v = _floats(sphere, 4, "sphere")
        region = Region("sphere", center=v[:3], radius=v[3])
    spec = EditSpec(op, region, _floats(albedo, 3, "albedo") if albedo else None, metallic, roughness,
                    albedo_scale, metallic_scale, roughness_scale)
    ckpt = load_checkpoint(checkpoint)
    edited = apply_edit(ckpt, spec)
    save_checkpoint(out, edited)
    click.echo(f"wrote {out}; {len(edited.scene)} splats")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False), envvar=f"{ENV_PREFIX}_CHECKPOINT")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False), envvar=f"{ENV_PREFIX}_DATASET")
@click.option("--json", "json_path", type=click.Path(dir_okay=False), help="Also write the report as JSON.")
@click.option("--retrace/--no-retrace", default=True, show_default=True,
              help="Trace visibility for lights outside the training set.")
def eval_cmd(checkpoint, dataset, json_path, retrace):
    """Score CHECKPOINT on the held-out views of DATASET."""
    ckpt = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    report = evaluate(ckpt, ds, retrace=retrace)
    if json_path:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(report.to_json())
    click.echo(report.table())


if __name__ == "__main__":
    main()
