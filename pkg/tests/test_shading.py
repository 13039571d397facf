import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from gsmvps.errors import InvalidPixelError
from gsmvps.raster import GBuffer
from gsmvps.scene import Camera, DirectionalLight
from gsmvps.shading import (ShadePoint, eval_brdf, project, schlick_fresnel, shade_multi_light, shade_sdl,
                            unproject)

from conftest import origin_camera


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def point(n=(0, 0, 1), wo=(0, 0, 1), albedo=(0.5, 0.5, 0.5), metallic=0.0, roughness=0.5) -> ShadePoint:
    return ShadePoint(t([0, 0, 0]), t(n), t(wo), t(albedo), t(metallic), t(roughness))


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def hemisphere(n=64):
    """Midpoint rule over (theta, phi) of the upper hemisphere: directions [n*n, 3], solid-angle weights."""
    th = (np.arange(n) + 0.5) * (math.pi / 2) / n
    ph = (np.arange(n) + 0.5) * (2 * math.pi) / n
    th, ph = np.meshgrid(th, ph, indexing="ij")
    d = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1).reshape(-1, 3)
    w = (np.sin(th) * (math.pi / 2 / n) * (2 * math.pi / n)).reshape(-1)
    return d, w


def pixel_gbuffer(normal, albedo=(1, 1, 1), metallic=0.0, roughness=0.5, depth=1.0, opacity=1.0) -> GBuffer:
    m = lambda v: t(v).reshape(1, 1, -1)
    return GBuffer(opacity=m([opacity]), depth=m([depth]), normal=m(unit(normal)), albedo=m(albedo),
                   metallic=m([metallic]), roughness=m([roughness]))


PIXEL_CAM = origin_camera(1, 1, focal=1.0, cx=0.0, cy=0.0)
FACING = (0, 0, -1)  # toward the camera at the origin
HALF_LIT = DirectionalLight(unit([math.sqrt(3) / 2, 0, -0.5]), 1.0)  # cos = 0.5 against FACING


# unproject / project

def test_unproject_principal_point():
    np.testing.assert_allclose(unproject((0, 0), 1.0, PIXEL_CAM), [0, 0, 1], atol=1e-12)


def test_unproject_similar_triangles():
    cam = origin_camera(64, 64, focal=100.0, cx=32.0, cy=32.0)
    np.testing.assert_allclose(unproject((42, 32), 2.0, cam), [0.2, 0, 2], atol=1e-12)


@pytest.mark.parametrize("depth", [0.0, -1.0])
def test_unproject_rejects_nonpositive_depth(depth):
    with pytest.raises(InvalidPixelError):
        unproject((0, 0), depth, PIXEL_CAM)


@given(st.floats(0, 63), st.floats(0, 47), st.floats(0.05, 50), st.integers(0, 2**31 - 1))
def test_unproject_roundtrip(x, y, depth, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    w2c = np.eye(4)
    w2c[:3, :3] = q
    w2c[:3, 3] = rng.normal(size=3)
    cam = Camera(np.array([[60.0, 0, 31.5], [0, 55.0, 23.5], [0, 0, 1]]), w2c, 64, 48)
    np.testing.assert_allclose(project(unproject((x, y), depth, cam), cam), [x, y], atol=1e-4)


# BRDF

def test_diffuse_lambert_value():
    s = eval_brdf(point(albedo=(0.9, 0.9, 0.9)), t([0, 0, 1]))
    np.testing.assert_allclose(s.diffuse.numpy(), [0.9 / math.pi] * 3, atol=1e-12)
    assert float(s.diffuse[0]) == pytest.approx(0.2865, abs=1e-4)


def test_metal_has_no_diffuse():
    s = eval_brdf(point(albedo=(0.3, 0.7, 0.2), metallic=1.0), t(unit([1, 0, 1])))
    assert float(s.diffuse.abs().max()) == 0.0


def test_fresnel_normal_incidence_dielectric():
    f0 = 0.04 * (1 - 0.0) + t([0.8, 0.1, 0.3]) * 0.0
    np.testing.assert_allclose(schlick_fresnel(f0, t(1.0)).numpy(), [0.04] * 3, atol=1e-15)


def test_backlit_is_zero_sample():
    s = eval_brdf(point(), t(unit([1, 0, -1])))
    assert float(s.diffuse.abs().max()) == 0 and float(s.specular.abs().max()) == 0
    assert float(s.cosine) == 0


def test_samples_nonnegative_and_diffuse_bounded():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.uniform(0, 1, 3)
        p = point(n=unit(rng.normal(size=3)), wo=unit(rng.normal(size=3)), albedo=a,
                  metallic=rng.uniform(), roughness=rng.uniform())
        s = eval_brdf(p, t(unit(rng.normal(size=3))))
        assert float(s.diffuse.min()) >= 0 and float(s.specular.min()) >= 0
        assert bool((s.diffuse <= t(a) / math.pi + 1e-15).all())


@pytest.mark.parametrize("roughness", [0.3, 0.5, 0.8])
@pytest.mark.parametrize("view_deg", [0.0, 45.0, 75.0])
def test_white_furnace(roughness, view_deg):
    d, w = hemisphere(64)
    v = math.radians(view_deg)
    p = point(wo=(math.sin(v), 0, math.cos(v)), albedo=(1, 1, 1), metallic=1.0, roughness=roughness)
    s = eval_brdf(ShadePoint(*(x.expand(len(d), *x.shape) for x in p)), t(d))
    total = (s.specular * s.cosine[:, None] * t(w)[:, None]).sum(0)
    assert float(total.max()) <= 1.05


@pytest.mark.parametrize("metallic", [0.0, 0.3])
def test_diffuse_energy(metallic):
    d, w = hemisphere(64)
    a = np.array([0.9, 0.5, 0.2])
    p = point(albedo=a, metallic=metallic)
    s = eval_brdf(ShadePoint(*(x.expand(len(d), *x.shape) for x in p)), t(d))
    total = (s.diffuse * s.cosine[:, None] * t(w)[:, None]).sum(0).numpy()
    np.testing.assert_allclose(total, a * (1 - metallic), rtol=1e-2)


@given(st.integers(0, 2**31 - 1))
def test_specular_reciprocity(seed):
    rng = np.random.default_rng(seed)
    n = unit(rng.normal(size=3))
    # two directions in the upper hemisphere of n
    a, b = (unit(x) for x in rng.normal(size=(2, 3)))
    a, b = (x if x @ n > 0.05 else unit(x - 2 * (x @ n) * n + 0.1 * n) for x in (a, b))
    kw = dict(albedo=rng.uniform(0, 1, 3), metallic=rng.uniform(), roughness=rng.uniform(0.1, 1))
    s1 = eval_brdf(point(n=n, wo=a, **kw), t(b)).specular
    s2 = eval_brdf(point(n=n, wo=b, **kw), t(a)).specular
    np.testing.assert_allclose(s1.numpy(), s2.numpy(), rtol=1e-6, atol=1e-9)


# SDL shading

def test_shade_lambertian_pixel():
    gb = pixel_gbuffer(FACING, albedo=(1, 1, 1))
    img = shade_sdl(gb, PIXEL_CAM, HALF_LIT, torch.ones(1, 1, 3, dtype=torch.float64), specular=False)
    np.testing.assert_allclose(img[0, 0].numpy(), [0.5 / math.pi] * 3, atol=1e-12)
    assert float(img[0, 0, 0]) == pytest.approx(0.1592, abs=1e-4)


def test_shade_backfacing_is_zero():
    gb = pixel_gbuffer(FACING)
    back = DirectionalLight(unit([0.3, 0, 1]), 2.0)
    assert float(shade_sdl(gb, PIXEL_CAM, back).abs().max()) == 0.0


def test_shade_fully_shadowed_is_zero():
    gb = pixel_gbuffer(FACING)
    assert float(shade_sdl(gb, PIXEL_CAM, HALF_LIT, torch.zeros(1, 1, 3, dtype=torch.float64)).abs().max()) == 0


def test_shade_background_is_zero():
    gb = pixel_gbuffer(FACING, opacity=0.3)
    assert float(shade_sdl(gb, PIXEL_CAM, HALF_LIT).abs().max()) == 0


def random_gbuffer(rng, h=6, w=5) -> GBuffer:
    n = rng.normal(size=(h, w, 3)) + np.array([0, 0, -2.0])
    return GBuffer(opacity=t(rng.uniform(0.2, 1, (h, w, 1))), depth=t(rng.uniform(1, 3, (h, w, 1))),
                   normal=t(n / np.linalg.norm(n, axis=-1, keepdims=True)), albedo=t(rng.uniform(0, 1, (h, w, 3))),
                   metallic=t(rng.uniform(0, 1, (h, w, 1))), roughness=t(rng.uniform(0.1, 1, (h, w, 1))))


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_shade_linear_in_intensity_and_incident(seed, k):
    rng = np.random.default_rng(seed)
    gb = random_gbuffer(rng)
    cam = origin_camera(5, 6, focal=5.0)
    light = DirectionalLight(unit([0.2, -0.3, -1]), rng.uniform(0.5, 2, 3))
    inc = t(rng.uniform(0, 1, (6, 5, 3)))
    base = shade_sdl(gb, cam, light, inc)
    brighter = shade_sdl(gb, cam, DirectionalLight(light.direction, light.intensity * k), inc)
    np.testing.assert_allclose(brighter.numpy(), k * base.numpy(), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(shade_sdl(gb, cam, light, k * inc).numpy(), k * base.numpy(), rtol=1e-12, atol=1e-15)
    # two identical lights give exactly twice the image
    assert torch.equal(shade_multi_light(gb, cam, [light, light], [inc, inc]), 2 * base)
    assert torch.equal(shade_multi_light(gb, cam, [light], [inc]), base)


def test_multi_light_needs_a_light():
    with pytest.raises(ValueError):
        shade_multi_light(pixel_gbuffer(FACING), PIXEL_CAM, [])


def test_96_lights_lambertian_sphere():
    # analytic sphere G-buffer seen by an origin camera
    res, focal, center, radius = 32, 40.0, np.array([0.0, 0.0, 4.0]), 1.0
    cam = origin_camera(res, res, focal=focal)
    rays = cam.pixel_rays()
    d = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    b = d @ center
    disc = b * b - (center @ center - radius ** 2)
    hit = disc > 0
    s = np.where(hit, b - np.sqrt(np.maximum(disc, 0)), 1.0)
    pos = d * s[..., None]
    n = (pos - center) / radius
    albedo = np.array([0.8, 0.6, 0.3])
    gb = GBuffer(opacity=t(hit[..., None].astype(float)), depth=t(pos[..., 2:3]), normal=t(np.where(hit[..., None], n, [0, 0, -1.0])),
                 albedo=t(np.broadcast_to(albedo, (res, res, 3)).copy()), metallic=t(np.zeros((res, res, 1))),
                 roughness=t(np.full((res, res, 1), 0.5)))
    rng = np.random.default_rng(96)
    dirs = [unit(v * [1, 1, 1] - [0, 0, 1.5]) for v in rng.normal(size=(96, 3))]
    lights = [DirectionalLight(v, 1.0) for v in dirs]
    img = shade_multi_light(gb, cam, lights, specular=False).numpy()
    cos = np.clip(n @ np.array(dirs).T, 0, None).sum(-1)
    expected = np.where(hit[..., None], cos[..., None] * albedo / math.pi, 0.0)
    assert np.abs(img - expected).max() <= 1e-5
