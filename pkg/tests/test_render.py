import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from temo import autodiff as ad
from temo.geometry import CameraPose, render_geometry_pass
from temo.render import (SGLight, ShadingInputs, brdf, default_lights, load_raw, neutral_render, render_image,
                         save_png, save_raw, sg_clamped_cosine, sg_eval, shade, shade_pixel, to_srgb8)
from temo.scenes import two_sphere_mesh
from temo.stylefield import StyleField

from oracles import DOMEGA, GRID, diffuse_errors, reference_radiance, specular_errors


def test_sg_eval_examples():
    light = SGLight([0, 0, 1], 2.0, [1.5, 1.5, 1.5])
    w = np.array([math.sqrt(0.75), 0, 0.5])
    np.testing.assert_allclose(sg_eval(light, w), 1.5 * math.exp(-1))
    assert sg_eval(SGLight([0, 0, 1], 1e4, 1.0), [1.0, 0, 0]).max() < 1e-300
    np.testing.assert_allclose(sg_eval(light, [0, 0, 1.0]), [1.5] * 3)


def test_sg_light_validation():
    with pytest.raises(ValueError):
        SGLight([0, 0, 1], 0.5, 1.0)
    with pytest.raises(ValueError):
        SGLight([0, 0, 1], 2.0, [-1, 0, 0])
    np.testing.assert_allclose(SGLight([0, 0, 3.0], 2.0, 1.0).axis, [0, 0, 1])


@pytest.mark.parametrize("lam", [1.0, 4.0, 30.0, 399.0, 401.0, 2000.0])
@pytest.mark.parametrize("c", [-0.9, -0.2, 0.0, 0.3, 1.0])
def test_clamped_cosine_against_quadrature(lam, c):
    n = np.array([0.0, 0.0, 1.0])
    axis = np.array([math.sqrt(1 - c * c), 0.0, c])
    if lam > 100:
        # sharp lobes need a finer grid than the shared one
        from oracles import fibonacci_sphere
        grid = fibonacci_sphere(400_000)
        dw = 4 * np.pi / len(grid)
    else:
        grid, dw = GRID, DOMEGA
    ref = (np.exp(lam * (grid @ axis - 1)) * np.clip(grid @ n, 0, None)).sum() * dw
    got = sg_clamped_cosine(c, lam).item()
    assert got >= 0
    # the series is exact to the grid; the small-angle limit above 400 is good to ~0.3%
    rel = 2e-3 if lam <= 400 else 5e-3
    assert abs(got - ref) <= rel * max(ref, 2 * np.pi / lam * 1e-3) + 1e-12


def test_clamped_cosine_normal_incidence_closed_form():
    # axis = n: 2 pi / lam * (1 - (1 - e^{-lam}) / lam), by direct integration
    for lam in (1.0, 5.0, 50.0):
        ref = 2 * np.pi / lam * (1 - (1 - math.exp(-lam)) / lam)
        assert sg_clamped_cosine(1.0, lam).item() == pytest.approx(ref, rel=1e-10)


def test_clamped_cosine_gradient():
    rep = ad.grad_check(lambda x: ad.sum(sg_clamped_cosine(x, 7.0)), np.array([-0.4, 0.1, 0.6, 0.95]))
    assert rep.max_rel_error < 1e-4
    rep = ad.grad_check(lambda x: ad.sum(sg_clamped_cosine(0.3, x)), np.array([1.5, 20.0, 350.0]))
    assert rep.max_rel_error < 1e-4


def white_light():
    return SGLight([0.2, 0.3, 0.9], 8.0, [1.0, 1.0, 1.0])


def test_zero_reflectance_and_dark_scene():
    n, v = np.array([0, 0, 1.0]), np.array([0.3, 0, -1.0])
    zero = shade_pixel(ShadingInputs(n, v, np.zeros(3), 0.5, np.zeros(3), default_lights()))
    np.testing.assert_array_equal(zero, 0.0)
    dark = [SGLight(l.axis, l.sharpness, 0.0) for l in default_lights()]
    np.testing.assert_array_equal(shade_pixel(ShadingInputs(n, v, np.ones(3), 0.5, np.ones(3), dark)), 0.0)


@pytest.mark.parametrize("lam", [1.0, 3.0, 10.0, 40.0])
def test_normal_facing_light_matches_quadrature(lam):
    light = SGLight([0.3, -0.5, 0.8], lam, [1.0, 1.0, 1.0])
    v = np.array([0.0, 0.0, 1.0])
    ref = reference_radiance(light.axis, v, np.ones(3), 0.5, np.zeros(3), [light])
    got = shade_pixel(ShadingInputs(light.axis, -v, np.ones(3), 0.5, np.zeros(3), [light]))
    np.testing.assert_array_less(np.abs(got - ref) / ref, 0.02)


def test_degenerate_normal():
    with pytest.raises(ValueError):
        shade_pixel(ShadingInputs(np.zeros(3), [0, 0, -1.0], np.ones(3), 0.5, np.zeros(3), [white_light()]))


def test_brdf_reference_agrees_with_oracle_integrand():
    n, v, w = np.array([0, 0, 1.0]), np.array([0.6, 0, 0.8]), np.array([-0.6, 0, 0.8])
    # mirror configuration: h = n, D = 1 / (pi a^2)
    f = brdf(n, v, w, [0.2, 0.2, 0.2], 0.5, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(f, 0.2 / np.pi + 1 / (np.pi * 0.25) / 4)


unit3 = st.tuples(*[st.floats(-1, 1)] * 3).map(np.array).filter(lambda a: np.linalg.norm(a) > 0.1)


@given(unit3, unit3, st.floats(0.05, 1.0), st.floats(0, 1), st.floats(0, 1), unit3, st.floats(1, 500))
def test_radiance_non_negative(n, v, rough, diff, spec, axis, lam):
    light = SGLight(axis / np.linalg.norm(axis), lam, [1.0, 0.5, 2.0])
    out = shade_pixel(ShadingInputs(n, v / np.linalg.norm(v), np.full(3, diff), rough, np.full(3, spec), [light]))
    assert np.all(out >= 0) and np.all(np.isfinite(out))


def test_shade_gradients(rng):
    n = rng.normal(size=(4, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    v = -n + 0.3 * rng.normal(size=(4, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    diff, rough, spec = rng.uniform(0.1, 0.9, (4, 3)), rng.uniform(0.3, 0.9, (4, 1)), rng.uniform(0.1, 0.9, (4, 3))
    lights = default_lights()
    for k, x in enumerate((diff, rough, spec)):
        def f(t, k=k):
            args = [diff, rough, spec]
            args[k] = t
            return ad.sum(shade(n, v, *args, lights))
        assert ad.grad_check(f, x).max_rel_error < 1e-4
    assert ad.grad_check(lambda t: ad.sum(shade(t / ad.norm(t, axis=-1, keepdims=True), v, diff, rough, spec,
                                                lights)), n).max_rel_error < 1e-4


def test_pixel_gradient_wrt_albedo():
    n, v = np.array([[0.1, 0.2, 0.97]]), np.array([[0.0, 0.0, -1.0]])
    rep = ad.grad_check(lambda a: ad.sum(shade(n / np.linalg.norm(n), v, a, [[0.4]], [[0.3, 0.3, 0.3]],
                                               default_lights()) * [1.0, 0, 0]), np.array([[0.5, 0.2, 0.7]]))
    assert rep.max_rel_error < 1e-4


# -- images -----------------------------------------------------------------------


def small_field():
    return StyleField(seed=1, num_bands=2, width=12, word_dim=6)


def test_empty_hitmap_background():
    buf, hit = render_geometry_pass(two_sphere_mesh(), CameraPose([0, 0, 3.0], look_at=[0, 0, 6.0]), (6, 6))
    assert not hit.any()
    img = render_image(buf, small_field(), np.zeros((0, 2), bool), np.ones((2, 6)), default_lights(), (1, 1, 1))
    np.testing.assert_array_equal(img.data, 1.0)


def test_zero_init_render_uniform_and_finite():
    buf, hit = render_geometry_pass(two_sphere_mesh(), CameraPose([0, 0, 3.0]), (16, 16))
    words = np.random.default_rng(0).normal(size=(3, 6))
    img = render_image(buf, small_field(), np.ones((buf.n_hits, 3), bool), words, default_lights()).data
    assert np.all(np.isfinite(img)) and np.all(img >= 0)
    np.testing.assert_array_equal(img[~hit], 0.0)
    assert img[hit].sum(axis=1).min() > 0


def test_render_gradient_through_field():
    buf, _ = render_geometry_pass(two_sphere_mesh(), CameraPose([0.5, 0.8, 2.8]), (8, 8))
    field = small_field()
    words = np.random.default_rng(2).normal(size=(3, 6))
    adj = np.ones((buf.n_hits, 3), bool)
    name = "reflect.diffuse.weight"

    def f(w):
        field.params[name] = w
        return ad.mean(render_image(buf, field, adj, words, default_lights()))

    rep = ad.grad_check(f, field.params[name].data, indices=range(0, 36, 5))
    assert rep.max_rel_error < 1e-3


def test_neutral_render_grey_and_deterministic():
    buf, hit = render_geometry_pass(two_sphere_mesh(), CameraPose([0, 0, 3.0]), (12, 12))
    a, b = neutral_render(buf), neutral_render(buf)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a[hit][:, 0], a[hit][:, 1])


def test_export_clamps_only_at_the_end(tmp_path):
    img = np.array([[[-0.5, 0.5, 2.0]]])
    np.testing.assert_array_equal(to_srgb8(img), [[[0, round(0.5 ** (1 / 2.2) * 255), 255]]])
    save_png(img, tmp_path / "a.png")
    from PIL import Image
    assert np.asarray(Image.open(tmp_path / "a.png")).shape == (1, 1, 3)


def test_raw_roundtrip(tmp_path, rng):
    img = rng.normal(size=(5, 7, 3))
    save_raw(img, tmp_path / "x.raw")
    np.testing.assert_array_equal(load_raw(tmp_path / "x.raw"), img.astype(np.float32))
    (tmp_path / "bad.raw").write_bytes(b"nope" * 8)
    with pytest.raises(ValueError):
        load_raw(tmp_path / "bad.raw")


# -- fidelity against the quadrature oracle ------------------------------------------


def test_diffuse_fidelity():
    """Lights above the horizon, sharpness 1..50: within 2% of quadrature."""
    assert diffuse_errors(seed=0).max() < 0.02


def test_specular_fidelity():
    """n.v >= 0.7, light within 20 deg of mirror, roughness >= 0.2: within 5%."""
    assert specular_errors(seed=0).max() < 0.05
