"""Differentiable spherical-Gaussian shading and image assembly.

Lights are spherical Gaussians ``mu * exp(lam * (axis . w - 1))``.  The
reflectance model is

    f(v, w) = diffuse / pi + specular * D(h) / 4,
    D(h)    = 1 / (pi a^2) * exp(2 / a^2 * (h . n - 1)),   a = roughness

i.e. a microfacet lobe with a spherical-Gaussian NDF whose shadowing term is
folded into the (n.l)(n.v) denominator.  Both terms integrate against SG
lights in closed form: the SG / clamped-cosine integral is evaluated with a
Legendre (Funk-Hecke) series, the specular lobe is warped into the light
domain around the mirror direction and multiplied with each light lobe.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

MIN_NDOTV = 0.05
RAW_MAGIC = b"TEMORAW1"


@dataclass(frozen=True)
class SGLight:
    axis: np.ndarray
    sharpness: float
    amplitude: np.ndarray

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        amp = np.broadcast_to(np.asarray(self.amplitude, dtype=np.float64), (3,)).copy()
        if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
            axis = axis / np.linalg.norm(axis)
        if not 1.0 <= self.sharpness <= 1e4:
            raise ValueError(f"SG sharpness must lie in [1, 1e4], got {self.sharpness}")
        if np.any(amp < 0):
            raise ValueError("SG amplitude must be non-negative")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "sharpness", float(self.sharpness))
        object.__setattr__(self, "amplitude", amp)

    def to_dict(self):
        return {"axis": self.axis.tolist(), "sharpness": self.sharpness, "amplitude": self.amplitude.tolist()}


def default_lights() -> list:
    """Fixed key / fill / back lobes."""
    return [
        SGLight([0.4, 0.7, 0.6], 2.0, [2.2, 2.2, 2.2]),
        SGLight([-0.6, 0.2, 0.5], 2.0, [1.2, 1.2, 1.2]),
        SGLight([0.0, -0.3, -1.0], 2.0, [0.8, 0.8, 0.8]),
    ]


def sg_eval(light: SGLight, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    cos = w @ light.axis
    return np.multiply.outer(np.exp(light.sharpness * (cos - 1.0)), light.amplitude)


def brdf(normal, view_out, light_dir, diffuse, roughness, specular) -> np.ndarray:
    """Point evaluation of the reflectance model (no cosine factor)."""
    n, v, w = (np.asarray(a, dtype=np.float64) for a in (normal, view_out, light_dir))
    h = v + w
    h = h / np.linalg.norm(h, axis=-1, keepdims=True)
    a2 = roughness * roughness
    d = np.exp(2.0 / a2 * ((h @ n) - 1.0)) / (np.pi * a2)
    return np.asarray(diffuse) / np.pi + np.multiply.outer(d, np.asarray(specular)) / 4.0


def _clamped_cosine_legendre(lmax: int) -> np.ndarray:
    """Legendre coefficients g_l of max(t, 0) on [-1, 1], l = 0..lmax."""
    nodes, weights = np.polynomial.legendre.leggauss(lmax + 64)
    t, w = (nodes + 1.0) / 2.0, weights / 2.0
    g = np.empty(lmax + 1)
    p_prev, p = np.ones_like(t), t.copy()
    g[0] = 0.5 * np.sum(w * t)
    if lmax >= 1:
        g[1] = 1.5 * np.sum(w * t * t)
    for l in range(1, lmax):
        p_prev, p = p, ((2 * l + 1) * t * p - l * p_prev) / (l + 1)
        g[l + 1] = (2 * l + 3) / 2.0 * np.sum(w * t * p)
    g[3::2] = 0.0
    return g


SERIES_MAX_SHARPNESS = 400.0
_SERIES_LMAX = int(np.ceil(np.sqrt(60.0 * SERIES_MAX_SHARPNESS))) + 10
_G = _clamped_cosine_legendre(_SERIES_LMAX + 1)


def _scaled_sph_bessel(x: np.ndarray, n: int) -> np.ndarray:
    """exp(-x) * i_l(x) for l = 0..n+1 (modified spherical Bessel), via backward ratios."""
    rho = np.zeros_like(x)
    ratios = [None] * (n + 2)
    for l in range(n + 30, 0, -1):
        rho = x / ((2 * l + 1) + x * rho)
        if l <= n + 1:
            ratios[l] = rho
    a = np.empty((n + 2,) + x.shape)
    a[0] = -np.expm1(-2.0 * x) / (2.0 * x)
    for l in range(1, n + 2):
        a[l] = a[l - 1] * ratios[l]
    return a


def _series(c: np.ndarray, x: np.ndarray):
    n = min(int(np.ceil(np.sqrt(60.0 * x.max()))) + 10, _SERIES_LMAX)
    a = _scaled_sph_bessel(x, n)
    l_idx = np.arange(n + 1).reshape((-1,) + (1,) * x.ndim)
    da = a[1:n + 2] + (l_idx / x - 1.0) * a[:n + 1]
    val = np.zeros_like(c)
    d_c = np.zeros_like(c)
    d_x = np.zeros_like(c)
    p_prev, p = np.ones_like(c), c.copy()
    dp_prev, dp = np.zeros_like(c), np.ones_like(c)
    for l in range(n + 1):
        if l == 0:
            pl, dpl = p_prev, dp_prev
        elif l == 1:
            pl, dpl = p, dp
        else:
            k = l - 1
            p_next = ((2 * k + 1) * c * p - k * p_prev) / (k + 1)
            dp_next = dp_prev + (2 * k + 1) * p
            p_prev, p, dp_prev, dp = p, p_next, dp, dp_next
            pl, dpl = p, dp
        if _G[l] == 0.0:
            continue
        val += a[l] * _G[l] * pl
        d_c += a[l] * _G[l] * dpl
        d_x += da[l] * _G[l] * pl
    return 4.0 * np.pi * val, 4.0 * np.pi * d_c, 4.0 * np.pi * d_x


def _asymptotic(c: np.ndarray, x: np.ndarray):
    from scipy.special import ndtr

    s = np.sqrt(np.clip(1.0 - c * c, 1e-24, None))
    rx = np.sqrt(x)
    z = c * rx / s
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    cdf = ndtr(z)
    j = c * cdf + s / rx * pdf
    dj_c = cdf - pdf * c / (s * rx)
    dj_x = -pdf * s / (2.0 * x * rx)
    k = 2.0 * np.pi / x
    return k * j, k * dj_c, -k / x * j + k * dj_x


def sg_clamped_cosine(cos_axis_n, sharpness) -> ad.Tensor:
    """Integral over the sphere of exp(lam (axis.w - 1)) * max(w.n, 0) dw.

    Closed form as a Funk-Hecke product of the SG's Legendre coefficients
    (scaled modified spherical Bessel functions) with those of the clamped
    cosine, truncated once terms fall below double precision; lobes sharper
    than ``SERIES_MAX_SHARPNESS`` use the small-angle Gaussian limit.
    Differentiable in both arguments; clipped at zero.
    """
    c_t, x_t = ad._as_tensor(cos_axis_n), ad._as_tensor(sharpness)
    shape = np.broadcast_shapes(c_t.shape, x_t.shape)
    c = np.clip(np.broadcast_to(c_t.data, shape).astype(np.float64), -1.0, 1.0).ravel()
    x = np.broadcast_to(x_t.data, shape).astype(np.float64).ravel()
    if np.any(x <= 0):
        raise ValueError("SG sharpness must be positive")
    val = np.empty_like(c)
    d_c = np.empty_like(c)
    d_x = np.empty_like(c)
    small = x <= SERIES_MAX_SHARPNESS
    if small.any():
        val[small], d_c[small], d_x[small] = _series(c[small], x[small])
    if (~small).any():
        val[~small], d_c[~small], d_x[~small] = _asymptotic(c[~small], x[~small])
    neg = val < 0
    val[neg] = 0.0
    d_c[neg] = 0.0
    d_x[neg] = 0.0
    val, d_c, d_x = (a.reshape(shape) for a in (val, d_c, d_x))

    def adjoint(g):
        return ad._unbroadcast(g * d_c, c_t.shape), ad._unbroadcast(g * d_x, x_t.shape)

    return ad._make(val, (c_t, x_t), adjoint, "sg_clamped_cosine")


def sg_cosine_integral(cos_axis_n, sharpness, amplitude) -> ad.Tensor:
    """Amplitude-weighted :func:`sg_clamped_cosine`."""
    return sg_clamped_cosine(cos_axis_n, sharpness) * ad._as_tensor(amplitude)


def _anisotropy_ratio(n, refl, ndv, a2, lam_w, light: SGLight) -> ad.Tensor:
    """Correction from the isotropic warped lobe to its anisotropic shape.

    The warped NDF has sharpness lam_d/4 in the plane of incidence and
    lam_d/(4 ndv^2) across it.  Both lobes and the light are treated as
    Gaussians in the tangent plane at the mirror direction; the ratio of the
    two product integrals rescales the isotropic closed form.
    """
    lam_d = 2.0 / a2
    a_in = lam_d * 0.25
    a_out = lam_d / (4.0 * ndv * ndv)
    t = n - ad.sum(n * refl, axis=-1, keepdims=True) * refl
    e1 = t / ad.clamp_min(ad.norm(t, axis=-1, keepdims=True), 1e-6)
    xi = light.axis.reshape(1, 3)
    x1 = ad.sum(e1 * xi, axis=-1, keepdims=True)
    perp = xi - ad.sum(refl * xi, axis=-1, keepdims=True) * refl
    x1_sq = x1 * x1
    x2_sq = ad.clamp_min(ad.sum(perp * perp, axis=-1, keepdims=True) - x1_sq, 0.0)
    L = light.sharpness

    def log_overlap(a1, a2_, r1, r2):
        return (-0.5 * (a1 * L * r1 / (a1 + L) + a2_ * L * r2 / (a2_ + L))
                - 0.5 * (ad.log(a1 + L) + ad.log(a2_ + L)))

    return ad.exp(log_overlap(a_in, a_out, x1_sq, x2_sq) - log_overlap(lam_w, lam_w, x1_sq, x2_sq))


def shade(normals, view_dirs, diffuse, roughness, specular, lights: Sequence[SGLight]) -> ad.Tensor:
    """Outgoing radiance (P, 3) at P surface points.

    ``normals`` are unit shading normals, ``view_dirs`` the camera ray
    directions (camera -> point), ``roughness`` has shape (P, 1).
    """
    n = ad._as_tensor(normals)
    v = -ad._as_tensor(view_dirs)
    diffuse, roughness, specular = (ad._as_tensor(t) for t in (diffuse, roughness, specular))
    if np.any(np.linalg.norm(n.data, axis=-1) < 1e-8):
        raise ValueError("degenerate shading normal")
    ndv = ad.sum(n * v, axis=-1, keepdims=True)
    refl = 2.0 * ndv * n - v
    ndv_c = ad.clamp(ndv, MIN_NDOTV, 1.0)
    a2 = roughness * roughness
    lam_w = (2.0 / a2) / (4.0 * ndv_c)
    mu_d = 1.0 / (np.pi * a2)

    irradiance = 0.0
    spec_total = 0.0
    for light in lights:
        cos_l = ad.matmul(n, light.axis.reshape(3, 1))
        irradiance = irradiance + sg_cosine_integral(cos_l, light.sharpness, light.amplitude)
        um = lam_w * refl + light.sharpness * light.axis
        lam_m = ad.norm(um, axis=-1, keepdims=True)
        axis_m = um / lam_m
        mu_m = mu_d * ad.exp(lam_m - lam_w - light.sharpness)
        cos_m = ad.sum(axis_m * n, axis=-1, keepdims=True)
        aniso = _anisotropy_ratio(n, refl, ndv_c, a2, lam_w, light)
        spec_total = spec_total + sg_cosine_integral(cos_m, lam_m, mu_m) * aniso * light.amplitude
    return diffuse * (1.0 / np.pi) * irradiance + specular * 0.25 * spec_total


@dataclass(frozen=True)
class ShadingInputs:
    normal: np.ndarray
    view_dir: np.ndarray
    diffuse: np.ndarray
    roughness: float
    specular: np.ndarray
    lights: Sequence[SGLight]
    point: np.ndarray = None


def shade_pixel(inputs: ShadingInputs) -> np.ndarray:
    """Radiance of a single hit pixel."""
    n = np.asarray(inputs.normal, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm < 1e-8:
        raise ValueError("degenerate shading normal")
    out = shade(n[None] / norm, np.asarray(inputs.view_dir, dtype=np.float64)[None],
                np.asarray(inputs.diffuse, dtype=np.float64)[None],
                np.array([[inputs.roughness]], dtype=np.float64),
                np.asarray(inputs.specular, dtype=np.float64)[None], inputs.lights)
    return out.data[0]


def orient_normals(normals: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
    """Flip face normals that point away from the camera."""
    facing = (normals * view_dirs).sum(axis=-1, keepdims=True) > 0
    return np.where(facing, -normals, normals)


def compose_images(radiance: ad.Tensor, hit_masks: np.ndarray, background) -> ad.Tensor:
    """Scatter per-hit radiance (rows in view-major scan order) into (V, H, W, 3) images."""
    masks = np.asarray(hit_masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    flat = masks.reshape(-1)
    index = np.zeros(flat.size, dtype=np.int64)
    index[flat] = np.arange(1, int(flat.sum()) + 1)
    bg = ad.constant(np.asarray(background, dtype=np.float64).reshape(1, 3))
    table = ad.concat([bg, ad._as_tensor(radiance).reshape(-1, 3)], axis=0)
    return ad.reshape(ad.gather(table, index, axis=0), masks.shape + (3,))


def render_image(buffer, field, adjacency, word_feats, lights: Sequence[SGLight], background=(0.0, 0.0, 0.0)) -> ad.Tensor:
    """Shade every hit pixel of one intersection buffer through the style field.

    ``adjacency`` is the (hits x words) cross-modal graph mask for the hit
    pixels in scan order.  Returns a differentiable (H, W, 3) image.
    """
    if buffer.n_hits == 0:
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), buffer.hit.shape + (3,))
        return ad.constant(bg.copy())
    points = buffer.hit_points()
    dirs = buffer.hit_view_dirs()
    normals = orient_normals(buffer.hit_normals(), dirs)
    out = field(points, normals, dirs, adjacency, word_feats)
    rad = shade(out.normals, dirs, out.diffuse, out.roughness, out.specular, lights)
    return ad.reshape(compose_images(rad, buffer.hit, background), buffer.hit.shape + (3,))


def neutral_render(buffer, background=(0.0, 0.0, 0.0), albedo: float = 0.5) -> np.ndarray:
    """Flat grey diffuse render lit by one SG lobe pointing back at the camera."""
    img = np.broadcast_to(np.asarray(background, dtype=np.float64), buffer.hit.shape + (3,)).copy()
    if buffer.n_hits == 0:
        return img
    dirs = buffer.hit_view_dirs()
    normals = orient_normals(buffer.hit_normals(), dirs)
    towards_camera = -(buffer.view_dirs.reshape(-1, 3).mean(axis=0))
    light = SGLight(towards_camera / np.linalg.norm(towards_camera), 2.0, [1.5, 1.5, 1.5])
    diffuse = np.full((len(dirs), 3), albedo)
    rad = shade(normals, dirs, diffuse, np.ones((len(dirs), 1)), np.zeros((len(dirs), 3)), [light])
    img[buffer.hit] = rad.data
    return img


# --------------------------------------------------------------------------
# export


def to_srgb8(image) -> np.ndarray:
    """Linear radiance -> 8-bit with gamma 2.2; clamping happens only here."""
    img = np.asarray(image.data if isinstance(image, ad.Tensor) else image, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0) ** (1.0 / 2.2) * 255.0).astype(np.uint8)


def save_png(image, path) -> None:
    from PIL import Image

    Image.fromarray(to_srgb8(image)).save(path)


def save_raw(image, path) -> None:
    """Flat float32 dump: 8-byte magic, H, W, C as little-endian uint32, then data."""
    img = np.asarray(image.data if isinstance(image, ad.Tensor) else image, dtype="<f4")
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", h, w, c))
        fh.write(img.tobytes())


def load_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw image dump")
    h, w, c = struct.unpack("<III", data[8:20])
    return np.frombuffer(data[20:], dtype="<f4").reshape(h, w, c).copy()
