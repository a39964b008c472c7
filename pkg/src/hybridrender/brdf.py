"""Simplified isotropic Disney / Cook-Torrance reflectance.

``f_r = (1 - m) a / pi + D F G2 / (4 |n.wi| |n.wo|)`` with a GGX normal
distribution (``alpha = beta**2``), the height-correlated Smith term and a
Schlick Fresnel whose normal-incidence reflectance is
``F0 = (1 - m) 0.08 s + m a``. Grazing reflectance is ``clip(50 F0, 0, 1)``
so that ``F0 = 0`` removes the specular lobe entirely.

All array functions broadcast over leading axes: colors and directions have
a trailing axis of 3, scalars broadcast freely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mathkit as mk
from .mathkit import LUMA, dot

BETA_MIN = 0.01
DIELECTRIC_F0 = 0.08
SG_WARP_GUARD = 1e-4


@dataclass(frozen=True)
class BrdfParams:
    albedo_texture: np.ndarray
    specular: float = 0.5
    roughness: float = 0.5
    metalness: float = 0.0

    def __post_init__(self):
        tex = np.asarray(self.albedo_texture, dtype=np.float64)
        if tex.ndim != 3 or tex.shape[2] != 3 or tex.shape[0] < 1 or tex.shape[1] < 1:
            raise ValueError(f"albedo texture must be (h, w, 3), got {tex.shape}")
        object.__setattr__(self, "albedo_texture", tex)
        for name in ("specular", "roughness", "metalness"):
            val = float(getattr(self, name))
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
            object.__setattr__(self, name, val)

    @classmethod
    def constant(cls, albedo, specular=0.5, roughness=0.5, metalness=0.0, size=1):
        tex = np.broadcast_to(np.asarray(albedo, dtype=np.float64), (size, size, 3)).copy()
        return cls(tex, specular, roughness, metalness)

    def albedo_taps(self, uv):
        h, w, _ = self.albedo_texture.shape
        return mk.bilinear_taps(w, h, uv[..., 0], uv[..., 1], wrap_u=True)

    def albedo_at(self, uv):
        idx, wts, _, _ = self.albedo_taps(np.asarray(uv, dtype=np.float64))
        return mk.bilinear_gather(self.albedo_texture, idx, wts)


@dataclass(frozen=True)
class BrdfSample:
    direction: np.ndarray
    pdf: float
    value: np.ndarray


def effective_alpha2(beta):
    """``alpha**2 = max(beta, BETA_MIN)**4`` and its derivative in beta."""
    beta = np.asarray(beta, dtype=np.float64)
    be = np.maximum(beta, BETA_MIN)
    return be ** 4, np.where(beta > BETA_MIN, 4.0 * be ** 3, 0.0)


def fresnel_f0(a, s, m):
    return (1.0 - np.asarray(m))[..., None] * (DIELECTRIC_F0 * np.asarray(s))[..., None] + np.asarray(m)[..., None] * a


def ggx_d(ch, a2):
    k = ch * ch * (a2 - 1.0) + 1.0
    return a2 / (np.pi * k * k)


def smith_lambda(c, a2):
    c2 = c * c
    t2 = (1.0 - c2) / np.maximum(c2, 1e-300)
    return 0.5 * (np.sqrt(1.0 + a2 * t2) - 1.0)


def _smith_lambda_grads(c, a2):
    c2 = c * c
    t2 = (1.0 - c2) / c2
    q = np.sqrt(1.0 + a2 * t2)
    return t2 / (4.0 * q), -a2 / (2.0 * q * c2 * c)


def _schlick(f0, d):
    f90 = np.clip(50.0 * f0, 0.0, 1.0)
    p5 = (1.0 - d)[..., None] ** 5
    return f0 + (f90 - f0) * p5, f90, p5


def _schlick_backward(f0, f90, p5, d, g_f):
    slope = np.where((f0 > 0.0) & (f0 < 0.02), 50.0, 0.0)
    g_f0 = g_f * (1.0 - p5) + g_f * p5 * slope
    g_d = -5.0 * (1.0 - d) ** 4 * np.sum(g_f * (f90 - f0), axis=-1)
    return g_f0, g_d


def _f0_backward(a, s, m, g_f0):
    m = np.asarray(m, dtype=np.float64)
    g_s = DIELECTRIC_F0 * (1.0 - m) * np.sum(g_f0, axis=-1)
    g_m = np.sum(g_f0 * (a - DIELECTRIC_F0 * np.asarray(s)[..., None]), axis=-1)
    g_a = g_f0 * m[..., None]
    return g_a, g_s, g_m


# --------------------------------------------------------------------------
# evaluation


def eval_arrays(a, s, beta, m, n, wi, wo):
    """Vectorized ``f_r``; returns an (..., 3) array."""
    a = np.asarray(a, dtype=np.float64)
    ci, co = dot(n, wi), dot(n, wo)
    valid = (ci > 0.0) & (co > 0.0)
    a2, _ = effective_alpha2(beta)
    h = mk.normalize(wi + wo)
    ch, d = dot(n, h), np.clip(dot(wo, h), 0.0, 1.0)
    f0 = fresnel_f0(a, s, m)
    F, _, _ = _schlick(f0, d)
    cis, cos_ = np.where(valid, ci, 1.0), np.where(valid, co, 1.0)
    g2 = 1.0 / (1.0 + smith_lambda(cis, a2) + smith_lambda(cos_, a2))
    spec = (ggx_d(ch, a2) * g2 / (4.0 * cis * cos_))[..., None] * F
    diff = (1.0 - np.asarray(m))[..., None] * a / np.pi
    return np.where(valid[..., None], diff + spec, 0.0)


def eval_backward(a, s, beta, m, n, wi, wo, g_out):
    """Adjoint of ``eval_arrays`` with ``wi`` held fixed.

    Returns a dict with gradients for ``a`` (..., 3), ``s``, ``beta``, ``m``
    (broadcast shape of the samples) and ``n``, ``wo`` (..., 3).
    """
    a = np.asarray(a, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    ci, co = dot(n, wi), dot(n, wo)
    valid = (ci > 0.0) & (co > 0.0)
    g_out = np.where(valid[..., None], g_out, 0.0)
    cis, cos_ = np.where(valid, ci, 1.0), np.where(valid, co, 1.0)
    a2, da2 = effective_alpha2(beta)
    hv = wi + wo
    h = mk.normalize(hv)
    ch, d_raw = dot(n, h), dot(wo, h)
    d = np.clip(d_raw, 0.0, 1.0)
    f0 = fresnel_f0(a, s, m)
    F, f90, p5 = _schlick(f0, d)
    lam_i, lam_o = smith_lambda(cis, a2), smith_lambda(cos_, a2)
    g2 = 1.0 / (1.0 + lam_i + lam_o)
    k = ch * ch * (a2 - 1.0) + 1.0
    D = a2 / (np.pi * k * k)
    denom = 4.0 * cis * cos_
    S = D * g2 / denom

    one_m = (1.0 - m)[..., None] * np.ones_like(a)
    g_a = g_out * one_m / np.pi
    g_m = -np.sum(g_out * a, axis=-1) / np.pi

    g_F = g_out * S[..., None]
    g_S = np.sum(g_out * F, axis=-1)
    g_f0, g_d = _schlick_backward(f0, f90, p5, d, g_F)
    g_d = np.where((d_raw > 0.0) & (d_raw < 1.0), g_d, 0.0)
    ga_f0, g_s, gm_f0 = _f0_backward(a, s, m, g_f0)
    g_a = g_a + ga_f0
    g_m = g_m + gm_f0

    g_D = g_S * g2 / denom
    g_g2 = g_S * D / denom
    g_ci = -g_S * S / cis
    g_co = -g_S * S / cos_
    g_lam = -g2 * g2 * g_g2
    la_i, lc_i = _smith_lambda_grads(cis, a2)
    la_o, lc_o = _smith_lambda_grads(cos_, a2)
    g_ci = g_ci + g_lam * lc_i
    g_co = g_co + g_lam * lc_o
    g_a2 = g_lam * (la_i + la_o)
    g_a2 = g_a2 + g_D * (1.0 / (np.pi * k * k) - 2.0 * a2 * ch * ch / (np.pi * k ** 3))
    g_ch = g_D * (-4.0 * a2 * ch * (a2 - 1.0) / (np.pi * k ** 3))
    g_beta = g_a2 * da2

    g_n = g_ci[..., None] * wi + g_co[..., None] * wo + g_ch[..., None] * h
    g_h = g_ch[..., None] * n + g_d[..., None] * wo
    g_wo = g_co[..., None] * n + g_d[..., None] * h + mk.normalize_backward(hv, g_h)
    return {"a": g_a, "s": g_s, "beta": g_beta, "m": g_m, "n": g_n, "wo": g_wo}


def brdf_eval(params, a, n, wi, wo):
    """``f_r`` for one shading point with texture-sampled albedo ``a``."""
    return eval_arrays(
        np.asarray(a, dtype=np.float64), params.specular, params.roughness, params.metalness,
        np.asarray(n, dtype=np.float64), np.asarray(wi, dtype=np.float64), np.asarray(wo, dtype=np.float64),
    )


# --------------------------------------------------------------------------
# importance sampling


def diffuse_probability(a, s, m):
    a = np.asarray(a, dtype=np.float64)
    wd = mk.luminance((1.0 - np.asarray(m))[..., None] * a)
    ws = mk.luminance(fresnel_f0(a, s, m))
    tot = wd + ws
    return np.where(tot > 0.0, wd / np.where(tot > 0.0, tot, 1.0), 1.0)


def pdf_arrays(a, s, beta, m, n, wi, wo):
    a2, _ = effective_alpha2(beta)
    pd = diffuse_probability(a, s, m)
    ci = dot(n, wi)
    h = mk.normalize(wi + wo)
    ch = dot(n, h)
    oh = np.abs(dot(wo, h))
    spec = ggx_d(ch, a2) * np.maximum(ch, 0.0) / (4.0 * np.maximum(oh, 1e-300))
    p = pd * ci / np.pi + (1.0 - pd) * spec
    return np.where(ci > 0.0, p, 0.0)


def sample_arrays(a, s, beta, m, n, wo, u1, u2, u3):
    """Draw ``wi`` from the lobe mixture. Returns ``(wi, pdf)``; pdf is 0 for
    samples that land below the shading hemisphere."""
    a2, _ = effective_alpha2(beta)
    pd = diffuse_probability(a, s, m)
    phi = 2.0 * np.pi * u2
    r = np.sqrt(u1)
    local_d = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(0.0, 1.0 - u1))], axis=-1)
    cos_h = np.sqrt((1.0 - u1) / (1.0 + (a2 - 1.0) * u1))
    sin_h = np.sqrt(np.maximum(0.0, 1.0 - cos_h * cos_h))
    local_h = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=-1)
    use_diffuse = (u3 < pd)[..., None]
    hw = mk.to_world(local_h, n)
    spec_dir = 2.0 * dot(wo, hw)[..., None] * hw - wo
    wi = np.where(use_diffuse, mk.to_world(local_d, n), spec_dir)
    wi = mk.normalize(wi)
    pdf = pdf_arrays(a, s, beta, m, n, wi, wo)
    return wi, pdf


def brdf_pdf(params, a, n, wi, wo):
    return pdf_arrays(
        np.asarray(a, dtype=np.float64), params.specular, params.roughness, params.metalness,
        np.asarray(n, dtype=np.float64), np.asarray(wi, dtype=np.float64), np.asarray(wo, dtype=np.float64),
    )


def brdf_sample(params, a, n, wo, u1, u2, u3):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    wi, pdf = sample_arrays(a, params.specular, params.roughness, params.metalness, n, wo,
                            np.asarray(u1), np.asarray(u2), np.asarray(u3))
    if np.ndim(pdf) == 0 and pdf <= 0.0:
        return BrdfSample(wi, 0.0, np.zeros(3))
    return BrdfSample(wi, pdf if np.ndim(pdf) else float(pdf), brdf_eval(params, a, n, wi, wo))


# --------------------------------------------------------------------------
# single-SG approximation of the specular lobe


def specular_sg_arrays(a, s, beta, m, n, wo):
    """Warped specular lobe: ``(axis, sharpness, amplitude)`` per point.

    The GGX lobe is written as an SG in the half-vector domain (axis n,
    sharpness 2/alpha^2, amplitude 1/(pi alpha^2)), warped around the mirror
    direction, and scaled by F G2 / (4 |n.wi| |n.wo|) at the lobe center,
    using the luminance of F.
    """
    a2, _ = effective_alpha2(beta)
    co = dot(n, wo)
    c = np.maximum(co, 1e-6)
    # renormalized: with sharpness up to ~1e12 at grazing, a 1e-7 length
    # error in the mirror direction would overflow the product integrals
    axis = mk.normalize(2.0 * c[..., None] * n - wo)
    lam = (2.0 / a2) / (4.0 * c + SG_WARP_GUARD)
    f0 = fresnel_f0(a, s, m)
    F, _, _ = _schlick(f0, c)
    g2 = 1.0 / (1.0 + 2.0 * smith_lambda(c, a2))
    amp = (1.0 / (np.pi * a2)) * (F @ LUMA) * g2 / (4.0 * c * c)
    amp = np.where(co > 0.0, amp, 0.0)
    return axis, lam * np.ones_like(amp), amp


def specular_sg_backward(a, s, beta, m, n, wo, g_axis, g_lam, g_amp):
    a = np.asarray(a, dtype=np.float64)
    a2, da2 = effective_alpha2(beta)
    co = dot(n, wo)
    live = co > 1e-6
    c = np.maximum(co, 1e-6)
    g_amp = np.where(co > 0.0, g_amp, 0.0)
    lam_d = 2.0 / a2
    den = 4.0 * c + SG_WARP_GUARD
    lam = lam_d / den
    f0 = fresnel_f0(a, s, m)
    F, f90, p5 = _schlick(f0, c)
    fl = F @ LUMA
    lam_smith = smith_lambda(c, a2)
    g2 = 1.0 / (1.0 + 2.0 * lam_smith)
    ad = 1.0 / (np.pi * a2)
    amp = ad * fl * g2 / (4.0 * c * c)

    g_c = -g_lam * lam * 4.0 / den
    g_a2 = -(g_lam / den) * 2.0 / (a2 * a2)
    base = 1.0 / (4.0 * c * c)
    g_ad = g_amp * fl * g2 * base
    g_fl = g_amp * ad * g2 * base
    g_g2 = g_amp * ad * fl * base
    g_c = g_c - g_amp * 2.0 * amp / c
    g_a2 = g_a2 - g_ad / (np.pi * a2 * a2)
    g_ls = -2.0 * g2 * g2 * g_g2
    la, lc = _smith_lambda_grads(c, a2)
    g_a2 = g_a2 + g_ls * la
    g_c = g_c + g_ls * lc
    g_F = g_fl[..., None] * LUMA
    g_f0, g_d = _schlick_backward(f0, f90, p5, c, g_F)
    g_c = g_c + np.where(c < 1.0, g_d, 0.0)
    g_a, g_s, g_m = _f0_backward(a, s, m, g_f0)
    g_axis = mk.normalize_backward(2.0 * c[..., None] * n - wo, g_axis)
    g_n = 2.0 * c[..., None] * g_axis
    g_wo = -g_axis
    g_c = g_c + dot(n, g_axis) * 2.0
    g_c = np.where(live, g_c, 0.0)
    g_n = g_n + g_c[..., None] * wo
    g_wo = g_wo + g_c[..., None] * n
    return {"a": g_a, "s": g_s, "beta": g_a2 * da2, "m": g_m, "n": g_n, "wo": g_wo}


def specular_to_sg(params, n, wo, a=None):
    """Monochromatic SG for the specular lobe at one shading point."""
    from .sgalg import SgLobe

    if a is None:
        a = params.albedo_texture.reshape(-1, 3).mean(axis=0)
    axis, lam, amp = specular_sg_arrays(
        np.asarray(a, dtype=np.float64), params.specular, params.roughness, params.metalness,
        np.asarray(n, dtype=np.float64), np.asarray(wo, dtype=np.float64),
    )
    return SgLobe(axis, float(lam), np.full(3, float(amp)))
