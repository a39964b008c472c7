"""Per-pixel shading backends and image composition.

``I = V * S + (1 - V) * background`` where ``V`` is the soft silhouette and
``S`` the shaded radiance on covered pixels. ``V * S`` is kept as the
foreground layer.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import brdf as B
from . import kernels
from . import mathkit as mk
from . import sgalg as sg
from .assets import SCENE_DEFAULT_K, EquirectImage, Mesh, Scene
from .raster import GBuffer, rasterize

log = logging.getLogger(__name__)

BLOCK = 2048  # pixels per work item; fixed so results never depend on threads
SG_BLOCK = 256
MC_RASTER_SIZE = (512, 256)
AUTO_FIT_ITERATIONS = 300


def default_threads():
    env = os.environ.get("HYBRIDRENDER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring HYBRIDRENDER_THREADS=%r", env)
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ShadingPoints:
    """Flattened G-buffer records of the pixels to shade."""

    normal: np.ndarray
    view_dir: np.ndarray
    uv: np.ndarray
    pixel: np.ndarray

    @classmethod
    def from_gbuffer(cls, g, pixels=None):
        if pixels is None:
            pixels = g.pixels
        pixels = np.asarray(pixels, dtype=np.int64)
        return cls(
            g.normal.reshape(-1, 3)[pixels],
            g.view_dir.reshape(-1, 3)[pixels],
            g.uv.reshape(-1, 2)[pixels],
            pixels,
        )

    @classmethod
    def single(cls, normal, view_dir, uv=(0.5, 0.5), pixel=0):
        return cls(
            mk.normalize(np.asarray(normal, dtype=np.float64)).reshape(1, 3),
            mk.normalize(np.asarray(view_dir, dtype=np.float64)).reshape(1, 3),
            np.asarray(uv, dtype=np.float64).reshape(1, 2),
            np.array([pixel], dtype=np.int64),
        )

    def __len__(self):
        return len(self.pixel)

    def block(self, sl):
        return ShadingPoints(self.normal[sl], self.view_dir[sl], self.uv[sl], self.pixel[sl])


@dataclass
class RenderOutput:
    image: np.ndarray
    foreground: np.ndarray
    mask: np.ndarray
    samples: np.ndarray
    shading: np.ndarray = field(repr=False)
    background: np.ndarray = field(repr=False)
    gbuffer: GBuffer = field(repr=False)
    backend: str = "sg"
    lighting: object = field(default=None, repr=False)
    seed: int = 0
    nsamples: int = 0


def _blocks(n, size):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _run_blocks(fn, blocks, threads):
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, blocks))
    return [fn(b) for b in blocks]


def _env_pixels(env):
    return env.pixels if isinstance(env, EquirectImage) else np.asarray(env, dtype=np.float64)


# --------------------------------------------------------------------------
# Monte Carlo backend


def shade_mc(points, env, params, nsamples, seed=0, threads=1, sample_params=None, sample_points=None):
    """Importance-sampled estimate of the reflected radiance, (P, 3).

    The sample stream of each point is ``(seed, points.pixel)``, so the
    result for a pixel never depends on how the work is split. Directions
    and pdfs are drawn with ``sample_params`` in the frame of
    ``sample_points`` when given (frozen-sample replay); the BRDF is always
    evaluated with ``params`` at ``points``.
    """
    if nsamples < 1:
        raise ValueError("sample count must be >= 1")
    env_px = np.ascontiguousarray(_env_pixels(env))
    sp = params if sample_params is None else sample_params
    spts = points if sample_points is None else sample_points
    if len(spts) != len(points):
        raise ValueError("sample frame does not match the shading points")
    out = np.zeros((len(points), 3))

    def run(sl):
        pts, sps = points.block(sl), spts.block(sl)
        a = np.ascontiguousarray(params.albedo_at(pts.uv))
        a_s = a if (sp is params and sps is pts) else np.ascontiguousarray(sp.albedo_at(sps.uv))
        out[sl] = kernels.mc_shade(
            np.ascontiguousarray(pts.normal), np.ascontiguousarray(pts.view_dir),
            a, params.specular, params.roughness, params.metalness,
            np.ascontiguousarray(sps.normal), np.ascontiguousarray(sps.view_dir),
            a_s, sp.specular, sp.roughness, sp.metalness,
            env_px, int(seed), np.ascontiguousarray(pts.pixel, dtype=np.int64), int(nsamples),
        )

    _run_blocks(run, _blocks(len(points), BLOCK), threads)
    return out


def _mc_block_samples(pts, a, params, nsamples, seed):
    keys = mk.stream_keys(seed, pts.pixel)[:, None]
    draws = np.arange(nsamples)[None, :] * 3
    u1 = mk.uniform_from_keys(keys, draws)
    u2 = mk.uniform_from_keys(keys, draws + 1)
    u3 = mk.uniform_from_keys(keys, draws + 2)
    wi, pdf = B.sample_arrays(a[:, None, :], params.specular, params.roughness, params.metalness,
                              pts.normal[:, None, :], pts.view_dir[:, None, :], u1, u2, u3)
    return wi, pdf


def shade_mc_backward(points, env, params, nsamples, seed, g_out, threads=1):
    """Adjoint of ``shade_mc`` with sampled directions and pdfs held fixed.

    Returns per-point ``a, n, wo`` gradients, scalar ``s, beta, m`` and the
    env texel gradient ``env`` (H, W, 3).
    """
    env_px = _env_pixels(env)
    h, w, _ = env_px.shape
    P = len(points)
    g_a = np.zeros((P, 3))
    g_n = np.zeros((P, 3))
    g_wo = np.zeros((P, 3))
    blocks = _blocks(P, BLOCK // 4)

    def run(sl):
        pts = points.block(sl)
        g = g_out[sl][:, None, :] / nsamples
        a = params.albedo_at(pts.uv)
        wi, pdf = _mc_block_samples(pts, a, params, nsamples, seed)
        nn, ww = pts.normal[:, None, :], pts.view_dir[:, None, :]
        f = B.eval_arrays(a[:, None, :], params.specular, params.roughness, params.metalness, nn, wi, ww)
        u, v = mk.dir_to_equirect(wi)
        idx, wts, _, _ = mk.bilinear_taps(w, h, u, v)
        li = mk.bilinear_gather(env_px, idx, wts)
        cos_raw = mk.dot(nn, wi)
        cos = np.maximum(cos_raw, 0.0)
        ok = pdf > 0.0
        weight = np.where(ok, cos / np.where(ok, pdf, 1.0), 0.0)
        g_f = g * li * weight[..., None]
        g_li = g * f * weight[..., None]
        g_w = np.sum(g * f * li, axis=-1)
        g_cos = np.where(ok & (cos_raw > 0.0), g_w / np.where(ok, pdf, 1.0), 0.0)
        r = B.eval_backward(a[:, None, :], params.specular, params.roughness, params.metalness, nn, wi, ww, g_f)
        g_env = mk.bilinear_scatter((h, w, 3), idx, wts, g_li)
        g_a[sl] = r["a"].sum(axis=1)
        g_n[sl] = r["n"].sum(axis=1) + (g_cos[..., None] * wi).sum(axis=1)
        g_wo[sl] = r["wo"].sum(axis=1)
        return float(np.sum(r["s"])), float(np.sum(r["beta"])), float(np.sum(r["m"])), g_env

    parts = _run_blocks(run, blocks, threads)
    g_env = np.zeros((h, w, 3))
    g_s = g_b = g_m = 0.0
    for ps, pb, pm, pe in parts:  # fixed block order
        g_s += ps
        g_b += pb
        g_m += pm
        g_env += pe
    return {"a": g_a, "n": g_n, "wo": g_wo, "s": g_s, "beta": g_b, "m": g_m, "env": g_env}


# --------------------------------------------------------------------------
# spherical Gaussian backend


def _sg_terms(n, wo, a, params, light):
    """Shared forward quantities of the closed-form shading, per block."""
    axis_s, lam_s, amp_s = B.specular_sg_arrays(a, params.specular, params.roughness, params.metalness, n, wo)
    cn = sg.COS_SHARPNESS * n
    lobe_v = light.sharpness[:, None] * light.axes  # (K, 3)
    v_d = lobe_v[None, :, :] + cn[:, None, :]
    L_d = light.sharpness[None, :] + sg.COS_SHARPNESS
    pi_d, dv_d, _ = sg.product_integral(v_d, L_d)
    spec_v = (lam_s[:, None] * axis_s)
    v_s = v_d + spec_v[:, None, :]
    L_s = L_d + lam_s[:, None]
    pi_s, dv_s, _ = sg.product_integral(v_s, L_s)
    return axis_s, lam_s, amp_s, pi_d, dv_d, pi_s, dv_s


def _sg_block(n, wo, a, params, light):
    _, _, amp_s, pi_d, _, pi_s, _ = _sg_terms(n, wo, a, params, light)
    mu = light.amplitude * sg.COS_AMPLITUDE
    diff = (1.0 - params.metalness) * a / np.pi * (pi_d @ mu)
    spec = amp_s[:, None] * (pi_s @ mu)
    return diff + spec


def shade_sg(points, light, params, threads=1):
    """Closed-form shading under an SG mixture, (P, 3)."""
    out = np.zeros((len(points), 3))

    def run(sl):
        pts = points.block(sl)
        out[sl] = _sg_block(pts.normal, pts.view_dir, params.albedo_at(pts.uv), params, light)

    _run_blocks(run, _blocks(len(points), SG_BLOCK), threads)
    return out


def shade_sg_backward(points, light, params, g_out, threads=1):
    """Adjoint of ``shade_sg``: per-point ``a, n, wo``, scalar ``s, beta, m``
    and lobe ``axes (K,3)``, ``sharpness (K,)``, ``amplitude (K,3)``."""
    P = len(points)
    g_a = np.zeros((P, 3))
    g_n = np.zeros((P, 3))
    g_wo = np.zeros((P, 3))
    blocks = _blocks(P, SG_BLOCK)
    mu = light.amplitude * sg.COS_AMPLITUDE
    lam_k, xi_k = light.sharpness, light.axes
    m = params.metalness

    def run(sl):
        pts = points.block(sl)
        n, wo, g = pts.normal, pts.view_dir, g_out[sl]
        a = params.albedo_at(pts.uv)
        axis_s, lam_s, amp_s, pi_d, dv_d, pi_s, dv_s = _sg_terms(n, wo, a, params, light)
        sd = pi_d @ mu
        ss = pi_s @ mu
        dcoef = (1.0 - m) * a / np.pi
        # diffuse part
        g_dcoef = g * sd
        ga = g_dcoef * (1.0 - m) / np.pi
        gm = -np.sum(g_dcoef * a) / np.pi
        g_sd = g * dcoef
        g_mu = pi_d.T @ g_sd
        g_pid = g_sd @ mu.T  # (P, K)
        gv_d = g_pid[..., None] * dv_d
        g_lam = np.sum(gv_d * xi_k[None], axis=-1).sum(axis=0) - (g_pid * pi_d).sum(axis=0)
        g_xi = lam_k[:, None] * gv_d.sum(axis=0)
        gn = sg.COS_SHARPNESS * gv_d.sum(axis=1)
        # specular part
        g_amp = np.sum(g * ss, axis=-1)
        g_ss = g * amp_s[:, None]
        g_mu += pi_s.T @ g_ss
        g_pis = g_ss @ mu.T
        gv_s = g_pis[..., None] * dv_s
        gL_s = -(g_pis * pi_s)
        g_lam += np.sum(gv_s * xi_k[None], axis=-1).sum(axis=0) + gL_s.sum(axis=0)
        g_xi += lam_k[:, None] * gv_s.sum(axis=0)
        gsum = gv_s.sum(axis=1)
        gn += sg.COS_SHARPNESS * gsum
        g_axis = lam_s[:, None] * gsum
        g_lams = mk.dot(gsum, axis_s) + gL_s.sum(axis=1)
        r = B.specular_sg_backward(a, params.specular, params.roughness, m, n, wo, g_axis, g_lams, g_amp)
        g_a[sl] = ga + r["a"]
        g_n[sl] = gn + r["n"]
        g_wo[sl] = r["wo"]
        return (float(np.sum(r["s"])), float(np.sum(r["beta"])), gm + float(np.sum(r["m"])),
                g_xi, g_lam, g_mu * sg.COS_AMPLITUDE)

    parts = _run_blocks(run, blocks, threads)
    K = light.count
    acc = {"s": 0.0, "beta": 0.0, "m": 0.0, "axes": np.zeros((K, 3)), "sharpness": np.zeros(K),
           "amplitude": np.zeros((K, 3))}
    for ps, pb, pm, gx, gl, gu in parts:
        acc["s"] += ps
        acc["beta"] += pb
        acc["m"] += pm
        acc["axes"] += gx
        acc["sharpness"] += gl
        acc["amplitude"] += gu
    acc.update(a=g_a, n=g_n, wo=g_wo)
    return acc


# --------------------------------------------------------------------------
# lighting conversion, background, composition


_FIT_CACHE = {}


def lighting_for_backend(lighting, backend, k=SCENE_DEFAULT_K):
    """Convert lighting to the representation ``backend`` consumes.

    The SG backend fits a ``k``-lobe mixture to an equirect map (cached per
    map); the MC backend rasterizes an SG mixture to an equirect map.
    """
    if backend == "sg" and isinstance(lighting, EquirectImage):
        key = (id(lighting), k)
        hit = _FIT_CACHE.get(key)
        if hit is None or hit[0] is not lighting:
            log.info("fitting %d SG lobes to the environment map for the sg backend", k)
            hit = (lighting, sg.fit_env_sg(lighting, k, iterations=AUTO_FIT_ITERATIONS))
            _FIT_CACHE.clear()
            _FIT_CACHE[key] = hit
        return hit[1]
    if backend == "mc" and isinstance(lighting, sg.SgEnvLight):
        return sg.sg_env_to_equirect(lighting, *MC_RASTER_SIZE)
    return lighting


def background_image(background, camera):
    """Background radiance per pixel, (H, W, 3)."""
    h, w = camera.height, camera.width
    if isinstance(background, EquirectImage):
        return background.lookup(camera.primary_dirs())
    if isinstance(background, sg.SgEnvLight):
        return sg.sg_env_eval(background, camera.primary_dirs())
    return np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()


def compose(shading, mask, background):
    fg = mask[..., None] * shading
    return fg + (1.0 - mask)[..., None] * background, fg


def render(scene, backend=None, threads=None, lighting=None, gbuffer=None, samples=None, seed=None,
           sample_params=None, sample_gbuffer=None):
    """Rasterize, shade every covered pixel and compose with the background.

    ``sample_params`` / ``sample_gbuffer`` replay the MC sample directions
    of another configuration (used for finite differences with frozen
    samples).
    """
    cfg = scene.config
    backend = backend or cfg.backend
    if backend not in ("mc", "sg"):
        raise ValueError(f"unknown backend {backend!r}")
    threads = default_threads() if threads is None else max(1, int(threads))
    nsamples = cfg.samples if samples is None else int(samples)
    seed = cfg.seed if seed is None else int(seed)
    light = lighting_for_backend(scene.lighting if lighting is None else lighting, backend)
    g = gbuffer if gbuffer is not None else rasterize(scene.mesh, scene.camera, cfg.sigma, threads)
    h, w = g.shape
    shading = np.zeros((h * w, 3))
    counts = np.zeros(h * w, dtype=np.int64)
    pts = ShadingPoints.from_gbuffer(g)
    if len(pts):
        if backend == "mc":
            spts = None if sample_gbuffer is None else _sample_frame(pts, sample_gbuffer)
            shading[pts.pixel] = shade_mc(pts, light, scene.brdf, nsamples, seed, threads, sample_params, spts)
            counts[pts.pixel] = nsamples
        else:
            shading[pts.pixel] = shade_sg(pts, light, scene.brdf, threads)
    shading = shading.reshape(h, w, 3)
    bg = background_image(scene.background, scene.camera)
    image, fg = compose(shading, g.soft_mask, bg)
    return RenderOutput(image, fg, g.soft_mask, counts.reshape(h, w), shading, bg, g, backend, light, seed,
                        nsamples if backend == "mc" else 0)


def _sample_frame(pts, g):
    have = g.visibility.reshape(-1)[pts.pixel][:, None]
    other = ShadingPoints.from_gbuffer(g, pts.pixel)
    return ShadingPoints(
        np.where(have, other.normal, pts.normal),
        np.where(have, other.view_dir, pts.view_dir),
        np.where(have, other.uv, pts.uv),
        pts.pixel,
    )


def subsample_pixels(mask, fraction, stream=0):
    """Uniform sample without replacement of ``ceil(fraction * #fg)`` pixels.

    Foreground pixels are those with ``mask > 0.5``. ``stream`` is an int
    seed or an ``RngStream``; the selection is a deterministic function of it.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    fg = np.flatnonzero(np.asarray(mask).reshape(-1) > 0.5)
    if len(fg) == 0:
        return fg
    count = max(1, int(np.ceil(fraction * len(fg) - 1e-9)))
    if count >= len(fg):
        return fg
    if isinstance(stream, mk.RngStream):
        seed, index = stream.seed, stream.stream_index
    else:
        seed, index = int(stream), 0
    keys = mk.uniform_from_keys(mk.stream_keys(mk.derive_seed(seed, index), fg), 0)
    pick = np.argsort(keys, kind="stable")[:count]
    return np.sort(fg[pick])


def empty_scene_like(scene):
    return Scene(Mesh.empty(), scene.camera, scene.brdf, scene.lighting, scene.background, scene.config)
