"""Reverse-mode gradients of a full render and a finite-difference harness.

Parameters live in an unconstrained space: specular, roughness and
metalness through a logistic map, SG sharpness through softplus. SG axes are
unit vectors whose gradients are expressed in a tangent frame.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from . import mathkit as mk
from . import sgalg as sg
from .assets import EquirectImage, vertex_normals_backward
from .brdf import BrdfParams
from .raster import raster_backward
from .shade import (ShadingPoints, default_threads, lighting_for_backend, render, shade_mc_backward,
                    shade_sg_backward)

SCALARS = ("specular", "roughness", "metalness")
BLOCK_ORDER = ("vertices", "albedo", "specular", "roughness", "metalness", "env", "sg_axis", "sg_sharpness",
               "sg_amplitude")
LOGIT_CLAMP = 1e-6


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return np.log(p) - np.log1p(-p)


def tangent_frame(axes):
    return mk.orthonormal_basis(axes)


def rotate_axes(axes, coords):
    """Move unit axes by tangent coordinates ``coords (K, 2)`` and renormalize."""
    t0, t1 = tangent_frame(axes)
    return mk.normalize(axes + coords[:, 0:1] * t0 + coords[:, 1:2] * t1)


@dataclass
class ParamSet:
    """Ordered, unconstrained view of a scene's differentiable state.

    ``sg_axis`` stores the unit axes themselves; a tangent coordinate of 0
    refers to the current axis.
    """

    values: dict

    @classmethod
    def from_scene(cls, scene):
        v = {"vertices": scene.mesh.vertices.copy(), "albedo": scene.brdf.albedo_texture.copy()}
        for name in SCALARS:
            v[name] = logit(getattr(scene.brdf, name))
        light = scene.lighting
        if isinstance(light, EquirectImage):
            v["env"] = light.pixels.copy()
        else:
            v["sg_axis"] = light.axes.copy()
            v["sg_sharpness"] = sg.softplus_inv(np.maximum(light.sharpness, 1e-12))
            v["sg_amplitude"] = light.amplitude.copy()
        return cls(v)

    def copy(self):
        return ParamSet({k: np.array(a, copy=True) for k, a in self.values.items()})

    @property
    def names(self):
        return [n for n in BLOCK_ORDER if n in self.values]

    def apply(self, scene, blocks=None):
        """Scene carrying these values; with ``blocks`` only those are written
        back, so untouched parameters keep their exact original values."""
        v = self.values
        use = set(self.names if blocks is None else blocks)
        mesh = scene.mesh
        if "vertices" in use and len(mesh.vertices):
            mesh = mesh.with_vertices(v["vertices"])
        b = scene.brdf
        tex = np.clip(v["albedo"], 0.0, 1.0) if "albedo" in use else b.albedo_texture
        brdf = BrdfParams(tex, *(float(sg.sigmoid(v[n])) if n in use else getattr(b, n) for n in SCALARS))
        light = scene.lighting
        if "env" in v:
            if "env" in use:
                light = EquirectImage(np.maximum(v["env"], 0.0))
        elif use & {"sg_axis", "sg_sharpness", "sg_amplitude"}:
            light = sg.SgEnvLight(
                mk.normalize(v["sg_axis"]) if "sg_axis" in use else light.axes,
                sg.softplus(v["sg_sharpness"]) if "sg_sharpness" in use else light.sharpness,
                np.maximum(v["sg_amplitude"], 0.0) if "sg_amplitude" in use else light.amplitude)
        return replace(scene, mesh=mesh, brdf=brdf, lighting=light)

    def entries(self):
        """Every scalar coordinate as ``(label, block, index)`` in fixed order."""
        for name in self.names:
            arr = self.values[name]
            if name == "sg_axis":
                for k in range(arr.shape[0]):
                    for t in range(2):
                        yield f"sg_axis[{k},t{t}]", name, (k, t)
            elif arr.ndim == 0:
                yield name, name, ()
            else:
                for idx in np.ndindex(arr.shape):
                    yield f"{name}[{','.join(map(str, idx))}]", name, idx

    def perturbed(self, block, index, delta):
        out = self.copy()
        if block == "sg_axis":
            coords = np.zeros((out.values[block].shape[0], 2))
            coords[index] = delta
            out.values[block] = rotate_axes(out.values[block], coords)
        else:
            out.values[block][index] += delta
        return out


@dataclass
class GradRecord:
    """``dL/dparameter`` per ParamSet block; ``sg_axis`` holds tangent
    components (K, 2)."""

    values: dict

    def __getitem__(self, name):
        return self.values[name]

    def lookup(self, block, index):
        return float(self.values[block][index])

    def flat(self):
        return np.concatenate([np.ravel(self.values[n]) for n in BLOCK_ORDER if n in self.values])

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values.values())


def resolve_scene(scene, backend):
    """Scene whose lighting is what ``backend`` differentiates.

    Equirect lighting under the SG backend is replaced by its fitted
    mixture; SG lighting under the MC backend stays SG and is chained
    through its rasterization.
    """
    if backend == "sg" and isinstance(scene.lighting, EquirectImage):
        return replace(scene, lighting=lighting_for_backend(scene.lighting, "sg"))
    return scene


def _albedo_backward(params, uv, g_a):
    tex = params.albedo_texture
    h, w, _ = tex.shape
    idx, wts, dwu, dwv = params.albedo_taps(uv)
    g_tex = mk.bilinear_scatter(tex.shape, idx, wts, g_a)
    texels = tex.reshape(-1, 3)[idx]  # (P, 4, 3)
    proj = np.einsum("pkc,pc->pk", texels, g_a)
    g_uv = np.stack([(dwu * proj).sum(axis=1), (dwv * proj).sum(axis=1)], axis=-1)
    return g_tex, g_uv


def render_backward(scene, output, g_image, g_mask=None, threads=None, wrt=None):
    """Exact adjoint of ``render`` for the output adjoints given.

    ``output`` is the RenderOutput of the forward pass with the same scene
    and backend. Returns a GradRecord over ``ParamSet.from_scene(scene)``.
    ``wrt`` optionally names the blocks that are needed; the geometry chain
    is skipped when ``vertices`` is not among them (its entries stay 0).
    """
    need_geometry = wrt is None or "vertices" in wrt
    g = output.gbuffer
    h, w = g.shape
    g_image = np.asarray(g_image, dtype=np.float64)
    if g_image.shape != (h, w, 3):
        raise ValueError(f"image adjoint has shape {g_image.shape}, expected {(h, w, 3)}")
    if g_mask is not None:
        g_mask = np.asarray(g_mask, dtype=np.float64)
        if g_mask.shape != (h, w):
            raise ValueError(f"mask adjoint has shape {g_mask.shape}, expected {(h, w)}")
    threads = default_threads() if threads is None else max(1, int(threads))
    V = output.mask
    g_S = g_image * V[..., None]
    g_V = np.sum(g_image * (output.shading - output.background), axis=-1)
    if g_mask is not None:
        g_V = g_V + g_mask

    params = ParamSet.from_scene(scene)
    grads = {n: np.zeros_like(params.values[n]) for n in params.names}
    if "sg_axis" in grads:
        grads["sg_axis"] = np.zeros((params.values["sg_axis"].shape[0], 2))

    pts = ShadingPoints.from_gbuffer(g)
    brdf = scene.brdf
    g_normal = np.zeros((h * w, 3))
    g_view = np.zeros((h * w, 3))
    g_uv = np.zeros((h * w, 2))
    if len(pts):
        gs = g_S.reshape(-1, 3)[pts.pixel]
        if output.backend == "mc":
            env = output.lighting
            r = shade_mc_backward(pts, env, brdf, output.nsamples, output.seed, gs, threads)
            if "env" in grads:
                grads["env"] = r["env"]
            else:  # SG lighting rasterized for the MC backend
                light = scene.lighting
                dirs = mk.equirect_pixel_dirs(env.width, env.height)
                gx, gl, gu = sg.sg_env_eval_backward(light, dirs, r["env"])
                _lobe_grads(grads, params, light, gx, gl, gu)
        else:
            light = output.lighting
            r = shade_sg_backward(pts, light, brdf, gs, threads)
            _lobe_grads(grads, params, light, r["axes"], r["sharpness"], r["amplitude"])
        if need_geometry or "albedo" in wrt:
            g_tex, g_uvp = _albedo_backward(brdf, pts.uv, r["a"])
        else:
            g_tex, g_uvp = grads["albedo"], 0.0
        grads["albedo"] = g_tex
        for name, key in (("specular", "s"), ("roughness", "beta"), ("metalness", "m")):
            p = float(getattr(brdf, name))
            grads[name] = np.asarray(r[key] * p * (1.0 - p))
        g_normal[pts.pixel] = r["n"]
        g_view[pts.pixel] = r["wo"]
        g_uv[pts.pixel] = g_uvp
    mesh = scene.mesh
    if len(mesh.triangles) and need_geometry:
        rb = raster_backward(mesh, g, None, g_normal.reshape(h, w, 3), g_uv.reshape(h, w, 2),
                             g_view.reshape(h, w, 3), g_V)
        gv = rb["vertices"]
        if mesh.derived_normals:
            gv = gv + vertex_normals_backward(mesh.vertices, mesh.triangles, rb["normals"])
        grads["vertices"] = gv
    return GradRecord(grads)


def _lobe_grads(grads, params, light, g_axes, g_lam, g_amp):
    t0, t1 = tangent_frame(light.axes)
    grads["sg_axis"] = np.stack([mk.dot(g_axes, t0), mk.dot(g_axes, t1)], axis=-1)
    grads["sg_sharpness"] = g_lam * sg.sigmoid(params.values["sg_sharpness"])
    grads["sg_amplitude"] = g_amp


# --------------------------------------------------------------------------
# scalar objectives


@dataclass
class LinearObjective:
    """``L = <w_image, I> + <w_mask, V>``; the default probe for gradient checks."""

    w_image: np.ndarray
    w_mask: np.ndarray = None

    @classmethod
    def random(cls, camera, seed=0, mask_weight=1.0):
        rng = np.random.default_rng(seed)
        wi = rng.standard_normal((camera.height, camera.width, 3))
        wm = mask_weight * rng.standard_normal((camera.height, camera.width)) if mask_weight else None
        return cls(wi, wm)

    def __call__(self, out):
        val = float(np.sum(self.w_image * out.image))
        if self.w_mask is not None:
            val += float(np.sum(self.w_mask * out.mask))
        return val, self.w_image, self.w_mask


def background_objective(output, seed=0):
    """Random image weights restricted to pixels with zero soft mask in
    ``output`` (a dead-parameter probe for BRDF and lighting entries)."""
    h, w = output.mask.shape
    wi = np.random.default_rng(seed).standard_normal((h, w, 3))
    wi[output.mask > 0] = 0.0
    return LinearObjective(wi, None)


# --------------------------------------------------------------------------
# finite differences


@dataclass
class FdReport:
    label: str
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


def rel_error(a, b, floor=1e-12):
    den = max(abs(a), abs(b))
    return 0.0 if den <= floor else abs(a - b) / den


def _selector_regex(selector):
    out = []
    for ch in selector.replace(" ", ""):
        out.append(".*" if ch == "*" else "." if ch == "?" else re.escape(ch))
    return re.compile("^" + "".join(out) + "$")


def select_entries(params, selector):
    """ParamSet entries whose label matches ``selector``.

    Labels look like ``roughness``, ``albedo[3,5,0]``, ``vertices[12,1]`` or
    ``sg_axis[0,t1]``; ``*`` and ``?`` are wildcards, brackets are literal.
    """
    if not selector or not selector.strip():
        raise KeyError("empty selector")
    rx = _selector_regex(selector)
    hits = [e for e in params.entries() if rx.match(e[0])]
    if not hits:
        raise KeyError(f"selector {selector!r} matches no parameter")
    return hits


class FrozenRender:
    """Forward evaluations that replay the base render's MC samples."""

    def __init__(self, scene, backend, threads=1):
        self.scene = resolve_scene(scene, backend)
        self.backend = backend
        self.threads = threads
        self.base = render(self.scene, backend, threads)

    def __call__(self, params, blocks=None):
        sc = params.apply(self.scene, blocks)
        if self.backend == "mc":
            return render(sc, "mc", self.threads, sample_params=self.scene.brdf,
                          sample_gbuffer=self.base.gbuffer)
        return render(sc, "sg", self.threads)


def finite_diff_check(scene, backend, selector, eps=1e-4, loss=None, tol=1e-4, threads=1, limit=None):
    """Central differences of ``loss`` against the analytic gradient.

    ``loss`` maps a RenderOutput to ``(value, g_image, g_mask)``; the
    default is a fixed random linear probe. Returns one FdReport per
    matched parameter (at most ``limit``).
    """
    fr = FrozenRender(scene, backend, threads)
    base_scene = fr.scene
    if loss is None:
        loss = LinearObjective.random(base_scene.camera)
    params = ParamSet.from_scene(base_scene)
    entries = select_entries(params, selector)
    if limit is not None:
        entries = entries[:limit]
    _, gi, gm = loss(fr.base)
    grad = render_backward(base_scene, fr.base, gi, gm, threads)
    reports = []
    for label, block, index in entries:
        lp = loss(fr(params.perturbed(block, index, eps), [block]))[0]
        lm = loss(fr(params.perturbed(block, index, -eps), [block]))[0]
        num = (lp - lm) / (2.0 * eps)
        ana = grad.lookup(block, index)
        err = rel_error(ana, num)
        reports.append(FdReport(label, ana, num, err, err <= tol))
    return reports


def format_reports(reports):
    width = max([len("parameter")] + [len(r.label) for r in reports])
    lines = [f"{'parameter':<{width}}  {'analytic':>14}  {'numeric':>14}  {'rel_error':>10}  status"]
    for r in reports:
        lines.append(f"{r.label:<{width}}  {r.analytic:>14.7e}  {r.numeric:>14.7e}  {r.rel_error:>10.3e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# adjoint consistency


def dot_product_test(scene, blocks=("albedo", "specular", "roughness", "metalness", "sg_axis", "sg_sharpness",
                                    "sg_amplitude"), seed=0, h=1e-3, threads=1):
    """Compare ``<J dx, dy>`` (five-point directional derivative) with
    ``<dx, J^T dy>`` on the SG backend. Returns ``(forward, adjoint)``."""
    scene = resolve_scene(scene, "sg")
    rng = np.random.default_rng(seed)
    params = ParamSet.from_scene(scene)
    base = render(scene, "sg", threads)
    dy_img = rng.standard_normal(base.image.shape)
    dy_mask = rng.standard_normal(base.mask.shape)
    grad = render_backward(scene, base, dy_img, dy_mask, threads)
    dx = {}
    for name in blocks:
        if name not in params.values:
            continue
        shape = (params.values[name].shape[0], 2) if name == "sg_axis" else params.values[name].shape
        dx[name] = rng.standard_normal(shape)
    adjoint = sum(float(np.sum(dx[n] * grad[n])) for n in dx)

    def along(t):
        p = params.copy()
        for n, d in dx.items():
            if n == "sg_axis":
                p.values[n] = _exp_map(p.values[n], t * d)
            else:
                p.values[n] = p.values[n] + t * d
        out = render(p.apply(scene, list(dx)), "sg", threads)
        return float(np.sum(out.image * dy_img) + np.sum(out.mask * dy_mask))

    fwd = (-along(2 * h) + 8 * along(h) - 8 * along(-h) + along(-2 * h)) / (12 * h)
    return fwd, adjoint


def _exp_map(axes, coords):
    """Geodesic step on the sphere; its derivative at 0 matches ``rotate_axes``."""
    t0, t1 = tangent_frame(axes)
    v = coords[:, 0:1] * t0 + coords[:, 1:2] * t1
    ang = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(ang > 0, ang, 1.0)
    return np.cos(ang) * axes + np.where(ang > 0, np.sin(ang) / safe, 1.0) * v
