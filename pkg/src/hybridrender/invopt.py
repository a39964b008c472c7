"""Losses, metrics and the multi-view inverse-rendering loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import mathkit as mk
from . import sgalg as sg
from .assets import (AssetError, EquirectImage, _floats, _int, load_mask, read_config, read_image,
                     scene_from_config, SCENE_SECTIONS)
from .diffgrad import BLOCK_ORDER, ParamSet, render_backward, resolve_scene, tangent_frame
from .optim import AdamState, adam_step
from .raster import Camera, rasterize
from .shade import default_threads, render, subsample_pixels

log = logging.getLogger(__name__)

__all__ = [
    "LossWeights", "OptimizeTask", "OptimizeResult", "OptimizationError", "Target", "adam_step",
    "loss_image_l1", "loss_iou", "loss_laplacian", "metric_ncc", "optimize", "parse_task", "total_loss",
    "register_perceptual", "clear_perceptual",
]

LIGHTING_BLOCKS = ("env", "sg_axis", "sg_sharpness", "sg_amplitude")
MATERIAL_BLOCKS = ("albedo", "specular", "roughness", "metalness")
DEFAULT_LR = {"lighting": 0.01, "material": 0.005, "vertices": 0.001}
FREE_ALIASES = {
    "lighting": LIGHTING_BLOCKS,
    "sg": ("sg_axis", "sg_sharpness", "sg_amplitude"),
    "material": MATERIAL_BLOCKS,
    "beta": ("roughness",),
    "s": ("specular",),
    "m": ("metalness",),
    "geometry": ("vertices",),
}


class OptimizationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# perceptual plug-in


_PERCEPTUAL = []


def register_perceptual(fn):
    """Install ``fn(image, target) -> (value, g_image)`` as the perceptual term."""
    _PERCEPTUAL[:] = [fn]
    return fn


def clear_perceptual():
    _PERCEPTUAL.clear()


def perceptual_plugin():
    return _PERCEPTUAL[0] if _PERCEPTUAL else None


@dataclass(frozen=True)
class LossWeights:
    im: float = 20.0
    msk: float = 5.0
    per: float = 0.5
    lap: float = 5.0

    def __post_init__(self):
        for k in ("im", "msk", "per", "lap"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    def effective(self):
        """Weights in use: ``per`` is 0 unless a perceptual plug-in is registered."""
        return self if perceptual_plugin() is not None else replace(self, per=0.0)


# --------------------------------------------------------------------------
# losses and metrics


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def loss_image_l1(image, target, pixels=None, grad=False):
    """Mean absolute difference over ``pixels`` (flat indices) or all pixels."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(image, target, "loss_image_l1")
    c = image.shape[-1] if image.ndim == 3 else 1
    flat_i = image.reshape(-1, c)
    flat_t = target.reshape(-1, c)
    if pixels is not None:
        pixels = np.asarray(pixels, dtype=np.int64)
        diff = flat_i[pixels] - flat_t[pixels]
    else:
        diff = flat_i - flat_t
    if diff.size == 0:
        val = 0.0
        g = np.zeros_like(image)
        return (val, g) if grad else val
    val = float(np.abs(diff).mean())
    if not grad:
        return val
    g = np.zeros_like(flat_i)
    gd = np.sign(diff) / diff.size
    if pixels is not None:
        np.add.at(g, pixels, gd)
    else:
        g = gd
    return val, g.reshape(image.shape)


def loss_iou(mask, target, grad=False):
    """``1 - sum(T*V) / sum(T + V - T*V)``; 0 when both masks are empty."""
    V = np.asarray(mask, dtype=np.float64)
    T = np.asarray(target, dtype=np.float64)
    _same_shape(V, T, "loss_iou")
    inter = float(np.sum(T * V))
    union = float(np.sum(T + V - T * V))
    if union <= 0.0:
        return (0.0, np.zeros_like(V)) if grad else 0.0
    val = 1.0 - inter / union
    if not grad:
        return val
    g = -(T * union - inter * (1.0 - T)) / (union * union)
    return val, g


def uniform_laplacian(n_vertices, triangles):
    """Sparse ``I - D^-1 A`` over the mesh edge graph."""
    tri = np.asarray(triangles, dtype=np.int64)
    i = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 2], tri[:, 1], tri[:, 2], tri[:, 0]])
    j = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0], tri[:, 0], tri[:, 1], tri[:, 2]])
    adj = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices)).tocsr()
    adj.data[:] = 1.0  # collapse duplicate edges
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    return sp.identity(n_vertices, format="csr") - sp.diags(inv) @ adj


def loss_laplacian(mesh, initial, grad=False, lap=None):
    """Mean over vertices of ``|delta_v(current) - delta_v(initial)|^2``."""
    if mesh.vertices.shape != initial.vertices.shape or not np.array_equal(mesh.triangles, initial.triangles):
        raise ValueError("loss_laplacian: topology mismatch")
    nv = len(mesh.vertices)
    if nv == 0:
        return (0.0, np.zeros((0, 3))) if grad else 0.0
    L = uniform_laplacian(nv, mesh.triangles) if lap is None else lap
    d = L @ (mesh.vertices - initial.vertices)
    val = float(np.sum(d * d) / nv)
    if not grad:
        return val
    return val, (2.0 / nv) * (L.T @ d)


def metric_ncc(a, b, mask=None):
    """``1 - <A,B> / (|A| |B|)``, optionally restricted to ``mask`` pixels."""
    A = np.asarray(a.pixels if isinstance(a, EquirectImage) else a, dtype=np.float64)
    Bv = np.asarray(b.pixels if isinstance(b, EquirectImage) else b, dtype=np.float64)
    _same_shape(A, Bv, "metric_ncc")
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)
        A, Bv = A[sel], Bv[sel]
    A, Bv = A.ravel(), Bv.ravel()
    # identical reductions for all three sums: B = A gives exactly 0
    saa, sbb, sab = float(np.sum(A * A)), float(np.sum(Bv * Bv)), float(np.sum(A * Bv))
    if saa == 0.0 or sbb == 0.0:
        raise ValueError("metric_ncc: zero-norm input")
    return min(max(1.0 - sab / np.sqrt(saa * sbb), 0.0), 2.0)


# --------------------------------------------------------------------------
# tasks


@dataclass
class Target:
    image: np.ndarray
    mask: np.ndarray
    camera: Camera


@dataclass
class OptimizeTask:
    targets: list
    free: tuple
    steps: int = 500
    lr: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    backend: str = "sg"
    samples: int = None
    subsample: float = 1.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    threads: int = None
    log_every: int = 0

    def blocks(self, params):
        """Resolve ``free`` against the blocks ``params`` provides."""
        out = []
        for name in self.free:
            names = FREE_ALIASES.get(name, (name,))
            for n in names:
                if n not in BLOCK_ORDER:
                    raise ValueError(f"unknown free parameter {name!r}")
                if n in params.values and n not in out:
                    out.append(n)
            if not any(n in params.values for n in names):
                raise ValueError(f"free parameter {name!r} does not exist in this scene")
        return [n for n in BLOCK_ORDER if n in out]

    def validate(self):
        if not self.targets:
            raise ValueError("task needs at least one target view")
        if not self.free:
            raise ValueError("task has an empty free-parameter set")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.backend not in ("mc", "sg"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample fraction must lie in (0, 1]")
        for t in self.targets:
            shape = (t.camera.height, t.camera.width)
            if t.image.shape != shape + (3,) or t.mask.shape != shape:
                raise ValueError("target image/mask size does not match its camera")

    def learning_rate(self, block):
        if block in self.lr:
            return float(self.lr[block])
        group = "lighting" if block in LIGHTING_BLOCKS else "vertices" if block == "vertices" else "material"
        return float(self.lr.get(group, DEFAULT_LR[group]))


@dataclass
class OptimizeResult:
    scene: object
    trace: list
    before: list
    after: list

    @property
    def losses(self):
        return [r["loss"] for r in self.trace]


def total_loss(scene, outputs, targets, weights=None, initial_mesh=None, pixels=None, wrt=None, threads=None,
               lap=None):
    """Weighted multi-view objective, its terms and its GradRecord.

    Per-view image and mask terms are averaged over views. ``pixels`` is an
    optional per-view list of flat pixel indices for the image term.
    """
    weights = (weights or LossWeights()).effective()
    nviews = len(outputs)
    terms = {"l_im": 0.0, "l_msk": 0.0, "l_per": 0.0, "l_lap": 0.0}
    grad = None
    plug = perceptual_plugin()
    for k, (out, tgt) in enumerate(zip(outputs, targets)):
        pix = None if pixels is None else pixels[k]
        l_im, g_im = loss_image_l1(out.image, tgt.image, pix, grad=True)
        l_m, g_m = loss_iou(out.mask, tgt.mask, grad=True)
        terms["l_im"] += l_im / nviews
        terms["l_msk"] += l_m / nviews
        g_img = (weights.im / nviews) * g_im
        if weights.per > 0.0 and plug is not None:
            l_p, g_p = plug(out.image, tgt.image)
            terms["l_per"] += float(l_p) / nviews
            g_img = g_img + (weights.per / nviews) * np.asarray(g_p)
        g_mask = (weights.msk / nviews) * g_m
        rec = render_backward(scene, out, g_img, g_mask, threads, wrt)
        if grad is None:
            grad = rec
        else:
            for n in grad.values:
                grad.values[n] = grad.values[n] + rec.values[n]
    if initial_mesh is not None and weights.lap > 0.0 and len(scene.mesh.vertices):
        l_lap, g_lap = loss_laplacian(scene.mesh, initial_mesh, grad=True, lap=lap)
        terms["l_lap"] = l_lap
        if grad is not None:
            grad.values["vertices"] = grad.values["vertices"] + weights.lap * g_lap
    value = weights.im * terms["l_im"] + weights.msk * terms["l_msk"] + weights.per * terms["l_per"] \
        + weights.lap * terms["l_lap"]
    return value, terms, grad


def _render_views(scene, task, gbuffers, threads):
    outs = []
    for k, tgt in enumerate(task.targets):
        sc = replace(scene, camera=tgt.camera)
        outs.append(render(sc, task.backend, threads, gbuffer=None if gbuffers is None else gbuffers[k],
                           samples=task.samples, seed=mk.derive_seed(task.seed, k) if task.backend == "mc" else None))
    return outs


def optimize(task, scene, callback=None):
    """Render, score, differentiate and take an Adam step, ``task.steps`` times.

    Returns the scene after the last step, a per-step trace of the loss and
    its terms, and the rendered views before and after.
    """
    task.validate()
    threads = default_threads() if task.threads is None else task.threads
    scene = resolve_scene(scene, task.backend)
    params = ParamSet.from_scene(scene)
    free = task.blocks(params)
    initial_mesh = scene.mesh
    geometry_free = "vertices" in free
    lap = uniform_laplacian(len(initial_mesh.vertices), initial_mesh.triangles) \
        if geometry_free and len(initial_mesh.vertices) else None
    gbuffers = None
    if not geometry_free:
        gbuffers = [rasterize(scene.mesh, t.camera, scene.config.sigma, threads) for t in task.targets]
    lrs = {n: task.learning_rate(n) for n in free}
    state = AdamState(task.beta1, task.beta2, task.eps)
    trace = []
    before = after = None
    current = scene
    for step in range(task.steps + 1):
        outs = _render_views(current, task, gbuffers, threads)
        if before is None:
            before = [o.image for o in outs]
        pixels = None
        if task.subsample < 1.0:
            pixels = [subsample_pixels(o.mask, task.subsample, mk.RngStream(mk.derive_seed(task.seed, step), k))
                      for k, o in enumerate(outs)]
        value, terms, grad = total_loss(current, outs, task.targets, task.weights,
                                        initial_mesh if geometry_free else None, pixels, set(free), threads, lap)
        if not math.isfinite(value):
            raise OptimizationError(f"non-finite loss at step {step}: {terms}")
        trace.append({"step": step, "loss": value, **terms})
        if task.log_every and step % task.log_every == 0:
            log.info("step %d loss %.6g", step, value)
        if callback is not None:
            callback(step, value, current)
        after = [o.image for o in outs]
        if step == task.steps:
            break
        grads = {}
        for n in free:
            g = grad.values[n]
            if n == "sg_axis":
                t0, t1 = tangent_frame(params.values[n])
                g = g[:, 0:1] * t0 + g[:, 1:2] * t1
            grads[n] = g
        new, state = adam_step({n: params.values[n] for n in free}, grads, state, lrs)
        for n in free:
            if lrs[n] == 0.0:
                continue
            v = new[n]
            if n == "sg_axis":
                v = mk.normalize(v)
            elif n in ("env", "sg_amplitude"):
                v = np.maximum(v, 0.0)
            elif n == "albedo":
                v = np.clip(v, 0.0, 1.0)
            params.values[n] = v
        current = params.apply(scene, free) if any(lrs[n] != 0.0 for n in free) else current
    return OptimizeResult(current, trace, before, after)


# --------------------------------------------------------------------------
# task files


_TASK_SECTIONS = dict(SCENE_SECTIONS)
_TASK_SECTIONS.update({
    "targets": None,
    "free": {"params"},
    "opt": None,
    "loss": {"im", "msk", "per", "lap"},
})
_TARGET_KEY = ("image", "mask", "eye", "lookat")


def parse_task(path):
    """Read a task file: a scene plus ``[targets]``, ``[free]``, ``[opt]``, ``[loss]``.

    Target ``k`` is given by ``image.k`` and ``mask.k`` (paths) and
    optionally ``eye.k`` / ``lookat.k``; other camera fields come from
    ``[camera]``. Returns ``(scene, task)``.
    """
    path = Path(path)
    cfg = read_config(path, _TASK_SECTIONS)
    scene = scene_from_config(cfg, path)
    base = path.parent
    ts = cfg.get("targets", {})
    views = {}
    for key, entry in ts.items():
        name, _, idx = key.partition(".")
        if name not in _TARGET_KEY or not idx.isdigit():
            raise AssetError(f"unknown key {key!r} in [targets]", path, entry.line)
        views.setdefault(int(idx), {})[name] = entry
    targets = []
    cam0 = scene.camera
    for k in sorted(views):
        v = views[k]
        if "image" not in v or "mask" not in v:
            raise AssetError(f"target {k} needs image.{k} and mask.{k}", path)
        eye = _floats(v["eye"], 3, path) if "eye" in v else cam0.eye
        look = _floats(v["lookat"], 3, path) if "lookat" in v else cam0.lookat
        try:
            cam = Camera(eye, look, cam0.up, cam0.fov, cam0.width, cam0.height)
        except ValueError as exc:
            raise AssetError(f"target {k}: invalid camera: {exc}", path, v.get("eye", v["image"]).line) from None
        img = read_image(_rel(base, v["image"].value))
        msk = load_mask(_rel(base, v["mask"].value))
        targets.append(Target(img, msk, cam))
    free_entry = cfg.get("free", {}).get("params")
    free = tuple(x.strip() for x in free_entry.value.split(",") if x.strip()) if free_entry else ()
    os_ = cfg.get("opt", {})
    lr = {}
    kwargs = {}
    for key, entry in os_.items():
        if key == "lr":
            lr["lighting"] = lr["material"] = lr["vertices"] = _floats(entry, 1, path)
        elif key.startswith("lr."):
            lr[key[3:]] = _floats(entry, 1, path)
        elif key in ("steps", "samples", "seed", "log_every"):
            kwargs[key] = _int(entry, path)
        elif key in ("subsample", "beta1", "beta2", "eps"):
            kwargs[key] = _floats(entry, 1, path)
        elif key == "backend":
            kwargs[key] = entry.value
        else:
            raise AssetError(f"unknown key {key!r} in [opt]", path, entry.line)
    ls = cfg.get("loss", {})
    weights = LossWeights(**{k: _floats(e, 1, path) for k, e in ls.items()})
    kwargs.setdefault("backend", scene.config.backend)
    kwargs.setdefault("samples", scene.config.samples)
    kwargs.setdefault("seed", scene.config.seed)
    task = OptimizeTask(targets, free, lr=lr, weights=weights, **kwargs)
    return scene, task


def _rel(base, value):
    p = Path(value)
    return p if p.is_absolute() else base / p


def lit_texels(scene, cameras, width, height, threads=1):
    """Env texels seen in mirror reflection from any of ``cameras``.

    A texel counts as lit (observed) when a reflected primary ray of a
    covered pixel lands in it.
    """
    seen = np.zeros(height * width, dtype=bool)
    for cam in cameras:
        g = rasterize(scene.mesh, cam, scene.config.sigma, threads)
        v = g.visibility
        r = mk.reflect(g.view_dir[v], g.normal[v])
        u, vv = mk.dir_to_equirect(r)
        idx, _, _, _ = mk.bilinear_taps(width, height, u, vv)
        seen[idx.ravel()] = True
    return seen.reshape(height, width)


def sg_lighting_image(light, width, height):
    return sg.sg_env_to_equirect(light, width, height)
