"""Spherical Gaussian algebra.

A lobe is ``G(w) = mu * exp(lam * (dot(xi, w) - 1))``. Products of lobes are
lobes, and every integral used by the shading backend reduces to the closed
form ``2*pi*mu*(1 - exp(-2*lam))/lam``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import mathkit as mk
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

COS_SHARPNESS = 2.133
COS_AMPLITUDE = 1.17
SMALL_LAMBDA = 1e-6
PARAMS_PER_LOBE = 7
FIT_BETA2 = 0.9


@dataclass(frozen=True)
class SgLobe:
    axis: np.ndarray
    sharpness: float
    amplitude: np.ndarray

    @classmethod
    def make(cls, axis, sharpness, amplitude=1.0):
        amp = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (3,)).copy()
        return cls(mk.normalize(np.asarray(axis, dtype=np.float64)), float(sharpness), amp)


@dataclass(frozen=True)
class SgEnvLight:
    """K-lobe mixture stored as arrays: axes (K,3), sharpness (K,), amplitude (K,3)."""

    axes: np.ndarray
    sharpness: np.ndarray
    amplitude: np.ndarray

    def __post_init__(self):
        k = len(self.sharpness)
        if k < 1:
            raise ValueError("an SG light needs at least one lobe")
        if self.axes.shape != (k, 3) or self.amplitude.shape != (k, 3):
            raise ValueError("inconsistent lobe array shapes")

    @classmethod
    def from_lobes(cls, lobes):
        return cls(
            np.array([lb.axis for lb in lobes], dtype=np.float64),
            np.array([lb.sharpness for lb in lobes], dtype=np.float64),
            np.array([lb.amplitude for lb in lobes], dtype=np.float64),
        )

    @property
    def count(self):
        return len(self.sharpness)

    @property
    def lobes(self):
        return [SgLobe(self.axes[k], float(self.sharpness[k]), self.amplitude[k]) for k in range(self.count)]

    @property
    def parameter_count(self):
        return PARAMS_PER_LOBE * self.count


def sg_param_count(k):
    return PARAMS_PER_LOBE * k


def equirect_param_count(width, height):
    return 3 * width * height


# --------------------------------------------------------------------------
# array-level kernels


def integral_factor(lam):
    """``(1 - exp(-2 lam)) / lam`` with its analytic small-lambda limit."""
    lam = np.asarray(lam, dtype=np.float64)
    small = lam < SMALL_LAMBDA
    safe = np.where(small, 1.0, lam)
    return np.where(small, 2.0 - 2.0 * lam, -np.expm1(-2.0 * safe) / safe)


def integral_factor_grad(lam):
    lam = np.asarray(lam, dtype=np.float64)
    small = lam < 1e-4
    safe = np.where(small, 1.0, lam)
    e = np.exp(-2.0 * safe)
    big = (2.0 * safe * e + np.expm1(-2.0 * safe)) / (safe * safe)
    return np.where(small, -2.0 + (8.0 / 3.0) * lam, big)


def eval_lobes(axes, sharpness, amplitude, w):
    """Per-lobe values; broadcasts ``axes (...,3)`` against ``w (...,3)``."""
    e = np.exp(np.asarray(sharpness) * (mk.dot(axes, w) - 1.0))
    return np.asarray(amplitude) * e[..., None]


def product_integral(v, total_sharpness):
    """Integral of a product of unit-amplitude lobes.

    ``v`` is the sum of ``lam_j * xi_j`` over the factors and
    ``total_sharpness`` the sum of the ``lam_j``. Returns the integral
    ``2*pi*exp(|v| - L)*h(|v|)`` and its partials with respect to ``v`` and
    ``L``.
    """
    r = mk.norm(v)
    base = np.exp(r - total_sharpness)
    val = 2.0 * np.pi * base * integral_factor(r)
    d_r = 2.0 * np.pi * base * (integral_factor(r) + integral_factor_grad(r))
    unit = v / np.maximum(r, 1e-12)[..., None]
    d_v = d_r[..., None] * unit
    return val, d_v, -val


# --------------------------------------------------------------------------
# lobe-level operations


def sg_eval(lobe, w):
    return eval_lobes(lobe.axis, lobe.sharpness, lobe.amplitude, w)


def sg_integral(lobe):
    return 2.0 * np.pi * np.asarray(lobe.amplitude) * integral_factor(lobe.sharpness)


def sg_product(l1, l2):
    v = l1.sharpness * np.asarray(l1.axis) + l2.sharpness * np.asarray(l2.axis)
    lam = float(mk.norm(v))
    axis = v / lam if lam >= 1e-9 else np.array([0.0, 1.0, 0.0])
    amp = np.asarray(l1.amplitude) * np.asarray(l2.amplitude) * np.exp(lam - l1.sharpness - l2.sharpness)
    return SgLobe(axis, lam, amp)


def sg_inner(l1, l2):
    return sg_integral(sg_product(l1, l2))


def cosine_sg(n):
    return SgLobe.make(n, COS_SHARPNESS, COS_AMPLITUDE)


def sg_env_eval(light, w):
    """Radiance of the mixture along directions ``w (..., 3)``."""
    w = np.asarray(w, dtype=np.float64)
    flat = w.reshape(-1, 3)
    e = np.exp(light.sharpness[None, :] * (flat @ light.axes.T - 1.0))
    return (e @ light.amplitude).reshape(w.shape)


def sg_env_eval_backward(light, w, g):
    """Adjoint of ``sg_env_eval``: ``(g_axes, g_sharpness, g_amplitude)``."""
    flat = np.asarray(w, dtype=np.float64).reshape(-1, 3)
    gf = np.asarray(g, dtype=np.float64).reshape(-1, 3)
    cosang = flat @ light.axes.T
    e = np.exp(light.sharpness[None, :] * (cosang - 1.0))
    g_amp = e.T @ gf
    ge = (gf @ light.amplitude.T) * e
    g_lam = (ge * (cosang - 1.0)).sum(axis=0)
    g_axes = (ge.T @ flat) * light.sharpness[:, None]
    return g_axes, g_lam, g_amp


def sg_env_to_equirect(light, width, height):
    from .assets import EquirectImage

    return EquirectImage(sg_env_eval(light, mk.equirect_pixel_dirs(width, height)))


# --------------------------------------------------------------------------
# fitting a mixture to an environment map


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fit_problem(env):
    h, w = env.height, env.width
    dirs = mk.equirect_pixel_dirs(w, h).reshape(-1, 3)
    weights = np.repeat(np.sin(np.pi * (np.arange(h) + 0.5) / h), w)
    weights = weights / weights.sum()
    target = env.pixels.reshape(-1, 3)
    return dirs, weights, target


def fit_loss(light, env):
    """sin(theta)-weighted mean squared error and its relative L2 form."""
    dirs, weights, target = _fit_problem(env)
    pred = sg_env_eval(light, dirs)
    sq = weights @ ((pred - target) ** 2).sum(axis=1)
    ref = weights @ (target ** 2).sum(axis=1)
    return float(sq), float(np.sqrt(sq / max(ref, 1e-300)))


def fit_env_sg(env, k, iterations=500, lr=0.05, init=None, trace=None):
    """Fit a ``k``-lobe mixture to ``env`` by Adam on the weighted L2 loss.

    Returns the best mixture seen; its loss never exceeds the initial one.
    ``trace``, if given, receives the best loss after every iteration.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    dirs, weights, target = _fit_problem(env)
    mean = (weights @ target) if target.size else np.zeros(3)
    scale = max(float(np.abs(mean).max()), 1e-3)
    if init is None:
        axes = mk.fibonacci_sphere(k)
        rho = np.full(k, float(softplus_inv(k / 2.0)))
        amp = np.tile(np.maximum(mean, 0.0), (k, 1))
    else:
        axes = init.axes.copy()
        rho = softplus_inv(np.maximum(init.sharpness, 1e-8))
        amp = init.amplitude.copy()
    params = {"axes": axes, "rho": rho, "amp": amp}
    # sharpness steps scale with its starting magnitude, as amplitude steps
    # scale with the map's intensity; otherwise a sun-sized lobe (lam ~ 1e3)
    # needs tens of thousands of iterations to form
    lam0 = float(np.mean(softplus(rho)))
    lrs = {"axes": lr, "rho": lr * max(1.0, lam0), "amp": lr * scale}
    # short second-moment memory: gradients shrink geometrically as lobes
    # widen or sharpen, and a long memory would stall the steps
    state = AdamState(beta2=FIT_BETA2)

    def evaluate(p):
        lam = softplus(p["rho"])
        cosang = dirs @ p["axes"].T
        e = np.exp(lam[None, :] * (cosang - 1.0))
        resid = e @ p["amp"] - target
        loss = float(weights @ (resid * resid).sum(axis=1))
        return loss, lam, cosang, e, resid

    best_loss, *_ = evaluate(params)
    best = {n: v.copy() for n, v in params.items()}
    initial = best_loss
    for _ in range(iterations):
        loss, lam, cosang, e, resid = evaluate(params)
        if loss < best_loss:
            best_loss = loss
            best = {n: v.copy() for n, v in params.items()}
        if trace is not None:
            trace.append(best_loss)
        wr = 2.0 * weights[:, None] * resid
        g_amp = e.T @ wr
        ge = (wr @ params["amp"].T) * e
        g_lam = (ge * (cosang - 1.0)).sum(axis=0)
        g_axes = (ge.T @ dirs) * lam[:, None]
        g_axes -= mk.dot(g_axes, params["axes"])[:, None] * params["axes"]
        grads = {"axes": g_axes, "rho": g_lam * sigmoid(params["rho"]), "amp": g_amp}
        params, state = adam_step(params, grads, state, lrs)
        params["axes"] = mk.normalize(params["axes"])
        params["amp"] = np.maximum(params["amp"], 0.0)
    loss, *_ = evaluate(params)
    if loss < best_loss:
        best_loss, best = loss, params
    log.info("fit_env_sg K=%d: loss %.6g -> %.6g", k, initial, best_loss)
    return SgEnvLight(best["axes"].copy(), softplus(best["rho"]), best["amp"].copy())
