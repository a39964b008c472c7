"""Numeric foundation: vector helpers, the equirectangular mapping,
counter-based random streams and a spherical quadrature oracle.

Conventions used everywhere in the package: y is world-up, azimuth is
measured from -z toward +x, and ``v = 0`` is the top (north pole) row of
an equirectangular image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ONE_MINUS_ULP = np.nextafter(1.0, 0.0)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def dot(a, b):
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


def norm(a):
    return np.sqrt(dot(a, a))


def normalize(v, eps=1e-300):
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / np.maximum(n, eps)


def normalize_backward(v, grad_out):
    """Adjoint of ``normalize`` at ``v`` given the adjoint of its output."""
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    u = v / n
    return (grad_out - np.sum(grad_out * u, axis=-1, keepdims=True) * u) / n


def luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2]


LUMA = np.array([0.2126, 0.7152, 0.0722])


def reflect(w, n):
    """Mirror ``w`` about ``n`` (both pointing away from the surface)."""
    return 2.0 * dot(w, n)[..., None] * n - w


def orthonormal_basis(n):
    """Tangent frame (t, b) for unit normals ``n`` (Duff et al. 2017)."""
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    t = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bt = np.stack([b, sign + y * y * a, -y], axis=-1)
    return t, bt


def to_world(local, n):
    t, b = orthonormal_basis(n)
    return local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * n


def dir_to_equirect(w):
    """Map unit directions to ``(u, v)`` in ``[0, 1)``."""
    w = np.asarray(w, dtype=np.float64)
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    # 0.0 - z keeps +0.0 at the poles, so atan2 returns 0 rather than pi.
    phi = np.arctan2(x, 0.0 - z)
    u = (phi + np.pi) / (2.0 * np.pi)
    u = u - np.floor(u)
    u = np.where(u >= 1.0, 0.0, u)
    v = np.arccos(np.clip(y, -1.0, 1.0)) / np.pi
    v = np.minimum(v, ONE_MINUS_ULP)
    return u, v


def equirect_to_dir(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    u = u - np.floor(u)
    phi = 2.0 * np.pi * u - np.pi
    theta = np.pi * v
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=-1)


def equirect_pixel_dirs(width, height):
    """Directions through the pixel centers of a ``height x width`` map."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return equirect_to_dir(uu, vv)


def equirect_solid_angles(width, height):
    """Exact solid angle of each pixel row, shape ``(height,)``."""
    edges = np.cos(np.pi * np.arange(height + 1) / height)
    return (edges[:-1] - edges[1:]) * (2.0 * np.pi / width)


def fibonacci_sphere(count):
    i = np.arange(count, dtype=np.float64) + 0.5
    y = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=-1)


@lru_cache(maxsize=16)
def _fejer_rule(rows):
    # Fejer's first rule in cos(theta): nodes at equispaced theta midpoints.
    k = np.arange(rows)
    theta = (2 * k + 1) * np.pi / (2 * rows)
    j = np.arange(1, rows // 2 + 1)
    s = np.cos(2.0 * np.outer(theta, j)) / (4.0 * j * j - 1.0)
    w = (2.0 / rows) * (1.0 - 2.0 * s.sum(axis=1))
    return theta, w


@lru_cache(maxsize=16)
def quadrature_grid(level):
    """Directions and weights of the sphere rule selected by ``level``.

    The grid has ``2*level`` polar rows (Fejer weights in cos theta) and
    ``4*level`` azimuthal columns (trapezoid in phi). It integrates
    spherical harmonics up to degree ``2*level - 1`` exactly.
    """
    if level < 1:
        raise ValueError("level must be >= 1")
    rows, cols = 2 * level, 4 * level
    theta, wt = _fejer_rule(rows)
    phi = (np.arange(cols) + 0.5) * (2.0 * np.pi / cols) - np.pi
    st = np.sin(theta)[:, None]
    dirs = np.stack(
        np.broadcast_arrays(st * np.sin(phi), np.cos(theta)[:, None], -st * np.cos(phi)),
        axis=-1,
    )
    weights = np.broadcast_to(wt[:, None] * (2.0 * np.pi / cols), (rows, cols))
    dirs = dirs.reshape(-1, 3)
    weights = np.ascontiguousarray(weights).reshape(-1)
    dirs.setflags(write=False)
    weights.setflags(write=False)
    return dirs, weights


def sphere_quadrature(f, level):
    """Integrate ``f`` over the unit sphere.

    ``f`` receives an ``(n, 3)`` array of unit directions and returns either
    ``(n,)`` or ``(n, c)`` values.
    """
    dirs, w = quadrature_grid(level)
    vals = np.asarray(f(dirs), dtype=np.float64)
    if vals.ndim == 1:
        return float(np.dot(w, vals))
    return np.tensordot(w, vals, axes=(0, 0))


# --------------------------------------------------------------------------
# counter-based random numbers


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(x):
    a = np.asarray(x)
    if a.dtype.kind == "u":
        return a.astype(np.uint64, copy=False)
    return a.astype(np.int64, copy=False).astype(np.uint64)


def stream_keys(seed, stream):
    """Per-stream 64-bit keys; broadcasts over ``stream``."""
    with np.errstate(over="ignore"):
        s = _mix64(_as_u64(stream) * _GOLDEN + _GOLDEN)
        return _mix64(_as_u64(seed) ^ s)


def uniform_from_keys(keys, draw):
    with np.errstate(over="ignore"):
        z = _mix64(keys + (_as_u64(draw) + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def uniform(seed, stream, draw):
    """Uniform variate in ``[0, 1)`` for each ``(seed, stream, draw)``."""
    return uniform_from_keys(stream_keys(seed, stream), draw)


def derive_seed(*parts):
    """Fold several integers into one 63-bit seed."""
    with np.errstate(over="ignore"):
        z = np.uint64(0x243F6A8885A308D3)
        for p in parts:
            z = _mix64(np.asarray([z ^ (np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF) * _GOLDEN)], dtype=np.uint64))[0]
    return int(z >> np.uint64(1))


@dataclass
class RngStream:
    """One indexable random stream. ``next_uniform`` advances ``counter``."""

    seed: int
    stream_index: int
    counter: int = field(default=0)

    def at(self, draw):
        return uniform(self.seed, self.stream_index, draw)

    def next_uniform(self):
        u = float(self.at(np.array([self.counter]))[0])
        self.counter += 1
        return u

    def take(self, n):
        out = self.at(np.arange(self.counter, self.counter + n))
        self.counter += n
        return out


def next_uniform(stream: RngStream) -> float:
    return stream.next_uniform()


# --------------------------------------------------------------------------
# bilinear lookup shared by textures and environment maps


def bilinear_taps(width, height, u, v, wrap_u=True):
    """Flat texel indices, weights and weight derivatives for a lookup.

    ``u`` wraps (or clamps when ``wrap_u`` is False) and ``v`` clamps;
    texel centers sit at ``(i + 0.5) / size``. Returns ``idx (..., 4)``,
    ``w (..., 4)``, ``dw_du (..., 4)`` and ``dw_dv (..., 4)``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = u * width - 0.5
    if wrap_u:
        x0 = np.floor(x)
        fx = x - x0
        ix0 = np.mod(x0, width).astype(np.int64)
        ix1 = np.mod(ix0 + 1, width)
        dx = np.full(x.shape, float(width))
    else:
        xc = np.clip(x, 0.0, width - 1.0)
        x0 = np.minimum(np.floor(xc), max(width - 2, 0))
        fx = xc - x0
        ix0 = x0.astype(np.int64)
        ix1 = np.minimum(ix0 + 1, width - 1)
        dx = np.where((x > 0.0) & (x < width - 1.0), float(width), 0.0)
    y = v * height - 0.5
    yc = np.clip(y, 0.0, height - 1.0)
    y0 = np.minimum(np.floor(yc), max(height - 2, 0))
    fy = yc - y0
    iy0 = y0.astype(np.int64)
    iy1 = np.minimum(iy0 + 1, height - 1)
    dy = np.where((y > 0.0) & (y < height - 1.0), float(height), 0.0)
    idx = np.stack([iy0 * width + ix0, iy0 * width + ix1, iy1 * width + ix0, iy1 * width + ix1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    dw_du = dx[..., None] * np.stack([-(1 - fy), (1 - fy), -fy, fy], axis=-1)
    dw_dv = dy[..., None] * np.stack([-(1 - fx), -fx, (1 - fx), fx], axis=-1)
    return idx, w, dw_du, dw_dv


def bilinear_gather(image, idx, w):
    """Weighted gather from an ``(h, w, c)`` image using precomputed taps."""
    flat = np.asarray(image).reshape(-1, image.shape[-1])
    return np.einsum("...k,...kc->...c", w, flat[idx])


def bilinear_scatter(shape, idx, w, grad):
    """Adjoint of ``bilinear_gather``: accumulate ``grad (..., c)`` into texels."""
    h, wd, c = shape
    flat_idx = idx.reshape(-1)
    contrib = (w[..., :, None] * grad[..., None, :]).reshape(-1, c)
    out = np.stack([np.bincount(flat_idx, weights=contrib[:, ch], minlength=h * wd) for ch in range(c)], axis=-1)
    return out.reshape(shape)
