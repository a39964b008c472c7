"""Rasterization pass: G-buffers, soft silhouettes and their adjoints.

Coverage is resolved at pixel centers with a z-buffer. Attributes use
perspective-correct barycentrics, which coincide with the barycentrics of
the primary ray / triangle intersection; the backward pass differentiates
that intersection in closed form. Pixels outside the hard coverage receive
a probabilistic silhouette value that carries position gradients across
occlusion boundaries.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import mathkit as mk

NEAR = 1e-6
DEFAULT_SIGMA = 1e-4
TILE = 32


@dataclass(frozen=True)
class Camera:
    eye: np.ndarray
    lookat: np.ndarray
    up: np.ndarray
    fov: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("eye", "lookat", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not 0.0 < self.fov < np.pi:
            raise ValueError("vertical fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        fwd = self.lookat - self.eye
        if np.linalg.norm(fwd) < 1e-12:
            raise ValueError("eye and lookat coincide")
        if np.linalg.norm(np.cross(mk.normalize(fwd), mk.normalize(self.up))) < 1e-9:
            raise ValueError("up is parallel to the view direction")

    @classmethod
    def from_degrees(cls, eye, lookat, up, fov_deg, width, height):
        return cls(eye, lookat, up, np.radians(fov_deg), int(width), int(height))

    @property
    def aspect(self):
        return self.width / self.height

    def basis(self):
        """Rows: right, up, forward (world space)."""
        f = mk.normalize(self.lookat - self.eye)
        r = mk.normalize(np.cross(f, self.up))
        u = np.cross(r, f)
        return np.stack([r, u, f])

    def to_camera(self, points):
        return (np.asarray(points) - self.eye) @ self.basis().T

    def pixel_ndc(self):
        """NDC coordinates of pixel centers: ``sx (W,)`` and ``sy (H,)``."""
        sx = 2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0
        sy = 1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height
        return sx, sy

    def project(self, cam_points):
        th = np.tan(0.5 * self.fov)
        z = cam_points[..., 2]
        zs = np.where(z > NEAR, z, 1.0)
        return cam_points[..., 0] / (zs * th * self.aspect), cam_points[..., 1] / (zs * th)

    def project_backward(self, cam_points, g_x, g_y):
        th = np.tan(0.5 * self.fov)
        cx, cy, z = cam_points[..., 0], cam_points[..., 1], cam_points[..., 2]
        zs = np.where(z > NEAR, z, 1.0)
        kx, ky = 1.0 / (th * self.aspect), 1.0 / th
        g = np.stack([g_x * kx / zs, g_y * ky / zs, -(g_x * kx * cx + g_y * ky * cy) / (zs * zs)], axis=-1)
        return g @ self.basis()

    def primary_dirs(self):
        """World-space unit ray directions through every pixel center (H, W, 3)."""
        sx, sy = self.pixel_ndc()
        th = np.tan(0.5 * self.fov)
        X, Y = np.meshgrid(sx * th * self.aspect, sy * th)
        local = np.stack([X, Y, np.ones_like(X)], axis=-1)
        return mk.normalize(local @ self.basis())


@dataclass
class GBuffer:
    camera: Camera
    triangle_id: np.ndarray
    barycentrics: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    uv: np.ndarray
    view_dir: np.ndarray
    visibility: np.ndarray
    soft_mask: np.ndarray
    flip: np.ndarray
    sigma: float

    @property
    def shape(self):
        return self.triangle_id.shape

    @property
    def pixels(self):
        """Flat indices of covered pixels, in row-major order."""
        return np.flatnonzero(self.visibility)

    def channels(self):
        vis = self.visibility.astype(np.float64)
        return {
            "position": self.position,
            "normal": self.normal,
            "uv": np.concatenate([self.uv, np.zeros(self.uv.shape[:2] + (1,))], axis=-1),
            "view_dir": self.view_dir,
            "visibility": vis,
            "soft_mask": self.soft_mask,
            "triangle_id": self.triangle_id.astype(np.float64),
            "barycentrics": self.barycentrics,
        }


def _screen_vertices(mesh, camera):
    cam = camera.to_camera(mesh.vertices)
    nx, ny = camera.project(cam)
    tri = mesh.triangles
    valid = np.all(cam[tri, 2] > NEAR, axis=1).astype(np.uint8)
    return cam, nx, ny, valid


def hard_raster(mesh, camera, threads=1):
    """Z-buffered coverage: ``(triangle_id, barycentrics, depth)``."""
    h, w = camera.height, camera.width
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    if len(mesh.triangles) == 0:
        return tri_id, bary, depth
    cam, nx, ny, valid = _screen_vertices(mesh, camera)
    tri = mesh.triangles
    px = np.ascontiguousarray((nx[tri] + 1.0) * 0.5 * w)
    py = np.ascontiguousarray((1.0 - ny[tri]) * 0.5 * h)
    z = cam[tri, 2]
    invz = np.ascontiguousarray(1.0 / np.where(valid[:, None] > 0, z, 1.0))
    tiles = [(x0, min(x0 + TILE, w), y0, min(y0 + TILE, h)) for y0 in range(0, h, TILE) for x0 in range(0, w, TILE)]

    def run(t):
        kernels.raster_tile(px, py, invz, valid, t[0], t[1], t[2], t[3], tri_id, bary, depth)

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(run, tiles))
    else:
        for t in tiles:
            run(t)
    return tri_id, bary, depth


def soft_silhouette(mesh, camera, sigma=DEFAULT_SIGMA, covered=None):
    """Per-pixel soft coverage in [0, 1]; exactly 1 on covered pixels."""
    if covered is None:
        covered = hard_raster(mesh, camera)[0] >= 0
    if len(mesh.triangles) == 0:
        return np.zeros(covered.shape)
    _, nx, ny, valid = _screen_vertices(mesh, camera)
    tri = mesh.triangles
    sx, sy = camera.pixel_ndc()
    logp = kernels.soft_mask_forward(
        np.ascontiguousarray(nx[tri]), np.ascontiguousarray(ny[tri]), valid, sx, sy,
        np.ascontiguousarray(covered, dtype=np.uint8), float(sigma),
    )
    mask = -np.expm1(logp)
    return np.where(covered, 1.0, mask)


def rasterize(mesh, camera, sigma=DEFAULT_SIGMA, threads=1):
    tri_id, bary, _ = hard_raster(mesh, camera, threads)
    vis = tri_id >= 0
    h, w = tri_id.shape
    position = np.zeros((h, w, 3))
    normal = np.zeros((h, w, 3))
    uv = np.zeros((h, w, 2))
    view_dir = np.zeros((h, w, 3))
    flip = np.ones((h, w))
    if vis.any():
        t = tri_id[vis]
        b = bary[vis]
        tri = mesh.triangles[t]
        position[vis] = np.einsum("pk,pkc->pc", b, mesh.vertices[tri])
        uv[vis] = np.einsum("pk,pkc->pc", b, mesh.uvs[tri])
        n_interp = np.einsum("pk,pkc->pc", b, mesh.normals[tri])
        to_eye = camera.eye - position[vis]
        v = mesh.vertices[tri]
        face_n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        sign = np.where(mk.dot(face_n, to_eye) < 0.0, -1.0, 1.0)
        flip[vis] = sign
        normal[vis] = sign[:, None] * mk.normalize(n_interp)
        view_dir[vis] = mk.normalize(to_eye)
    soft = soft_silhouette(mesh, camera, sigma, covered=vis)
    return GBuffer(camera, tri_id, bary, position, normal, uv, view_dir, vis, soft, flip, float(sigma))


def raster_backward(mesh, gbuffer, g_position=None, g_normal=None, g_uv=None, g_view_dir=None, g_soft_mask=None):
    """Adjoints of vertex positions and per-vertex attributes.

    Each ``g_*`` is shaped like the corresponding G-buffer field (or None).
    Returns a dict with ``vertices (V,3)``, ``normals (V,3)`` and
    ``uvs (V,2)``. Hard visibility is treated as constant.
    """
    h, w = gbuffer.shape
    for name, g, c in (("position", g_position, 3), ("normal", g_normal, 3), ("uv", g_uv, 2),
                       ("view_dir", g_view_dir, 3)):
        if g is not None and g.shape != (h, w, c):
            raise ValueError(f"adjoint for {name} has shape {g.shape}, expected {(h, w, c)}")
    if g_soft_mask is not None and g_soft_mask.shape != (h, w):
        raise ValueError(f"adjoint for soft_mask has shape {g_soft_mask.shape}, expected {(h, w)}")
    nv = len(mesh.vertices)
    g_vert = np.zeros((nv, 3))
    g_nrm = np.zeros((nv, 3))
    g_uvs = np.zeros((nv, 2))
    cam = gbuffer.camera
    vis = gbuffer.visibility
    if vis.any():
        t = gbuffer.triangle_id[vis]
        b = gbuffer.barycentrics[vis]
        tri = mesh.triangles[t]
        v = mesh.vertices[tri]
        x = gbuffer.position[vis]
        g_x = np.zeros_like(x) if g_position is None else g_position[vis].copy()
        g_b = np.zeros_like(b)
        if g_view_dir is not None:
            g_x -= mk.normalize_backward(cam.eye - x, g_view_dir[vis])
        if g_normal is not None:
            n_attr = mesh.normals[tri]
            n_interp = np.einsum("pk,pkc->pc", b, n_attr)
            g_ni = gbuffer.flip[vis][:, None] * mk.normalize_backward(n_interp, g_normal[vis])
            _scatter(g_nrm, tri, b[:, :, None] * g_ni[:, None, :])
            g_b += np.einsum("pkc,pc->pk", n_attr, g_ni)
        if g_uv is not None:
            uv_attr = mesh.uvs[tri]
            g_u = g_uv[vis]
            _scatter(g_uvs, tri, b[:, :, None] * g_u[:, None, :])
            g_b += np.einsum("pkc,pc->pk", uv_attr, g_u)
        _scatter(g_vert, tri, b[:, :, None] * g_x[:, None, :])
        g_b += np.einsum("pkc,pc->pk", v, g_x)
        # barycentrics of the ray hit: [e1 e2 -d] (b1, b2, t) = eye - v0
        d = mk.normalize(x - cam.eye)
        M = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], -d], axis=-1)
        g_s = np.stack([g_b[:, 1] - g_b[:, 0], g_b[:, 2] - g_b[:, 0], np.zeros(len(b))], axis=-1)
        wv = -np.linalg.solve(np.transpose(M, (0, 2, 1)), g_s[..., None])[..., 0]
        _scatter(g_vert, tri, b[:, :, None] * wv[:, None, :])
    if g_soft_mask is not None and len(mesh.triangles):
        g_vert += soft_silhouette_backward(mesh, cam, gbuffer.sigma, vis, gbuffer.soft_mask, g_soft_mask)
    return {"vertices": g_vert, "normals": g_nrm, "uvs": g_uvs}


def soft_silhouette_backward(mesh, camera, sigma, covered, soft_mask, g_mask):
    cam, nx, ny, valid = _screen_vertices(mesh, camera)
    tri = mesh.triangles
    sx, sy = camera.pixel_ndc()
    g_mask = np.where(covered, 0.0, g_mask)
    g_nx, g_ny = kernels.soft_mask_backward(
        np.ascontiguousarray(nx[tri]), np.ascontiguousarray(ny[tri]), valid, sx, sy,
        np.ascontiguousarray(covered, dtype=np.uint8), float(sigma),
        np.ascontiguousarray(1.0 - soft_mask), np.ascontiguousarray(g_mask),
    )
    gvx = np.zeros(len(mesh.vertices))
    gvy = np.zeros(len(mesh.vertices))
    for k in range(3):
        gvx += np.bincount(tri[:, k], weights=g_nx[:, k], minlength=len(gvx))
        gvy += np.bincount(tri[:, k], weights=g_ny[:, k], minlength=len(gvy))
    return camera.project_backward(cam, gvx, gvy)


def _scatter(out, tri, contrib):
    """``out[tri[p, k]] += contrib[p, k]`` in a fixed order."""
    flat = tri.reshape(-1)
    vals = contrib.reshape(len(flat), -1)
    for c in range(out.shape[1]):
        out[:, c] += np.bincount(flat, weights=vals[:, c], minlength=len(out))
