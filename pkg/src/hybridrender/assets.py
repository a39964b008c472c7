"""Meshes, HDR environment maps, images and scene files."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mathkit as mk
from .brdf import BrdfParams
from .raster import DEFAULT_SIGMA, Camera
from .sgalg import SgEnvLight

log = logging.getLogger(__name__)


class AssetError(ValueError):
    """Problem reading or validating an asset; carries file/line context."""

    def __init__(self, message, path=None, line=None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


# --------------------------------------------------------------------------
# meshes


def vertex_normals(vertices, triangles):
    """Area-weighted average of incident face normals."""
    v = vertices[triangles]
    c = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    acc = np.zeros_like(vertices)
    for k in range(3):
        for ax in range(3):
            acc[:, ax] += np.bincount(triangles[:, k], weights=c[:, ax], minlength=len(vertices))
    lengths = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 1.0, 0.0], (len(vertices), 1))
    ok = lengths > 0
    out[ok] = acc[ok] / lengths[ok, None]
    return out


def vertex_normals_backward(vertices, triangles, g_normals):
    v = vertices[triangles]
    e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
    c = np.cross(e1, e2)
    acc = np.zeros_like(vertices)
    for k in range(3):
        for ax in range(3):
            acc[:, ax] += np.bincount(triangles[:, k], weights=c[:, ax], minlength=len(vertices))
    ok = np.linalg.norm(acc, axis=1) > 0
    g_acc = np.zeros_like(acc)
    g_acc[ok] = mk.normalize_backward(acc[ok], g_normals[ok])
    g_c = g_acc[triangles].sum(axis=1)
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    out = np.zeros_like(vertices)
    contrib = np.stack([-g_e1 - g_e2, g_e1, g_e2], axis=1)
    for k in range(3):
        for ax in range(3):
            out[:, ax] += np.bincount(triangles[:, k], weights=contrib[:, k, ax], minlength=len(vertices))
    return out


def build_adjacency(n_vertices, triangles):
    pairs = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    pairs = np.concatenate([pairs, pairs[:, ::-1]])
    pairs = np.unique(pairs, axis=0)
    split = np.searchsorted(pairs[:, 0], np.arange(n_vertices + 1))
    return tuple(pairs[split[i]:split[i + 1], 1] for i in range(n_vertices))


def sphere_uvs(vertices):
    center = vertices.mean(axis=0) if len(vertices) else np.zeros(3)
    u, v = mk.dir_to_equirect(mk.normalize(vertices - center))
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    normals: np.ndarray
    uvs: np.ndarray
    triangles: np.ndarray
    adjacency: tuple = field(repr=False, default=())
    derived_normals: bool = False

    @classmethod
    def build(cls, vertices, triangles, normals=None, uvs=None):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        derived = normals is None
        normals = vertex_normals(vertices, triangles) if derived else mk.normalize(np.asarray(normals, dtype=np.float64))
        uvs = sphere_uvs(vertices) if uvs is None else np.asarray(uvs, dtype=np.float64)
        return cls(vertices, normals, uvs, triangles, build_adjacency(len(vertices), triangles), derived)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3), dtype=np.int64), (), True)

    def with_vertices(self, vertices):
        vertices = np.asarray(vertices, dtype=np.float64)
        normals = vertex_normals(vertices, self.triangles) if self.derived_normals else self.normals
        return replace(self, vertices=vertices, normals=normals)

    def face_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron; 3 subdivisions give 642 vertices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [tuple(mk.normalize(np.array(p, dtype=np.float64))) for p in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = mk.normalize((np.array(verts[i]) + np.array(verts[j])) / 2.0)
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    unit = np.array(verts)
    mesh = Mesh.build(unit * radius + np.asarray(center, dtype=np.float64), faces)
    return replace(mesh, uvs=sphere_uvs(unit))


_FACE_TOKEN = re.compile(r"^(-?\d+)(?:/(-?\d*)(?:/(-?\d*))?)?$")


def load_obj(path):
    """Read a Wavefront OBJ (v, vt, vn, polygonal f)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise AssetError(f"cannot read mesh: {exc.strerror}", path) from exc
    pos, tex, nrm = [], [], []
    corners = []  # per face: list of (vi, ti, ni, lineno)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                pos.append([float(x) for x in args[:3]])
                if len(args) < 3:
                    raise ValueError
            elif tag == "vt":
                tex.append([float(x) for x in args[:2]])
                if len(args) < 2:
                    raise ValueError
            elif tag == "vn":
                nrm.append([float(x) for x in args[:3]])
                if len(args) < 3:
                    raise ValueError
            elif tag == "f":
                if len(args) < 3:
                    raise AssetError("face needs at least 3 vertices", path, lineno)
                face = []
                for tok in args:
                    m = _FACE_TOKEN.match(tok)
                    if not m:
                        raise AssetError(f"bad face token {tok!r}", path, lineno)
                    face.append(tuple(_obj_index(g, n, path, lineno) for g, n in
                                      zip(m.groups(), (len(pos), len(tex), len(nrm)))) + (lineno,))
                corners.append(face)
            elif tag in ("mtllib", "usemtl"):
                log.warning("%s:%d: materials are ignored", path, lineno)
            elif tag in ("o", "g", "s", "l", "p"):
                continue
            else:
                raise AssetError(f"unsupported statement {tag!r}", path, lineno)
        except ValueError as exc:
            if isinstance(exc, AssetError):
                raise
            raise AssetError(f"malformed {tag!r} record", path, lineno) from None
    if not pos or not corners:
        raise AssetError("mesh is empty", path)
    has_t = all(c[1] is not None for f in corners for c in f)
    has_n = all(c[2] is not None for f in corners for c in f)
    simple = all((not has_t or c[1] == c[0]) and (not has_n or c[2] == c[0]) for f in corners for c in f)
    pos = np.array(pos)
    if simple:
        tris = []
        for f in corners:
            for k in range(1, len(f) - 1):
                tris.append((f[0][0], f[k][0], f[k + 1][0]))
        vertices = pos
        uvs = np.array(tex)[: len(pos)] if has_t and len(tex) >= len(pos) else None
        normals = np.array(nrm)[: len(pos)] if has_n and len(nrm) >= len(pos) else None
    else:
        index = {}
        vlist, tlist, nlist, tris = [], [], [], []
        for f in corners:
            ids = []
            for vi, ti, ni, _ in f:
                key = (vi, ti if has_t else None, ni if has_n else None)
                if key not in index:
                    index[key] = len(vlist)
                    vlist.append(pos[vi])
                    if has_t:
                        tlist.append(tex[ti])
                    if has_n:
                        nlist.append(nrm[ni])
                ids.append(index[key])
            for k in range(1, len(ids) - 1):
                tris.append((ids[0], ids[k], ids[k + 1]))
        vertices = np.array(vlist)
        uvs = np.array(tlist) if has_t else None
        normals = np.array(nlist) if has_n else None
    tris = np.array(tris, dtype=np.int64)
    v = vertices[tris]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    if np.any(area <= 1e-12):
        bad = int(np.flatnonzero(area <= 1e-12)[0])
        log.warning("%s: dropping %d degenerate triangle(s), first is #%d", path, int((area <= 1e-12).sum()), bad)
        tris = tris[area > 1e-12]
        if len(tris) == 0:
            raise AssetError("mesh is empty", path)
    if uvs is not None:
        uvs = uvs.copy()
        uvs[:, 1] = 1.0 - uvs[:, 1]
    return Mesh.build(vertices, tris, normals, uvs)


def _obj_index(group, count, path, lineno):
    if group is None or group == "":
        return None
    i = int(group)
    i = i - 1 if i > 0 else count + i
    if not 0 <= i < count:
        raise AssetError(f"index {group} out of range (have {count})", path, lineno)
    return i


def write_obj(mesh, path):
    lines = ["# written by hybridrender"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {1.0 - v!r}" for u, v in mesh.uvs.tolist()]
    if not mesh.derived_normals:
        lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.normals.tolist()]
        fmt = "{0}/{0}/{0}"
    else:
        fmt = "{0}/{0}"
    for a, b, c in (mesh.triangles + 1).tolist():
        lines.append("f " + " ".join(fmt.format(i) for i in (a, b, c)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class EquirectImage:
    """Latitude-longitude radiance map, ``pixels`` shaped (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"equirect image must be (h, w, 3), got {px.shape}")
        if not np.all(np.isfinite(px)) or np.any(px < 0):
            raise ValueError("equirect pixels must be finite and non-negative")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @classmethod
    def constant(cls, color, width=32, height=16):
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)).copy())

    def lookup(self, w):
        u, v = mk.dir_to_equirect(w)
        idx, wts, _, _ = mk.bilinear_taps(self.width, self.height, u, v)
        return mk.bilinear_gather(self.pixels, idx, wts)


def sky_env(width=64, height=32, sun_dir=(0.4, 0.7, 0.3), sun_color=(40.0, 36.0, 30.0), sun_size=0.05,
            zenith=(0.25, 0.45, 1.0), horizon=(0.9, 0.9, 1.0), ground=(0.15, 0.12, 0.1)):
    """Procedural sky: zenith-horizon gradient, dark ground, a soft sun disc.

    The sun is a Gaussian falloff in angle with std ``sun_size`` radians,
    evaluated per pixel centre so small maps still carry its energy.
    """
    w = mk.equirect_pixel_dirs(width, height)
    y = w[..., 1:2]
    t = np.clip(y, 0.0, 1.0) ** 0.5
    sky = (1.0 - t) * np.asarray(horizon) + t * np.asarray(zenith)
    fade = np.clip(-y * 8.0, 0.0, 1.0)
    px = (1.0 - fade) * sky + fade * np.asarray(ground)
    ang = np.arccos(np.clip(w @ mk.normalize(np.asarray(sun_dir, dtype=np.float64)), -1.0, 1.0))
    px = px + np.exp(-0.5 * (ang / sun_size) ** 2)[..., None] * np.asarray(sun_color)
    return EquirectImage(px)


def read_pfm(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise AssetError(f"cannot read image: {exc.strerror}", path) from exc
    pos, (magic, w, h, scale) = _pfm_header(data, path)
    if magic not in ("PF", "Pf") or w < 1 or h < 1 or scale == 0.0:
        raise AssetError("malformed PFM header", path)
    channels = 3 if magic == "PF" else 1
    endian = "<" if scale < 0 else ">"
    count = w * h * channels
    if len(data) - pos < 4 * count:
        raise AssetError("truncated PFM data", path)
    arr = np.frombuffer(data, dtype=endian + "f4", count=count, offset=pos).astype(np.float64)
    return np.ascontiguousarray(arr.reshape(h, w, channels)[::-1])


def _next_token_end(data, pos):
    i = pos
    while i < len(data) and data[i:i + 1] not in b" \t\r\n":
        i += 1
    return i if i < len(data) else None


def _pfm_header(data, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1] in b" \t\r\n":
            pos += 1
        end = _next_token_end(data, pos)
        if end is None:
            raise AssetError("malformed PFM header", path)
        tokens.append(data[pos:end].decode("ascii", "replace"))
        pos = end
    pos += 1  # single whitespace byte after the scale
    try:
        return pos, (tokens[0], int(tokens[1]), int(tokens[2]), float(tokens[3]))
    except ValueError:
        raise AssetError("malformed PFM header", path) from None


def write_pfm(array, path):
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ValueError("PFM holds 1 or 3 channels")
    magic = b"PF" if c == 3 else b"Pf"
    body = np.ascontiguousarray(arr[::-1].astype("<f4")).tobytes()
    Path(path).write_bytes(magic + b"\n" + f"{w} {h}\n-1.0\n".encode() + body)


def read_rgbe(path):
    """Radiance .hdr reader (flat and new-style RLE scanlines)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise AssetError(f"cannot read image: {exc.strerror}", path) from exc
    if not data.startswith(b"#?"):
        raise AssetError("malformed Radiance header", path)
    pos = 0
    fmt_ok = True
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise AssetError("malformed Radiance header", path)
        line = data[pos:end].strip()
        pos = end + 1
        if line.startswith(b"FORMAT=") and line != b"FORMAT=32-bit_rle_rgbe":
            fmt_ok = False
        if line == b"":
            break
    if not fmt_ok:
        raise AssetError("unsupported Radiance pixel format", path)
    end = data.find(b"\n", pos)
    if end < 0:
        raise AssetError("malformed Radiance header", path)
    m = re.match(rb"^-Y (\d+) \+X (\d+)$", data[pos:end].strip())
    if not m:
        raise AssetError("unsupported Radiance resolution line", path)
    h, w = int(m.group(1)), int(m.group(2))
    pos = end + 1
    out = np.zeros((h, w, 4), dtype=np.uint8)
    buf = memoryview(data)
    for y in range(h):
        if pos + 4 > len(data):
            raise AssetError("truncated Radiance data", path)
        if 8 <= w < 32768 and data[pos] == 2 and data[pos + 1] == 2 and (data[pos + 2] << 8 | data[pos + 3]) == w:
            pos += 4
            for c in range(4):
                x = 0
                while x < w:
                    if pos >= len(data):
                        raise AssetError("truncated Radiance data", path)
                    count = data[pos]
                    pos += 1
                    if count > 128:
                        count -= 128
                        if x + count > w or pos >= len(data):
                            raise AssetError("bad run length", path)
                        out[y, x:x + count, c] = data[pos]
                        pos += 1
                    else:
                        if count == 0 or x + count > w or pos + count > len(data):
                            raise AssetError("bad run length", path)
                        out[y, x:x + count, c] = np.frombuffer(buf[pos:pos + count], dtype=np.uint8)
                        pos += count
                    x += count
        else:
            n = 4 * w
            if pos + n > len(data):
                raise AssetError("truncated Radiance data", path)
            out[y] = np.frombuffer(buf[pos:pos + n], dtype=np.uint8).reshape(w, 4)
            pos += n
    return rgbe_decode(out)


def rgbe_decode(rgbe):
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int64)
    scale = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return rgbe[..., :3].astype(np.float64) * scale[..., None]


def rgbe_encode(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    peak = rgb.max(axis=-1)
    mant, exp = np.frexp(peak)
    ok = peak > 1e-32
    scale = np.where(ok, mant * 256.0 / np.where(ok, peak, 1.0), 0.0)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.clip(np.floor(rgb * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    return out


def write_rgbe(array, path):
    arr = np.asarray(array, dtype=np.float64)
    h, w, _ = arr.shape
    head = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n".encode()
    Path(path).write_bytes(head + rgbe_encode(arr).tobytes())


def read_image(path):
    """Any supported image as a float (h, w, 3) array (PNG is gamma-decoded)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        arr = read_pfm(path)
    elif suffix == ".hdr":
        arr = read_rgbe(path)
    elif suffix == ".png":
        from PIL import Image

        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise AssetError(f"cannot read PNG: {exc}", path) from exc
        arr = arr ** 2.2
    else:
        raise AssetError(f"unsupported image format {suffix!r}", path)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def load_hdr(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(2)
    except OSError as exc:
        raise AssetError(f"cannot read image: {exc.strerror}", path) from exc
    if magic in (b"PF", b"Pf"):
        arr = read_pfm(path)
    elif magic == b"#?":
        arr = read_rgbe(path)
    else:
        raise AssetError("unsupported HDR format (expected PFM or Radiance RGBE)", path)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    try:
        return EquirectImage(arr)
    except ValueError as exc:
        raise AssetError(str(exc), path) from None


def encode_png_bytes(image):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * arr ** (1.0 / 2.2)).astype(np.uint8)


def write_image(image, path, format=None):
    """Write ``image`` (h, w[, c]) as PNG (gamma 2.2, clamped) or linear PFM."""
    if isinstance(image, EquirectImage):
        image = image.pixels
    arr = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    fmt = (format or Path(path).suffix.lstrip(".")).lower()
    if fmt == "pfm":
        write_pfm(arr, path)
    elif fmt == "png":
        from PIL import Image

        px = encode_png_bytes(arr)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[..., 0]
        Image.fromarray(px).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported output format {fmt!r}")


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class RenderConfig:
    backend: str = "sg"
    samples: int = 64
    seed: int = 0
    sigma: float = DEFAULT_SIGMA


@dataclass(frozen=True)
class Scene:
    mesh: Mesh
    camera: Camera
    brdf: BrdfParams
    lighting: object
    background: object = field(default_factory=lambda: np.zeros(3))
    config: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if not isinstance(self.lighting, (EquirectImage, SgEnvLight)):
            raise ValueError("lighting must be an EquirectImage or an SgEnvLight")
        if self.config.backend not in ("mc", "sg"):
            raise ValueError(f"unknown backend {self.config.backend!r}")
        if self.config.samples < 1:
            raise ValueError("sample count must be >= 1")

    @property
    def resolution(self):
        return self.camera.width, self.camera.height


SCENE_DEFAULT_K = 32

_SCENE_KEYS = {
    "mesh": {"path", "primitive", "subdivisions", "radius", "center"},
    "camera": {"eye", "lookat", "up", "fov_deg", "width", "height"},
    "brdf": {"texture", "albedo", "texture_size", "specular", "roughness", "metalness"},
    "envmap": {"path", "color", "width", "height", "scale"},
    "sg_light": {"count", "init", "sharpness", "amplitude"},
    "render": {"backend", "samples", "seed", "sigma"},
    "background": {"color", "path"},
}
_INDEXED_SG_KEYS = re.compile(r"^(axis|sharpness|amplitude)\.(\d+)$")


@dataclass
class ConfigEntry:
    value: str
    line: int


def read_config(path, sections):
    """Parse the ``[section]`` / ``key = value`` format.

    ``sections`` maps each allowed section to its allowed keys (``None``
    accepts any key). Returns ``{section: {key: ConfigEntry}}``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise AssetError("file not found", path) from None
    except OSError as exc:
        raise AssetError(f"cannot read file: {exc.strerror}", path) from exc
    out = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise AssetError(f"bad section header {line!r}", path, lineno)
            current = line[1:-1].strip()
            if current not in sections:
                raise AssetError(f"unknown section [{current}]", path, lineno)
            if current in out:
                raise AssetError(f"duplicate section [{current}]", path, lineno)
            out[current] = {}
            continue
        if "=" not in line:
            raise AssetError(f"expected 'key = value', got {line!r}", path, lineno)
        if current is None:
            raise AssetError("key outside of any section", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        allowed = sections[current]
        if allowed is not None and key not in allowed and not (current == "sg_light" and _INDEXED_SG_KEYS.match(key)):
            raise AssetError(f"unknown key {key!r} in [{current}]", path, lineno)
        if key in out[current]:
            raise AssetError(f"duplicate key {key!r}", path, lineno)
        out[current][key] = ConfigEntry(value, lineno)
    return out


def _floats(entry, n, path):
    try:
        vals = [float(x) for x in entry.value.replace(",", " ").split()]
    except ValueError:
        raise AssetError(f"expected {n} number(s), got {entry.value!r}", path, entry.line) from None
    if len(vals) == 1 and n == 3:
        vals = vals * 3
    if len(vals) != n:
        raise AssetError(f"expected {n} number(s), got {entry.value!r}", path, entry.line)
    return vals if n > 1 else vals[0]


def _int(entry, path):
    try:
        return int(entry.value)
    except ValueError:
        raise AssetError(f"expected an integer, got {entry.value!r}", path, entry.line) from None


def _require(section, key, name, path):
    if key not in section:
        raise AssetError(f"missing required key {key!r} in [{name}]", path)
    return section[key]


def _resolve(base, entry):
    p = Path(entry.value)
    return p if p.is_absolute() else base / p


def _load_with_context(loader, target, path, entry):
    try:
        return loader(target)
    except AssetError as exc:
        raise AssetError(f"while loading {target}: {exc}", path, entry.line) from exc


def scene_from_config(cfg, path):
    path = Path(path)
    base = path.parent
    for name in ("mesh", "camera"):
        if name not in cfg:
            raise AssetError(f"missing required section [{name}]", path)
    ms = cfg["mesh"]
    if "path" in ms and "primitive" in ms:
        raise AssetError("[mesh] takes either path or primitive", path, ms["primitive"].line)
    if "path" in ms:
        mesh = _load_with_context(load_obj, _resolve(base, ms["path"]), path, ms["path"])
    elif "primitive" in ms:
        if ms["primitive"].value != "icosphere":
            raise AssetError(f"unknown primitive {ms['primitive'].value!r}", path, ms["primitive"].line)
        sub = _int(ms["subdivisions"], path) if "subdivisions" in ms else 3
        rad = _floats(ms["radius"], 1, path) if "radius" in ms else 1.0
        cen = _floats(ms["center"], 3, path) if "center" in ms else (0.0, 0.0, 0.0)
        mesh = icosphere(sub, rad, cen)
    else:
        raise AssetError("missing required key 'path' in [mesh]", path)

    cs = cfg["camera"]
    try:
        camera = Camera.from_degrees(
            _floats(_require(cs, "eye", "camera", path), 3, path),
            _floats(_require(cs, "lookat", "camera", path), 3, path),
            _floats(cs["up"], 3, path) if "up" in cs else (0.0, 1.0, 0.0),
            _floats(_require(cs, "fov_deg", "camera", path), 1, path),
            _int(_require(cs, "width", "camera", path), path),
            _int(_require(cs, "height", "camera", path), path),
        )
    except ValueError as exc:
        if isinstance(exc, AssetError):
            raise
        raise AssetError(f"invalid camera: {exc}", path) from None

    bs = cfg.get("brdf", {})
    if "texture" in bs and "albedo" in bs:
        raise AssetError("[brdf] takes either texture or albedo", path, bs["albedo"].line)
    scalars = {}
    for key, default in (("specular", 0.5), ("roughness", 0.5), ("metalness", 0.0)):
        scalars[key] = _floats(bs[key], 1, path) if key in bs else default
        if not 0.0 <= scalars[key] <= 1.0:
            raise AssetError(f"{key} must lie in [0, 1]", path, bs[key].line)
    if "texture" in bs:
        tex = _load_with_context(read_image, _resolve(base, bs["texture"]), path, bs["texture"])
        tex = np.clip(tex, 0.0, 1.0)
    else:
        albedo = _floats(bs["albedo"], 3, path) if "albedo" in bs else (0.5, 0.5, 0.5)
        size = _int(bs["texture_size"], path) if "texture_size" in bs else 1
        tex = np.broadcast_to(np.clip(albedo, 0.0, 1.0), (size, size, 3)).copy()
    brdf = BrdfParams(tex, scalars["specular"], scalars["roughness"], scalars["metalness"])

    if "envmap" in cfg and "sg_light" in cfg:
        raise AssetError("conflicting lighting: both [envmap] and [sg_light] given", path,
                         min(e.line for e in cfg["sg_light"].values()) if cfg["sg_light"] else None)
    if "envmap" in cfg:
        lighting = _parse_envmap(cfg["envmap"], base, path)
    elif "sg_light" in cfg:
        lighting = _parse_sg_light(cfg["sg_light"], path)
    else:
        raise AssetError("missing lighting: give [envmap] or [sg_light]", path)

    bg = cfg.get("background", {})
    if "color" in bg and "path" in bg:
        raise AssetError("[background] takes either color or path", path, bg["path"].line)
    if "path" in bg:
        background = _load_with_context(load_hdr, _resolve(base, bg["path"]), path, bg["path"])
    else:
        background = np.array(_floats(bg["color"], 3, path) if "color" in bg else (0.0, 0.0, 0.0))

    rs = cfg.get("render", {})
    backend = rs["backend"].value if "backend" in rs else "sg"
    if backend not in ("mc", "sg"):
        raise AssetError(f"unknown backend {backend!r}", path, rs["backend"].line)
    samples = _int(rs["samples"], path) if "samples" in rs else 64
    if samples < 1:
        raise AssetError("samples must be >= 1", path, rs["samples"].line)
    seed = _int(rs["seed"], path) if "seed" in rs else 0
    sigma = _floats(rs["sigma"], 1, path) if "sigma" in rs else DEFAULT_SIGMA
    config = RenderConfig(backend, samples, seed, sigma)
    return Scene(mesh, camera, brdf, lighting, background, config)


def _parse_envmap(es, base, path):
    if "path" in es and "color" in es:
        raise AssetError("[envmap] takes either path or color", path, es["color"].line)
    scale = _floats(es["scale"], 1, path) if "scale" in es else 1.0
    if "path" in es:
        env = _load_with_context(load_hdr, _resolve(base, es["path"]), path, es["path"])
    elif "color" in es:
        w = _int(es["width"], path) if "width" in es else 32
        h = _int(es["height"], path) if "height" in es else 16
        env = EquirectImage.constant(_floats(es["color"], 3, path), w, h)
    else:
        raise AssetError("missing required key 'path' in [envmap]", path)
    return EquirectImage(env.pixels * scale) if scale != 1.0 else env


def _parse_sg_light(ss, path):
    count = _int(ss["count"], path) if "count" in ss else SCENE_DEFAULT_K
    if count < 1:
        raise AssetError("count must be >= 1", path, ss["count"].line)
    init = ss["init"].value if "init" in ss else None
    if init not in (None, "fibonacci"):
        raise AssetError(f"unknown init {init!r}", path, ss["init"].line)
    axes = mk.fibonacci_sphere(count)
    sharp = np.full(count, _floats(ss["sharpness"], 1, path) if "sharpness" in ss else count / 2.0)
    amp = np.tile(_floats(ss["amplitude"], 3, path) if "amplitude" in ss else (1.0, 1.0, 1.0), (count, 1))
    given = {}
    for key, entry in ss.items():
        m = _INDEXED_SG_KEYS.match(key)
        if m:
            k = int(m.group(2))
            if k >= count:
                raise AssetError(f"lobe index {k} >= count {count}", path, entry.line)
            given.setdefault(m.group(1), set()).add(k)
            if m.group(1) == "axis":
                axes[k] = mk.normalize(np.array(_floats(entry, 3, path)))
            elif m.group(1) == "sharpness":
                sharp[k] = _floats(entry, 1, path)
            else:
                amp[k] = _floats(entry, 3, path)
    if init is None and set(given.get("axis", ())) != set(range(count)):
        raise AssetError("[sg_light] needs axis.<k> for every lobe or init = fibonacci", path)
    if np.any(sharp < 0) or np.any(amp < 0):
        raise AssetError("sharpness and amplitude must be non-negative", path)
    return SgEnvLight(axes, sharp, amp)


def parse_scene(path):
    return scene_from_config(read_config(path, _SCENE_KEYS), path)


SCENE_SECTIONS = _SCENE_KEYS


def format_float(x):
    return repr(float(x))


def _vec(v):
    return " ".join(format_float(x) for x in np.asarray(v).ravel())


def format_sg_light(light):
    lines = ["[sg_light]", f"count = {light.count}"]
    for k in range(light.count):
        lines.append(f"axis.{k} = {_vec(light.axes[k])}")
        lines.append(f"sharpness.{k} = {format_float(light.sharpness[k])}")
        lines.append(f"amplitude.{k} = {_vec(light.amplitude[k])}")
    return "\n".join(lines) + "\n"


def save_scene(scene, path):
    """Write ``scene`` and its assets next to ``path``; returns written files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    written = [path]
    mesh_path = Path(f"{stem}_mesh.obj")
    write_obj(scene.mesh, mesh_path)
    written.append(mesh_path)
    tex_path = Path(f"{stem}_albedo.pfm")
    write_pfm(scene.brdf.albedo_texture, tex_path)
    written.append(tex_path)
    cam = scene.camera
    out = [
        "[mesh]", f"path = {mesh_path.name}", "",
        "[camera]", f"eye = {_vec(cam.eye)}", f"lookat = {_vec(cam.lookat)}", f"up = {_vec(cam.up)}",
        f"fov_deg = {format_float(np.degrees(cam.fov))}", f"width = {cam.width}", f"height = {cam.height}", "",
        "[brdf]", f"texture = {tex_path.name}", f"specular = {format_float(scene.brdf.specular)}",
        f"roughness = {format_float(scene.brdf.roughness)}", f"metalness = {format_float(scene.brdf.metalness)}", "",
    ]
    if isinstance(scene.lighting, EquirectImage):
        env_path = Path(f"{stem}_env.pfm")
        write_pfm(scene.lighting.pixels, env_path)
        written.append(env_path)
        out += ["[envmap]", f"path = {env_path.name}", ""]
    else:
        out += [format_sg_light(scene.lighting)]
    if isinstance(scene.background, EquirectImage):
        bg_path = Path(f"{stem}_background.pfm")
        write_pfm(scene.background.pixels, bg_path)
        written.append(bg_path)
        out += ["[background]", f"path = {bg_path.name}", ""]
    else:
        out += ["[background]", f"color = {_vec(scene.background)}", ""]
    c = scene.config
    out += ["[render]", f"backend = {c.backend}", f"samples = {c.samples}", f"seed = {c.seed}",
            f"sigma = {format_float(c.sigma)}"]
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return written


def load_mask(path):
    """A single-channel mask in [0, 1] from any supported image."""
    arr = read_image(path)
    return np.clip(arr.mean(axis=2), 0.0, 1.0)

