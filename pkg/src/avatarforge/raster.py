"""Software rasterizer, texture shading and the UV unwrapping operator.

Conventions:

* pixel ``(row, col)`` has its sample point at ``(col + 0.5, row + 0.5)``;
* a pixel lying exactly on an edge belongs to the triangle whose interior
  normal of that edge points right, or straight down (top-left rule);
* UV ``(u, v)`` maps to texel coordinates ``(u * W, v * H)`` with ``v = 0``
  on the top row, so texel ``(r, c)`` is centred at ``((c + .5) / W, (r + .5) / H)``;
* bilinear lookups clamp to the edge.

Visibility and correspondences are discrete. Everything that moves values
from one domain to another is exposed as a constant sparse matrix so the
neural pipeline can push Tensors through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .headmodel import Camera, RigError
from .mesh import PART_NAMES, RiggedMesh, weld_map

NEAR = 1e-6


@dataclass
class UvImage:
    """Texture-space grid ``H x W x C`` with a binary validity mask."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = np.asarray(self.data, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != tuple(self.data.shape[:2]):
            raise ValueError(f"mask {self.mask.shape} does not match grid {self.data.shape}")

    @property
    def shape(self):
        return tuple(self.data.shape)

    @classmethod
    def full(cls, data) -> "UvImage":
        return cls(data, np.ones(tuple(np.shape(data if not isinstance(data, Tensor) else data.data))[:2]))

    def validate(self) -> "UvImage":
        d = self.data.data if isinstance(self.data, Tensor) else self.data
        if not np.all(np.isfinite(d)):
            raise ValueError("UvImage holds non-finite values")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("UvImage mask must be binary")
        return self


@dataclass
class RasterMap:
    """Per-pixel rasterization record; ``face_id == -1`` marks background."""

    face_id: np.ndarray   # H x W int
    bary: np.ndarray      # H x W x 3, perspective-correct
    depth: np.ndarray     # H x W camera z (0 on background)
    uv: np.ndarray        # H x W x 2
    normal: np.ndarray    # H x W x 3 unit world-space normal
    part: np.ndarray      # H x W x P one-hot
    faces: np.ndarray     # M x 3, the triangles the ids refer to
    n_vertices: int

    @property
    def resolution(self) -> tuple[int, int]:
        return self.face_id.shape

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0

    def vertex_ids(self) -> np.ndarray:
        """H x W x 3 vertex indices of the covering face (0 on background)."""
        return self.faces[np.maximum(self.face_id, 0)]


# -- triangle scan conversion -------------------------------------------------

def _scan(xy: np.ndarray, faces: np.ndarray, H: int, W: int):
    """Candidate (face, pixel) pairs inside each triangle, plus affine barycentrics.

    ``xy`` are vertex positions in pixel units. Returns ``(face, row, col, l)``
    with ``l`` the screen-space barycentrics (sum to 1) and ``area`` the
    signed doubled area per face.
    """
    tri = xy[faces]  # M x 3 x 2
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    with np.errstate(invalid="ignore"):
        lo = np.ceil(tri.min(axis=1) - 0.5)  # first pixel centre >= min
        hi = np.floor(tri.max(axis=1) - 0.5)
    lo = np.maximum(np.nan_to_num(lo, nan=0.0, posinf=W, neginf=0.0), 0).astype(np.int64)
    hi_x = np.minimum(np.nan_to_num(hi[:, 0], nan=-1.0, posinf=W, neginf=-1.0), W - 1).astype(np.int64)
    hi_y = np.minimum(np.nan_to_num(hi[:, 1], nan=-1.0, posinf=H, neginf=-1.0), H - 1).astype(np.int64)
    nx = np.maximum(hi_x - lo[:, 0] + 1, 0)
    ny = np.maximum(hi_y - lo[:, 1] + 1, 0)
    ok = (area != 0) & np.isfinite(area)
    count = np.where(ok, nx * ny, 0)
    total = int(count.sum())
    if total == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e, np.zeros((0, 3)), area
    face = np.repeat(np.arange(len(faces)), count)
    local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    col = lo[face, 0] + local % nx[face]
    row = lo[face, 1] + local // nx[face]
    px, py = col + 0.5, row + 0.5

    sign = np.sign(area)[face]
    edges = []
    for i in range(3):
        p0, p1 = tri[face, (i + 1) % 3], tri[face, (i + 2) % 3]
        ex, ey = p1[:, 0] - p0[:, 0], p1[:, 1] - p0[:, 1]
        e = sign * (ex * (py - p0[:, 1]) - ey * (px - p0[:, 0]))
        # interior normal of edge i after orienting the triangle positively
        nx_i, ny_i = -sign * ey, sign * ex
        top_left = (nx_i > 0) | ((nx_i == 0) & (ny_i > 0))
        edges.append((e, top_left))
    inside = np.ones(total, dtype=bool)
    for e, tl in edges:
        inside &= (e > 0) | ((e == 0) & tl)
    w = np.stack([e for e, _ in edges], axis=1)[inside]
    l = w / w.sum(axis=1, keepdims=True)
    return face[inside], row[inside], col[inside], l, area


def _resolve(face, row, col, depth, H: int, W: int):
    """Z-buffer: nearest depth wins, ties go to the lower face id."""
    pix = row * W + col
    order = np.lexsort((face, depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    return order[first]


def rasterize_points(xy: np.ndarray, z: np.ndarray, faces: np.ndarray, H: int, W: int,
                     cull_sign: float | None = None):
    """Scan-convert triangles given pixel-space vertices and per-vertex depth.

    Returns ``face_id (H, W)``, perspective-correct barycentrics ``(H, W, 3)``
    and depth ``(H, W)``. Faces whose signed screen area has sign
    ``cull_sign`` (or is zero) are skipped, as are faces touching the near plane.
    """
    faces = np.asarray(faces, dtype=np.int64)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    if len(faces) == 0:
        return face_id, bary, depth
    keep = np.all(z[faces] > NEAR, axis=1) & np.all(np.isfinite(xy[faces]), axis=(1, 2))
    idx = np.flatnonzero(keep)
    f, r, c, l, area = _scan(xy, faces[idx], H, W)
    if cull_sign is not None:
        front = np.sign(area) != cull_sign
        sel = front[f]
        f, r, c, l = f[sel], r[sel], c[sel], l[sel]
    if len(f) == 0:
        return face_id, bary, depth
    inv_z = 1.0 / z[faces[idx][f]]  # K x 3
    q = l * inv_z
    s = q.sum(axis=1)
    b = q / s[:, None]
    d = 1.0 / s
    win = _resolve(idx[f], r, c, d, H, W)
    face_id[r[win], c[win]] = idx[f[win]]
    bary[r[win], c[win]] = b[win]
    depth[r[win], c[win]] = d[win]
    return face_id, bary, depth


# -- normals ------------------------------------------------------------------

def _gather_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    k = len(index)
    return sp.csr_matrix((np.ones(k), (np.arange(k), index)), shape=(k, n))


def _normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ad.sqrt(ad.tsum(x * x, axis=1, keepdims=True) + eps)
    return x / ad.matmul(norm, Tensor(np.ones((1, x.shape[1]), dtype=x.dtype)))


def vertex_normal_operator(vertices: np.ndarray, faces: np.ndarray):
    """Sparse pieces for area-weighted smooth normals, shared across UV seams.

    Returns ``(G0, G1, G2, S)``: ``Gi`` gathers corner ``i`` of every face and
    ``S`` (N x M) sums face normals onto all vertices coincident with a corner.
    """
    n = len(vertices)
    _, group = weld_map(vertices)
    G = [_gather_matrix(faces[:, i], n) for i in range(3)]
    M = len(faces)
    inc = sp.csr_matrix(
        (np.ones(3 * M), (group[faces.reshape(-1)], np.repeat(np.arange(M), 3))),
        shape=(group.max() + 1 if n else 0, M),
    )
    member = _gather_matrix(group, inc.shape[0])  # N x groups
    return G[0], G[1], G[2], (member @ inc).tocsr()


def vertex_normals(vertices, faces: np.ndarray, welded_with: np.ndarray | None = None):
    """Unit smooth normals; accepts an array or a Tensor (differentiable).

    ``welded_with`` selects the positions used to find coincident vertices
    (defaults to ``vertices`` themselves).
    """
    is_t = isinstance(vertices, Tensor)
    V = vertices if is_t else Tensor(np.asarray(vertices, dtype=np.float64))
    ref = V.data if welded_with is None else welded_with
    G0, G1, G2, S = vertex_normal_operator(ref, np.asarray(faces))
    a, b, c = ad.sparse_matmul(G0, V), ad.sparse_matmul(G1, V), ad.sparse_matmul(G2, V)
    e1, e2 = b - a, c - a
    comp = [lambda t, i=i: t[:, i : i + 1] for i in range(3)]
    cx = comp[1](e1) * comp[2](e2) - comp[2](e1) * comp[1](e2)
    cy = comp[2](e1) * comp[0](e2) - comp[0](e1) * comp[2](e2)
    cz = comp[0](e1) * comp[1](e2) - comp[1](e1) * comp[0](e2)
    fn = ad.concat([cx, cy, cz], axis=1)
    out = _normalize_rows(ad.sparse_matmul(S, fn))
    return out if is_t else out.data


# -- rasterize / shade ---------------------------------------------------------

def rasterize(mesh: RiggedMesh, camera: Camera, resolution) -> RasterMap:
    """Z-buffered, back-face-culled perspective rasterization of an animated mesh."""
    camera.validate()
    H, W = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    if mesh.n_faces == 0:
        raise RigError("cannot rasterize an empty mesh")
    xy, z = camera.project(mesh.vertices)
    # with y pointing down, a triangle that is counter-clockwise as seen by the
    # camera has negative signed area in pixel coordinates
    flip = np.sign(camera.fx * camera.fy)
    face_id, bary, depth = rasterize_points(xy, z, mesh.faces, H, W, cull_sign=flip)
    covered = face_id >= 0
    vid = mesh.faces[np.maximum(face_id, 0)]
    w = bary * covered[..., None]
    uv = np.einsum("hwk,hwkc->hwc", w, mesh.uv[vid])
    vn = vertex_normals(mesh.vertices, mesh.faces)
    nrm = np.einsum("hwk,hwkc->hwc", w, vn[vid])
    nlen = np.linalg.norm(nrm, axis=-1, keepdims=True)
    nrm = np.where(nlen > 0, nrm / np.where(nlen > 0, nlen, 1.0), 0.0)
    corner = np.argmax(bary, axis=-1)
    label = np.take_along_axis(mesh.part_labels[vid], corner[..., None], axis=-1)[..., 0]
    part = np.zeros((H, W, len(PART_NAMES)))
    rr, cc = np.nonzero(covered)
    part[rr, cc, label[rr, cc]] = 1.0
    return RasterMap(face_id, bary, depth, uv, nrm, part, mesh.faces.copy(), mesh.n_vertices)


def interpolation_matrix(rmap: RasterMap) -> sp.csr_matrix:
    """(H*W) x N matrix mapping per-vertex values to per-pixel barycentric blends."""
    H, W = rmap.resolution
    pix = np.flatnonzero(rmap.covered.reshape(-1))
    vid = rmap.vertex_ids().reshape(-1, 3)[pix]
    b = rmap.bary.reshape(-1, 3)[pix]
    return sp.csr_matrix(
        (b.reshape(-1), (np.repeat(pix, 3), vid.reshape(-1))), shape=(H * W, rmap.n_vertices)
    )


def bilinear_matrix(x: np.ndarray, y: np.ndarray, H: int, W: int, rows: np.ndarray | None = None,
                    n_rows: int | None = None) -> sp.csr_matrix:
    """Sparse bilinear lookup into an ``H x W`` grid at continuous texel coords.

    ``(x, y)`` are in sample units where integer values hit texel centres.
    Row ``rows[k]`` of the result receives sample ``k``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rows = np.arange(len(x)) if rows is None else np.asarray(rows)
    n_rows = len(x) if n_rows is None else n_rows
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    ri, ci, vals = [], [], []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            cx = np.clip(x0 + dx, 0, W - 1)
            cy = np.clip(y0 + dy, 0, H - 1)
            ri.append(rows)
            ci.append(cy * W + cx)
            vals.append(wx * wy)
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(n_rows, H * W)
    )
    M.sum_duplicates()
    M.eliminate_zeros()
    return M


def uv_sampling_matrix(uv: np.ndarray, H: int, W: int, rows=None, n_rows=None) -> sp.csr_matrix:
    uv = np.asarray(uv, dtype=np.float64)
    return bilinear_matrix(uv[:, 0] * W - 0.5, uv[:, 1] * H - 0.5, H, W, rows, n_rows)


def texture_sampling_matrix(rmap: RasterMap, tex_h: int, tex_w: int) -> sp.csr_matrix:
    """(H*W) x (tex_h*tex_w) bilinear lookup at each covered pixel's UV."""
    H, W = rmap.resolution
    pix = np.flatnonzero(rmap.covered.reshape(-1))
    uv = rmap.uv.reshape(-1, 2)[pix]
    return uv_sampling_matrix(uv, tex_h, tex_w, rows=pix, n_rows=H * W)


def _grid(x):
    if isinstance(x, UvImage):
        return x.data
    return x


def _apply_grid(S: sp.csr_matrix, grid, out_hw):
    """Apply a pixel/texel operator to an ``h x w x C`` array or Tensor."""
    grid = _grid(grid)
    if isinstance(grid, Tensor):
        C = grid.shape[2]
        return ad.sparse_matmul(S, grid.reshape(-1, C)).reshape(out_hw[0], out_hw[1], C)
    g = np.asarray(grid, dtype=np.float64)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[..., None]
    out = np.asarray(S @ g.reshape(-1, g.shape[2])).reshape(out_hw[0], out_hw[1], g.shape[2])
    return out[..., 0] if squeeze else out


def shade_texture(rmap: RasterMap, texture) -> np.ndarray | Tensor:
    """Bilinearly textured render; background pixels are 0."""
    grid = _grid(texture)
    th, tw = grid.shape[:2]
    return _apply_grid(texture_sampling_matrix(rmap, th, tw), grid, rmap.resolution)


def render_normals(rmap: RasterMap, vertices=None) -> np.ndarray | Tensor:
    """Unit normal per covered pixel, zero elsewhere.

    With a Tensor of (animated) vertices the result is differentiable in them.
    """
    if vertices is None:
        return rmap.normal.copy()
    H, W = rmap.resolution
    vn = vertex_normals(vertices, rmap.faces)
    pn = ad.sparse_matmul(interpolation_matrix(rmap), vn)
    mask = Tensor(np.repeat(rmap.covered.reshape(-1, 1), 3, axis=1).astype(pn.dtype))
    return (_normalize_rows(pn) * mask).reshape(H, W, 3)


def render_mask(rmap: RasterMap) -> np.ndarray:
    return rmap.covered.astype(np.float64)


def render_parts(rmap: RasterMap) -> np.ndarray:
    return rmap.part.copy()


# -- unwrapping ----------------------------------------------------------------

def uv_rasterize(mesh: RiggedMesh, tex_res):
    """Face id and affine barycentrics per texel centre of the UV chart."""
    th, tw = (tex_res, tex_res) if np.isscalar(tex_res) else tuple(tex_res)
    xy = mesh.uv * np.array([tw, th])
    return rasterize_points(xy, np.ones(mesh.n_vertices), mesh.faces, th, tw, cull_sign=None)[:2]


def _face_neighbourhood_ok(faces: np.ndarray, group: np.ndarray, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """True where face ``g`` equals ``f`` or shares a (welded) vertex with it."""
    ok = g == f
    gv = group[faces[np.maximum(g, 0)]]
    fv = group[faces[f]]
    share = (gv[:, :, None] == fv[:, None, :]).any(axis=(1, 2))
    return ok | ((g >= 0) & share)


@dataclass
class UnwrapOperator:
    """Sparse ``(tex_h*tex_w) x (H*W)`` map from image pixels to visible texels."""

    matrix: sp.csr_matrix
    valid: np.ndarray    # tex_h x tex_w
    tex_shape: tuple[int, int]
    image_shape: tuple[int, int]

    def __call__(self, image):
        return _apply_grid(self.matrix, image, self.tex_shape)


def unwrap_operator(mesh: RiggedMesh, camera: Camera, image_res, tex_res,
                    rmap: RasterMap | None = None) -> UnwrapOperator:
    """Inverse-mapped unwrap: texel -> surface point -> pixel, with visibility test.

    A texel is valid when the pixel containing its projection is won by the
    texel's own face, and every bilinear tap lands on that face or a face
    sharing a vertex with it (so samples never blend across occlusion edges).
    """
    H, W = (image_res, image_res) if np.isscalar(image_res) else tuple(image_res)
    th, tw = (tex_res, tex_res) if np.isscalar(tex_res) else tuple(tex_res)
    if rmap is None:
        rmap = rasterize(mesh, camera, (H, W))
    tface, tbary = uv_rasterize(mesh, (th, tw))
    texels = np.flatnonzero(tface.reshape(-1) >= 0)
    f = tface.reshape(-1)[texels]
    b = tbary.reshape(-1, 3)[texels]
    P = np.einsum("kc,kcd->kd", b, mesh.vertices[mesh.faces[f]])
    xy, z = camera.project(P)
    px, py = xy[:, 0], xy[:, 1]
    inside = np.isfinite(px) & np.isfinite(py) & (z > NEAR) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    col = np.clip(np.floor(np.where(inside, px, 0)), 0, W - 1).astype(np.int64)
    row = np.clip(np.floor(np.where(inside, py, 0)), 0, H - 1).astype(np.int64)
    ok = inside & (rmap.face_id[row, col] == f)

    _, group = weld_map(mesh.vertices)
    sx, sy = px - 0.5, py - 0.5
    x0 = np.floor(np.where(ok, sx, 0)).astype(np.int64)
    y0 = np.floor(np.where(ok, sy, 0)).astype(np.int64)
    for dy in (0, 1):
        for dx in (0, 1):
            r = np.clip(y0 + dy, 0, H - 1)
            c = np.clip(x0 + dx, 0, W - 1)
            ok &= _face_neighbourhood_ok(mesh.faces, group, f, rmap.face_id[r, c])

    keep = texels[ok]
    M = bilinear_matrix(sx[ok], sy[ok], H, W, rows=keep, n_rows=th * tw)
    valid = np.zeros(th * tw)
    valid[keep] = 1.0
    return UnwrapOperator(M, valid.reshape(th, tw), (th, tw), (H, W))


def unwrap(source, mesh: RiggedMesh, camera: Camera, tex_resolution,
           rmap: RasterMap | None = None) -> UvImage:
    """Back-project ``source`` into UV space; invalid texels hold 0."""
    src = _grid(source)
    shape = src.shape
    op = unwrap_operator(mesh, camera, shape[:2], tex_resolution, rmap)
    return UvImage(op(src), op.valid)
