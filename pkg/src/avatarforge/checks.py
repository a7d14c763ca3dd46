"""Acceptance suites shared by ``avatarforge check`` and the test-suite.

Each suite returns a :class:`SuiteResult` with one row per individual check,
so the CLI can print a report and tests can assert on the verdict.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import losses as L
from . import neural as nn
from .assets import make_mini_rig
from .autodiff import Tensor
from .config import PAPER_DELTAS, Config
from .headmodel import Camera, PoseParams, animate, regress_joints
from .mesh import PART_INDEX, PART_NAMES, is_consistently_oriented, is_edge_manifold, mesh_equal, unique_edges
from .raster import rasterize, rasterize_points, shade_texture, unwrap_operator, vertex_normals
from .remesh import topology_correct

GRAD_TOL = 1e-4
GRAD_TRIALS = 10
ROUNDTRIP_PSNR = 40.0
WEIGHT_TOL = 1e-9
JOINT_TOL = 1e-6


@dataclass
class CheckRow:
    name: str
    value: float
    bound: float
    passed: bool

    def line(self) -> str:
        mark = "ok  " if self.passed else "FAIL"
        return f"  [{mark}] {self.name:<34} {self.value:.3e} (bound {self.bound:.1e})"


@dataclass
class SuiteResult:
    name: str
    rows: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    def add(self, name: str, value: float, bound: float, passed: bool | None = None) -> None:
        ok = value <= bound if passed is None else passed
        self.rows.append(CheckRow(name, float(value), float(bound), bool(ok)))

    def report(self) -> str:
        head = f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({len(self.rows)} checks, {self.seconds:.1f} s)"
        return "\n".join([head] + [r.line() for r in self.rows])


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# -- gradient suite ---------------------------------------------------------------------

def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _away_from(x: np.ndarray, kinks, margin: float = 1e-3) -> np.ndarray:
    for k in kinks:
        x = np.where(np.abs(x - k) < margin, k + 0.1, x)
    return x


def _op_cases():
    """name -> builder(rng) returning (fn, inputs) with randomly drawn shapes."""

    def dims(rng, n=2, lo=1, hi=5):
        return tuple(int(d) for d in rng.integers(lo, hi + 1, size=n))

    def unary(op, kinks=()):
        def build(rng):
            x = _away_from(rng.normal(size=dims(rng)), kinks)
            return op, [_t(x)]
        return build

    def binary(op):
        def build(rng):
            s = dims(rng)
            return op, [_t(rng.normal(size=s)), _t(rng.normal(size=s))]
        return build

    def matmul(rng):
        n, k, m = dims(rng, 3)
        return ad.matmul, [_t(rng.normal(size=(n, k))), _t(rng.normal(size=(k, m)))]

    def sparse(rng):
        n, m, c = dims(rng, 3, 2, 6)
        S = sp.random(n, m, density=0.5, random_state=int(rng.integers(1 << 30)), format="csr")
        return (lambda x: ad.sparse_matmul(S, x)), [_t(rng.normal(size=(m, c)))]

    def bmv(rng):
        n, = dims(rng, 1)
        A = rng.normal(size=(n, 3, 3))
        return (lambda x: ad.bmv(A, x)), [_t(rng.normal(size=(n, 3)))]

    def softmax(rng):
        axis = int(rng.integers(2))
        return (lambda x: ad.softmax(x, axis=axis)), [_t(rng.normal(size=dims(rng)))]

    def concat(rng):
        n, a, b = dims(rng, 3)
        return (lambda x, y: ad.concat([x, y], axis=1)), [_t(rng.normal(size=(n, a))), _t(rng.normal(size=(n, b)))]

    def getitem(rng):
        n, m = dims(rng, 2, 2, 6)
        return (lambda x: x[1:, ::2]), [_t(rng.normal(size=(n, m)))]

    def reshape(rng):
        n, m = dims(rng)
        return (lambda x: x.reshape(m, n)), [_t(rng.normal(size=(n, m)))]

    def transpose(rng):
        return (lambda x: x.T), [_t(rng.normal(size=dims(rng)))]

    def tsum(rng):
        axis = int(rng.integers(2))
        return (lambda x: ad.tsum(x, axis=axis)), [_t(rng.normal(size=dims(rng)))]

    def mean(rng):
        axis = int(rng.integers(2))
        return (lambda x: ad.mean(x, axis=axis, keepdims=True)), [_t(rng.normal(size=dims(rng)))]

    def mse(rng):
        s = dims(rng)
        return ad.mse, [_t(rng.normal(size=s)), _t(rng.normal(size=s))]

    def bias(rng):
        n, m = dims(rng)
        return ad.add, [_t(rng.normal(size=(n, m))), _t(rng.normal(size=m))]

    def conv(pad):
        def build(rng):
            h, w, ci, co = dims(rng, 4, 1, 4)
            k = 1 if rng.uniform() < 0.2 else 3
            return (lambda x, wt, b: ad.conv2d(x, wt, b, pad_mode=pad)), [
                _t(rng.normal(size=(h + 1, w + 1, ci))), _t(rng.normal(size=(k, k, ci, co))), _t(rng.normal(size=co))]
        return build

    def avg_pool(rng):
        k = int(rng.integers(1, 4))
        h, w, c = dims(rng, 3, 1, 3)
        return (lambda x: ad.avg_pool(x, k)), [_t(rng.normal(size=(h * k, w * k, c)))]

    return {
        "add": binary(ad.add), "sub": binary(ad.sub), "mul": binary(ad.mul),
        "div": binary(lambda a, b: ad.div(a, b * b + 1.0)),
        "scale": unary(lambda x: ad.scale(x, -1.7)),
        "sigmoid": unary(ad.sigmoid), "tanh": unary(ad.tanh), "relu": unary(ad.relu, kinks=(0.0,)),
        "exp": unary(ad.exp), "sqrt": unary(lambda x: ad.sqrt(x * x + 0.5)),
        "clamp": unary(lambda x: ad.clamp(x, -0.5, 0.5), kinks=(-0.5, 0.5)),
        "matmul": matmul, "sparse_matmul": sparse, "bmv": bmv, "softmax": softmax,
        "concat": concat, "getitem": getitem, "reshape": reshape, "transpose": transpose,
        "sum": tsum, "mean": mean, "mse": mse, "bias_add": bias,
        "conv2d": conv("zeros"), "conv2d_edge": conv("edge"), "avg_pool": avg_pool,
    }


def _block_cases():
    """name -> builder(rng) returning (fn, inputs) for every neural block and differentiable loss."""

    def store():
        return nn.ParamStore(np.float64)

    def generic(st, rng):
        # zero-initialised biases put relu inputs exactly on the kink; jitter every
        # parameter so the check runs at a generic point
        for t in st.tensors():
            t.data = t.data + 0.1 * rng.normal(size=t.shape)
        return st.tensors()

    def linear(rng):
        a, b, n = (int(v) for v in rng.integers(1, 6, size=3))
        st = store()
        nn.init_linear(st, "l", a, b, rng)
        return (lambda x, *p: nn.linear(x, st, "l")), [_t(rng.normal(size=(n, a)))] + generic(st, rng)

    def mlp(rng):
        a, h, b, n = (int(v) for v in rng.integers(1, 6, size=4))
        st = store()
        nn.init_mlp(st, "m", [a, h, b], rng)
        return (lambda x, *p: nn.mlp(x, st, "m")), [_t(rng.normal(size=(n, a)))] + generic(st, rng)

    def attention(rng):
        heads = int(rng.integers(1, 3))
        dim = heads * int(rng.integers(1, 4))
        nq, nc = (int(v) for v in rng.integers(1, 5, size=2))
        st = store()
        nn.init_cross_attention(st, "a", dim, heads, rng)
        return (lambda q, c, *p: nn.cross_attention_layer(q, c, st, "a", heads)), [
            _t(rng.normal(size=(nq, dim))), _t(rng.normal(size=(nc, dim)))] + generic(st, rng)

    def conv_gru(rng):
        h, w, ci, ch = (int(v) for v in rng.integers(1, 5, size=4))
        st = store()
        nn.init_conv_gru(st, "g", ci, ch, rng)
        return (lambda x, hh, *p: nn.conv_gru_cell(x, hh, st, "g")), [
            _t(rng.normal(size=(h, w, ci))), _t(0.5 * rng.normal(size=(h, w, ch)))] + generic(st, rng)

    def vec_gru(rng):
        n, ci, ch = (int(v) for v in rng.integers(1, 6, size=3))
        st = store()
        nn.init_vec_gru(st, "g", ci, ch, rng)
        return (lambda x, hh, *p: nn.vec_gru_cell(x, hh, st, "g")), [
            _t(rng.normal(size=(n, ci))), _t(0.5 * rng.normal(size=(n, ch)))] + generic(st, rng)

    def patch_encoder(rng):
        patch = int(rng.choice([2, 4]))
        g = int(rng.integers(1, 4))
        dim = int(rng.integers(2, 5))
        st = store()
        nn.init_patch_encoder(st, "e", patch, dim, rng)
        return (lambda x, *p: nn.patch_encoder(x, st, "e", patch)), [
            _t(rng.uniform(size=(g * patch, g * patch, 3)))] + generic(st, rng)

    def tex_decoder(rng):
        g = int(rng.integers(1, 3))
        n_up = int(rng.integers(1, 3))
        dim, c_a = (int(v) for v in rng.integers(1, 4, size=2))
        chans = [int(v) for v in rng.integers(1, 4, size=n_up)]
        st = store()
        nn.init_tex_decoder(st, "d", dim, chans, c_a, rng)

        def fn(tok, *p):
            tex, feat = nn.tex_decoder(tok, st, "d", n_up)
            return ad.concat([tex, feat], axis=2)

        return fn, [_t(rng.normal(size=(g, g, dim)))] + generic(st, rng)

    def upsample(rng):
        h, w, c = (int(v) for v in rng.integers(1, 4, size=3))
        f = int(rng.choice([2, 4]))
        return (lambda x: nn.upsample(x, f)), [_t(rng.normal(size=(h, w, c)))]

    def vertex_normals_case(rng):
        n = int(rng.integers(4, 8))
        V = rng.normal(size=(n, 3))
        F = np.array([rng.choice(n, 3, replace=False) for _ in range(int(rng.integers(2, 6)))])
        return (lambda v: vertex_normals(v, F)), [_t(V)]

    def loss_img(rng):
        s = 8 * int(rng.integers(1, 3))
        m = (rng.uniform(size=(s, s)) > 0.3).astype(float)
        b = rng.uniform(size=(s, s, 3))
        return (lambda a: L.loss_img(a, b, m)), [_t(rng.uniform(size=(s, s, 3)))]

    def loss_normal(rng):
        s = int(rng.integers(2, 6))
        m = (rng.uniform(size=(s, s)) > 0.3).astype(float)
        b = rng.normal(size=(s, s, 3))
        return (lambda a: L.loss_normal(a, b, m)), [_t(rng.normal(size=(s, s, 3)))]

    def loss_laplacian(rng):
        n = int(rng.integers(4, 9))
        fan = [[0, i, i + 1] for i in range(1, n - 1)]  # every vertex has a neighbour
        F = np.array(fan + [list(rng.choice(n, 3, replace=False)) for _ in range(int(rng.integers(0, 4)))])
        return (lambda v: L.loss_laplacian(v, F, weld=False)), [_t(rng.normal(size=(n, 3)))]

    return {
        "linear": linear, "mlp": mlp, "cross_attention": attention, "conv_gru_cell": conv_gru,
        "vec_gru_cell": vec_gru, "patch_encoder": patch_encoder, "tex_decoder": tex_decoder,
        "upsample": upsample, "vertex_normals": vertex_normals_case, "loss_img": loss_img,
        "loss_normal": loss_normal, "loss_laplacian": loss_laplacian,
    }


def _projected(fn, inputs, rng):
    """Scalarise ``fn`` with fixed random weights so every output entry matters."""
    out = fn(*inputs)
    if out.ndim == 0:
        return fn
    w = _t(rng.normal(size=out.shape))
    return lambda *xs: ad.tsum(fn(*xs) * w)


def gradient_error(name: str, builder, trials: int = GRAD_TRIALS) -> float:
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(trials):
        fn, inputs = builder(rng)
        worst = max(worst, ad.check_gradients(_projected(fn, inputs, rng), inputs))
    return worst


@_timed
def grad_suite(trials: int = GRAD_TRIALS) -> SuiteResult:
    """Central finite differences (h = 1e-5, float64) on every op and block."""
    res = SuiteResult("grad")
    for prefix, cases in (("op", _op_cases()), ("block", _block_cases())):
        for name, builder in cases.items():
            res.add(f"{prefix}:{name}", gradient_error(name, builder, trials), GRAD_TOL)
    return res


# -- geometry suite -----------------------------------------------------------------------

def deformation_fixture(seed: int, rig=None):
    """A randomly deformed copy of the mini-rig plus the reference data it must preserve.

    Smooth bumps of random amplitude stretch some edges past epsilon; some
    fixtures also collapse an edge (creating zero-area faces) or flip the
    winding of a few faces.
    """
    rig = make_mini_rig("desk") if rig is None else rig
    rng = np.random.default_rng([seed, 0x6E0])
    V = rig.vertices.copy()
    template = rig.vertices
    joints = rig.joint_regressor @ template
    for _ in range(int(rng.integers(1, 4))):
        centre = rng.normal(size=3)
        centre /= np.linalg.norm(centre)
        d = np.linalg.norm(V / np.linalg.norm(V, axis=1, keepdims=True) - centre, axis=1)
        bump = rng.uniform(0.05, 0.4) * np.exp(-((d / rng.uniform(0.2, 0.6)) ** 2))
        V = V * (1.0 + bump[:, None])
    faces = rig.faces.copy()
    if rng.uniform() < 0.3:
        a, b = faces[int(rng.integers(len(faces)))][:2]
        V[a] = V[b]
    if rng.uniform() < 0.3:
        flip = rng.choice(len(faces), size=int(rng.integers(1, 6)), replace=False)
        faces[flip] = faces[flip][:, ::-1]
    mesh = rig.with_vertices(V)
    mesh.faces = faces
    e, _ = unique_edges(rig.faces)
    max_edge = np.linalg.norm(template[e[:, 0]] - template[e[:, 1]], axis=1).max()
    eps = float(max_edge * rng.uniform(0.7, 1.4))
    return mesh, template, joints, eps


def geometry_check(seed: int, rig=None) -> dict:
    mesh, template, joints, eps = deformation_fixture(seed, rig)
    out, prov = topology_correct(mesh, eps, template=template, joints=joints, return_provenance=True)
    new_template = prov.apply(template)
    again = topology_correct(out, eps, template=new_template, joints=joints)
    e, _ = unique_edges(out.faces)
    lengths = np.linalg.norm(out.vertices[e[:, 0]] - out.vertices[e[:, 1]], axis=1)
    return {
        "manifold": is_edge_manifold(out.faces),
        "oriented": is_consistently_oriented(out.faces),
        "weight_err": float(np.abs(out.skin_weights.sum(axis=1) - 1.0).max()),
        "joint_err": float(np.abs(out.joint_regressor @ new_template - joints).max()),
        "idempotent": mesh_equal(out, again),
        "max_edge_ratio": float(lengths.max() / eps),
        "grew": out.n_vertices - mesh.n_vertices,
    }


@_timed
def geometry_suite(n_fixtures: int = 100) -> SuiteResult:
    res = SuiteResult("geometry")
    rig = make_mini_rig("desk")
    stats = [geometry_check(s, rig) for s in range(n_fixtures)]
    res.add("fixtures", n_fixtures, n_fixtures)
    res.add("non-manifold outputs", sum(not s["manifold"] for s in stats), 0)
    res.add("inconsistently oriented outputs", sum(not s["oriented"] for s in stats), 0)
    res.add("max |sum(weights) - 1|", max(s["weight_err"] for s in stats), WEIGHT_TOL)
    res.add("max joint error", max(s["joint_err"] for s in stats), JOINT_TOL)
    res.add("non-idempotent outputs", sum(not s["idempotent"] for s in stats), 0)
    res.add("max edge / epsilon", max(s["max_edge_ratio"] for s in stats), 1.0)
    res.add("fixtures that were remeshed", sum(s["grew"] != 0 for s in stats), n_fixtures,
            passed=sum(s["grew"] != 0 for s in stats) > 0)
    return res


# -- round-trip suite ---------------------------------------------------------------------

def smooth_texture(rng, size: int) -> np.ndarray:
    v, u = (np.mgrid[0:size, 0:size] + 0.5) / size
    tex = np.full((size, size, 3), 0.5)
    for c in range(3):
        for _ in range(3):
            fu, fv = rng.integers(0, 3, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            tex[..., c] += rng.uniform(0.03, 0.1) * np.sin(2 * np.pi * fu * u + ph[0]) * np.cos(2 * np.pi * fv * v + ph[1])
    return np.clip(tex, 0.0, 1.0)


def random_camera(rng, res: int) -> tuple[Camera, np.ndarray]:
    """Frontal-ish camera with random distance and focal length, plus a random head rotation."""
    dist = rng.uniform(2.8, 4.0)
    cam = Camera.frontal(res, distance=dist, focal_scale=rng.uniform(1.0, 1.4) * dist / 3.2)
    rot = np.zeros(3)
    rot[1] = rng.uniform(-0.6, 0.6)
    rot[0] = rng.uniform(-0.25, 0.25)
    return cam, rot


def roundtrip_psnr(seed: int, rig=None, res: int = 128) -> tuple[float, int]:
    rig = make_mini_rig("desk") if rig is None else rig
    rng = np.random.default_rng([seed, 0x7A1])
    cam, rot = random_camera(rng, res)
    params = PoseParams.zeros(rig, 4, cam)
    params.shape_coeffs[:] = rng.normal(scale=0.5, size=4)
    params.joint_rotations[0] = rot
    posed = animate(rig.vertices, rig, params, regress_joints(rig, rig.vertices))
    tex = smooth_texture(rng, res)
    rmap = rasterize(posed, cam, res)
    image = shade_texture(rmap, tex)
    op = unwrap_operator(posed, cam, res, res, rmap)
    valid = op.valid > 0
    got = op(image)
    return L.psnr(got, tex, valid), int(valid.sum())


def random_small_mesh(rng, max_faces: int = 200):
    """Triangle soup or a perturbed low-resolution sphere, both at most ``max_faces`` faces."""
    if rng.uniform() < 0.5:
        m = int(rng.integers(1, max_faces + 1))
        V = rng.uniform(-1, 1, size=(3 * m, 3)) * [1.0, 1.0, 0.5]
        F = np.arange(3 * m).reshape(m, 3)
        return V, F
    n_lat, n_lon = int(rng.integers(3, 9)), int(rng.integers(4, 12))
    while 2 * n_lon * (n_lat - 1) > max_faces:
        n_lat -= 1
    verts = [[0.0, 1.0, 0.0]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append([np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)])
    verts.append([0.0, -1.0, 0.0])
    V = np.array(verts) * (1.0 + 0.15 * rng.normal(size=(len(verts), 1)))
    F = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        F.append([0, ring(1, j + 1), ring(1, j)])
        F.append([len(V) - 1, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            F += [[a, b, d], [a, d, c]]
    return V, np.array(F)


def coverage_oracle(xy: np.ndarray, z: np.ndarray, faces: np.ndarray, H: int, W: int, cull_sign) -> np.ndarray:
    """Per-pixel, per-face point-in-triangle test with the top-left fill rule."""
    cov = np.zeros((H, W), dtype=bool)
    for f in faces:
        if np.any(z[f] <= 1e-6):
            continue
        (x0, y0), (x1, y1), (x2, y2) = (tuple(map(float, xy[i])) for i in f)
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0 or (cull_sign is not None and np.sign(area) == cull_sign):
            continue
        if area < 0:  # make the winding positive
            (x1, y1), (x2, y2) = (x2, y2), (x1, y1)
        tri = ((x0, y0), (x1, y1), (x2, y2))
        for r in range(max(0, int(np.floor(min(y0, y1, y2)))), min(H, int(np.ceil(max(y0, y1, y2))) + 1)):
            for c in range(max(0, int(np.floor(min(x0, x1, x2)))), min(W, int(np.ceil(max(x0, x1, x2))) + 1)):
                px, py = c + 0.5, r + 0.5
                inside = True
                for k in range(3):
                    (ax, ay), (bx, by) = tri[k], tri[(k + 1) % 3]
                    e = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                    # left edges point up (dy < 0); top edges are horizontal and point right (dx > 0)
                    owns = (by - ay) < 0 or ((by - ay) == 0 and (bx - ax) > 0)
                    if not (e > 0 or (e == 0 and owns)):
                        inside = False
                        break
                if inside:
                    cov[r, c] = True
    return cov


def coverage_check(seed: int) -> int:
    """Number of pixels where the rasterizer and the oracle disagree."""
    rng = np.random.default_rng([seed, 0xC0F])
    V, F = random_small_mesh(rng)
    H, W = (int(v) for v in rng.integers(12, 33, size=2))
    xy = (V[:, :2] * 0.45 + 0.5) * [W, H] + rng.normal(scale=0.01, size=(len(V), 2))
    if seed % 4 == 0:  # snap to the pixel lattice so fill-rule ties actually occur
        xy = np.round(xy * 2) / 2
    z = 3.0 + V[:, 2]
    cull = [None, 1.0, -1.0][seed % 3]
    face_id, _, _ = rasterize_points(xy, z, F, H, W, cull_sign=cull)
    return int(np.count_nonzero((face_id >= 0) != coverage_oracle(xy, z, F, H, W, cull)))


@_timed
def roundtrip_suite(n_triples: int = 20, n_coverage: int = 20) -> SuiteResult:
    res = SuiteResult("roundtrip")
    rig = make_mini_rig("desk")
    vals = [roundtrip_psnr(s, rig) for s in range(n_triples)]
    worst = min(v[0] for v in vals)
    res.add("min render->unwrap PSNR (dB)", worst, ROUNDTRIP_PSNR, passed=worst >= ROUNDTRIP_PSNR)
    res.add("min valid texels", min(v[1] for v in vals), 1, passed=min(v[1] for v in vals) > 0)
    res.add("coverage mismatches vs oracle", sum(coverage_check(s) for s in range(n_coverage)), 0)
    return res


# -- clipping and loss arithmetic -----------------------------------------------------------

@_timed
def clipping_suite() -> SuiteResult:
    """Boundary values for every part and axis: at, just inside and beyond the clip range."""
    from .pipeline import clip_deformation

    res = SuiteResult("clipping")
    deltas = Config.desk().deltas
    for part in PART_NAMES:
        d = PAPER_DELTAS[part]
        for axis in range(3):
            for sign in (1.0, -1.0):
                probes = [d, np.nextafter(d, np.inf), 10 * d + 0.1, 0.5 * d, np.nextafter(d, 0.0)]
                x = np.zeros((len(probes), 3))
                x[:, axis] = sign * np.array(probes)
                got = clip_deformation(x, np.full(len(probes), PART_INDEX[part]), deltas)
                want = np.zeros_like(x)
                want[:, axis] = sign * np.minimum(np.array(probes), d)
                res.add(f"{part} axis {'xyz'[axis]} {'+' if sign > 0 else '-'}",
                        float(np.abs(got - want).max()), 0.0, passed=np.array_equal(got, want))
    return res


@_timed
def loss_arithmetic_suite() -> SuiteResult:
    res = SuiteResult("loss arithmetic")
    v = L.total_loss([1.0, 1.0], 0.8)
    res.add("total_loss((1,1), gamma=0.8) == 1.8", abs(v - 1.8), 0.0, passed=v == 1.8)
    w = L.combine_losses({k: 1.0 for k in L.LOSS_NAMES}, L.PAPER_LAMBDAS)
    res.add("lambda-weighted (1,1,1,1,1) == 5.5", abs(w - 5.5), 0.0, passed=w == 5.5)
    t = L.total_loss([2.0, 3.0], 0.8)
    res.add("gamma^(N-t) weights later terms", abs(t - (0.8 * 2.0 + 3.0)), 0.0, passed=t == 0.8 * 2.0 + 3.0)
    return res


# -- pipeline invariants --------------------------------------------------------------------

def _states_equal(a, b) -> bool:
    same = mesh_equal(a.mesh, b.mesh) and np.array_equal(a.anchors, b.anchors)
    for name in ("vertices", "delta_v", "h_geo", "f_v", "h_tex", "tex_logits"):
        same &= np.array_equal(getattr(a, name).data, getattr(b, name).data)
    return bool(same)


@_timed
def invariant_suite(seeds=(0, 1, 2), K: int = 3, push: float = 5.0) -> SuiteResult:
    """Exact pipeline invariants on untrained networks.

    ``push`` multiplies the displacement head so raw updates overshoot every
    clip range and the clamps (and usually the remesher) actually engage.
    """
    from .assets import make_synthetic_subject
    from .pipeline import evaluate, ground_truth, init_blocks, part_limits, run

    res = SuiteResult("invariants")
    rig = make_mini_rig("desk")
    base = Config.desk()
    blocks = init_blocks(base)
    subj = make_synthetic_subject(seeds[0], rig, base.image_res, base.tex_res)
    one = run(subj.input_image, subj.pose_params, subj.rig, blocks, K=1)
    two = run(subj.input_image, subj.pose_params, subj.rig, blocks, K=2)
    prefix = _states_equal(one.states[1], two.states[1]) and \
        np.array_equal(one.renders[1].image.data, two.renders[1].image.data)
    res.add("K=1 state equals K=2 prefix", 0.0 if prefix else 1.0, 0.0, passed=prefix)

    pushed = init_blocks(base.replace(delta_head_scale=base.delta_head_scale * push))
    violations = moved_eyes = at_bound = remeshed = 0
    drift = 0.0
    frozen = (PART_INDEX["eyeball"], PART_INDEX["eyelid"])
    for seed in seeds:
        subj = make_synthetic_subject(seed, rig, base.image_res, base.tex_res)
        result = run(subj.input_image, subj.pose_params, subj.rig, pushed, K=K)
        for st in result.states[1:]:
            lim = part_limits(st.mesh.part_labels, base.deltas)[:, None]
            lo, hi = st.anchors - lim, st.anchors + lim
            V = st.mesh.vertices
            violations += int(np.count_nonzero((V < lo) | (V > hi)))
            # the graph copy of V_t lives in the network dtype; it may differ by rounding only
            drift = max(drift, float(np.abs(st.vertices.data.astype(np.float64) - V).max()))
            at_bound += int(np.count_nonzero((V == lo) | (V == hi)))
            eyes = np.isin(st.mesh.part_labels, frozen)
            moved_eyes += int(np.count_nonzero(V[eyes] != st.anchors[eyes]))
            remeshed += int(st.mesh.n_vertices != subj.rig.n_vertices)
    res.add("vertices outside part bounds", violations, 0)
    res.add("components clamped at a bound", at_bound, 1, passed=at_bound > 0)
    res.add("graph copy of V_t vs mesh (max abs)", drift, 1e-6)
    res.add("eyeball/eyelid components moved", moved_eyes, 0)
    res.add("iterations that remeshed", remeshed, 0, passed=True)

    blocks.store.zero_grad()
    L_total, _, _ = evaluate(two, ground_truth(make_synthetic_subject(seeds[0], rig, base.image_res, base.tex_res)),
                             base)
    L_total.backward()
    dead = [n for n, t in blocks.store.items() if t.grad is None or not np.any(t.grad)]
    res.add("parameters without gradient", len(dead), 0)
    res.dead = dead
    return res


SUITES = {"grad": grad_suite, "geometry": geometry_suite, "roundtrip": roundtrip_suite}


def run_suites(names) -> list[SuiteResult]:
    return [SUITES[n]() for n in names]


__all__ = [
    "CheckRow", "SuiteResult", "SUITES", "clipping_suite", "coverage_check", "coverage_oracle",
    "deformation_fixture", "geometry_check", "geometry_suite", "grad_suite", "gradient_error", "invariant_suite",
    "loss_arithmetic_suite", "random_small_mesh", "roundtrip_psnr", "roundtrip_suite", "run_suites",
]
