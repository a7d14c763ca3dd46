"""The coupled geometry/texture refinement loop and its training harness.

One forward pass:

1. ``extract_features`` encodes the photo into tokens ``F_I`` and lets the
   template vertices (``F_V``) and a learnable token grid (``F_T``) attend to
   them through one shared attention stack. ``F_T`` is decoded into the
   initial texture ``T_0`` and a feature map ``F_a``.
2. For ``t = 0 .. K-1`` the current state is rendered with the input pose,
   the photo is unwrapped into UV space (``U_t``) and the render error is
   turned into UV features (``F_d``). ``deform_step`` then moves the vertices
   and ``texture_step`` refines the texture, both driven by GRUs.

Rasterization, unwrapping and topology correction are non-differentiable:
vertex positions enter each iteration as constants, while texture values,
normals and every network output stay in the graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import neural as nn
from .autodiff import Tensor
from .config import Config
from .headmodel import PoseParams, check_params, expression_offsets, regress_joints, shape_offsets, skinning_transforms
from .losses import per_iteration_loss, psnr, ssim, total_loss
from .mesh import PART_INDEX, PART_NAMES, RiggedMesh, unique_edges, weld_average_matrix
from .raster import (
    RasterMap,
    UvImage,
    rasterize,
    render_mask,
    render_normals,
    render_parts,
    shade_texture,
    unwrap_operator,
    uv_sampling_matrix,
)
from .remesh import topology_correct

PREFIX = "pipeline"


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: loss = {value}")
        self.step = step
        self.value = value


# -- parameters ------------------------------------------------------------------------

@dataclass
class Blocks:
    """All trainable parameters of the pipeline plus the config that shaped them."""

    store: nn.ParamStore
    config: Config

    @property
    def dtype(self):
        return self.store.dtype

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.store.tensors()))


def init_blocks(config: Config) -> Blocks:
    """Seed-deterministic initialisation of every block."""
    c = config.validate()
    rng = np.random.default_rng([c.seed, 0xB10C])
    st = nn.ParamStore(np.dtype(c.dtype))
    p = PREFIX
    pe = 3 + 6 * c.n_freq
    nn.init_patch_encoder(st, f"{p}.encoder", c.patch, c.dim, rng)
    nn.init_mlp(st, f"{p}.vertex_mlp", [pe, c.dim, c.dim], rng)
    st.add(f"{p}.tokens", rng.normal(scale=0.5, size=(c.token_grid * c.token_grid, c.dim)))
    for i in range(c.n_layers):
        nn.init_cross_attention(st, f"{p}.attn.{i}", c.dim, c.heads, rng)
    nn.init_tex_decoder(st, f"{p}.decoder", c.dim, c.dec_channels, c.c_a, rng)
    # error features (phi on the 9-channel input/render/difference stack)
    nn.init_conv(st, f"{p}.phi_err.0", 9, c.c_d, rng)
    nn.init_conv(st, f"{p}.phi_err.1", c.c_d, c.c_d, rng)
    # geometry branch
    nn.init_mlp(st, f"{p}.psi", [pe + c.c_d, c.c_psi, c.c_psi], rng)
    nn.init_linear(st, f"{p}.h_geo_init", c.dim, c.c_h_geo, rng)
    nn.init_vec_gru(st, f"{p}.gru_geo", c.c_psi + c.dim, c.c_h_geo, rng)
    nn.init_linear(st, f"{p}.delta_head", c.c_h_geo, 3, rng, scale=c.delta_head_scale)
    # texture branch
    nn.init_conv(st, f"{p}.phi_in.0", 7, c.c_phi, rng)
    nn.init_conv(st, f"{p}.phi_in.1", c.c_phi, c.c_phi, rng)
    nn.init_conv(st, f"{p}.phi_out.0", c.c_phi + c.c_a + c.c_d, c.c_phi, rng)
    nn.init_conv(st, f"{p}.phi_out.1", c.c_phi, c.c_phi, rng)
    nn.init_conv(st, f"{p}.h_tex_init", c.c_a, c.c_h_tex, rng)
    nn.init_conv_gru(st, f"{p}.gru_tex", c.c_phi, c.c_h_tex, rng)
    nn.init_conv(st, f"{p}.tex_head", c.c_h_tex, 3, rng, bias=False)
    return Blocks(st, c)


def _phi(x: Tensor, st: nn.ParamStore, name: str, relu_out: bool = False) -> Tensor:
    """The 2-layer 3x3 conv block."""
    x = ad.relu(nn.conv(x, st, f"{name}.0", pad_mode="edge"))
    x = nn.conv(x, st, f"{name}.1", pad_mode="edge")
    return ad.relu(x) if relu_out else x


# -- clipping ----------------------------------------------------------------------------

def part_limits(part_labels, deltas: dict) -> np.ndarray:
    """Per-vertex clip range from integer or string part labels."""
    labels = np.asarray(part_labels)
    if labels.dtype.kind in "US":
        unknown = sorted(set(labels.tolist()) - set(PART_NAMES))
        if unknown:
            raise ValueError(f"unknown part label(s) {unknown}")
        idx = np.array([PART_INDEX[s] for s in labels], dtype=np.int64)
    else:
        idx = labels.astype(np.int64)
        bad = (idx < 0) | (idx >= len(PART_NAMES))
        if bad.any():
            raise ValueError(f"unknown part label id(s) {sorted(set(idx[bad].tolist()))}")
    missing = set(PART_NAMES) - set(deltas)
    if missing:
        raise ValueError(f"no clip range for part(s) {sorted(missing)}")
    table = np.array([float(deltas[name]) for name in PART_NAMES])
    return table[idx]


def clip_deformation(delta_v, part_labels, deltas: dict):
    """Clamp every component of a total displacement to ``[-delta_part, +delta_part]``.

    Accepts an array or a Tensor (straight-through gradient inside the bounds).
    """
    lim = part_limits(part_labels, deltas)
    n = delta_v.shape[0] if isinstance(delta_v, Tensor) else len(delta_v)
    if len(lim) != n:
        raise ValueError(f"{n} displacements but {len(lim)} part labels")
    lim = np.repeat(lim[:, None], 3, axis=1)
    if isinstance(delta_v, Tensor):
        return ad.clamp(delta_v, -lim, lim)
    return np.clip(np.asarray(delta_v, dtype=np.float64), -lim, lim)


def remesh_epsilon(vertices: np.ndarray, faces: np.ndarray, scale: float) -> float:
    edges, _ = unique_edges(faces)
    return float(scale * np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1).max())


# -- state -------------------------------------------------------------------------------

@dataclass
class Context:
    """Per-run constants: the photo, its pose, the skeleton and V_0."""

    image: np.ndarray
    params: PoseParams
    joints: np.ndarray
    template: np.ndarray   # V_0: rig template with the subject's shape applied
    epsilon: float
    config: Config

    @property
    def resolution(self) -> int:
        return self.image.shape[0]


@dataclass
class PipelineState:
    t: int
    mesh: RiggedMesh        # canonical mesh V_t with its (possibly remeshed) rig
    vertices: Tensor        # V_t as a graph node (constant values equal mesh.vertices)
    anchors: np.ndarray     # V_0 carried through every remesh
    delta_v: Tensor
    h_geo: Tensor
    f_v: Tensor
    h_tex: Tensor
    tex_logits: Tensor
    f_a: Tensor
    unwrapped: UvImage | None = None
    f_d: UvImage | None = None
    f_d2v: Tensor | None = None

    @property
    def texture_tensor(self) -> Tensor:
        return ad.sigmoid(self.tex_logits)

    @property
    def texture(self) -> UvImage:
        return UvImage.full(self.texture_tensor.data.astype(np.float64))

    def displacement(self) -> np.ndarray:
        return self.mesh.vertices - self.anchors


@dataclass
class Render:
    """Everything the losses and the next iteration need from one state."""

    image: Tensor
    normal: Tensor
    mask: np.ndarray
    part: np.ndarray
    vertices: Tensor
    faces: np.ndarray
    posed: RiggedMesh
    rmap: RasterMap
    unwrapped: UvImage       # U_t at feature resolution (pooled)
    coverage: np.ndarray     # fraction of valid fine texels per feature texel
    f_d: UvImage
    f_d2v: Tensor

    def loss_inputs(self) -> dict:
        return {"image": self.image, "mask": self.mask, "normal": self.normal,
                "part": self.part, "vertices": self.vertices, "faces": self.faces}


# -- features ----------------------------------------------------------------------------

def _const(x, dtype) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def extract_features(input_image, template_vertices, blocks: Blocks):
    """(F_I, F_V, F_T); F_V and F_T pass through the same attention layers."""
    c, st = blocks.config, blocks.store
    img = np.asarray(input_image)
    if img.shape != (c.image_res, c.image_res, 3):
        raise ValueError(f"input image must be {c.image_res}x{c.image_res}x3, got {img.shape}")
    f_i = nn.patch_encoder(_const(img, blocks.dtype), st, f"{PREFIX}.encoder", c.patch)
    pe = _const(nn.positional_encoding(template_vertices, c.n_freq), blocks.dtype)
    f_v = nn.mlp(pe, st, f"{PREFIX}.vertex_mlp")
    f_t = st[f"{PREFIX}.tokens"]
    for i in range(c.n_layers):
        f_v = nn.cross_attention_layer(f_v, f_i, st, f"{PREFIX}.attn.{i}", c.heads)
        f_t = nn.cross_attention_layer(f_t, f_i, st, f"{PREFIX}.attn.{i}", c.heads)
    return f_i, f_v, f_t


def initial_state(ctx: Context, rig: RiggedMesh, blocks: Blocks) -> PipelineState:
    c, st = blocks.config, blocks.store
    _, f_v, f_t = extract_features(ctx.image, ctx.template, blocks)
    g = c.token_grid
    n_up = nn.decoder_stages(g, c.tex_res)
    _, f_a, logits = nn.tex_decoder(f_t.reshape(g, g, c.dim), st, f"{PREFIX}.decoder", n_up, return_logits=True)
    h_geo = ad.tanh(nn.linear(f_v, st, f"{PREFIX}.h_geo_init"))
    h_tex = ad.tanh(nn.conv(ad.avg_pool(f_a, c.feat_down), st, f"{PREFIX}.h_tex_init", pad_mode="edge"))
    mesh = rig.with_vertices(ctx.template)
    zeros = _const(np.zeros((mesh.n_vertices, 3)), blocks.dtype)
    return PipelineState(
        t=0, mesh=mesh, vertices=_const(ctx.template, blocks.dtype), anchors=ctx.template.copy(),
        delta_v=zeros, h_geo=h_geo, f_v=f_v, h_tex=h_tex, tex_logits=logits, f_a=f_a,
    )


# -- rendering and reprojection ---------------------------------------------------------

def _pool_matrix(tex_res: int, factor: int, valid: np.ndarray):
    """Average valid fine texels into coarse cells; returns (Q, coverage)."""
    fr = tex_res // factor
    yy, xx = np.mgrid[0:tex_res, 0:tex_res]
    cell = ((yy // factor) * fr + (xx // factor)).reshape(-1)
    v = valid.reshape(-1)
    counts = np.bincount(cell, weights=v, minlength=fr * fr)
    w = np.where(v > 0, 1.0 / np.maximum(counts[cell], 1.0), 0.0)
    Q = sp.csr_matrix((w, (cell, np.arange(tex_res * tex_res))), shape=(fr * fr, tex_res * tex_res))
    Q.eliminate_zeros()
    return Q, (counts / (factor * factor)).reshape(fr, fr)


def reprojection(posed: RiggedMesh, camera, image_res: int, tex_res: int, feat_down: int,
                 rmap: RasterMap | None = None):
    """Pooled unwrap operator (feature texels x image pixels) and the coverage map."""
    op = unwrap_operator(posed, camera, image_res, tex_res, rmap)
    Q, coverage = _pool_matrix(tex_res, feat_down, op.valid)
    return (Q @ op.matrix).tocsr(), coverage


def vertex_sampling_matrix(uv: np.ndarray, valid: np.ndarray) -> sp.csr_matrix:
    """Bilinear UV lookup per vertex; rows whose nearest texel is invalid are zero."""
    H, W = valid.shape
    S = uv_sampling_matrix(uv, H, W)
    col = np.clip(np.floor(uv[:, 0] * W), 0, W - 1).astype(np.int64)
    row = np.clip(np.floor(uv[:, 1] * H), 0, H - 1).astype(np.int64)
    keep = valid[row, col] > 0
    return (sp.diags(keep.astype(np.float64)) @ S).tocsr()


def error_features(input_image, rendered: Tensor, mesh: RiggedMesh, pooled_unwrap: sp.csr_matrix,
                   coverage: np.ndarray, blocks: Blocks):
    """(F_d, F_d->v): phi over [input, render, input - render], unwrapped and sampled at vertex UVs."""
    st, c = blocks.store, blocks.config
    if tuple(np.shape(input_image)) != tuple(rendered.shape):
        raise ValueError(f"input {np.shape(input_image)} and render {rendered.shape} differ in shape")
    inp = _const(input_image, rendered.dtype)
    x = _phi(ad.concat([inp, rendered, inp - rendered], axis=2), st, f"{PREFIX}.phi_err")
    fr = coverage.shape[0]
    f_d = ad.sparse_matmul(pooled_unwrap, x.reshape(-1, c.c_d))
    valid = (coverage > 0).astype(np.float64)
    f_d2v = ad.sparse_matmul(vertex_sampling_matrix(mesh.uv, valid), f_d)
    return UvImage(f_d.reshape(fr, fr, c.c_d), valid), f_d2v


def render_state(state: PipelineState, ctx: Context, blocks: Blocks) -> Render:
    """Animate, rasterize, shade and reproject the state under the input pose."""
    c = blocks.config
    mesh, params, cam = state.mesh, ctx.params, ctx.params.camera
    expr = expression_offsets(mesh, params)
    A, b = skinning_transforms(mesh.skin_weights, ctx.joints, params.joint_rotations, mesh.joint_parents)
    posed_np = np.einsum("nab,nb->na", A, mesh.vertices + expr) + b
    posed_t = ad.bmv(A, state.vertices + _const(expr, blocks.dtype)) + _const(b, blocks.dtype)
    posed = mesh.with_vertices(posed_np)
    rmap = rasterize(posed, cam, ctx.resolution)
    image = shade_texture(rmap, state.texture_tensor)
    normal = render_normals(rmap, posed_t)
    pooled, coverage = reprojection(posed, cam, ctx.resolution, c.tex_res, c.feat_down, rmap)
    fr = coverage.shape[0]
    u = np.asarray(pooled @ ctx.image.reshape(-1, 3)).reshape(fr, fr, 3)
    f_d, f_d2v = error_features(ctx.image, image, mesh, pooled, coverage, blocks)
    return Render(
        image=image, normal=normal, mask=render_mask(rmap), part=render_parts(rmap),
        vertices=state.vertices, faces=mesh.faces, posed=posed, rmap=rmap,
        unwrapped=UvImage(u, (coverage > 0).astype(np.float64)), coverage=coverage, f_d=f_d, f_d2v=f_d2v,
    )


# -- the two update steps ------------------------------------------------------------------

def deform_step(state: PipelineState, render: Render, ctx: Context, blocks: Blocks) -> dict:
    """GRU_geo update, clamp of the accumulated displacement, topology correction.

    Returns the geometry fields of the next state.
    """
    c, st = blocks.config, blocks.store
    mesh = state.mesh
    dt = blocks.dtype
    pe = _const(nn.positional_encoding(mesh.vertices, c.n_freq), dt)
    x = nn.mlp(ad.concat([pe, render.f_d2v], axis=1), st, f"{PREFIX}.psi")
    h = nn.vec_gru_cell(ad.concat([x, state.f_v], axis=1), state.h_geo, st, f"{PREFIX}.gru_geo")
    dv = nn.linear(h, st, f"{PREFIX}.delta_head")
    dv = ad.sparse_matmul(weld_average_matrix(state.anchors), dv)  # seam copies move together

    anchors = state.anchors
    lim = np.repeat(part_limits(mesh.part_labels, c.deltas)[:, None], 3, axis=1)
    disp = ad.clamp(_const(mesh.vertices - anchors, dt) + dv, -lim, lim)
    verts_t = _const(anchors, dt) + disp
    verts = np.clip(anchors + disp.data.astype(np.float64), anchors - lim, anchors + lim)

    moved = mesh.with_vertices(verts)
    out, prov = topology_correct(moved, ctx.epsilon, c.area_eps, template=anchors,
                                 joints=ctx.joints, return_provenance=True)
    f_v = state.f_v
    if not prov.is_identity():
        P = prov.matrix
        verts_t = ad.sparse_matmul(P, verts_t)
        h = ad.sparse_matmul(P, h)
        f_v = ad.sparse_matmul(P, f_v)
        dv = ad.sparse_matmul(P, dv)
        anchors = np.asarray(P @ anchors)
        # new vertices take the clip range of their (dominant) part label
        lim = np.repeat(part_limits(out.part_labels, c.deltas)[:, None], 3, axis=1)
        lo, hi = anchors - lim, anchors + lim
        out.vertices = np.clip(out.vertices, lo, hi)
        verts_t = ad.clamp(verts_t, lo, hi)
    return {"mesh": out, "vertices": verts_t, "anchors": anchors, "delta_v": dv, "h_geo": h, "f_v": f_v}


def texture_step(state: PipelineState, render: Render, blocks: Blocks) -> dict:
    """GRU_tex update at feature resolution; the texture moves in logit space.

    ``T_{t+1} = sigmoid(L_t + up(conv(h' - h)))``, so a closed update gate
    leaves the texture exactly unchanged.
    """
    c, st = blocks.config, blocks.store
    dt = blocks.dtype
    fr = c.feat_res
    t_small = ad.avg_pool(state.texture_tensor, c.feat_down)
    u_small = _const(render.unwrapped.data, dt)
    m_small = _const(render.coverage[..., None], dt)
    a = _phi(ad.concat([t_small, u_small, m_small], axis=2), st, f"{PREFIX}.phi_in", relu_out=True)
    fa_small = ad.avg_pool(state.f_a, c.feat_down)
    f_d = render.f_d.data
    if f_d.shape[:2] != (fr, fr):
        raise ValueError(f"error features are {f_d.shape[:2]}, expected {fr}x{fr}")
    x = _phi(ad.concat([a, fa_small, f_d], axis=2), st, f"{PREFIX}.phi_out")
    h = nn.conv_gru_cell(x, state.h_tex, st, f"{PREFIX}.gru_tex")
    step = nn.conv(h - state.h_tex, st, f"{PREFIX}.tex_head", pad_mode="edge")
    logits = state.tex_logits + nn.upsample(step, c.feat_down)
    return {"h_tex": h, "tex_logits": logits}


# -- full forward ----------------------------------------------------------------------------

@dataclass
class RunResult:
    states: list            # PipelineState for t = 0..K
    renders: list           # Render for t = 0..K
    context: Context

    @property
    def final(self) -> PipelineState:
        return self.states[-1]

    @property
    def mesh(self) -> RiggedMesh:
        return self.final.mesh

    @property
    def texture(self) -> UvImage:
        return self.final.texture

    def images(self) -> list[np.ndarray]:
        return [r.image.data.astype(np.float64) for r in self.renders]


def make_context(input_image, params: PoseParams, rig: RiggedMesh, config: Config) -> Context:
    check_params(rig, params)
    image = np.asarray(input_image, dtype=np.float64)
    template = rig.vertices + shape_offsets(rig, params)
    joints = regress_joints(rig, template)
    eps = remesh_epsilon(template, rig.faces, config.eps_scale)
    return Context(image, params, joints, template, eps, config)


def run(input_image, params: PoseParams, rig: RiggedMesh, blocks: Blocks, K: int | None = None) -> RunResult:
    """Features once, then K lockstep deform/texture iterations; renders every state."""
    c = blocks.config
    K = c.K if K is None else K
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    ctx = make_context(input_image, params, rig, c)
    state = initial_state(ctx, rig, blocks)
    render = render_state(state, ctx, blocks)
    states, renders = [state], [render]
    for t in range(K):
        state.unwrapped, state.f_d, state.f_d2v = render.unwrapped, render.f_d, render.f_d2v
        geo = deform_step(state, render, ctx, blocks)
        tex = texture_step(state, render, blocks)
        state = PipelineState(t=t + 1, f_a=state.f_a, **geo, **tex)
        render = render_state(state, ctx, blocks)
        states.append(state)
        renders.append(render)
    return RunResult(states, renders, ctx)


def ground_truth(subject) -> dict:
    return {"image": subject.input_image, "mask": subject.fg_mask,
            "normal": subject.normal_map, "part": subject.part_map}


def evaluate(result: RunResult, gt: dict, config: Config):
    """(L_total Tensor, per-iteration terms of the last iteration, per-iteration L_t floats)."""
    Ls, terms = [], None
    for r in result.renders[1:]:
        L_t, terms = per_iteration_loss(r.loss_inputs(), gt, config.lambdas)
        Ls.append(L_t)
    return total_loss(Ls, config.gamma), terms, [_value(L) for L in Ls]


# -- training ----------------------------------------------------------------------------------

@dataclass
class TrainResult:
    blocks: Blocks
    history: list = field(default_factory=list)   # one metrics row per step (+ final evaluation)
    last: RunResult | None = None


def _value(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def _metrics(step: int, result: RunResult, gt: dict, config: Config):
    L, terms, _ = evaluate(result, gt, config)
    img = result.renders[-1].image.data.astype(np.float64)
    row = {"step": step, "L_total": float(L.data)}
    row.update({f"L_{k}": _value(v) for k, v in terms.items()})
    row["psnr"] = psnr(img, gt["image"], gt["mask"])
    row["ssim"] = ssim(img, gt["image"], gt["mask"])
    return L, row


def train_overfit(subject, blocks: Blocks, config: Config | None = None, steps: int | None = None,
                  on_step=None) -> TrainResult:
    """Adam on the total loss of a single subject.

    Row ``s`` of the history holds the metrics of the forward pass that
    produced update ``s`` (so row 0 is the untrained model); a final row at
    ``step == steps`` evaluates the trained parameters. ``on_step(row,
    result)`` is called after every row.
    """
    config = blocks.config if config is None else config
    steps = config.steps if steps is None else steps
    subject.validate()
    gt = ground_truth(subject)
    params = blocks.store.tensors()
    state = ad.AdamState()
    out = TrainResult(blocks)
    for step in range(steps + 1):
        result = run(subject.input_image, subject.pose_params, subject.rig, blocks, config.K)
        L, row = _metrics(step, result, gt, config)
        if not math.isfinite(row["L_total"]):
            raise TrainingDivergedError(step, row["L_total"])
        out.history.append(row)
        out.last = result
        if on_step is not None:
            on_step(row, result)
        if step == steps:
            break
        blocks.store.zero_grad()
        ad.backward(L)
        lr = ad.lr_schedule(step + 1, steps, config.lr, min(config.warmup, steps))
        ad.adam_step(params, [p.grad for p in params], state, lr)
    return out


def initial_psnr_gain(history: list) -> float:
    return history[-1]["psnr"] - history[0]["psnr"]


__all__ = [
    "Blocks", "Context", "PipelineState", "Render", "RunResult", "TrainResult", "TrainingDivergedError",
    "clip_deformation", "deform_step", "error_features", "evaluate", "extract_features", "ground_truth",
    "init_blocks", "initial_state", "make_context", "part_limits", "remesh_epsilon", "render_state",
    "reprojection", "run", "texture_step", "train_overfit", "vertex_sampling_matrix",
]
