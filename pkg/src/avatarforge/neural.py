"""Learnable blocks built on the autodiff engine.

Parameters live in a flat, ordered :class:`ParamStore` keyed by dotted block
paths (``pipeline.attn.0.q_proj``). Each block has an ``init_*`` function
that registers its tensors and a forward function that reads them back by
prefix, so a store can be saved, reloaded and shared between branches.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .raster import bilinear_matrix

GRU_GATE_BIAS = -2.0


class ParamStore:
    """Ordered name -> Tensor mapping of trainable parameters."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._p: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __len__(self) -> int:
        return len(self._p)

    def names(self) -> list[str]:
        return list(self._p)

    def tensors(self) -> list[Tensor]:
        return list(self._p.values())

    def items(self):
        return self._p.items()

    def zero_grad(self) -> None:
        for t in self._p.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._p.items())

    def load_state_dict(self, state) -> None:
        missing = set(self._p) - set(state)
        extra = set(state) - set(self._p)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self._p.items():
            v = np.asarray(state[k])
            if v.shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != parameter shape {t.shape}")
            t.data = v.astype(self.dtype).copy()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, t in self._p.items():
            out.add(k, t.data)
        return out


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _const(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# -- positional encoding ------------------------------------------------------------

def positional_encoding(points, n_freq: int) -> np.ndarray:
    """``[p, sin(2^k pi p)..., cos(2^k pi p)...]`` -> ``N x (3 + 6 n_freq)``."""
    p = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("positional_encoding needs finite points")
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    ang = (p[:, None, :] * freqs[None, :, None]).reshape(len(p), -1)
    return np.concatenate([p, np.sin(ang), np.cos(ang)], axis=1)


# -- linear / MLP ----------------------------------------------------------------------

def init_linear(store: ParamStore, name: str, d_in: int, d_out: int, rng, bias: bool = True,
                scale: float = 1.0) -> None:
    store.add(f"{name}.weight", scale * kaiming_uniform(rng, (d_in, d_out), d_in))
    if bias:
        store.add(f"{name}.bias", np.zeros(d_out))


def linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    y = ad.matmul(x, store[f"{name}.weight"])
    b = f"{name}.bias"
    return y + store[b] if b in store else y


def init_mlp(store: ParamStore, name: str, dims, rng) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(store, f"{name}.{i}", a, b, rng)


def mlp(x: Tensor, store: ParamStore, name: str, depth: int = 2) -> Tensor:
    """``depth`` linear layers with relu between them and none on the output."""
    for i in range(depth):
        x = linear(x, store, f"{name}.{i}")
        if i < depth - 1:
            x = ad.relu(x)
    return x


# -- cross attention -------------------------------------------------------------------

def init_cross_attention(store: ParamStore, name: str, dim: int, heads: int, rng,
                         ff_mult: int = 2) -> None:
    if dim % heads:
        raise ShapeError(f"attention width {dim} is not divisible by {heads} heads")
    for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
        store.add(f"{name}.{proj}", kaiming_uniform(rng, (dim, dim), dim) / np.sqrt(2.0))
    init_mlp(store, f"{name}.ff", [dim, ff_mult * dim, dim], rng)


def cross_attention_layer(queries: Tensor, context: Tensor, store: ParamStore, name: str,
                          heads: int, return_weights: bool = False):
    """Multi-head cross attention with residual, then a residual 2-layer MLP.

    Queries come from ``queries``; keys and values from ``context``. The
    softmax runs over the context axis.
    """
    n_q, dim = queries.shape
    if context.ndim != 2 or context.shape[1] != dim:
        raise ShapeError(f"attention: queries {queries.shape} and context {context.shape} do not conform")
    if dim % heads:
        raise ShapeError(f"attention width {dim} is not divisible by {heads} heads")
    d = dim // heads
    Q = ad.matmul(queries, store[f"{name}.q_proj"])
    K = ad.matmul(context, store[f"{name}.k_proj"])
    V = ad.matmul(context, store[f"{name}.v_proj"])
    outs, weights = [], []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        scores = ad.scale(ad.matmul(Q[:, sl], K[:, sl].T), 1.0 / np.sqrt(d))
        A = ad.softmax(scores, axis=1)
        weights.append(A)
        outs.append(ad.matmul(A, V[:, sl]))
    attn = ad.matmul(ad.concat(outs, axis=1) if heads > 1 else outs[0], store[f"{name}.o_proj"])
    x = queries + attn
    x = x + mlp(x, store, f"{name}.ff")
    return (x, weights) if return_weights else x


# -- GRU cells -----------------------------------------------------------------------------

def init_conv(store: ParamStore, name: str, c_in: int, c_out: int, rng, k: int = 3,
              bias: bool = True, scale: float = 1.0, bias_value: float = 0.0) -> None:
    store.add(f"{name}.weight", scale * kaiming_uniform(rng, (k, k, c_in, c_out), k * k * c_in))
    if bias:
        store.add(f"{name}.bias", np.full(c_out, bias_value))


def conv(x: Tensor, store: ParamStore, name: str, pad_mode: str = "zeros") -> Tensor:
    b = f"{name}.bias"
    return ad.conv2d(x, store[f"{name}.weight"], store[b] if b in store else None, pad_mode=pad_mode)


def init_conv_gru(store: ParamStore, name: str, c_in: int, c_h: int, rng, k: int = 3) -> None:
    init_conv(store, f"{name}.z", c_in + c_h, c_h, rng, k, bias_value=GRU_GATE_BIAS)
    init_conv(store, f"{name}.r", c_in + c_h, c_h, rng, k)
    init_conv(store, f"{name}.h", c_in + c_h, c_h, rng, k)


def conv_gru_cell(x: Tensor, h: Tensor, store: ParamStore, name: str) -> Tensor:
    """z, r = sigma(conv[x, h]); h~ = tanh(conv[x, r*h]); h' = (1 - z) h + z h~."""
    if x.ndim != 3 or h.ndim != 3 or x.shape[:2] != h.shape[:2]:
        raise ShapeError(f"conv_gru_cell: input {x.shape} and hidden {h.shape} do not conform")
    xh = ad.concat([x, h], axis=2)
    z = ad.sigmoid(conv(xh, store, f"{name}.z"))
    r = ad.sigmoid(conv(xh, store, f"{name}.r"))
    cand = ad.tanh(conv(ad.concat([x, r * h], axis=2), store, f"{name}.h"))
    return h + z * (cand - h)


def init_vec_gru(store: ParamStore, name: str, c_in: int, c_h: int, rng) -> None:
    init_linear(store, f"{name}.z", c_in + c_h, c_h, rng)
    store["%s.z.bias" % name].data[:] = GRU_GATE_BIAS
    init_linear(store, f"{name}.r", c_in + c_h, c_h, rng)
    init_linear(store, f"{name}.h", c_in + c_h, c_h, rng)


def vec_gru_cell(x: Tensor, h: Tensor, store: ParamStore, name: str) -> Tensor:
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"vec_gru_cell: input {x.shape} and hidden {h.shape} do not conform")
    xh = ad.concat([x, h], axis=1)
    z = ad.sigmoid(linear(xh, store, f"{name}.z"))
    r = ad.sigmoid(linear(xh, store, f"{name}.r"))
    cand = ad.tanh(linear(ad.concat([x, r * h], axis=1), store, f"{name}.h"))
    return h + z * (cand - h)


# -- image encoder --------------------------------------------------------------------------

def init_patch_encoder(store: ParamStore, name: str, patch: int, dim: int, rng) -> None:
    init_linear(store, f"{name}.patchify", patch * patch * 3, dim, rng)
    init_conv(store, f"{name}.stage0", dim, dim, rng)
    init_conv(store, f"{name}.stage1", dim, dim, rng)
    init_mlp(store, f"{name}.fuse", [2 * dim, dim, dim], rng)


def patch_encoder(image, store: ParamStore, name: str, patch: int) -> Tensor:
    """Image ``H x W x 3`` -> tokens ``(H/p * W/p) x C``, row-major over the patch grid.

    A non-overlapping patch projection, two 3x3 conv stages with edge padding
    (so a constant image gives identical tokens), and an MLP fusing both
    stages.
    """
    x = _const(image, store.dtype)
    H, W, C = x.shape
    if H % patch or W % patch or C != 3:
        raise ShapeError(f"patch_encoder: image {x.shape} is not divisible into {patch}x{patch} RGB patches")
    gh, gw = H // patch, W // patch
    cols = x.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * 3)
    tok = linear(cols, store, f"{name}.patchify")
    dim = tok.shape[1]
    g = tok.reshape(gh, gw, dim)
    s0 = ad.relu(conv(g, store, f"{name}.stage0", pad_mode="edge"))
    s1 = ad.relu(conv(s0, store, f"{name}.stage1", pad_mode="edge"))
    feats = ad.concat([s0, s1], axis=2).reshape(gh * gw, 2 * dim)
    return mlp(feats, store, f"{name}.fuse")


# -- texture decoder ---------------------------------------------------------------------------

_UP_CACHE: dict = {}


def upsample_matrix(h: int, w: int, factor: int) -> sp.csr_matrix:
    """Bilinear (half-pixel aligned, edge clamped) ``factor`` x upsampling operator."""
    key = (h, w, factor)
    if key not in _UP_CACHE:
        H, W = h * factor, w * factor
        yy, xx = np.mgrid[0:H, 0:W]
        sx = (xx.reshape(-1) + 0.5) / factor - 0.5
        sy = (yy.reshape(-1) + 0.5) / factor - 0.5
        _UP_CACHE[key] = bilinear_matrix(sx, sy, h, w)
    return _UP_CACHE[key]


def upsample(x: Tensor, factor: int) -> Tensor:
    h, w, c = x.shape
    M = upsample_matrix(h, w, factor)
    return ad.sparse_matmul(M, x.reshape(h * w, c)).reshape(h * factor, w * factor, c)


def init_tex_decoder(store: ParamStore, name: str, dim: int, channels, c_a: int, rng) -> None:
    c_prev = dim
    for i, c in enumerate(channels):
        init_conv(store, f"{name}.up{i}", c_prev, c, rng)
        c_prev = c
    init_conv(store, f"{name}.texture_head", c_prev, 3, rng, scale=0.1)
    init_conv(store, f"{name}.feature_head", c_prev, c_a, rng)


def tex_decoder(tokens: Tensor, store: ParamStore, name: str, n_up: int, return_logits: bool = False):
    """Token grid ``H_t x W_t x C`` -> (T_0 ``H_a x W_a x 3`` in (0, 1), F_a ``H_a x W_a x C_a``).

    Each stage is a bilinear x2 upsample followed by a 3x3 conv and relu.
    """
    if tokens.ndim != 3:
        raise ShapeError(f"tex_decoder expects an H x W x C token grid, got {tokens.shape}")
    x = tokens
    i = 0
    while f"{name}.up{i}.weight" in store:
        if i >= n_up:
            raise ShapeError(f"tex_decoder has more stages than the {n_up} upsamplings requested")
        x = ad.relu(conv(upsample(x, 2), store, f"{name}.up{i}", pad_mode="edge"))
        i += 1
    if i != n_up:
        raise ShapeError(f"tex_decoder has {i} stages but the resolution needs {n_up}")
    logits = conv(x, store, f"{name}.texture_head", pad_mode="edge")
    feats = conv(x, store, f"{name}.feature_head", pad_mode="edge")
    tex = ad.sigmoid(logits)
    return (tex, feats, logits) if return_logits else (tex, feats)


def decoder_stages(token_grid: int, tex_size: int) -> int:
    ratio = tex_size // token_grid
    if token_grid * ratio != tex_size or ratio & (ratio - 1):
        raise ShapeError(f"texture size {tex_size} is not a power-of-two multiple of the token grid {token_grid}")
    return int(np.log2(ratio))
