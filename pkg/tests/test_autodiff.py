import zlib

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge import autodiff as ad
from avatarforge.autodiff import Tensor


def t64(a, grad=False):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


def direct_conv(x, w, b=None, pad_mode="zeros"):
    H, W, Ci = x.shape
    k = w.shape[0]
    p = k // 2
    out = np.zeros((H, W, w.shape[3]))
    for y in range(H):
        for xx in range(W):
            for dy in range(k):
                for dx in range(k):
                    yy, xs = y + dy - p, xx + dx - p
                    if pad_mode == "edge":
                        yy, xs = min(max(yy, 0), H - 1), min(max(xs, 0), W - 1)
                    elif not (0 <= yy < H and 0 <= xs < W):
                        continue
                    out[y, xx] += x[yy, xs] @ w[dy, dx]
    if b is not None:
        out += b
    return out


def test_sigmoid_value_and_gradient_at_zero():
    x = t64(0.0, grad=True)
    y = ad.sigmoid(x)
    assert y.item() == 0.5
    y.backward()
    assert x.grad == pytest.approx(0.25)


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(ad.matmul(t64(np.eye(4)), t64(A)).data, A)


def test_conv2d_delta_reproduces_kernel():
    rng = np.random.default_rng(1)
    x = np.zeros((7, 7, 1))
    x[3, 3, 0] = 1.0
    w = rng.normal(size=(3, 3, 1, 1))
    out = ad.conv2d(t64(x), t64(w)).data[..., 0]
    # cross-correlation: the response around the delta is the kernel flipped
    assert np.allclose(out[2:5, 2:5], w[::-1, ::-1, 0, 0])
    assert np.count_nonzero(out) == 9


@pytest.mark.parametrize("pad_mode", ["zeros", "edge"])
def test_conv2d_matches_direct_oracle(pad_mode):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 6, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    got = ad.conv2d(t64(x), t64(w), t64(b), pad_mode=pad_mode).data
    assert np.allclose(got, direct_conv(x, w, b, pad_mode), atol=1e-12)


def test_sum_gradient_is_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_mse_gradient_closed_form():
    x = t64(np.random.default_rng(3).normal(size=10), grad=True)
    ad.mse(x, np.zeros(10)).backward()
    assert np.allclose(x.grad, 2 * x.data / 10)


def test_fan_out_accumulates():
    x = t64(1.5, grad=True)
    (x + x).backward()
    assert x.grad == 2.0


def test_non_scalar_loss_rejected():
    x = t64(np.ones(3), grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_shape_error_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 5))))


def test_bias_broadcast_and_rejection():
    x = t64(np.ones((4, 3)), grad=True)
    b = t64(np.arange(3.0), grad=True)
    ad.tsum(x + b).backward()
    assert np.array_equal(b.grad, np.full(3, 4.0))
    with pytest.raises(ad.ShapeError):
        ad.add(t64(np.ones((4, 3))), t64(np.ones(4)))


def _rand_loss_weights(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def _projected(fn, shape, seed):
    w = _rand_loss_weights(shape, seed)
    return lambda *xs: ad.tsum(ad.mul(fn(*xs), t64(w)))


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (3, 4)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "div": (lambda a, b: a / (ad.mul(b, b) + 1.0), [(3, 4), (3, 4)]),
    "sigmoid": (ad.sigmoid, [(3, 4)]),
    "tanh": (ad.tanh, [(3, 4)]),
    "relu": (ad.relu, [(3, 4)]),
    "exp": (ad.exp, [(3, 4)]),
    "sqrt": (lambda a: ad.sqrt(ad.mul(a, a) + 0.5), [(3, 4)]),
    "matmul": (ad.matmul, [(3, 4), (4, 2)]),
    "softmax": (lambda a: ad.softmax(a, axis=1), [(3, 4)]),
    "softmax0": (lambda a: ad.softmax(a, axis=0), [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "slice": (lambda a: a[1:, ::2], [(3, 4)]),
    "reshape": (lambda a: a.reshape(2, 6), [(3, 4)]),
    "transpose": (lambda a: a.transpose(1, 0), [(3, 4)]),
    "sum_axis": (lambda a: ad.tsum(a, axis=0), [(3, 4)]),
    "mean": (lambda a: ad.mean(a, axis=1, keepdims=True), [(3, 4)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(3, 4)]),
    "bias": (lambda a, b: a + b, [(3, 4), (4,)]),
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b), [(4, 4, 2), (3, 3, 2, 3), (3,)]),
    "conv2d_edge": (lambda x, w: ad.conv2d(x, w, pad_mode="edge"), [(4, 5, 2), (3, 3, 2, 2)]),
    "avg_pool": (lambda x: ad.avg_pool(x, 2), [(4, 4, 2)]),
    "clamp": (lambda a: ad.clamp(a, -0.5, 0.5), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for trial in range(3):
        xs = [t64(rng.normal(size=s)) for s in shapes]
        for x in xs:
            if name in ("relu", "clamp"):
                # keep inputs away from kinks
                x.data = np.where(np.abs(x.data) < 1e-3, 0.1, x.data)
                if name == "clamp":
                    x.data = np.where(np.abs(np.abs(x.data) - 0.5) < 1e-3, 0.2, x.data)
        out_shape = fn(*xs).shape
        err = ad.check_gradients(_projected(fn, out_shape, trial), xs)
        assert err <= 1e-4, (name, err)


def test_mse_gradient_check():
    rng = np.random.default_rng(5)
    a, b = t64(rng.normal(size=(3, 3))), t64(rng.normal(size=(3, 3)))
    assert ad.check_gradients(lambda a, b: ad.mse(a, b), [a, b]) <= 1e-4


def test_sparse_and_bmv_gradients():
    rng = np.random.default_rng(6)
    S = sp.random(5, 4, density=0.5, random_state=0, format="csr")
    A = rng.normal(size=(4, 3, 3))
    x = t64(rng.normal(size=(4, 3)))
    w = rng.normal(size=(5, 3))
    fn = lambda x: ad.tsum(ad.sparse_matmul(S, ad.bmv(A, x)) * t64(w))  # noqa: E731
    assert ad.check_gradients(fn, [x]) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_composite_graph_gradients(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 5, size=2)
    x = t64(rng.normal(size=(n, m)))
    W = t64(rng.normal(size=(m, m)))
    b = t64(rng.normal(size=m))

    def fn(x, W, b):
        h = ad.tanh(ad.matmul(x, W) + b)
        a = ad.softmax(ad.matmul(h, h.T), axis=1)
        g = ad.sigmoid(ad.concat([h, ad.matmul(a, x)], axis=1))
        return ad.mean(g * g) + ad.tsum(ad.mul(h, x))

    assert ad.check_gradients(fn, [x, W, b]) <= 1e-4


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = t64(rng.normal(size=(6, 4)), grad=True)
        W = t64(rng.normal(size=(4, 4)), grad=True)
        loss = ad.tsum(ad.softmax(ad.matmul(x, W), axis=1) * ad.tanh(x))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), W.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


# -- optimizer -------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = t64(np.arange(4.0))
    state = ad.AdamState()
    for _ in range(5):
        ad.adam_step([p], [np.zeros(4)], state, lr=1e-2)
    assert np.array_equal(p.data, np.arange(4.0))
    assert not state.m[0].any() and not state.v[0].any()


def test_adam_constant_gradient_step_tends_to_lr():
    p = t64(np.zeros(3))
    state = ad.AdamState()
    lr = 1e-3
    prev = p.data.copy()
    for _ in range(2000):
        ad.adam_step([p], [np.array([0.5, -2.0, 1e-3])], state, lr=lr)
        step = np.abs(p.data - prev)
        prev = p.data.copy()
    assert np.allclose(step, lr, rtol=1e-3)


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(4)
        p = t64(rng.normal(size=5))
        state = ad.AdamState()
        for i in range(20):
            ad.adam_step([p], [np.sin(p.data * (i + 1))], state, lr=1e-2)
        return p.data

    assert np.array_equal(run(), run())


def test_lr_schedule_endpoints():
    assert ad.lr_schedule(0, 100, 2e-4, 10) == 0.0
    assert ad.lr_schedule(10, 100, 2e-4, 10) == pytest.approx(2e-4)
    assert abs(ad.lr_schedule(100, 100, 2e-4, 10)) <= 1e-12
    assert ad.lr_schedule(5, 100, 2e-4, 10) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        ad.lr_schedule(101, 100, 2e-4, 10)


# -- checkpoint ------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    named = {"pipeline.attn.0.q_proj": rng.normal(size=(4, 4)).astype(np.float32),
             "bias": np.arange(3, dtype=np.float32), "scalar": np.float32(2.5)}
    path = tmp_path / "weights.bin"
    ad.save_weights(named, path)
    back = ad.load_weights(path)
    assert list(back) == list(named)
    for k in named:
        assert np.array_equal(back[k], np.asarray(named[k]))
    blob = path.read_bytes()
    assert blob[:4] == b"AVFW"
    (tmp_path / "cut.bin").write_bytes(blob[:-3])
    with pytest.raises(ad.CheckpointError):
        ad.load_weights(tmp_path / "cut.bin")
