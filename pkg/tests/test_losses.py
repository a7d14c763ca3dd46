import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from avatarforge import autodiff as ad
from avatarforge.autodiff import ShapeError, Tensor
from avatarforge.losses import (
    PAPER_LAMBDAS,
    PSNR_CAP,
    combine_losses,
    laplacian_operator,
    loss_img,
    loss_laplacian,
    loss_mask,
    loss_normal,
    per_iteration_loss,
    psnr,
    read_metrics,
    ssim,
    total_loss,
    write_metrics,
)


def brute_pyramid_loss(a, b, m):
    """Loop-based oracle for the masked pyramid image loss."""
    H, W, C = a.shape
    total = (m[..., None] * (a - b) ** 2).sum() / (m.sum() * C)
    for s in (1, 2, 3):
        k = 2**s
        num = den = 0.0
        for i in range(H // k):
            for j in range(W // k):
                blk = (slice(i * k, (i + 1) * k), slice(j * k, (j + 1) * k))
                cov = m[blk].mean()
                if cov == 0:
                    continue
                pa = (a[blk] * m[blk][..., None]).mean(axis=(0, 1)) / cov
                pb = (b[blk] * m[blk][..., None]).mean(axis=(0, 1)) / cov
                num += cov * ((pa - pb) ** 2).sum()
                den += cov * C
        total += num / den
    return total


def test_loss_img_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    m = (rng.random((16, 16)) > 0.4).astype(float)
    assert loss_img(a, b, m) == pytest.approx(brute_pyramid_loss(a, b, m), rel=1e-12)


def test_loss_img_zero_for_identical_and_tensor_passthrough():
    a = np.random.default_rng(1).random((8, 8, 3))
    assert loss_img(a, a) == 0.0
    out = loss_img(Tensor(a, requires_grad=True), a + 0.1)
    assert isinstance(out, Tensor)
    # every pyramid level of a constant offset contributes 0.01
    assert out.item() == pytest.approx(4 * 0.01)


def test_loss_img_rejects_shape_mismatch_and_indivisible_size():
    with pytest.raises(ShapeError):
        loss_img(np.zeros((8, 8, 3)), np.zeros((8, 4, 3)))
    with pytest.raises(ShapeError):
        loss_img(np.zeros((6, 6, 3)), np.zeros((6, 6, 3)))


def test_mask_and_normal_losses():
    m = np.zeros((4, 4))
    m[1:3, 1:3] = 1
    assert loss_mask(m, np.zeros((4, 4))) == pytest.approx(4 / 16)
    n1 = np.zeros((4, 4, 3))
    n1[..., 2] = 1
    n2 = np.zeros((4, 4, 3))
    n2[..., 0] = 1
    # squared distance between orthogonal unit normals is 2 on every masked pixel
    assert loss_normal(n1, n2, m) == pytest.approx(2.0)
    assert loss_normal(n1, n2, np.zeros((4, 4))) == 0.0


def test_laplacian_on_regular_fan():
    # centre vertex surrounded by a hexagon in the plane: umbrella residual is 0
    ang = np.arange(6) * np.pi / 3
    V = np.vstack([[0, 0, 0], np.c_[np.cos(ang), np.sin(ang), np.zeros(6)]])
    F = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    L, iso = laplacian_operator(V, F)
    assert not iso.any()
    assert np.allclose((L @ V)[0], 0.0)
    # lifting the centre by h adds a z residual of h for it and -h/3 for each
    # rim vertex (rim vertices see the centre and two rim neighbours)
    V2 = V.copy()
    V2[0, 2] = 0.5
    expect = 0.5**2 + 6 * (0.5 / 3) ** 2
    assert loss_laplacian(V2, F) - loss_laplacian(V, F) == pytest.approx(expect)


def test_laplacian_welds_seam_copies_and_warns_on_isolated():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [5, 5, 5.0]])
    F = np.array([[0, 1, 2], [0, 2, 3]])   # vertex 3 duplicates vertex 1
    L, iso = laplacian_operator(V, F)
    assert L.shape == (4, 5)
    assert iso.sum() == 1
    with pytest.warns(UserWarning, match="isolated"):
        loss_laplacian(V, F)


def test_combine_and_total_loss_arithmetic():
    ones = {k: 1.0 for k in PAPER_LAMBDAS}
    assert combine_losses(ones) == 5.5
    assert total_loss([1.0, 1.0], 0.8, N=2) == 1.8
    assert total_loss([2.0], 0.8) == 2.0
    with pytest.raises(ValueError):
        total_loss([1.0], 0.8, N=2)
    with pytest.raises(KeyError):
        combine_losses({"bogus": 1.0})


@given(st.lists(st.floats(0, 10), min_size=1, max_size=5), st.floats(0.1, 1.0))
def test_total_loss_is_geometric_weighting(values, gamma):
    N = len(values)
    expect = sum(gamma ** (N - t) * v for t, v in enumerate(values, start=1))
    assert total_loss(values, gamma) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_total_loss_tensor_gradient_weights():
    Ls = [Tensor(np.array(1.0), requires_grad=True) for _ in range(3)]
    total_loss(Ls, 0.5).backward()
    assert [float(L.grad) for L in Ls] == [0.25, 0.5, 1.0]


def test_per_iteration_loss_uses_lambdas():
    rng = np.random.default_rng(3)
    ang = np.arange(6) * np.pi / 3
    V = np.vstack([[0, 0, 0.2], np.c_[np.cos(ang), np.sin(ang), np.zeros(6)]])
    F = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    render = {"image": rng.random((8, 8, 3)), "mask": rng.random((8, 8)), "normal": rng.random((8, 8, 3)),
              "part": rng.random((8, 8, 6)), "vertices": V, "faces": F}
    gt = {"image": rng.random((8, 8, 3)), "mask": (rng.random((8, 8)) > 0.5).astype(float),
          "normal": rng.random((8, 8, 3)), "part": rng.random((8, 8, 6))}
    L, terms = per_iteration_loss(render, gt)
    assert L == pytest.approx(sum(PAPER_LAMBDAS[k] * terms[k] for k in terms))


def test_psnr_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    m = np.zeros((4, 4))
    m[0, 0] = 1
    b = a.copy()
    b[1:, :] = 1.0    # errors outside the mask are ignored
    assert psnr(a, b, m) == PSNR_CAP


def test_ssim_matches_skimage():
    rng = np.random.default_rng(4)
    a = rng.random((32, 32, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_too_small_raises():
    with pytest.raises(ShapeError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_metrics_csv_roundtrip(tmp_path):
    rows = [{"step": 0, "L_img": 0.5, "L_mask": 0.1, "L_normal": 0.2, "L_part": 0.3, "L_lap": 0.4,
             "L_total": 1.5, "psnr": 12.25, "ssim": 0.5}]
    write_metrics(rows, tmp_path / "m.csv")
    assert read_metrics(tmp_path / "m.csv") == rows
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "step,L_img,L_mask,L_normal,L_part,L_lap,L_total,psnr,ssim"


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((8, 8, 3))
    b = rng.random((8, 8, 3))
    m = (rng.random((8, 8)) > 0.3).astype(float)
    err = ad.check_gradients(lambda x: loss_img(x, b, m), [Tensor(a, requires_grad=True)])
    assert err < 1e-4
