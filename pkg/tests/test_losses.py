import numpy as np
import pytest

from relight import losses as L
from relight import tensor as T
from relight.tensor import ShapeError

from conftest import rand

C1 = 0.01 ** 2


def img(seed, size=16, n=1):
    return rand((n, 3, size, size), seed, 0.0, 1.0)


def const(v, size=16):
    return T.full((1, 3, size, size), v)


# -- L1 / L2 ---------------------------------------------------------------

def test_l1_values():
    assert L.l1_loss(img(0), img(0)).item() == 0.0
    assert L.l1_loss(const(0.5), const(0.25)).item() == pytest.approx(0.25)
    a, b = img(1), img(2)
    assert L.l1_loss(a, b).item() == L.l1_loss(b, a).item()


def test_l2_values():
    assert L.l2_loss(img(0), img(0)).item() == 0.0
    assert L.l2_loss(const(0.0), const(1.0)).item() == 1.0


def test_shape_mismatch():
    for fn in (L.l1_loss, L.l2_loss, L.advanced_sobel_loss, L.perceptual_loss, L.ssim_value):
        with pytest.raises(ShapeError):
            fn(img(0, 16), img(0, 24))


# -- SSIM ------------------------------------------------------------------

def test_ssim_self_similarity(f64):
    for seed in range(3):
        x = img(seed, 24)
        assert L.ssim_value(x, x).item() == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_pair(f64):
    assert L.ssim_value(const(0.0), const(1.0)).item() == pytest.approx(C1 / (1 + C1), abs=1e-9)


def test_ssim_symmetric(f64):
    a, b = img(3), img(4)
    assert L.ssim_value(a, b).item() == pytest.approx(L.ssim_value(b, a).item(), abs=1e-12)


def test_ssim_window_too_large():
    with pytest.raises(ShapeError):
        L.ssim_value(const(0.1, 8), const(0.1, 8))


def test_gaussian_window():
    g = L.gaussian_window()
    assert g.shape == (11, 11)
    assert g.sum() == pytest.approx(1.0)
    assert g[5, 5] == g.max()
    np.testing.assert_allclose(g, g.T)


# -- TV --------------------------------------------------------------------

def test_tv_hand_example():
    x = T.tensor([0, 1, 0, 1], shape=(1, 1, 2, 2))
    assert L.tv_loss(x).item() == 0.5


def test_tv_constant_and_nonnegative():
    assert L.tv_loss(const(0.4)).item() == 0.0
    assert L.tv_loss(img(5)).item() >= 0.0


def test_tv_too_small():
    with pytest.raises(ShapeError):
        L.tv_loss(T.zeros((1, 3, 1, 4)))


# -- perceptual ------------------------------------------------------------

def test_perceptual_identity_and_sign():
    a, b = img(6), img(7)
    assert L.perceptual_loss(a, a).item() == 0.0
    assert L.perceptual_loss(a, b).item() > 0.0


def test_perceptual_reproducible_and_frozen():
    a, b = img(6), img(7)
    first = L.perceptual_loss(a, b).item()
    L._perceptual_weights.cache_clear()
    assert L.perceptual_loss(a, b).item() == first
    for w in L._perceptual_weights("float32"):
        assert not w.flags.writeable


def test_perceptual_grad_flows_to_pred_only():
    a, b = img(6), img(7)
    a.requires_grad = b.requires_grad = True
    T.backward(L.perceptual_loss(a, b), wrt=[a, b])
    assert a.grad.any()
    assert not b.grad.any()


def test_perceptual_divisibility():
    with pytest.raises(ShapeError):
        L.perceptual_loss(const(0.1, 12), const(0.1, 12))


# -- Sobel -----------------------------------------------------------------

def test_sobel_hand_response():
    patch = T.tensor([0, 0, 1] * 3, shape=(1, 1, 3, 3))
    patch = T.Tensor(np.repeat(patch.data, 3, axis=1))
    edges = L.sobel_edges(patch).data
    # channel 0, direction 0 (first of the four responses), centre pixel
    assert edges[0, 0, 1, 1] == 4


def test_sobel_kernels():
    g0, g90, g45, g135 = L.SOBEL_KERNELS
    np.testing.assert_array_equal(g90, g0.T)
    np.testing.assert_array_equal(g45, [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]])
    np.testing.assert_array_equal(g135, [[-2, -1, 0], [-1, 0, 1], [0, 1, 2]])


def test_sobel_loss_zero_cases(f64):
    assert L.advanced_sobel_loss(const(0.2), const(0.9)).item() == pytest.approx(0.0, abs=1e-12)
    a = img(8)
    assert L.advanced_sobel_loss(a, a).item() == 0.0


def test_sobel_loss_is_mean_over_directions(f64):
    a, b = img(9), img(10)
    ea, eb = L.sobel_edges(a).data, L.sobel_edges(b).data
    per_dir = [np.abs(ea[:, d::4] - eb[:, d::4]).mean() for d in range(4)]
    assert L.advanced_sobel_loss(a, b).item() == pytest.approx(np.mean(per_dir), rel=1e-12)


# -- combined objectives ---------------------------------------------------

def test_default_weights():
    w = L.LossWeights()
    assert (w.l1, w.ssim, w.perceptual, w.tv) == (1.0, -5e-3, 0.006, 2e-8)
    assert w.sobel_mix == 0.1


def test_combined_identity_constant(f64):
    loss, terms = L.combined_loss(const(0.6), const(0.6))
    assert loss.item() == pytest.approx(-0.005, abs=1e-9)
    assert terms["l1"] == 0.0 and terms["perceptual"] == 0.0 and terms["tv"] == 0.0


def test_combined_is_weighted_sum(f64):
    a, b = img(11), img(12)
    w = L.LossWeights()
    loss, terms = L.combined_loss(a, b, w)
    independent = (w.l1 * L.l1_loss(a, b).item() + w.ssim * L.ssim_value(a, b).item()
                   + w.perceptual * L.perceptual_loss(a, b).item() + w.tv * L.tv_loss(a).item())
    assert loss.item() == pytest.approx(independent, abs=1e-7)
    recombined = sum(getattr(w, k) * v for k, v in terms.items())
    assert loss.item() == pytest.approx(recombined, abs=1e-7)


def test_combined_sobel(f64):
    a, b = img(13), img(14)
    assert L.combined_sobel_loss(a, a)[0].item() == 0.0
    assert L.combined_sobel_loss(a, b, 0.0)[0].item() == L.l2_loss(a, b).item()
    assert L.combined_sobel_loss(const(0.0), const(1.0), 0.1)[0].item() == pytest.approx(1.0, abs=1e-12)


def test_objective_dispatch():
    a, b = img(1), img(2)
    assert L.objective("MSE", a, b)[0].item() == L.l2_loss(a, b).item()
    assert set(L.objective("CL", a, b)[1]) == {"l1", "ssim", "perceptual", "tv"}
    assert set(L.objective("CSL", a, b)[1]) == {"l2", "sobel"}
    with pytest.raises(ValueError):
        L.objective("LPIPS", a, b)


def test_losses_nonnegative():
    a, b = img(3), img(4)
    for fn in (L.l1_loss, L.l2_loss, L.perceptual_loss, L.advanced_sobel_loss):
        assert fn(a, b).item() >= 0.0
    assert L.combined_sobel_loss(a, b)[0].item() >= 0.0


# -- gradient checks -------------------------------------------------------

def _smooth_pair(seed):
    # l1 and sobel have kinks where pred == tgt; a continuous offset keeps
    # every difference (and every edge difference) away from zero almost surely
    a = img(seed)
    b = T.Tensor(a.data + rand(a.shape, seed + 50, -0.5, 0.5).data)
    return a, b


@pytest.mark.parametrize("name", ["l1", "l2", "ssim", "tv", "perceptual", "sobel", "combined", "combined_sobel"])
def test_grad_check_losses(f64, name):
    a, b = _smooth_pair(20)
    fns = {
        "l1": lambda p: L.l1_loss(p, b),
        "l2": lambda p: L.l2_loss(p, b),
        "ssim": lambda p: L.ssim_value(p, b),
        "tv": L.tv_loss,
        "perceptual": lambda p: L.perceptual_loss(p, b),
        "sobel": lambda p: L.advanced_sobel_loss(p, b),
        "combined": lambda p: L.combined_loss(p, b)[0],
        "combined_sobel": lambda p: L.combined_sobel_loss(p, b)[0],
    }
    idx = np.random.default_rng(3).choice(a.size, size=64, replace=False)
    # piecewise-linear sobel terms can cancel to an exactly zero slope; the
    # relative metric would only measure roundoff there, so check those absolutely
    leaf = T.Tensor(a.data.copy(), requires_grad=True)
    T.backward(fns[name](leaf), wrt=[leaf])
    flat = leaf.grad.ravel()
    zero = [i for i in idx if abs(flat[i]) < 1e-12]
    live = [i for i in idx if abs(flat[i]) >= 1e-12]
    assert len(live) >= 48
    assert T.grad_check(fns[name], a, indices=live) <= 1e-4
    for i in zero:
        d = a.data.copy().ravel()
        d[i] += 1e-5
        up = fns[name](T.Tensor(d.reshape(a.shape))).item()
        d[i] -= 2e-5
        down = fns[name](T.Tensor(d.reshape(a.shape))).item()
        assert abs(up - down) / 2e-5 <= 1e-9
