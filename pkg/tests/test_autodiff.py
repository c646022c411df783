import numpy as np
import pytest
import torch

from dask_lreid import autodiff as ad
from dask_lreid.reid import cross_entropy, similarity_matrix, skd_loss, triplet_loss
from dask_lreid.rehearser import reconstruction_loss

from oracles import conv_same_loops, numerical_grad, rel_error

SEEDS = range(20)


def analytic_grads(fn, tensors):
    for t in tensors:
        t.grad = None
    with ad.Tape() as tape:
        tape.backward(fn())
    return [t.grad.numpy().copy() for t in tensors]


def assert_gradcheck(fn, tensors, tol=1e-4):
    ana = analytic_grads(fn, tensors)
    num = numerical_grad(fn, tensors)
    for a, n in zip(ana, num):
        assert rel_error(a, n) < tol


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return ad.as_tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def away_from_zero(rng, *shape):
    v = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return ad.as_tensor(v, requires_grad=True)


class TestConv2dSame:
    def test_single_pixel_center_tap(self):
        x = ad.as_tensor(np.full((1, 1, 1, 1), 0.7))
        w = torch.zeros(1, 1, 3, 3)
        w[0, 0, 1, 1] = 2.5
        out = ad.conv2d_same(x, w, ad.as_tensor([0.1]))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(2.5 * 0.7 + 0.1, abs=1e-15)

    def test_single_pixel_all_taps_see_replicated_value(self):
        # with replicate padding a 1x1 image is constant under any kernel
        x = ad.as_tensor(np.full((1, 1, 1, 1), 0.3))
        w = ad.as_tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        out = ad.conv2d_same(x, w, ad.as_tensor([0.0]))
        assert out.item() == pytest.approx(0.3 * 36.0, abs=1e-12)

    def test_identity_kernel_is_bit_exact(self):
        rng = np.random.default_rng(0)
        x = ad.as_tensor(rng.uniform(0, 1, (2, 3, 6, 5)))
        w = torch.zeros(3, 3, 3, 3)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = ad.conv2d_same(x, w, torch.zeros(3))
        assert torch.equal(out, x)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d_same(ad.as_tensor(x), ad.as_tensor(w), ad.as_tensor(b)).numpy()
        np.testing.assert_allclose(out, conv_same_loops(x, w, b), atol=1e-12, rtol=0)

    def test_strided_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv2d_same(ad.as_tensor(x), ad.as_tensor(w), ad.as_tensor(b), stride=2).numpy()
        np.testing.assert_allclose(out, conv_same_loops(x, w, b, stride=2), atol=1e-12, rtol=0)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv2d_same(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2), torch.zeros(1))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            ad.conv2d_same(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3), torch.zeros(1))

    def test_per_sample_matches_individual_convs(self):
        rng = np.random.default_rng(1)
        x = ad.as_tensor(rng.normal(size=(3, 3, 5, 4)))
        w = ad.as_tensor(rng.normal(size=(3, 3, 3, 3, 3)))
        b = ad.as_tensor(rng.normal(size=(3, 3)))
        out = ad.conv2d_same_per_sample(x, w, b)
        for i in range(3):
            single = ad.conv2d_same(x[i:i + 1], w[i], b[i])
            np.testing.assert_allclose(out[i:i + 1].numpy(), single.numpy(), atol=1e-13)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        x = ad.as_tensor(rng.normal(size=(2, 3, 8, 8)))
        w = ad.as_tensor(rng.normal(size=(4, 3, 3, 3)))
        a = ad.conv2d_same(x, w, torch.zeros(4))
        b = ad.conv2d_same(x, w, torch.zeros(4))
        assert torch.equal(a, b)


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.as_tensor([1.0, -2.0], requires_grad=True)
        with ad.Tape() as tape:
            ad.backward(tape, (x * x).sum())
        np.testing.assert_array_equal(x.grad.numpy(), [2.0, -4.0])

    def test_non_scalar_rejected(self):
        x = ad.as_tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape, pytest.raises(ad.TapeError, match="scalar"):
            tape.backward(x * 2)

    def test_second_backward_rejected(self):
        x = ad.as_tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = (x * x).sum()
            tape.backward(loss)
            with pytest.raises(ad.TapeError, match="already"):
                tape.backward(loss)

    def test_untracked_leaf_untouched(self):
        x = ad.as_tensor([1.0, 2.0], requires_grad=True)
        c = ad.as_tensor([3.0, 4.0])
        with ad.Tape() as tape:
            tape.backward((x * c).sum())
        assert c.grad is None
        np.testing.assert_array_equal(x.grad.numpy(), [3.0, 4.0])

    def test_kl_of_softmaxed_rows_finite_difference(self):
        rng = np.random.default_rng(0)
        s_old = ad.as_tensor(rng.normal(size=(4, 4)))
        s_new = rand(rng, 4, 4)
        assert_gradcheck(lambda: skd_loss(s_old, s_new, 1.0), [s_new])

    def test_conv_finite_difference(self):
        rng = np.random.default_rng(1)
        x, w, b = rand(rng, 1, 2, 4, 4), rand(rng, 3, 2, 3, 3), rand(rng, 3)
        assert_gradcheck(lambda: (ad.conv2d_same(x, w, b) ** 2).sum(), [x, w, b])


# one entry per differentiable op: (name, builder(rng) -> (fn, tensors))
def _conv(rng):
    x, w, b = rand(rng, 1, 2, 4, 4), rand(rng, 3, 2, 3, 3), rand(rng, 3)
    return lambda: (ad.conv2d_same(x, w, b) ** 2).sum(), [x, w, b]


def _conv_strided(rng):
    x, w, b = rand(rng, 2, 2, 5, 4), rand(rng, 3, 2, 3, 3), rand(rng, 3)
    return lambda: (ad.conv2d_same(x, w, b, stride=2) ** 2).sum(), [x, w, b]


def _conv_per_sample(rng):
    x, w, b = rand(rng, 2, 3, 4, 4), rand(rng, 2, 3, 3, 3, 3), rand(rng, 2, 3)
    return lambda: (ad.conv2d_same_per_sample(x, w, b) ** 2).sum(), [x, w, b]


def _linear(rng):
    x, w, b = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5)
    return lambda: (ad.linear(x, w, b) ** 2).sum(), [x, w, b]


def _relu(rng):
    x = away_from_zero(rng, 3, 4)
    c = ad.as_tensor(rng.normal(size=(3, 4)))
    return lambda: (ad.relu(x) * c).sum(), [x]


def _gap(rng):
    x = rand(rng, 2, 3, 4, 5)
    return lambda: (ad.global_avg_pool(x) ** 2).sum(), [x]


def _elementwise(rng):
    a, b, c = rand(rng, 3, 3), rand(rng, 3, 3), rand(rng, 3, 3)
    return lambda: ((a + b) * c - a * b).sum(), [a, b, c]


def _normalize_rows(rng):
    x = rand(rng, 4, 5)
    c = ad.as_tensor(rng.normal(size=(4, 5)))
    return lambda: (ad.normalize_rows(x) * c).sum(), [x]


def _matmul(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    return lambda: ((a @ b) ** 2).sum(), [a, b]


def _softmax_log(rng):
    x = rand(rng, 3, 5)
    c = ad.as_tensor(rng.normal(size=(3, 5)))
    return lambda: (torch.log(ad.softmax(x, dim=1)) * c).sum() + (ad.log_softmax(x) * c).mean(), [x]


def _similarity(rng):
    f = rand(rng, 5, 4)
    c = ad.as_tensor(rng.normal(size=(5, 5)))
    return lambda: (similarity_matrix(f) * c).sum(), [f]


def _skd(rng):
    s_old = ad.as_tensor(rng.uniform(-1, 1, (4, 4)))
    f = rand(rng, 4, 3)
    return lambda: skd_loss(s_old, similarity_matrix(f), 0.5), [f]


def _triplet(rng):
    f = ad.as_tensor(rng.normal(size=(6, 3)) * 0.3, requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2, 2])
    return lambda: triplet_loss(f, labels, 2.0), [f]


def _cross_entropy(rng):
    logits = rand(rng, 4, 3)
    return lambda: cross_entropy(logits, np.array([0, 2, 1, 2])), [logits]


def _reconstruction(rng):
    target = ad.as_tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
    pred = ad.as_tensor(target.numpy() + rng.uniform(0.05, 0.2, (1, 3, 4, 4)) * rng.choice([-1, 1], (1, 3, 4, 4)),
                        requires_grad=True)
    return lambda: reconstruction_loss(target, pred, "l1") + reconstruction_loss(target, pred, "l2"), [pred]


OPS = {f.__name__.strip("_"): f for f in [
    _conv, _conv_strided, _conv_per_sample, _linear, _relu, _gap, _elementwise, _normalize_rows,
    _matmul, _softmax_log, _similarity, _skd, _triplet, _cross_entropy, _reconstruction]}


@pytest.mark.parametrize("op", sorted(OPS))
def test_gradients_match_finite_differences(op):
    for seed in SEEDS:
        fn, tensors = OPS[op](np.random.default_rng(1000 + seed))
        assert_gradcheck(fn, tensors)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = ad.as_tensor([0.5, -1.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = torch.zeros(2)
        ad.optimizer_step(opt)
        np.testing.assert_array_equal(p.detach().numpy(), [0.5, -1.0])
        assert opt.state.step == 1

    def test_first_step_moves_by_lr(self):
        p = ad.as_tensor([0.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = torch.ones(1)
        opt.step()
        # bias-corrected first step: m_hat = 1, v_hat = 1
        assert p.item() == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_gradients_cleared_after_step(self):
        p = ad.as_tensor([1.0], requires_grad=True)
        opt = ad.Adam([p])
        p.grad = torch.ones(1)
        opt.step()
        assert p.grad is None

    def test_missing_gradient_rejected(self):
        p = ad.as_tensor([1.0], requires_grad=True)
        opt = ad.Adam([p])
        with pytest.raises(ValueError, match="no gradient"):
            opt.step()

    def test_quadratic_decreases_monotonically(self):
        w = ad.as_tensor([1.0], requires_grad=True)
        opt = ad.Adam([w], lr=0.1)
        losses = [float(w.detach() ** 2)]
        for _ in range(2):
            with ad.Tape() as tape:
                tape.backward((w * w).sum())
            opt.step()
            losses.append(float(w.detach() ** 2))
        assert losses[0] > losses[1] > losses[2]
