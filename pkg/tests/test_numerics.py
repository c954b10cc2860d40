import math

import mpmath
import numpy as np
import pytest
import torch

from slt import numerics as nx
from slt.errors import DimensionError, EmptySequenceError, EvaluationError, RankError


def rand(*shape, seed=0, requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=nx.DTYPE).requires_grad_(requires_grad)


class TestMatmul:
    def test_identity(self):
        a = rand(2, 2)
        assert torch.equal(nx.matmul(torch.eye(2), a), a)

    def test_direct(self):
        c = nx.matmul(nx.as_tensor([[1, 2], [3, 4]]), nx.as_tensor([[5, 6], [7, 8]]))
        assert c.tolist() == [[19, 22], [43, 50]]

    def test_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(rand(2, 3), rand(2, 3))

    def test_gradient_is_ones_times_b_transpose(self):
        a, b = rand(3, 4, seed=1, requires_grad=True), rand(4, 2, seed=2)
        err = nx.finite_difference_check(lambda x: nx.matmul(x, b).sum(), a)
        assert err <= 1e-4
        nx.matmul(a, b).sum().backward()
        assert torch.allclose(a.grad, torch.ones(3, 2) @ b.T, atol=1e-12)


class TestTemporalConv:
    def test_delta_kernel_is_identity(self):
        x = rand(7, 5)
        w = torch.zeros(5, 5, 3)
        w[:, :, 1] = torch.eye(5)
        assert torch.allclose(nx.temporal_conv1d(x, w, torch.zeros(5)), x, atol=0)

    def test_ones_kernel_constant_input(self):
        x = torch.full((6, 1), 2.5)
        y = nx.temporal_conv1d(x, torch.ones(1, 1, 3), torch.zeros(1))
        assert y[:, 0].tolist() == [5.0, 7.5, 7.5, 7.5, 7.5, 5.0]

    def test_shape_contract(self):
        w = rand(512, 832, 3) * 0.01
        assert nx.temporal_conv1d(rand(8, 832), w, torch.zeros(512)).shape == (8, 512)

    @pytest.mark.parametrize("t", [1, 2, 5, 8, 9])
    def test_stride_two_ceil(self, t):
        y = nx.temporal_conv1d(rand(t, 2), rand(3, 2, 3), None, stride=2)
        assert y.shape == (math.ceil(t / 2), 3)

    def test_empty_sequence(self):
        with pytest.raises(EmptySequenceError):
            nx.temporal_conv1d(torch.zeros(0, 2), rand(3, 2, 3))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradient(self, stride):
        x, w = rand(6, 3, seed=3, requires_grad=True), rand(2, 3, 3, seed=4, requires_grad=True)
        b = rand(2, seed=5)
        assert nx.finite_difference_check(lambda v: nx.temporal_conv1d(v, w, b, stride).square().sum(), x) <= 1e-4
        assert nx.finite_difference_check(lambda v: nx.temporal_conv1d(x, v, b, stride).square().sum(), w) <= 1e-4


class TestSoftmax:
    def test_uniform(self):
        assert torch.allclose(nx.softmax(torch.zeros(5)), torch.full((5,), 0.2), atol=0)

    def test_shift_invariance(self):
        x = rand(4, 6)
        assert torch.allclose(nx.softmax(x + 17.0), nx.softmax(x), atol=1e-12, rtol=0)

    def test_direct(self):
        p = nx.softmax(nx.as_tensor([0.0, math.log(3)]))
        assert torch.allclose(p, nx.as_tensor([0.25, 0.75]), atol=1e-15)

    def test_rows_sum_to_one_on_wide_range(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(200, 30, generator=g) * 200 - 100
        assert (nx.softmax(x).sum(-1) - 1).abs().max() <= 1e-12

    def test_log_softmax_matches(self):
        x = rand(3, 5)
        assert torch.allclose(nx.log_softmax(x).exp(), nx.softmax(x), atol=1e-15)

    def test_sum_softmax_gradient(self):
        x = rand(3, 4, requires_grad=True)
        w = rand(3, 4, seed=9)
        assert nx.finite_difference_check(lambda v: (nx.softmax(v) * w).sum(), x) <= 1e-6
        assert nx.finite_difference_check(lambda v: nx.softmax(v).sum(), x) <= 1e-6


def smoothed_ce_reference(logits, target, eps):
    mpmath.mp.dps = 50
    logits = [mpmath.mpf(v) for v in logits]
    z = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in logits))
    n = len(logits)
    q = [(1 - mpmath.mpf(eps)) * (i == target) + mpmath.mpf(eps) / n for i in range(n)]
    return float(-mpmath.fsum(qi * (li - z) for qi, li in zip(q, logits)))


class TestCrossEntropy:
    def test_peaked_zero(self):
        logits = nx.as_tensor([[0.0, -1e4, -1e4]])
        assert nx.cross_entropy_label_smoothed(logits, [0], 0.0).item() == pytest.approx(0, abs=1e-12)

    def test_uniform_is_log_v(self):
        loss = nx.cross_entropy_label_smoothed(torch.zeros(3, 7), [0, 3, 6], 0.0)
        assert loss.item() == pytest.approx(math.log(7), abs=1e-14)

    def test_smoothing_matches_high_precision_formula(self):
        loss = nx.cross_entropy_label_smoothed(nx.as_tensor([[2.0, 0, 0, 0]]), [0], 0.2)
        assert loss.item() == pytest.approx(smoothed_ce_reference([2.0, 0, 0, 0], 0, 0.2), abs=1e-14)

    def test_ignores_padding(self):
        logits = rand(4, 5)
        full = nx.cross_entropy_label_smoothed(logits[:2], [1, 2], 0.1)
        padded = nx.cross_entropy_label_smoothed(logits, [1, 2, 0, 0], 0.1, ignore_index=0)
        assert full.item() == pytest.approx(padded.item(), abs=1e-15)

    def test_all_padded(self):
        with pytest.raises(EvaluationError):
            nx.cross_entropy_label_smoothed(rand(2, 3), [0, 0], 0.1, ignore_index=0)

    def test_gradient(self):
        x = rand(4, 6, requires_grad=True)
        f = lambda v: nx.cross_entropy_label_smoothed(v, [1, 0, 5, 2], 0.2)
        assert nx.finite_difference_check(f, x) <= 1e-6


class TestBackward:
    def test_product_rule(self):
        x, y = nx.as_tensor(3.0, True), nx.as_tensor(-2.0, True)
        grads = nx.backward(x * y, {"x": x, "y": y})
        assert grads["x"].item() == -2.0 and grads["y"].item() == 3.0

    def test_relu_negative_and_zero(self):
        x = nx.as_tensor([-1.0, 0.0, 2.0], True)
        grads = nx.backward(nx.relu(x).sum(), {"x": x})
        assert grads["x"].tolist() == [0.0, 0.0, 1.0]

    def test_non_trainable_gets_zero(self):
        x, c = nx.as_tensor([1.0, 2.0], True), nx.as_tensor([3.0, 4.0])
        grads = nx.backward((x * c).sum(), [("x", x), ("c", c)])
        assert grads["c"].tolist() == [0.0, 0.0]

    def test_twice_doubles(self):
        x = rand(5, requires_grad=True)
        loss = (nx.softmax(x) * torch.arange(5.0)).sum()
        once = nx.backward(loss, {"x": x}, retain_graph=True)["x"]
        twice = nx.backward(loss, {"x": x})["x"]
        assert torch.equal(twice, 2 * once)

    def test_rank_error(self):
        x = rand(3, requires_grad=True)
        with pytest.raises(RankError):
            nx.backward(x * 2, {"x": x})


class TestFiniteDifference:
    def test_linear_is_exact(self):
        w = rand(10, seed=2)
        assert nx.finite_difference_check(lambda v: (v * w).sum(), rand(10, requires_grad=True)) <= 1e-10

    def test_restores_input(self):
        x = rand(4, requires_grad=True)
        before = x.detach().clone()
        nx.finite_difference_check(lambda v: v.square().sum(), x)
        assert torch.equal(x.detach(), before)

    def test_non_finite(self):
        with pytest.raises(EvaluationError):
            nx.finite_difference_check(lambda v: v.log().sum(), nx.as_tensor([-1.0], True))


PRIMITIVES = {
    "matmul": lambda x, w: nx.matmul(x, w[: x.shape[1], :3]).square().sum(),
    "conv_s1": lambda x, w: nx.temporal_conv1d(x, w[:2, :4].reshape(2, 4, 1).expand(2, 4, 3) * 0 + w[:2, :12].reshape(2, 4, 3), None, 1).square().sum(),
    "conv_s2": lambda x, w: nx.temporal_conv1d(x, w[:2, :12].reshape(2, 4, 3), None, 2).square().sum(),
    "softmax": lambda x, w: (nx.softmax(x) * w[:5, :4]).sum(),
    "log_softmax": lambda x, w: (nx.log_softmax(x) * w[:5, :4]).sum(),
    "relu": lambda x, w: (nx.relu(x) * w[:5, :4]).sum(),
    "cross_entropy": lambda x, w: nx.cross_entropy_label_smoothed(x, [0, 1, 2, 3, 1], 0.2),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_20_seeds(name):
    f = PRIMITIVES[name]
    for seed in range(20):
        x = rand(5, 4, seed=seed, requires_grad=True)
        if name == "relu":
            # keep away from the kink
            with torch.no_grad():
                x += torch.sign(x) * 0.01
        w = rand(16, 16, seed=1000 + seed)
        assert nx.finite_difference_check(lambda v: f(v, w), x, h=1e-5) <= 1e-4, seed
