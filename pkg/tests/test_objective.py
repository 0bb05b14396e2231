import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mamc_vad.objective import (
    LossWeights,
    alignment_loss,
    compactness_loss,
    diversity_loss,
    gradient_loss,
    intensity_loss,
    total_loss,
)

from .gradcheck import central_difference, relative_error


def t(x, dtype=torch.float64):
    return torch.tensor(x, dtype=dtype)


def test_intensity_examples():
    img = torch.rand(2, 1, 5, 5, dtype=torch.float64)
    assert float(intensity_loss(img, img)) == 0.0
    assert float(intensity_loss(img + 0.1, img)) == pytest.approx(0.01, rel=1e-9)


def test_gradient_loss_hand_example():
    pred = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    target = t([[[[0.0, 1.0], [0.0, 1.0]]]])
    assert float(gradient_loss(pred, target)) == pytest.approx(0.5)


def test_gradient_loss_constant_and_symmetric():
    a = torch.full((1, 1, 6, 4), 0.3, dtype=torch.float64)
    b = torch.full((1, 1, 6, 4), 0.8, dtype=torch.float64)
    assert float(gradient_loss(a, b)) == 0.0
    x, y = torch.rand(2, 1, 6, 7, dtype=torch.float64), torch.rand(2, 1, 6, 7, dtype=torch.float64)
    assert float(gradient_loss(x, y)) == pytest.approx(float(gradient_loss(y, x)), rel=1e-12)


def gradient_loss_oracle(p, q):
    """Literal double loop over every valid position and both axes."""
    H, W = p.shape
    total, n = 0.0, 0
    for i in range(H):
        for j in range(W):
            if i >= 1:
                total += abs(abs(p[i, j] - p[i - 1, j]) - abs(q[i, j] - q[i - 1, j]))
                n += 1
            if j >= 1:
                total += abs(abs(p[i, j] - p[i, j - 1]) - abs(q[i, j] - q[i, j - 1]))
                n += 1
    return total / n


def test_gradient_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    p, q = rng.random((5, 7)), rng.random((5, 7))
    got = float(gradient_loss(t(p)[None, None], t(q)[None, None]))
    assert got == pytest.approx(gradient_loss_oracle(p, q), rel=1e-12)


def test_alignment_examples():
    f = torch.rand(3, 4, 2, 2, dtype=torch.float64) + 0.1
    assert float(alignment_loss(f, f)) == pytest.approx(0.0, abs=1e-12)
    assert float(alignment_loss(t([[1.0, 0.0]]), t([[0.0, 1.0]]))) == pytest.approx(1.0)
    assert float(alignment_loss(t([[1.0, 1.0]]), t([[1.0, 0.0]]))) == pytest.approx(1 - 1 / math.sqrt(2))
    assert float(alignment_loss(t([[1.0, 1.0]]), t([[1.0, 0.0]]))) == pytest.approx(0.2929, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_alignment_range_on_nonnegative_features(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.relu(torch.randn(3, 8, generator=g, dtype=torch.float64)) + 1e-3
    b = torch.relu(torch.randn(3, 8, generator=g, dtype=torch.float64)) + 1e-3
    v = float(alignment_loss(a, b))
    assert 0.0 <= v <= 1.0
    assert 0.0 <= float(alignment_loss(a, -b)) <= 2.0


def test_compactness_examples():
    bank = t([[3.0, 4.0], [10.0, 10.0]])
    assert float(compactness_loss([t([[0.0, 0.0]])], [bank])) == pytest.approx(25.0)
    assert float(compactness_loss([bank.clone()], [bank])) == 0.0


def test_compactness_averages_over_all_levels():
    b1, b2 = t([[0.0, 0.0], [5.0, 5.0]]), t([[1.0, 1.0, 1.0], [9.0, 9.0, 9.0]])
    q1, q2 = t([[1.0, 0.0], [0.0, 2.0]]), t([[1.0, 1.0, 3.0]])
    assert float(compactness_loss([q1, q2], [b1, b2])) == pytest.approx((1 + 4 + 4) / 3)


def test_diversity_examples():
    bank = t([[0.0, 0.0], [2.0, 0.0], [50.0, 50.0]])
    q = t([[0.0, 0.0]])  # d1 = 0, d2 = 4
    assert float(diversity_loss([q], [bank], margin=1.0)) == 0.0
    tie = t([[1.0, 0.0]])  # equidistant from items 0 and 1
    assert float(diversity_loss([tie], [bank], margin=1.0)) == pytest.approx(1.0)
    assert float(diversity_loss([tie], [bank], margin=0.25)) == pytest.approx(0.25)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_feature_losses_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(4, 6, generator=g, dtype=torch.float64)
    m = torch.randn(5, 6, generator=g, dtype=torch.float64)
    assert float(compactness_loss([q], [m])) >= 0
    assert float(diversity_loss([q], [m])) >= 0
    assert float(intensity_loss(q, m[:4])) >= 0
    assert float(gradient_loss(q[None, None], m[None, None, :4])) >= 0


def test_total_loss_combination():
    terms = {k: torch.tensor(v, dtype=torch.float64)
             for k, v in dict(int=0.3, gd=0.2, align=0.1, comp=40.0, diver=2.0).items()}
    zero = LossWeights(0, 0, 0, 0, 0)
    assert float(total_loss(terms, zero)) == 0.0
    only = LossWeights(0, 0, 3.0, 0, 0)
    assert float(total_loss(terms, only)) == pytest.approx(0.3)
    w = LossWeights()
    vec_t = np.array([0.3, 0.2, 0.1, 40.0, 2.0])
    vec_w = np.array([w.int, w.gd, w.align, w.comp, w.diver])
    assert float(total_loss(terms, w)) == pytest.approx(float(vec_t @ vec_w), rel=1e-12)


def test_default_weights():
    w = LossWeights()
    assert (w.int, w.gd, w.align, w.comp, w.diver) == (1, 1, 1, 5e-3, 1e-4)


# ---- gradient checks on tiny instances (<= 64 parameters)

TINY_CASES = {
    "int": lambda x, y: intensity_loss(x, y),
    "gd": lambda x, y: gradient_loss(x, y),
    "align": lambda x, y: alignment_loss(x.reshape(2, -1), y.reshape(2, -1)),
    "comp": lambda x, y: compactness_loss([x.reshape(4, 8)], [y.reshape(4, 8)]),
    "diver": lambda x, y: diversity_loss([x.reshape(4, 8)], [y.reshape(4, 8)], margin=5.0),
}


def kink_margin(name, x, y):
    """Distance of the instance to the nearest non-differentiable point of the loss.

    Central differences are only a valid oracle where the loss is smooth
    within the step.
    """
    x, y = x.detach().double(), y.detach().double()
    if name == "gd":
        dp = torch.cat([(x[..., 1:, :] - x[..., :-1, :]).flatten(), (x[..., :, 1:] - x[..., :, :-1]).flatten()])
        dt = torch.cat([(y[..., 1:, :] - y[..., :-1, :]).flatten(), (y[..., :, 1:] - y[..., :, :-1]).flatten()])
        return float(torch.min(dp.abs().min(), (dp.abs() - dt.abs()).abs().min()))
    if name in ("comp", "diver"):
        q, m = x.reshape(4, 8), y.reshape(4, 8)
        d = torch.cdist(q, m).sort(dim=1).values
        gaps = (d[:, 1] - d[:, 0]).min()
        if name == "diver":
            hinge = (d[:, 0] ** 2 - d[:, 1] ** 2 + 5.0).abs().min()
            gaps = min(gaps, (d[:, 2] - d[:, 1]).min(), hinge)
        return float(gaps)
    return float("inf")


def tiny_instance(name, seed, dtype, h):
    g = torch.Generator().manual_seed(seed)
    while True:
        x = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64)
        y = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64)
        if kink_margin(name, x, y) > 10 * h:
            return x.to(dtype).requires_grad_(True), y.to(dtype).requires_grad_(True)


@pytest.mark.parametrize("name", sorted(TINY_CASES))
@pytest.mark.parametrize("dtype, h, tol", [(torch.float64, 1e-6, 1e-5), (torch.float32, 1e-3, 1e-3)])
def test_tiny_loss_gradients(name, dtype, h, tol):
    fn = TINY_CASES[name]
    for seed in range(10):
        x, y = tiny_instance(name, seed, dtype, h)
        fn(x, y).backward()
        for var in (x, y):
            if name in ("int", "gd") and var is y:
                continue  # target side is data, not a parameter
            fd = central_difference(lambda: fn(x, y), var, h)
            assert relative_error(var.grad, fd) < tol, (name, seed)
