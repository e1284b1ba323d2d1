import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from great.decoder import AffordanceDecoder, decode, dice_loss, focal_loss, total_loss
from great.errors import DomainError, ShapeError
from fd import check


def _scalar_focal(phi, label, gamma=2.0, alpha=0.25):
    total = 0.0
    for p, l in zip(phi, label):
        pos = -alpha * (1 - p) ** gamma * math.log(p)
        neg = -(1 - alpha) * p ** gamma * math.log(1 - p)
        total += l * pos + (1 - l) * neg
    return total / len(phi)


def _scalar_dice(phi, label, eps=1.0):
    inter = sum(p * l for p, l in zip(phi, label))
    denom = sum(p * p for p in phi) + sum(l * l for l in label)
    return 1 - (2 * inter + eps) / (denom + eps)


def _case(seed, n=8):
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.01, 0.99, n)
    label = rng.uniform(0, 1, n) * (rng.uniform(size=n) < 0.6)
    return torch.from_numpy(phi), torch.from_numpy(label)


# -- decoder --------------------------------------------------------------------


def test_zero_head_gives_half():
    dec = AffordanceDecoder(8)
    torch.nn.init.zeros_(dec.head.weight)
    torch.nn.init.zeros_(dec.head.bias)
    phi = decode(torch.randn(8, 49), torch.randn(8, 2048), dec)
    assert phi.shape == (2048,) and torch.all(phi == 0.5)


def test_large_bias_saturates_inside_interval():
    dec = AffordanceDecoder(8)
    torch.nn.init.zeros_(dec.head.weight)
    torch.nn.init.constant_(dec.head.bias, 20.0)
    phi = dec(torch.randn(8, 49), torch.randn(8, 2048))
    assert (phi > 0.999).all() and (phi < 1).all()


def test_phi_strictly_inside():
    dec = AffordanceDecoder(8)
    torch.nn.init.constant_(dec.head.bias, -200.0)
    phi = dec(torch.randn(8, 49), torch.randn(8, 100))
    assert (phi > 0).all() and (phi < 1).all()


def test_decoder_shape_error():
    with pytest.raises(ShapeError):
        AffordanceDecoder(8)(torch.randn(6, 49), torch.randn(8, 100))


def test_decoder_gradcheck():
    dec = AffordanceDecoder(8).double()
    F_ti = torch.randn(8, 9, dtype=torch.float64)
    w = torch.randn(16, dtype=torch.float64)
    for seed in range(5):
        x = torch.randn(8, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        assert check(lambda t: (dec(F_ti, t) * w).sum(), x) < 1e-4


# -- focal ----------------------------------------------------------------------


def test_focal_reduces_to_half_bce():
    phi, label = _case(0, 50)
    bce = torch.nn.functional.binary_cross_entropy(phi, label)
    torch.testing.assert_close(focal_loss(phi, label, gamma=0.0, alpha=0.5), 0.5 * bce, rtol=1e-12, atol=1e-12)


def test_focal_perfect_prediction():
    label = torch.tensor([0.0, 1.0, 1.0, 0.0, 1.0], dtype=torch.float64)
    phi = label.clamp(1e-7, 1 - 1e-7)
    assert focal_loss(phi, label) < 1e-5


def test_focal_scalar_oracle():
    for seed in range(20):
        phi, label = _case(seed)
        assert abs(focal_loss(phi, label).item() - _scalar_focal(phi.tolist(), label.tolist())) < 1e-9


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_focal_domain(bad):
    with pytest.raises(DomainError):
        focal_loss(torch.tensor([0.5, bad]), torch.tensor([0.0, 1.0]))


# -- dice -----------------------------------------------------------------------


def test_dice_perfect():
    label = torch.tensor([0.0, 0.3, 1.0, 0.7], dtype=torch.float64)
    assert dice_loss(label, label).item() == 0.0


def test_dice_disjoint_large():
    n = 10000
    phi = torch.zeros(n, dtype=torch.float64)
    label = torch.zeros(n, dtype=torch.float64)
    phi[: n // 2] = 1.0
    label[n // 2:] = 1.0
    assert dice_loss(phi, label).item() > 0.999


def test_dice_both_zero():
    z = torch.zeros(10, dtype=torch.float64)
    assert dice_loss(z, z).item() == 0.0


def test_dice_scalar_oracle():
    for seed in range(20):
        phi, label = _case(seed)
        assert abs(dice_loss(phi, label).item() - _scalar_dice(phi.tolist(), label.tolist())) < 1e-12


def test_dice_shape_error():
    with pytest.raises(ShapeError):
        dice_loss(torch.rand(5), torch.rand(6))


# -- total ----------------------------------------------------------------------


def test_total_is_sum():
    phi, label = _case(3)
    torch.testing.assert_close(total_loss(phi, label), focal_loss(phi, label) + dice_loss(phi, label))


def test_total_perfect():
    label = (torch.rand(64, dtype=torch.float64) > 0.5).double()
    assert total_loss(label.clamp(1e-7, 1 - 1e-7), label) < 1e-5


def test_total_gradient_100_cases():
    worst = 0.0
    for seed in range(100):
        phi, label = _case(seed)
        worst = max(worst, check(lambda p: total_loss(p, label), phi))
    assert worst < 1e-4


def test_total_batched_mean():
    a, b = _case(1), _case(2)
    both = total_loss(torch.stack([a[0], b[0]]), torch.stack([a[1], b[1]]))
    torch.testing.assert_close(both, (total_loss(*a) + total_loss(*b)) / 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40))
def test_loss_ranges(seed, n):
    phi, label = _case(seed, n)
    d = dice_loss(phi, label).item()
    assert 0.0 <= d <= 1.0
    assert focal_loss(phi, label).item() >= 0.0
    assert total_loss(phi, label).item() >= 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 64))
def test_monotone_toward_binary_label(seed, n):
    rng = np.random.default_rng(seed)
    label = torch.from_numpy((rng.uniform(size=n) < 0.5).astype(np.float64))
    ts = np.linspace(0, 0.999, 25)
    losses = [total_loss(0.5 + t * (label - 0.5), label).item() for t in ts]
    assert all(b < a for a, b in zip(losses, losses[1:]))
