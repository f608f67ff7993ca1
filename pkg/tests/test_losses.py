import itertools

import numpy as np
import pytest
import torch

from conftest import central_difference_check
from oracles import l1_oracle
from physgan.losses import (
    LossReport,
    loss_pixel_consistency,
    loss_pixel_ground_truth,
    loss_regenerated_ground_truth,
    lsgan_d_loss,
    lsgan_g_loss,
    total_generator_objective,
)

PIXEL_LOSSES = [loss_pixel_consistency, loss_pixel_ground_truth, loss_regenerated_ground_truth]


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


@pytest.mark.parametrize("loss", PIXEL_LOSSES)
def test_pixel_loss_examples(loss, rng):
    a = t(rng.uniform(-1, 1, (1, 3, 4, 4)))
    b = t(rng.uniform(-1, 1, (1, 3, 4, 4)))
    assert loss(a, a) == 0
    assert float(loss(t(np.full((3, 3), 0.2)), t(np.full((3, 3), 0.5)))) == pytest.approx(0.3, abs=1e-15)
    assert float(loss(a, b)) == float(loss(b, a))
    assert float(loss(2 * a, 2 * b)) == pytest.approx(2 * float(loss(a, b)), abs=1e-15)
    assert abs(float(loss(a, b)) - l1_oracle(a.numpy(), b.numpy())) < 1e-9


@pytest.mark.parametrize("loss", PIXEL_LOSSES)
def test_pixel_loss_shape_mismatch(loss):
    with pytest.raises(ValueError):
        loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_l1_metric_axioms(rng):
    for _ in range(20):
        a, b, c = (t(rng.normal(size=(1, 3, 4, 4))) for _ in range(3))
        ab, bc, ac = (float(loss_pixel_ground_truth(p, q)) for p, q in ((a, b), (b, c), (a, c)))
        assert ab >= 0
        assert ac <= ab + bc + 1e-9


def test_lsgan_values():
    ones, zeros, halves = torch.ones(1, 1, 3, 3), torch.zeros(1, 1, 3, 3), torch.full((1, 1, 3, 3), 0.5)
    assert float(lsgan_d_loss(ones, zeros)) == 0
    assert float(lsgan_d_loss(halves, halves)) == pytest.approx(0.25)
    assert float(lsgan_d_loss(zeros, ones)) == pytest.approx(1.0)
    assert float(lsgan_g_loss(ones)) == 0
    assert float(lsgan_g_loss(zeros)) == pytest.approx(0.5)
    assert float(lsgan_g_loss(halves)) == pytest.approx(0.125)


def test_lsgan_grid_minimizers():
    grid = np.linspace(-1, 2, 31)
    d = {(r, f): float(lsgan_d_loss(t([r]), t([f]))) for r, f in itertools.product(grid, grid)}
    assert min(d, key=d.get) == pytest.approx((1.0, 0.0))
    g = {f: float(lsgan_g_loss(t([f]))) for f in grid}
    assert min(g, key=g.get) == pytest.approx(1.0)


def test_total_objective():
    assert total_generator_objective(0.0, 0.0, 0.0, 0.0, 0.0) == 0
    one = total_generator_objective(0.2, 0.3, 0.1, 0.2, 0.3, lam=10)
    two = total_generator_objective(0.2, 0.3, 0.1, 0.2, 0.3, lam=20)
    assert two - one == pytest.approx(10 * 0.6)
    assert total_generator_objective(0.0, 0.0, 1.0, 0.0, 0.0) == 50
    with pytest.raises(ValueError):
        total_generator_objective(0, 0, 0, 0, 0, lam=0)


def _away_from_kink(rng, shape):
    a = rng.uniform(-1, 1, shape)
    b = a + rng.choice([-1, 1], shape) * rng.uniform(0.05, 0.5, shape)
    return t(a), t(b)


@pytest.mark.parametrize("loss", PIXEL_LOSSES)
def test_pixel_loss_gradient(loss, rng):
    a, b = _away_from_kink(rng, (1, 3, 4, 4))
    assert central_difference_check(lambda z: loss(z, b), a) < 1e-4
    assert central_difference_check(lambda z: loss(a, z), b) < 1e-4


def test_adversarial_gradients(rng):
    r, f = t(rng.normal(size=(1, 1, 4, 4))), t(rng.normal(size=(1, 1, 4, 4)))
    assert central_difference_check(lambda z: lsgan_d_loss(z, f), r) < 1e-4
    assert central_difference_check(lambda z: lsgan_d_loss(r, z), f) < 1e-4
    assert central_difference_check(lsgan_g_loss, f) < 1e-4


def test_total_objective_gradient(rng):
    parts = t(rng.uniform(0.1, 1, 5))
    assert central_difference_check(lambda z: total_generator_objective(*z, lam=50.0), parts) < 1e-4


def test_loss_report_finite():
    assert LossReport(l_p=1.0).is_finite()
    assert not LossReport(l_g=float("nan")).is_finite()
