"""Loss tests against independent oracles and finite differences."""

import numpy as np
import pytest

from phenodapt import tensor as tc
from phenodapt.tensor import Tensor, Graph
from phenodapt import losses
from phenodapt.losses import RankLossConfig, rank_n_contrast, mse, binary_domain_loss, coral

from conftest import finite_diff, rel_err


def rank_oracle(feats: np.ndarray, guide: np.ndarray, tau: float) -> float:
    """Exhaustive enumeration of every (i, j) pair and its negative set."""
    n = len(feats)
    unit = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-8)
    sims = unit @ unit.T
    total = 0.0
    for i in range(n):
        li = 0.0
        for j in range(n):
            if j == i:
                continue
            neg = [k for k in range(n)
                   if k != i and abs(guide[i] - guide[k]) >= abs(guide[i] - guide[j])]
            den = sum(np.exp(sims[i, k] / tau) for k in neg)
            li += -np.log(np.exp(sims[i, j] / tau) / den)
        total += li / n
    return total / n


# ---------------------------------------------------------------------------
# mse


def test_mse_trivials():
    y = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert mse(y, Tensor(y.copy())).item() == 0.0
    assert mse(np.array([0.0]), Tensor([2.0])).item() == 4.0


def test_mse_mask_matches_hand_sum(rng):
    y = rng.normal(150, 20, (6, 5))
    y[rng.uniform(size=y.shape) < 0.4] = np.nan
    pred = rng.normal(150, 20, (6, 5))
    got = mse(y, Tensor(pred)).item()
    mask = np.isfinite(y)
    want = ((pred[mask] - y[mask]) ** 2).sum() / mask.sum()
    assert abs(got - want) < 1e-12


def test_mse_all_masked_errors():
    with pytest.raises(losses.MaskedLossError):
        mse(np.full((2, 2), np.nan), Tensor(np.zeros((2, 2))))


def test_mse_gradient_ignores_masked_entries(rng):
    y = rng.normal(0, 1, (3, 4))
    y[0, 0] = np.nan
    p = Tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
    with Graph():
        mse(y, p).backward()
    assert p.grad[0, 0] == 0.0
    mask = np.isfinite(y)
    want = 2.0 * (p.data - np.where(mask, y, 0.0)) * mask / mask.sum()
    assert np.max(np.abs(p.grad - want)) < 1e-12


# ---------------------------------------------------------------------------
# rank-n-contrast


def test_rank_n2_exactly_zero(rng):
    cfg = RankLossConfig()
    for _ in range(20):
        f = rng.normal(0, 1, (2, 4))
        g = rng.normal(0, 5, 2)
        assert rank_n_contrast(Tensor(f), g, cfg).item() == 0.0


def test_rank_three_years_matches_enumeration(rng):
    cfg = RankLossConfig(tau=0.1)
    g = np.array([2000.0, 2001.0, 2010.0])
    f = rng.normal(0, 1, (3, 6))
    got = rank_n_contrast(Tensor(f), g, cfg).item()
    assert abs(got - rank_oracle(f, g, 0.1)) < 1e-9


def test_rank_equal_guidance_full_softmax(rng):
    cfg = RankLossConfig(tau=0.2)
    g = np.full(5, 1999.0)
    f = rng.normal(0, 1, (5, 3))
    got = rank_n_contrast(Tensor(f), g, cfg).item()
    assert abs(got - rank_oracle(f, g, 0.2)) < 1e-9


def test_rank_oracle_randomized_batches(rng):
    cfg = RankLossConfig(tau=0.1)
    for _ in range(200):
        n = int(rng.integers(2, 7))
        f = rng.normal(0, 1, (n, int(rng.integers(2, 8))))
        g = np.round(rng.uniform(1950, 2020, n))
        got = rank_n_contrast(Tensor(f), g, cfg).item()
        want = rank_oracle(f, g, cfg.tau)
        assert abs(got - want) < 1e-9
        assert got >= -1e-15


def test_rank_per_vector_rescale_invariance(rng):
    cfg = RankLossConfig()
    f = rng.normal(0, 1, (5, 4))
    g = rng.uniform(0, 10, 5)
    base = rank_n_contrast(Tensor(f), g, cfg).item()
    scales = rng.uniform(0.1, 10.0, (5, 1))
    scaled = rank_n_contrast(Tensor(f * scales), g, cfg).item()
    assert abs(base - scaled) < 1e-9


def test_rank_guidance_affine_invariance(rng):
    cfg = RankLossConfig()
    f = rng.normal(0, 1, (6, 4))
    g = rng.uniform(1950, 2020, 6)
    base = rank_n_contrast(Tensor(f), g, cfg).item()
    assert abs(base - rank_n_contrast(Tensor(f), 3.0 * g + 7.5, cfg).item()) < 1e-9
    assert abs(base - rank_n_contrast(Tensor(f), g - 2000.0, cfg).item()) < 1e-9


def test_rank_gradient_matches_fd(rng):
    cfg = RankLossConfig()
    g = np.round(rng.uniform(0, 30, 5))
    f0 = rng.normal(0, 1, (5, 4))

    def fn(arrs):
        return rank_n_contrast(Tensor(arrs[0]), g, cfg).item()

    fd = finite_diff(fn, [f0.copy()])
    p = Tensor(f0, requires_grad=True)
    with Graph():
        rank_n_contrast(p, g, cfg).backward()
    assert rel_err(p.grad, fd[0]) < 1e-4


def test_rank_zero_norm_guard_counts():
    cfg = RankLossConfig()
    before = losses.GUARD_COUNTS["rank_zero_norm"]
    f = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 1.0]])
    out = rank_n_contrast(Tensor(f), np.array([0.0, 1.0, 2.0]), cfg)
    assert np.isfinite(out.item())
    assert losses.GUARD_COUNTS["rank_zero_norm"] == before + 1


def test_rank_validation_errors():
    cfg = RankLossConfig()
    with pytest.raises(ValueError):
        rank_n_contrast(Tensor(np.ones((1, 3))), np.array([1.0]), cfg)
    with pytest.raises(ValueError):
        RankLossConfig(tau=0.0)
    with pytest.raises(ValueError):
        RankLossConfig(guidance="altitude")


# ---------------------------------------------------------------------------
# binary domain loss


def test_bce_confident_predictions_near_zero():
    logits = Tensor([20.0, -20.0])
    out = binary_domain_loss(logits, [1, 0])
    assert out.item() < 1e-6


def test_bce_zero_logits_ln2():
    out = binary_domain_loss(Tensor(np.zeros(4)), [0, 1, 0, 1])
    assert abs(out.item() - np.log(2.0)) < 1e-12


def test_bce_matches_direct_formula(rng):
    z = rng.normal(0, 3, 8)
    y = rng.integers(0, 2, 8).astype(float)
    got = binary_domain_loss(Tensor(z), y).item()
    p = 1.0 / (1.0 + np.exp(-z))
    want = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert abs(got - want) < 1e-12


def test_bce_column_logits_and_validation(rng):
    z = rng.normal(0, 1, (5, 1))
    y = np.array([0, 1, 1, 0, 1])
    a = binary_domain_loss(Tensor(z), y).item()
    b = binary_domain_loss(Tensor(z[:, 0]), y).item()
    assert a == b
    with pytest.raises(ValueError):
        binary_domain_loss(Tensor(np.zeros(3)), [0, 1, 2])


def test_bce_gradient_matches_fd(rng):
    y = np.array([0.0, 1.0, 1.0, 0.0])
    z0 = rng.normal(0, 2, 4)

    def fn(arrs):
        return binary_domain_loss(Tensor(arrs[0]), y).item()

    fd = finite_diff(fn, [z0.copy()])
    p = Tensor(z0, requires_grad=True)
    with Graph():
        binary_domain_loss(p, y).backward()
    assert rel_err(p.grad, fd[0]) < 1e-4


# ---------------------------------------------------------------------------
# coral


def cov_oracle(a):
    c = a - a.mean(axis=0, keepdims=True)
    return c.T @ c / (len(a) - 1)


def test_coral_identical_zero_and_permutation(rng):
    a = rng.normal(0, 1, (6, 4))
    assert coral(Tensor(a), Tensor(a.copy())).item() < 1e-12
    perm = a[[3, 1, 2, 0, 5, 4]]
    assert coral(Tensor(a), Tensor(perm)).item() < 1e-12


def test_coral_symmetric_and_matches_covariance_oracle(rng):
    a = rng.normal(0, 1, (5, 3))
    b = rng.normal(0.5, 2, (7, 3))
    got = coral(Tensor(a), Tensor(b)).item()
    want = ((cov_oracle(a) - cov_oracle(b)) ** 2).sum() / (4 * 3 * 3)
    assert abs(got - want) < 1e-12
    assert abs(got - coral(Tensor(b), Tensor(a)).item()) < 1e-12
    assert got >= 0.0


def test_coral_needs_two_samples():
    with pytest.raises(ValueError):
        coral(Tensor(np.ones((1, 3))), Tensor(np.ones((4, 3))))


def test_coral_gradient_matches_fd(rng):
    b = rng.normal(0, 1, (5, 3))
    a0 = rng.normal(0, 1, (4, 3))

    def fn(arrs):
        return coral(Tensor(arrs[0]), Tensor(b)).item()

    fd = finite_diff(fn, [a0.copy()])
    p = Tensor(a0, requires_grad=True)
    with Graph():
        coral(p, Tensor(b)).backward()
    assert rel_err(p.grad, fd[0]) < 1e-4
