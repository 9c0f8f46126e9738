"""Training objectives.

All losses are built from the primitive ops in `tensor`, so gradients come
from the same reverse-mode machinery as the model. Feature-space losses
expect row-major feature matrices (one sample per row).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor

# epsilon used to guard zero-norm feature vectors inside the rank loss;
# cosine_similarity in the engine errors instead (deliberate asymmetry).
NORM_EPS = 1e-8

# incremented whenever the rank loss has to guard a near-zero-norm vector
GUARD_COUNTS = {"rank_zero_norm": 0}


class MaskedLossError(ValueError):
    """Every label in the batch is missing."""


@dataclass
class RankLossConfig:
    """Temperature and guidance-variable choice for the rank loss."""

    tau: float = 0.1
    guidance: str = "year"  # year | annual-temperature | elevation

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        allowed = ("year", "annual-temperature", "elevation")
        if self.guidance not in allowed:
            raise ValueError(f"guidance must be one of {allowed}, got {self.guidance!r}")


def mse(y_true: np.ndarray, y_pred: Tensor) -> Tensor:
    """Mean squared error over unmasked entries; NaN in y_true marks missing."""
    y = np.asarray(y_true, dtype=np.float64)
    if y.shape != y_pred.data.shape:
        raise tc.ShapeError("mse", y.shape, y_pred.data.shape)
    mask = np.isfinite(y)
    n = int(mask.sum())
    if n == 0:
        raise MaskedLossError("mse: all labels masked")
    maskf = mask.astype(np.float64)
    filled = np.where(mask, y, 0.0)
    diff = tc.sub(tc.mul(y_pred, Tensor(maskf)), Tensor(filled))
    return tc.div(tc.tsum(tc.mul(diff, diff)), float(n))


def _softplus_parts(z: Tensor):
    # softplus(z) = relu(z) + log(1 + exp(-|z|)); the shared log term is
    # returned once so bce can reuse it for softplus(-z) as well.
    pos = tc.relu(z)
    neg = tc.relu(tc.neg(z))
    shared = tc.log(tc.add(tc.exp(tc.neg(tc.add(pos, neg))), 1.0))
    return pos, neg, shared


def binary_domain_loss(logits: Tensor, domains) -> Tensor:
    """Mean binary cross-entropy from raw logits; domains are 0 (source) / 1 (target)."""
    z = logits
    if z.data.ndim == 2 and z.data.shape[1] == 1:
        z = tc.reshape(z, (z.data.shape[0],))
    if z.data.ndim != 1:
        raise tc.ShapeError("binary_domain_loss", logits.data.shape)
    y = np.asarray(domains, dtype=np.float64).reshape(-1)
    if y.shape != z.data.shape:
        raise tc.ShapeError("binary_domain_loss", z.data.shape, y.shape)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("binary_domain_loss: domain labels must be 0 or 1")
    pos, neg, shared = _softplus_parts(z)
    # y*softplus(-z) + (1-y)*softplus(z) = y*neg + (1-y)*pos + shared
    per = tc.add(tc.add(tc.mul(Tensor(y), neg), tc.mul(Tensor(1.0 - y), pos)), shared)
    return tc.tmean(per)


def rank_n_contrast(features: Tensor, guidance, cfg: RankLossConfig) -> Tensor:
    """Rank-N-Contrast loss over one domain's half-batch.

    For each anchor i and positive j != i the negative set is
    S_ij = {k != i : |g_i - g_k| >= |g_i - g_j|} (ties kept, j included),
    the per-pair term is -log softmax of sim(f_i, f_j)/tau against exp sims
    over S_ij, averaged 1/N over j and 1/N over i.
    """
    n = features.data.shape[0]
    if features.data.ndim != 2:
        raise tc.ShapeError("rank_n_contrast", features.data.shape)
    if n < 2:
        raise ValueError(f"rank_n_contrast: need at least 2 samples, got {n}")
    g = np.asarray(guidance, dtype=np.float64).reshape(-1)
    if g.shape[0] != n:
        raise tc.ShapeError("rank_n_contrast", features.data.shape, g.shape)

    GUARD_COUNTS["rank_zero_norm"] += int(
        (np.sqrt((features.data ** 2).sum(axis=1)) < NORM_EPS).sum())

    # cosine similarity matrix with epsilon-guarded norms
    sq = tc.tsum(tc.mul(features, features), axis=1, keepdims=True)   # (n,1)
    norm = tc.add(tc.relu(tc.sub(tc.sqrt(sq), NORM_EPS)), NORM_EPS)   # max(norm, eps)
    unit = tc.div(features, tc.broadcast_to(norm, features.data.shape))
    sims = tc.matmul(unit, tc.transpose(unit))                        # (n,n)
    logits = tc.mul(sims, 1.0 / cfg.tau)

    dist = np.abs(g[:, None] - g[None, :])                            # (n,n)
    neg_set = dist[:, None, :] >= dist[:, :, None]                    # [i,j,k]
    neg_set &= ~np.eye(n, dtype=bool)[:, None, :]                     # k != i

    # -log softmax written as log sum_k exp(l_ik - l_ij): when S_ij = {j}
    # the term is log(exp(0)) = 0 exactly, as the N=2 case requires
    l_ik = tc.broadcast_to(tc.reshape(logits, (n, 1, n)), (n, n, n))
    l_ij = tc.broadcast_to(tc.reshape(logits, (n, n, 1)), (n, n, n))
    shifted = tc.exp(tc.sub(l_ik, l_ij))
    denom = tc.tsum(tc.mul(shifted, Tensor(neg_set.astype(np.float64))), axis=2)

    pair = (~np.eye(n, dtype=bool)).astype(np.float64)
    terms = tc.mul(tc.log(denom), Tensor(pair))
    return tc.div(tc.tsum(terms), float(n * n))


def _covariance(feats: Tensor, n: int) -> Tensor:
    mean = tc.tmean(feats, axis=0, keepdims=True)
    cen = tc.sub(feats, tc.broadcast_to(mean, feats.data.shape))
    return tc.div(tc.matmul(tc.transpose(cen), cen), float(n - 1))


def coral(source_feats: Tensor, target_feats: Tensor) -> Tensor:
    """Squared Frobenius distance of feature covariances, scaled by 1/(4 d^2)."""
    ns, d = source_feats.data.shape
    nt, dt = target_feats.data.shape
    if d != dt:
        raise tc.ShapeError("coral", source_feats.data.shape, target_feats.data.shape)
    if ns < 2 or nt < 2:
        raise ValueError(f"coral: need >= 2 samples per side, got {ns} and {nt}")
    diff = tc.sub(_covariance(source_feats, ns), _covariance(target_feats, nt))
    return tc.div(tc.tsum(tc.mul(diff, diff)), float(4 * d * d))
