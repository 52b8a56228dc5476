"""Training objectives for Siamese time-lapse training.

All L1 terms are means over elements rather than sums so the loss weights do
not depend on image resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


@dataclass
class LossWeights:
    lambda_b: float = 1.0
    lambda_s: float = 0.1
    lambda_c: float = 0.001
    lambda_w: float = 0.01  # not given numerically in the source; a config default only

    def __post_init__(self):
        if min(self.lambda_b, self.lambda_s, self.lambda_c, self.lambda_w) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class BSWConfig:
    l: int = 2
    h: int = 4
    grouping: Literal["cluster", "quantile"] = "cluster"

    def __post_init__(self):
        if not 0 < self.l < self.h:
            raise ContractError(f"need 0 < l < h, got l={self.l}, h={self.h}")
        if self.grouping not in ("cluster", "quantile"):
            raise ContractError(f"unknown grouping {self.grouping!r}")


@dataclass
class LossReport:
    loss_b: float
    loss_s: float
    loss_c: float
    loss_w: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


def _check_same(*tensors: Tensor) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"shape mismatch: {sorted(shapes)}")


def l1_mean(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    _check_same(a, b)
    return ad.mean(ad.tabs(a - b))


def background_prediction_loss(b1: Tensor, b2: Tensor) -> Tensor:
    """Mean |B_w - B_v| between backgrounds estimated from two frames of one scene."""
    return l1_mean(b1, b2)


def cross_information_loss(input_w: Tensor, bg_v: Tensor) -> Tensor:
    """Mean |I_w - B_v|: one frame's input against the other frame's background."""
    return l1_mean(input_w, bg_v)


def self_consistency_loss(image: Tensor, bg: Tensor, rain: Tensor) -> Tensor:
    image, bg, rain = ad.as_tensor(image), ad.as_tensor(bg), ad.as_tensor(rain)
    _check_same(image, bg, rain)
    return ad.mean(ad.tabs(image - (bg + rain)))


def channel_covariance(query: Tensor) -> Tensor:
    """C x C population covariance of a (C, H, W) feature map over its H*W positions."""
    query = ad.as_tensor(query)
    if query.ndim != 3:
        raise DimensionError(f"channel_covariance expects (C, H, W), got {query.shape}")
    c, h, w = query.shape
    if h * w < 2:
        raise ContractError("channel_covariance needs at least two spatial positions")
    x = ad.reshape(query, (c, h * w))
    x = x - ad.mean(x, axis=1, keepdims=True)
    return ad.matmul(x, ad.transpose(x, (1, 0))) * (1.0 / (h * w))


def variance_matrix(cov_a, cov_b) -> np.ndarray:
    """Elementwise two-sample variance of two covariance matrices, ((a - b) / 2)^2."""
    a = cov_a.data if isinstance(cov_a, Tensor) else np.asarray(cov_a)
    b = cov_b.data if isinstance(cov_b, Tensor) else np.asarray(cov_b)
    if a.shape != b.shape:
        raise DimensionError(f"variance_matrix: {a.shape} vs {b.shape}")
    mu = 0.5 * (a + b)
    return 0.5 * ((a - mu) ** 2 + (b - mu) ** 2)


def kmeans_1d(values: np.ndarray, k: int) -> np.ndarray:
    """Optimal 1-D k-means by dynamic programming over sorted values.

    Returns the cluster label (0 = lowest) of each entry of ``values``.  The
    partition minimizes the within-cluster sum of squares exactly, so the
    result is deterministic.
    """
    order = np.argsort(values, kind="stable")
    v = values[order].astype(np.float64)
    n = len(v)
    if k >= n:
        labels = np.empty(n, dtype=int)
        labels[order] = np.arange(n)
        return labels
    s1 = np.concatenate([[0.0], np.cumsum(v)])
    s2 = np.concatenate([[0.0], np.cumsum(v * v)])

    cost = np.full((k + 1, n + 1), np.inf)
    split = np.zeros((k + 1, n + 1), dtype=int)
    cost[0, 0] = 0.0
    for c in range(1, k + 1):
        for j in range(c, n + 1):
            i = np.arange(c - 1, j)
            tot = s1[j] - s1[i]
            sse = (s2[j] - s2[i]) - tot * tot / (j - i)  # cost of v[i:j]
            cand = cost[c - 1, i] + sse
            best = int(np.argmin(cand))
            cost[c, j], split[c, j] = cand[best], i[best]
    labels_sorted = np.empty(n, dtype=int)
    j = n
    for c in range(k, 0, -1):
        i = split[c, j]
        labels_sorted[i:j] = c - 1
        j = i
    labels = np.empty(n, dtype=int)
    labels[order] = labels_sorted
    return labels


def bsw_mask(V, config: BSWConfig = BSWConfig()) -> np.ndarray:
    """Binary symmetric mask selecting the low-variance (background) covariance entries.

    The distinct values of the upper triangle (diagonal included) are grouped
    into ``h`` clusters by 1-D k-means and the ``l`` lowest clusters form the
    selected group.  With fewer than ``h`` distinct values, or with
    ``grouping="quantile"``, entries at or below the ``l/h`` quantile are
    selected instead.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise DimensionError(f"bsw_mask expects a square matrix, got {V.shape}")
    iu = np.triu_indices(V.shape[0])
    upper = V[iu]
    levels = np.unique(upper)
    if config.grouping == "quantile" or len(levels) < config.h:
        thresh = np.quantile(upper, config.l / config.h)
        sel = upper <= thresh
    else:
        labels = kmeans_1d(levels, config.h)
        low_levels = levels[labels < config.l]
        sel = np.isin(upper, low_levels)
    mask = np.zeros(V.shape, dtype=np.float64)
    mask[iu] = sel
    return np.maximum(mask, mask.T)


def masked_cov_l1(cov: Tensor, mask: np.ndarray) -> Tensor:
    """sum |cov * mask| / (number of selected entries); 0 for an empty mask."""
    count = float(mask.sum())
    if count == 0:
        return ad.Tensor(np.zeros((), dtype=cov.dtype))
    return ad.tsum(ad.tabs(cov * ad.Tensor(mask.astype(cov.dtype)))) * (1.0 / count)


def bsw_loss(query_w: Tensor, query_v: Tensor, config: BSWConfig = BSWConfig(),
             return_mask: bool = False):
    """Background selective whitening loss for one pair of (C, H, W) query maps.

    The mask is computed from detached covariances; gradients reach the
    queries through the covariances only.
    """
    query_w, query_v = ad.as_tensor(query_w), ad.as_tensor(query_v)
    _check_same(query_w, query_v)
    cov_w = channel_covariance(query_w)
    cov_v = channel_covariance(query_v)
    mask = bsw_mask(variance_matrix(cov_w, cov_v), config)
    loss = (masked_cov_l1(cov_w, mask) + masked_cov_l1(cov_v, mask)) * 0.5
    return (loss, mask) if return_mask else loss


def bsw_loss_batch(queries_w: Tensor, queries_v: Tensor, config: BSWConfig = BSWConfig()) -> Tensor:
    """Mean of :func:`bsw_loss` over the pairs of two (N, C, H, W) query batches."""
    _check_same(queries_w, queries_v)
    n = queries_w.shape[0]
    terms = [bsw_loss(queries_w[i], queries_v[i], config) for i in range(n)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / n)


def total_loss(loss_b, loss_s, loss_c, loss_w, weights: LossWeights = LossWeights()):
    """Weighted sum of the four terms; returns (scalar Tensor, LossReport of unweighted terms)."""
    terms = [ad.as_tensor(t) for t in (loss_b, loss_s, loss_c, loss_w)]
    lams = (weights.lambda_b, weights.lambda_s, weights.lambda_c, weights.lambda_w)
    total = terms[0] * lams[0]
    for t, lam in zip(terms[1:], lams[1:]):
        total = total + t * lam
    report = LossReport(*(float(t.data) for t in terms), total=float(total.data))
    return total, report
