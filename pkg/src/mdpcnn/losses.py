"""Contrastive, contrastive-center and combined discrimination losses.

Each loss is a fused autograd op: the forward value and its analytic
gradients are computed together and attached to the returned scalar tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, _accumulate, _make, add, scale
from .errors import ConfigurationError, DiagnosticError, UsageError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.99
    beta: float = 0.01
    margin: float = 1.0
    delta: float = 1.0
    num_classes: int = 8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"loss weights must be >= 0, got alpha={self.alpha} beta={self.beta}")
        if self.margin <= 0 or self.delta <= 0:
            raise ConfigurationError(f"margin and delta must be > 0, got m={self.margin} delta={self.delta}")
        if self.num_classes < 2:
            raise ConfigurationError(f"contrastive-center loss needs >= 2 classes, got {self.num_classes}")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise DiagnosticError(f"{name} contains non-finite values")


def contrastive_loss(a: Tensor, b: Tensor, pair_labels, margin: float = 1.0) -> Tensor:
    """Mean-over-pairs contrastive loss on squared Euclidean distances.

    ``L = 1/(2N) * sum_i [y_i d_i + (1 - y_i) max(m - d_i, 0)]`` with
    ``d_i = ||a_i - b_i||^2``.
    """
    if a.shape != b.shape or a.data.ndim != 2:
        raise UsageError(f"contrastive_loss needs matching (B, d) embeddings, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n == 0:
        raise UsageError("contrastive_loss on an empty batch")
    y = np.asarray(pair_labels)
    if y.shape != (n,) or not np.isin(y, (0, 1)).all():
        raise UsageError(f"pair labels must be {n} flags in {{0, 1}}")
    _check_finite("embeddings_A", a.data)
    _check_finite("embeddings_B", b.data)

    y = y.astype(a.data.dtype)
    diff = a.data - b.data
    d = np.sum(diff * diff, axis=1)
    gap = margin - d
    active = gap > 0
    per_pair = y * d + (1 - y) * np.where(active, gap, 0)
    value = np.asarray(per_pair.sum() / (2 * n), dtype=a.data.dtype)

    def _back(o: Tensor) -> None:
        dd = (y - (1 - y) * active) / (2 * n) * o.grad
        ga = (2 * dd)[:, None] * diff
        _accumulate(a, ga)
        _accumulate(b, -ga)

    return _make(value, (a, b), _back)


def contrastive_center_loss(x: Tensor, labels, centers: Tensor, delta: float = 1.0) -> Tensor:
    """Own-center distance over summed other-center distances, halved and summed."""
    if x.data.ndim != 2 or centers.data.ndim != 2 or x.shape[1] != centers.shape[1]:
        raise UsageError(f"embeddings {x.shape} and centers {centers.shape} are incompatible")
    k = centers.shape[0]
    if k < 2:
        raise ConfigurationError("contrastive-center loss needs at least 2 class centers")
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if labels.shape != (n,):
        raise UsageError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"label outside [0, {k}): {labels.min()}..{labels.max()}")
    _check_finite("embeddings", x.data)
    _check_finite("centers", centers.data)

    diff = x.data[:, None, :] - centers.data[None, :, :]
    dist = np.sum(diff * diff, axis=2)
    rows = np.arange(n)
    own = dist[rows, labels]
    den = dist.sum(axis=1) - own + delta
    value = np.asarray(0.5 * np.sum(own / den), dtype=x.data.dtype)

    def _back(o: Tensor) -> None:
        # dL/d dist[i, j]
        w = np.broadcast_to((-0.5 * own / (den * den))[:, None], dist.shape).copy()
        w[rows, labels] = 0.5 / den
        w *= o.grad
        if x.requires_grad:
            _accumulate(x, 2 * np.einsum("ij,ijd->id", w, diff))
        if centers.requires_grad:
            _accumulate(centers, -2 * np.einsum("ij,ijd->jd", w, diff))

    return _make(value, (x, centers), _back)


def discrimination_loss(
    emb_a: Tensor,
    emb_b: Tensor,
    labels_a,
    labels_b,
    pair_labels,
    config: LossConfig,
    centers: Tensor,
) -> Tensor:
    """``alpha * contrastive + beta * (center(A) + center(B))``.

    With ``beta == 0`` the center terms are not evaluated at all, so the
    center bank receives no gradient.
    """
    if centers.shape[0] != config.num_classes:
        raise ConfigurationError(f"center bank has {centers.shape[0]} rows, config expects {config.num_classes}")
    total = scale(contrastive_loss(emb_a, emb_b, pair_labels, config.margin), config.alpha)
    if config.beta == 0:
        return total
    cc = add(
        contrastive_center_loss(emb_a, labels_a, centers, config.delta),
        contrastive_center_loss(emb_b, labels_b, centers, config.delta),
    )
    return add(total, scale(cc, config.beta))
