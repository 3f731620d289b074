"""Training losses: per-point cross entropy for the segmentation stage and
the lazy quadruplet loss for descriptor learning.

Both return the loss value together with analytic input gradients so the
training loop never needs a separate backward call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidParameter, ShapeError


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray,
                       ignore_label: int | None = None):
    """Mean cross entropy over the non-ignored points.

    Returns (loss, d_logits); ignored rows get a zero gradient.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if np.any((labels < 0) | (labels >= c)) and ignore_label is None:
        raise InvalidParameter("label outside [0, num_classes)")
    mask = np.ones(n, dtype=bool)
    if ignore_label is not None:
        mask = labels != ignore_label
        if np.any((labels[mask] < 0) | (labels[mask] >= c)):
            raise InvalidParameter("label outside [0, num_classes)")
    count = int(mask.sum())
    if count == 0:
        raise EmptyInput("every point carries the ignore label")

    z = logits - logits.max(axis=1, keepdims=True)
    log_den = np.log(np.exp(z).sum(axis=1))
    safe = np.where(mask, labels, 0)
    log_p = z[np.arange(n), safe] - log_den
    loss = -log_p[mask].sum() / count

    soft = np.exp(z - log_den[:, None])
    d = soft
    d[np.arange(n), safe] -= 1.0
    d /= count
    d[~mask] = 0.0
    return float(loss), d


def point_accuracy(logits: np.ndarray, labels: np.ndarray,
                   ignore_label: int | None = None) -> float:
    """Fraction of non-ignored points whose argmax class matches the label."""
    pred = np.asarray(logits).argmax(axis=1)
    labels = np.asarray(labels)
    mask = np.ones(len(labels), dtype=bool)
    if ignore_label is not None:
        mask = labels != ignore_label
    if not mask.any():
        raise EmptyInput("every point carries the ignore label")
    return float((pred[mask] == labels[mask]).mean())


@dataclass
class QuadrupletResult:
    loss: float
    term_pos_neg: float          # first hinge, after clamping at zero
    term_pos_extra: float        # second hinge, after clamping at zero
    d_anchor: np.ndarray
    d_positives: np.ndarray
    d_negatives: np.ndarray
    d_extra: np.ndarray


def _pairwise_dist(ref: np.ndarray, others: np.ndarray) -> np.ndarray:
    return np.sqrt(((others - ref[None, :]) ** 2).sum(axis=1))


def lazy_quadruplet_loss(anchor: np.ndarray, positives: np.ndarray,
                         negatives: np.ndarray, extra_negative: np.ndarray,
                         alpha: float, beta: float) -> QuadrupletResult:
    """max-of-hinges quadruplet loss over one training tuple.

        L = [alpha + max_i dp_i - min_j dn_j]_+  +  [beta + max_i dp_i - min_k dx_k]_+

    written as maxima over (i, j) and (i, k) pairs; dp are anchor-positive
    distances, dn anchor-negative, dx distances of the extra negative to each
    negative. The gradient flows only through the arg-max pair of each term
    (row-major first on ties) and vanishes when the hinge is inactive.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    extra_negative = np.asarray(extra_negative, dtype=np.float64)
    d = anchor.shape[0]
    if positives.shape[1] != d or negatives.shape[1] != d or \
            extra_negative.shape != (d,):
        raise ShapeError("descriptor dimensions disagree")
    if len(positives) == 0 or len(negatives) == 0:
        raise EmptyInput("need at least one positive and one negative")
    if alpha < 0 or beta < 0:
        raise InvalidParameter("margins must be non-negative")

    dp = _pairwise_dist(anchor, positives)          # (m,)
    dn = _pairwise_dist(anchor, negatives)          # (n,)
    dx = _pairwise_dist(extra_negative, negatives)  # (n,)

    h1 = alpha + dp[:, None] - dn[None, :]          # (m, n)
    h2 = beta + dp[:, None] - dx[None, :]           # (m, n)

    d_anchor = np.zeros_like(anchor)
    d_pos = np.zeros_like(positives)
    d_neg = np.zeros_like(negatives)
    d_extra = np.zeros_like(extra_negative)

    def unit(u, dist):
        # subgradient 0 at coincident descriptors
        return u / dist if dist > 0 else np.zeros_like(u)

    t1 = max(0.0, float(h1.max()))
    if t1 > 0:
        i, j = np.unravel_index(np.argmax(h1), h1.shape)
        g_p = unit(anchor - positives[i], dp[i])
        g_n = unit(anchor - negatives[j], dn[j])
        d_anchor += g_p - g_n
        d_pos[i] -= g_p
        d_neg[j] += g_n

    t2 = max(0.0, float(h2.max()))
    if t2 > 0:
        i, k = np.unravel_index(np.argmax(h2), h2.shape)
        g_p = unit(anchor - positives[i], dp[i])
        g_x = unit(extra_negative - negatives[k], dx[k])
        d_anchor += g_p
        d_pos[i] -= g_p
        d_extra -= g_x
        d_neg[k] += g_x

    return QuadrupletResult(t1 + t2, t1, t2, d_anchor, d_pos, d_neg, d_extra)
