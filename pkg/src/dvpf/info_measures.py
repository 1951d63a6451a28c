"""Discrete information measures in bits, plus a classifier-based MI lower bound.

Everything public reports bits. Training code works in nats and converts with
``NATS_TO_BITS``.
"""

import math
import warnings

import numpy as np

from .errors import DomainError, ValidationError

NATS_TO_BITS = 1.0 / math.log(2.0)
PROB_FLOOR = 1e-12
SUM_TOL = 1e-9
MI_SLACK = 1e-9


def check_distribution(p, name="distribution"):
    """Return ``p`` as a float64 vector after validating it is a pmf."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValidationError(f"{name} must be a non-empty 1-D vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError(f"{name} has non-finite entries")
    if np.any(p < 0):
        i = int(np.argmax(p < 0))
        raise ValidationError(f"{name} has a negative entry at index {i}: {p[i]}")
    total = p.sum()
    if abs(total - 1.0) > SUM_TOL:
        raise ValidationError(f"{name} sums to {total!r}, not 1")
    return p


def check_joint(table, name="joint"):
    """Validate a |S| x |X| joint pmf table."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or t.size < 1:
        raise ValidationError(f"{name} must be a non-empty 2-D table, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValidationError(f"{name} has non-finite entries")
    if np.any(t < 0):
        r, c = np.argwhere(t < 0)[0]
        raise ValidationError(f"{name} has a negative entry at ({r}, {c})")
    total = t.sum()
    if abs(total - 1.0) > SUM_TOL:
        raise ValidationError(f"{name} sums to {total!r}, not 1")
    return t


def marginals(joint):
    """(P_S, P_X) of a validated joint table."""
    t = check_joint(joint)
    return t.sum(axis=1), t.sum(axis=0)


def _h(p):
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def entropy(dist):
    """Shannon entropy in bits, with 0 log 0 = 0."""
    p = check_distribution(dist)
    # clip tiny negative round-off from the subtraction-free formula
    return min(max(_h(p), 0.0), math.log2(p.size))


def kl_divergence(p, q):
    """D_KL(p || q) in bits.

    Raises DomainError naming the first index where q is zero but p is not.
    """
    p = check_distribution(p, "p")
    q = check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.size} vs {q.size}")
    bad = (q == 0) & (p > 0)
    if bad.any():
        i = int(np.argmax(bad))
        raise DomainError(f"q[{i}] = 0 while p[{i}] = {p[i]}; KL is infinite", index=i)
    m = p > 0
    return max(float((p[m] * np.log2(p[m] / q[m])).sum()), 0.0)


def joint_entropy(joint):
    return _h(check_joint(joint).ravel())


def mutual_information(joint):
    """I(S;X) = H(S) + H(X) - H(S,X) in bits for a joint table."""
    t = check_joint(joint)
    ps, px = t.sum(axis=1), t.sum(axis=0)
    mi = _h(ps) + _h(px) - _h(t.ravel())
    return max(mi, 0.0)


def classifier_mi_bound(labels, probs, n_classes=None):
    """Variational lower bound on I(X;S) from any predictor q(s|x).

    Returns ``H_hat(S) - mean(-log2 q(s_i|x_i))`` clamped at zero, where
    ``H_hat(S)`` is the entropy of the empirical label distribution. Zero
    probabilities on realized labels are floored at ``PROB_FLOOR`` and counted
    in a ``RuntimeWarning``.
    """
    s = np.asarray(labels)
    q = np.asarray(probs, dtype=np.float64)
    if q.ndim != 2 or s.ndim != 1 or q.shape[0] != s.shape[0]:
        raise ValidationError(
            f"need one predicted distribution per sample: labels {s.shape}, probs {q.shape}"
        )
    if s.size == 0:
        raise ValidationError("empty batch")
    if not np.issubdtype(s.dtype, np.integer):
        raise ValidationError("labels must be integers")
    k = q.shape[1] if n_classes is None else int(n_classes)
    if q.shape[1] != k:
        raise ValidationError(f"probs have {q.shape[1]} columns, expected {k}")
    if s.min() < 0 or s.max() >= k:
        raise ValidationError(f"labels must lie in [0, {k})")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("each row of probs must be a distribution")

    picked = q[np.arange(s.size), s]
    n_floored = int(np.count_nonzero(picked < PROB_FLOOR))
    if n_floored:
        warnings.warn(
            f"{n_floored} realized label(s) had probability below {PROB_FLOOR:g}; floored",
            RuntimeWarning,
            stacklevel=2,
        )
    ce = float(-np.log2(np.maximum(picked, PROB_FLOOR)).mean())
    counts = np.bincount(s, minlength=k)
    h_s = _h(counts / counts.sum())
    return max(h_s - ce, 0.0)
