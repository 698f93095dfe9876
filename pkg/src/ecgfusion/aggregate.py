"""Slice-to-record probability aggregation via power-mean pooling.

The pooled value interpolates between the arithmetic mean (Q=1) and the
maximum (Q -> inf), emphasizing high-evidence slices without max
pooling's brittleness. All arithmetic happens in the log domain so that
bags of a million near-zero probabilities stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DataError

DEFAULT_Q = 3.0
EPS = 1e-6


@dataclass
class RecordPrediction:
    record_id: str
    probs: np.ndarray  # per-class pooled probabilities
    q: float
    n_slices: int


def power_mean(probs, q: float = DEFAULT_Q, eps: float = EPS) -> float:
    """Pool a bag of probabilities: ((1/M) * sum p_j^Q)^(1/Q).

    Inputs are clamped to [eps, 1-eps] once before the log transform;
    the pooled output is re-clamped to the same interval. Computed as
    log P = (1/Q) * (logsumexp(Q * log p) - log M).
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise DataError("empty bag", code="empty-bag")
    if q < 1.0:
        raise DataError(f"pooling exponent must be >= 1, got {q}", code="bad-exponent")
    p = np.clip(p, eps, 1.0 - eps)
    log_pooled = (logsumexp(q * np.log(p)) - np.log(p.size)) / q
    return float(np.clip(np.exp(log_pooled), eps, 1.0 - eps))


def pool_record(slice_probs, q: float = DEFAULT_Q, eps: float = EPS,
                record_id: str = "") -> RecordPrediction:
    """Apply power_mean per class column of an (M, n_classes) matrix.

    A 1-D input is a single-class bag of M slice probabilities.
    """
    mat = np.asarray(slice_probs, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[:, None]
    if mat.shape[0] == 0:
        raise DataError("empty bag", code="empty-bag")
    pooled = np.array([power_mean(mat[:, c], q, eps) for c in range(mat.shape[1])])
    return RecordPrediction(record_id=record_id, probs=pooled, q=q, n_slices=mat.shape[0])


def q_sweep(slice_probs, q_list=(1.0, 2.0, 3.0, 5.0, 8.0), eps: float = EPS) -> dict:
    """Pool the same bag under several exponents; pooled values are
    non-decreasing in Q (power-mean inequality)."""
    return {float(q): pool_record(slice_probs, q, eps) for q in q_list}
