"""Denoising, per-instance normalization, and window slicing.

Every operation here reads a single record and nothing else: no
cross-record statistics can leak into a sample by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import DataError, NumericError

DEFAULT_WINDOW = 2500
DEFAULT_STRIDE = 1250


@dataclass
class SliceBag:
    """Overlapping fixed-length windows cut from one parent record."""

    parent_record_id: str
    slices: list
    offsets: list
    window: int
    stride: int
    label_names: tuple = ()

    def __post_init__(self):
        if len(self.slices) < 1:
            raise DataError("slice bag must be non-empty", code="empty-bag")
        offs = list(self.offsets)
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise DataError("offsets must be strictly increasing", code="bad-offsets")
        for s in self.slices:
            if s.shape != (12, self.window):
                raise DataError(f"slice shape {s.shape} != (12, {self.window})", code="bad-slice")

    def __len__(self) -> int:
        return len(self.slices)


def bandpass_filter(x: np.ndarray, low_hz: float = 0.5, high_hz: float = 40.0,
                    order: int = 4, fs: float = 500.0) -> np.ndarray:
    """Zero-phase Butterworth bandpass, applied per lead.

    The order-`order` design is run forward and backward (squaring the
    magnitude response, cancelling phase). Edge transients are
    suppressed by reflect-padding N//10 samples at each end before the
    two passes and trimming afterwards.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        squeeze = True
    else:
        squeeze = False
    n = x.shape[-1]
    if not (0.0 < low_hz < high_hz < fs / 2.0):
        raise NumericError(
            f"cutoffs must satisfy 0 < {low_hz} < {high_hz} < fs/2={fs / 2}", code="bad-cutoff"
        )
    if n <= 3 * order:
        raise NumericError(f"signal too short to filter: N={n}", code="short-signal")

    sos = sps.butter(order, [low_hz, high_hz], btype="band", fs=fs, output="sos")
    pad = max(1, n // 10)
    pad = min(pad, n - 1)  # np.pad reflect requires pad < length
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)], mode="reflect")
    y = sps.sosfilt(sos, xp, axis=-1)
    y = sps.sosfilt(sos, y[..., ::-1], axis=-1)[..., ::-1]
    y = y[..., pad:-pad]
    return y[0] if squeeze else y


def znorm_instance(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-row z-score using only this instance's statistics.

    Population (biased) standard deviation; constant rows map to all
    zeros because the centered numerator vanishes while eps keeps the
    denominator positive.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)  # ddof=0
    return (x - mean) / (std + eps)


def slice_record(x: np.ndarray, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
                 parent_record_id: str = "", label_names: tuple = ()) -> SliceBag:
    """Cut a (12, N) signal into overlapping (12, window) slices.

    Offsets are {0, stride, 2*stride, ...} with every window fully inside
    the signal. Records shorter than `window` are right zero-padded to a
    single slice; a trailing partial window is dropped otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if window < 1 or not (1 <= stride <= window):
        raise DataError(f"need window >= 1 and 1 <= stride <= window, got {window}, {stride}",
                        code="bad-slicing")
    n = x.shape[-1]
    if n < window:
        padded = np.zeros((x.shape[0], window), dtype=x.dtype)
        padded[:, :n] = x
        return SliceBag(parent_record_id, [padded], [0], window, stride, label_names)
    count = (n - window) // stride + 1
    offsets = [k * stride for k in range(count)]
    slices = [x[:, o : o + window].copy() for o in offsets]
    return SliceBag(parent_record_id, slices, offsets, window, stride, label_names)


def preprocess_record(record, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
                      low_hz: float = 0.5, high_hz: float = 40.0, order: int = 4) -> SliceBag:
    """filter -> instance-normalize -> slice, the fixed pipeline order."""
    filtered = bandpass_filter(record.samples, low_hz, high_hz, order, record.fs)
    normed = znorm_instance(filtered)
    return slice_record(normed, window, stride,
                        parent_record_id=record.record_id,
                        label_names=record.label_names)
