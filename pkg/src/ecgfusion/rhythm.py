"""R-peak detection and the global 36-dimensional rhythm vector.

Rhythm descriptors are always computed from the full-length record (the
detector and feature extractor consume whole-record RR series, never
slices), because beat-to-beat variability cannot be recovered reliably
from 5-second windows.

The detector is a Pan-Tompkins-style pipeline: 5-15 Hz bandpass ->
derivative -> squaring -> moving-window integration -> peak picking
with a 0.2 s refractory period, followed by sub-window refinement on
the bandpassed signal so that peak indices land on the QRS apex.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy import stats as spstats

from .errors import DataError, NumericError
from .preprocess import bandpass_filter

REFRACTORY_S = 0.2
HRV_DIM = 36

HRV_FEATURE_NAMES = (
    # time domain (12)
    "rr_mean_s", "rr_median_s", "sdnn_s", "rmssd_s", "pnn50", "cv_rr",
    "rr_min_s", "rr_max_s", "hr_mean_bpm", "sdsd_s", "triangular_index", "beat_count",
    # frequency domain, Lomb-Scargle on the RR tachogram (8)
    "vlf_power", "lf_power", "hf_power", "lf_hf_ratio",
    "lf_norm", "hf_norm", "total_power", "hf_peak_hz",
    # higher-order statistics (8)
    "rr_skewness", "rr_kurtosis", "diff_mean_s", "diff_std_s",
    "diff_skewness", "diff_kurtosis", "diff_max_abs_s", "frac_diff_gt_50ms",
    # nonlinear and auxiliary (8)
    "poincare_sd1_s", "poincare_sd2_s", "sd1_sd2_ratio", "sample_entropy",
    "detection_flag", "freq_valid_flag", "duration_s", "rr_rate_hz",
)

_VLF_BAND = (0.003, 0.04)
_LF_BAND = (0.04, 0.15)
_HF_BAND = (0.15, 0.40)
_FREQ_MIN_INTERVALS = 16


@dataclass
class RrSeries:
    """Detected R-peak indices and the successive gaps in seconds."""

    peak_indices: np.ndarray
    rr_s: np.ndarray
    fs: float

    def __post_init__(self):
        self.peak_indices = np.asarray(self.peak_indices, dtype=np.int64)
        self.rr_s = np.asarray(self.rr_s, dtype=np.float64)
        if np.any(np.diff(self.peak_indices) <= 0):
            raise DataError("peak indices must be strictly increasing", code="bad-peaks")
        if len(self.rr_s) != len(self.peak_indices) - 1:
            raise DataError("rr count must be peaks - 1", code="bad-peaks")
        if np.any(self.rr_s <= 0):
            raise DataError("all RR intervals must be positive", code="bad-peaks")

    @classmethod
    def from_peaks(cls, peak_indices, fs: float) -> "RrSeries":
        peaks = np.asarray(peak_indices, dtype=np.int64)
        return cls(peaks, np.diff(peaks) / fs, fs)


@dataclass
class HrvVector:
    """Fixed-order 36-feature rhythm summary; all entries finite."""

    values: np.ndarray
    feature_names: tuple = HRV_FEATURE_NAMES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (HRV_DIM,):
            raise DataError(f"HRV vector must have length {HRV_DIM}", code="bad-hrv")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("non-finite HRV feature", code="hrv-nonfinite")


def detect_rpeaks(lead_signal: np.ndarray, fs: float) -> RrSeries:
    """Locate R peaks on one lead; raises when fewer than 2 survive."""
    x = np.asarray(lead_signal, dtype=np.float64).ravel()
    if len(x) < 2 * fs:
        raise DataError("need at least 2 seconds of signal", code="too-short")

    bp = bandpass_filter(x, low_hz=5.0, high_hz=15.0, order=2, fs=fs)
    integ = np.convolve(np.gradient(bp) ** 2, np.ones(max(1, int(round(0.15 * fs)))), mode="same")

    refractory = max(1, int(round(REFRACTORY_S * fs)))
    height = 0.25 * np.percentile(integ, 95)
    if height <= 0:
        raise DataError("no peaks found", code="no-peaks")
    candidates, _ = sps.find_peaks(integ, height=height, distance=refractory)

    # Snap each candidate to the QRS apex of the bandpassed signal.
    half = max(1, int(round(0.10 * fs)))
    refined = []
    for c in candidates:
        lo, hi = max(0, c - half), min(len(x), c + half + 1)
        refined.append(lo + int(np.argmax(np.abs(bp[lo:hi]))))
    refined = sorted(set(refined))

    peaks = []
    for p in refined:
        if peaks and p - peaks[-1] < refractory:
            if np.abs(bp[p]) > np.abs(bp[peaks[-1]]):
                peaks[-1] = p
        else:
            peaks.append(p)
    if len(peaks) < 2:
        raise DataError("no peaks found", code="no-peaks")
    return RrSeries.from_peaks(np.array(peaks), fs)


def _moment_stats(x: np.ndarray):
    """(skewness, kurtosis) with a zero-variance guard."""
    if len(x) < 3 or np.std(x) < 1e-12:
        return 0.0, 0.0
    return float(spstats.skew(x)), float(spstats.kurtosis(x))


def _sample_entropy(x: np.ndarray, m: int = 2, r: float = 0.0) -> float:
    n = len(x)
    if n <= m + 1 or r <= 0:
        return 0.0

    def _matches(mm):
        tmpl = np.lib.stride_tricks.sliding_window_view(x, mm)
        total = 0
        for i in range(len(tmpl) - 1):
            dist = np.max(np.abs(tmpl[i + 1:] - tmpl[i]), axis=1)
            total += int(np.sum(dist <= r))
        return total

    b = _matches(m)
    a = _matches(m + 1)
    if a == 0 or b == 0:
        return 0.0
    return float(-np.log(a / b))


def _band_power(freqs_hz, power, band):
    mask = (freqs_hz >= band[0]) & (freqs_hz <= band[1])
    if mask.sum() < 2:
        return 0.0
    return float(np.trapezoid(power[mask], freqs_hz[mask]))


def hrv_features(rr: RrSeries) -> HrvVector:
    """Compute the 36 rhythm descriptors in their fixed documented order.

    Requires at least 4 RR intervals. Frequency-domain slots need 16;
    below that they are zeroed and `freq_valid_flag` is 0 so short
    records never propagate NaN.
    """
    r = rr.rr_s
    if len(r) < 4:
        raise DataError("insufficient beats", code="insufficient-beats")
    d = np.diff(r)

    mean_rr = float(np.mean(r))
    sdnn = float(np.std(r, ddof=1))
    rmssd = float(np.sqrt(np.mean(d ** 2)))
    sdsd = float(np.std(d, ddof=1)) if len(d) > 1 else 0.0
    duration = float(np.sum(r))

    hist_counts, _ = np.histogram(r, bins=max(1, int(np.ptp(r) / (1.0 / 128.0)) + 1))
    tri_index = float(len(r) / hist_counts.max()) if hist_counts.max() > 0 else 0.0

    time_feats = [
        mean_rr,
        float(np.median(r)),
        sdnn,
        rmssd,
        float(np.mean(np.abs(d) > 0.050)),
        sdnn / mean_rr if mean_rr > 0 else 0.0,
        float(np.min(r)),
        float(np.max(r)),
        60.0 / mean_rr if mean_rr > 0 else 0.0,
        sdsd,
        tri_index,
        float(len(rr.peak_indices)),
    ]

    freq_valid = len(r) >= _FREQ_MIN_INTERVALS
    if freq_valid:
        t = np.cumsum(r)
        y = r - mean_rr
        freqs = np.linspace(0.003, 0.4, 256)
        power = sps.lombscargle(t, y, 2.0 * np.pi * freqs)
        vlf = _band_power(freqs, power, _VLF_BAND)
        lf = _band_power(freqs, power, _LF_BAND)
        hf = _band_power(freqs, power, _HF_BAND)
        hf_mask = (freqs >= _HF_BAND[0]) & (freqs <= _HF_BAND[1])
        hf_peak = float(freqs[hf_mask][np.argmax(power[hf_mask])])
        denom = lf + hf
        freq_feats = [
            vlf, lf, hf,
            lf / hf if hf > 1e-300 else 0.0,
            lf / denom if denom > 1e-300 else 0.0,
            hf / denom if denom > 1e-300 else 0.0,
            vlf + lf + hf,
            hf_peak,
        ]
    else:
        freq_feats = [0.0] * 8

    rr_skew, rr_kurt = _moment_stats(r)
    d_skew, d_kurt = _moment_stats(d)
    higher_feats = [
        rr_skew, rr_kurt,
        float(np.mean(d)),
        float(np.std(d, ddof=1)) if len(d) > 1 else 0.0,
        d_skew, d_kurt,
        float(np.max(np.abs(d))),
        float(np.mean(d > 0.050)),
    ]

    sd1 = float(np.sqrt(max(0.5 * np.var(d), 0.0)))
    sd2_sq = 2.0 * np.var(r) - 0.5 * np.var(d)
    sd2 = float(np.sqrt(max(sd2_sq, 0.0)))
    nonlinear_feats = [
        sd1,
        sd2,
        sd1 / sd2 if sd2 > 1e-12 else 0.0,
        _sample_entropy(r, m=2, r=0.2 * sdnn),
        1.0,
        1.0 if freq_valid else 0.0,
        duration,
        float(len(r)) / duration if duration > 0 else 0.0,
    ]

    return HrvVector(np.array(time_feats + freq_feats + higher_feats + nonlinear_feats))


def zero_hrv_vector() -> HrvVector:
    """Fallback for records where peak detection fails: all zeros,
    including the detection flag."""
    return HrvVector(np.zeros(HRV_DIM))


def broadcast_rhythm(hrv: HrvVector, bag) -> list:
    """Give every slice in the bag an independent copy of the vector."""
    return [hrv.values.copy() for _ in range(len(bag))]


# ---------------------------------------------------------------------------
# Cache file: sequence of (record_id, 36 float32 values) entries
# ---------------------------------------------------------------------------

_HRV_MAGIC = b"HRV1"


def write_hrv_cache(path, vectors: dict) -> None:
    """vectors: {record_id: HrvVector or (36,) array}."""
    with open(Path(path), "wb") as fh:
        fh.write(_HRV_MAGIC)
        fh.write(struct.pack("<I", len(vectors)))
        for record_id in sorted(vectors):
            vec = vectors[record_id]
            values = vec.values if isinstance(vec, HrvVector) else np.asarray(vec)
            rid = record_id.encode("utf-8")
            fh.write(struct.pack("<H", len(rid)))
            fh.write(rid)
            fh.write(values.astype("<f4").tobytes())


def read_hrv_cache(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != _HRV_MAGIC:
        raise DataError("bad HRV cache magic", code="malformed-header")
    (count,) = struct.unpack_from("<I", blob, 4)
    out, off = {}, 8
    for _ in range(count):
        (idlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        rid = blob[off : off + idlen].decode("utf-8")
        off += idlen
        vals = np.frombuffer(blob[off : off + 4 * HRV_DIM], dtype="<f4").astype(np.float64)
        off += 4 * HRV_DIM
        out[rid] = HrvVector(vals)
    return out
