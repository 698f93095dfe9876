"""Deterministic convolutional morphology features and fold-aware PCA.

The transform uses the fixed bank of 84 length-9 kernels whose weights
are -1 at six taps and +2 at the three chosen taps (all C(9,3)
placements), an exponential dilation schedule capped at
floor((L-1)/8), and bias thresholds taken from quantiles of
convolution outputs of the training sample. Each feature is a PPV: the
fraction of convolution outputs strictly greater than its bias.

Conventions fixed here (the bank itself leaves them open):

* Convolution is 'valid' only: positions where the dilated kernel lies
  fully inside the window. Because the kernel weights sum to zero, a
  per-lead constant offset then cancels exactly, and a global positive
  rescaling applied to both the training sample and the transformed
  slice leaves every feature bit-identical.
* Leads enter through channel-summed convolution over a per-kernel
  random channel subset, drawn once from the fit seed.
* Feature order is dilation-major, then kernel, then bias.

Bias fitting and PCA fitting are the only data-dependent steps; both
take training-fold inputs only and report to the fit audit so the
cross-validation driver can assert fold isolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from numba import njit

from .audit import GLOBAL_AUDIT
from .errors import ConfigError, DataError

KERNEL_LENGTH = 9
NUM_KERNELS = 84
KERNEL_TAPS = np.array(list(combinations(range(KERNEL_LENGTH), 3)), dtype=np.int64)

DEFAULT_NUM_FEATURES = 10_000
DEFAULT_PCA_DIM = 3072
_BIAS_SAMPLE_CAP = 256


@dataclass
class RocketConfig:
    """Frozen transform parameters for one training fold."""

    input_length: int
    n_channels: int
    dilations: np.ndarray          # (n_dilations,)
    n_biases_per_dilation: np.ndarray
    biases: np.ndarray             # flat, feature order
    channel_subsets: tuple         # 84 sorted int arrays
    seed: int

    @property
    def feature_count(self) -> int:
        return int(NUM_KERNELS * self.n_biases_per_dilation.sum())

    def subset_matrix(self) -> np.ndarray:
        m = np.zeros((NUM_KERNELS, self.n_channels), dtype=np.float64)
        for k, subset in enumerate(self.channel_subsets):
            m[k, subset] = 1.0
        return m

    def save(self, path) -> None:
        lengths = np.array([len(s) for s in self.channel_subsets], dtype=np.int64)
        np.savez(
            path,
            input_length=self.input_length,
            n_channels=self.n_channels,
            dilations=self.dilations,
            n_biases_per_dilation=self.n_biases_per_dilation,
            biases=self.biases,
            subset_lengths=lengths,
            subset_values=np.concatenate(self.channel_subsets),
            seed=self.seed,
        )

    @classmethod
    def load(cls, path) -> "RocketConfig":
        with np.load(path) as z:
            lengths = z["subset_lengths"]
            flat = z["subset_values"]
            subsets, off = [], 0
            for n in lengths:
                subsets.append(flat[off : off + n].copy())
                off += n
            return cls(
                input_length=int(z["input_length"]),
                n_channels=int(z["n_channels"]),
                dilations=z["dilations"].copy(),
                n_biases_per_dilation=z["n_biases_per_dilation"].copy(),
                biases=z["biases"].copy(),
                channel_subsets=tuple(subsets),
                seed=int(z["seed"]),
            )


def dilation_schedule(input_length: int, num_features: int = DEFAULT_NUM_FEATURES,
                      max_dilations_per_kernel: int = 32):
    """Exponential dilation schedule plus per-dilation bias counts.

    Max dilation is floor((L-1)/8) so the dilated kernel always fits;
    the per-kernel bias budget num_features // 84 is spread over the
    schedule proportionally, remainders round-robin from the smallest
    dilation.
    """
    if input_length < KERNEL_LENGTH:
        raise DataError(f"window must be >= {KERNEL_LENGTH}", code="window-too-short")
    per_kernel = num_features // NUM_KERNELS
    true_max = min(per_kernel, max_dilations_per_kernel)
    multiplier = per_kernel / true_max
    max_exponent = np.log2((input_length - 1) / (KERNEL_LENGTH - 1))
    dilations, counts = np.unique(
        np.logspace(0, max_exponent, true_max, base=2).astype(np.int64), return_counts=True
    )
    n_biases = (counts * multiplier).astype(np.int64)
    remainder = per_kernel - int(n_biases.sum())
    i = 0
    while remainder > 0:
        n_biases[i] += 1
        remainder -= 1
        i = (i + 1) % len(n_biases)
    return dilations, n_biases


def _quantile_sequence(n: int) -> np.ndarray:
    """Golden-ratio low-discrepancy sequence in (0, 1)."""
    phi = (np.sqrt(5.0) + 1.0) / 2.0
    return np.array([(k * phi) % 1.0 for k in range(1, n + 1)], dtype=np.float64)


def _conv_valid(z: np.ndarray, taps, dilation: int) -> np.ndarray:
    """Dilated valid convolution of a 1-D signal with one kernel."""
    out_len = len(z) - (KERNEL_LENGTH - 1) * dilation
    acc = np.zeros(out_len, dtype=np.float64)
    for j in range(KERNEL_LENGTH):
        weight = 2.0 if j in taps else -1.0
        acc += weight * z[j * dilation : j * dilation + out_len]
    return acc


def minirocket_fit(training_slices, seed: int = 0, num_features: int = DEFAULT_NUM_FEATURES,
                   max_dilations_per_kernel: int = 32, audit=None, record_ids=()) -> RocketConfig:
    """Fit biases from training-fold slices; deterministic in (inputs, seed).

    Draw order from the seed: channel subsets, training subsample
    (capped at 256 slices), then one example slice per (dilation,
    kernel) combination whose convolution-output quantiles become that
    combination's biases.
    """
    slices = np.asarray(training_slices, dtype=np.float64)
    if slices.ndim != 3 or slices.shape[0] < 1:
        raise DataError("need at least one training slice of shape (leads, L)", code="no-slices")
    n_slices, n_channels, input_length = slices.shape
    if input_length < KERNEL_LENGTH:
        raise DataError(f"window must be >= {KERNEL_LENGTH}", code="window-too-short")

    rng = np.random.default_rng(seed)
    max_size = min(n_channels, KERNEL_LENGTH)
    subsets = []
    for _ in range(NUM_KERNELS):
        size = int(np.clip(2 ** rng.uniform(0, np.log2(max_size + 1)), 1, n_channels))
        subsets.append(np.sort(rng.choice(n_channels, size, replace=False)))

    if n_slices > _BIAS_SAMPLE_CAP:
        sample_idx = np.sort(rng.choice(n_slices, _BIAS_SAMPLE_CAP, replace=False))
    else:
        sample_idx = np.arange(n_slices)
    sample = slices[sample_idx]

    dilations, n_biases = dilation_schedule(input_length, num_features, max_dilations_per_kernel)
    total = NUM_KERNELS * int(n_biases.sum())
    quantiles = _quantile_sequence(total)

    biases = np.zeros(total, dtype=np.float64)
    fidx = 0
    for di, dilation in enumerate(dilations):
        nb = int(n_biases[di])
        for k in range(NUM_KERNELS):
            example = sample[rng.integers(len(sample))]
            z = example[subsets[k]].sum(axis=0)
            conv = _conv_valid(z, KERNEL_TAPS[k], int(dilation))
            biases[fidx : fidx + nb] = np.quantile(conv, quantiles[fidx : fidx + nb])
            fidx += nb

    GLOBAL_AUDIT.note_minirocket_fit(record_ids)
    if audit is not None:
        audit.note_minirocket_fit(record_ids)
    return RocketConfig(
        input_length=input_length,
        n_channels=n_channels,
        dilations=dilations,
        n_biases_per_dilation=n_biases,
        biases=biases,
        channel_subsets=tuple(subsets),
        seed=seed,
    )


@njit(cache=True)
def _ppv_all(Z, taps, dilations, n_biases, biases, out):  # pragma: no cover - numba
    n_kernels, length = Z.shape
    dil_base = np.zeros(len(dilations), dtype=np.int64)
    for di in range(1, len(dilations)):
        dil_base[di] = dil_base[di - 1] + n_kernels * n_biases[di - 1]
    acc = np.zeros(length, dtype=np.float64)
    for di in range(len(dilations)):
        d = dilations[di]
        out_len = length - (KERNEL_LENGTH - 1) * d
        nb = n_biases[di]
        for k in range(n_kernels):
            for t in range(out_len):
                acc[t] = 0.0
            for j in range(KERNEL_LENGTH):
                weight = -1.0
                if j == taps[k, 0] or j == taps[k, 1] or j == taps[k, 2]:
                    weight = 2.0
                off = j * d
                for t in range(out_len):
                    acc[t] += weight * Z[k, t + off]
            fidx = dil_base[di] + k * nb
            for b in range(nb):
                bias = biases[fidx + b]
                count = 0
                for t in range(out_len):
                    if acc[t] > bias:
                        count += 1
                out[fidx + b] = count / out_len
    return out


def minirocket_transform(slice_matrix: np.ndarray, config: RocketConfig) -> np.ndarray:
    """PPV features for one (leads, L) slice; bitwise deterministic."""
    x = np.asarray(slice_matrix, dtype=np.float64)
    if x.shape != (config.n_channels, config.input_length):
        raise DataError(
            f"slice shape {x.shape} does not match config "
            f"({config.n_channels}, {config.input_length})",
            code="shape-mismatch",
        )
    Z = config.subset_matrix() @ x
    out = np.zeros(config.feature_count, dtype=np.float64)
    _ppv_all(Z, KERNEL_TAPS, config.dilations.astype(np.int64),
             config.n_biases_per_dilation.astype(np.int64), config.biases, out)
    return out


def transform_bag(bag_slices, config: RocketConfig) -> np.ndarray:
    """Stack per-slice features for a list of slices."""
    return np.stack([minirocket_transform(s, config) for s in bag_slices])


# ---------------------------------------------------------------------------
# Fold-aware PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaProjection:
    """Top principal directions of one training fold's features."""

    mean: np.ndarray
    components: np.ndarray         # (D_in, D_out), orthonormal columns
    eigenvalues: np.ndarray        # descending, length D_out
    explained_variance_ratio: float
    fold_id: str

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, components=self.components,
                 eigenvalues=self.eigenvalues,
                 explained_variance_ratio=self.explained_variance_ratio,
                 fold_id=np.array(self.fold_id))

    @classmethod
    def load(cls, path) -> "PcaProjection":
        with np.load(path) as z:
            return cls(mean=z["mean"].copy(), components=z["components"].copy(),
                       eigenvalues=z["eigenvalues"].copy(),
                       explained_variance_ratio=float(z["explained_variance_ratio"]),
                       fold_id=str(z["fold_id"]))


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: largest-magnitude entry positive."""
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def pca_fit(train_features: np.ndarray, d_out: int, fold_id: str = "",
            audit=None, record_ids=()) -> PcaProjection:
    """Exact PCA of mean-centered training features.

    Computed from the thin SVD of the centered matrix, which stays
    orthonormal even for near-zero trailing singular values, so one
    code path serves both desk-scale tests and the n << D_in feature
    matrices of the production pipeline.
    """
    X = np.asarray(train_features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("need at least 2 training rows", code="too-few-rows")
    n, d_in = X.shape
    if not (1 <= d_out <= min(n - 1, d_in)):
        raise ConfigError(f"d_out={d_out} must be in [1, min(n-1, D_in)={min(n - 1, d_in)}]")

    mean = X.mean(axis=0)
    Xc = X - mean
    total_var = float(np.sum(Xc * Xc) / (n - 1))
    if total_var < 1e-30:
        raise DataError("degenerate input: all rows identical", code="degenerate")

    _, svals, vt = np.linalg.svd(Xc, full_matrices=False)
    lam = (svals[:d_out] ** 2) / (n - 1)
    comps = _fix_signs(vt[:d_out].T)
    GLOBAL_AUDIT.note_pca_fit(record_ids)
    if audit is not None:
        audit.note_pca_fit(record_ids)
    return PcaProjection(
        mean=mean,
        components=comps,
        eigenvalues=lam,
        explained_variance_ratio=float(lam.sum() / total_var),
        fold_id=fold_id,
    )


def pca_apply(features: np.ndarray, projection: PcaProjection) -> np.ndarray:
    """Project features: components^T (x - mean); accepts vectors or rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != projection.mean.shape[0]:
        raise DataError(
            f"feature dim {x.shape[-1]} != projection dim {projection.mean.shape[0]}",
            code="shape-mismatch",
        )
    return (x - projection.mean) @ projection.components


# ---------------------------------------------------------------------------
# Feature cache: (record_id, slice_index, feature_count) header + f32 payload
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"MRF1"


def write_feature_cache(path, entries) -> None:
    """entries: iterable of (record_id, slice_index, feature_vector)."""
    import struct

    with open(Path(path), "wb") as fh:
        items = list(entries)
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for record_id, slice_index, features in items:
            rid = record_id.encode("utf-8")
            feats = np.asarray(features, dtype="<f4")
            fh.write(struct.pack("<HII", len(rid), slice_index, feats.size))
            fh.write(rid)
            fh.write(feats.tobytes())


def read_feature_cache(path) -> list:
    import struct

    blob = Path(path).read_bytes()
    if blob[:4] != _CACHE_MAGIC:
        raise DataError("bad feature cache magic", code="malformed-header")
    (count,) = struct.unpack_from("<I", blob, 4)
    out, off = [], 8
    for _ in range(count):
        idlen, slice_index, nfeat = struct.unpack_from("<HII", blob, off)
        off += 10
        rid = blob[off : off + idlen].decode("utf-8")
        off += idlen
        feats = np.frombuffer(blob[off : off + 4 * nfeat], dtype="<f4").astype(np.float64)
        off += 4 * nfeat
        out.append((rid, slice_index, feats))
    return out
