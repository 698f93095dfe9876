"""Record ingestion: file formats, synthetic generation, dataset catalog.

Two on-disk waveform formats are supported:

* ``raw-f32`` -- little-endian header ``{magic, version, n_leads, N, fs}``
  followed by row-major float32 samples, then a JSON metadata trailer
  (record id, subject id, label names). Round trips are bit-exact.
* ``csv`` -- one column per lead with a named header row, metadata in
  leading ``#`` comment lines. Human-inspectable fixtures.

The synthetic generator places Gaussian-bump QRS templates at known R
indices, so peak detectors and classifiers downstream can be checked
against analytic ground truth. Morphology-class variants alter the QRS
shape only on the precordial leads (V1-V6); limb leads carry the same
base template for every class. Rhythm structure lives purely in the RR
gaps.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError

N_LEADS = 12
LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
PRECORDIAL_LEADS = (6, 7, 8, 9, 10, 11)

_MAGIC = b"ECGF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIQd")  # magic, version, n_leads, n_samples, fs


@dataclass
class EcgRecord:
    """One 12-lead recording with its identity and label names.

    `samples` is a float32 matrix of shape (12, N) in millivolt-like
    units. Multi-hot label vectors are materialized by the catalog
    against its sorted class vocabulary; the record itself carries the
    label names, which is the portable representation.
    """

    samples: np.ndarray
    fs: float
    subject_id: str
    record_id: str
    label_names: tuple = ()

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[0] != N_LEADS:
            raise DataError(
                f"expected {N_LEADS} leads, got shape {self.samples.shape}",
                code="lead-count-mismatch",
            )
        if self.samples.shape[1] < 1:
            raise DataError("record must contain at least one sample", code="empty-record")
        if not self.fs > 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}", code="bad-fs")
        if not self.subject_id:
            raise DataError("subject_id must be non-empty", code="missing-subject")
        self.label_names = tuple(self.label_names)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def equals_bitwise(self, other: "EcgRecord") -> bool:
        return (
            self.samples.dtype == other.samples.dtype
            and self.samples.shape == other.samples.shape
            and np.array_equal(
                self.samples.view(np.uint32), other.samples.view(np.uint32)
            )
            and self.fs == other.fs
            and self.subject_id == other.subject_id
            and self.record_id == other.record_id
            and self.label_names == other.label_names
        )


def _meta_bytes(record: EcgRecord) -> bytes:
    meta = {
        "record_id": record.record_id,
        "subject_id": record.subject_id,
        "labels": list(record.label_names),
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_record(record: EcgRecord, path, format: str = "raw-f32") -> None:
    """Serialize a record. Byte output is deterministic for equal input."""
    path = Path(path)
    if format == "raw-f32":
        payload = record.samples.astype("<f4", copy=False).tobytes(order="C")
        meta = _meta_bytes(record)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, N_LEADS, record.n_samples, float(record.fs)))
            fh.write(payload)
            fh.write(struct.pack("<I", len(meta)))
            fh.write(meta)
    elif format == "csv":
        buf = io.StringIO()
        buf.write(f"# fs={record.fs!r}\n")
        buf.write(f"# record_id={record.record_id}\n")
        buf.write(f"# subject_id={record.subject_id}\n")
        buf.write("# labels=" + ";".join(record.label_names) + "\n")
        buf.write(",".join(LEAD_NAMES) + "\n")
        cols = record.samples.T  # one row per sample, one column per lead
        for row in cols:
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        path.write_text(buf.getvalue())
    else:
        raise DataError(f"unknown format {format!r}", code="unknown-format")


def read_record(path, format: str = "raw-f32") -> EcgRecord:
    """Parse a record file written by :func:`write_record`.

    Raises DataError with a distinct code for each failure family:
    ``malformed-header``, ``lead-count-mismatch``, ``truncated-payload``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}", code="missing-file")
    if format == "raw-f32":
        blob = path.read_bytes()
        if len(blob) < _HEADER.size:
            raise DataError("file shorter than header", code="malformed-header")
        magic, version, n_leads, n_samples, fs = _HEADER.unpack_from(blob, 0)
        if magic != _MAGIC or version != _VERSION:
            raise DataError("bad magic or version", code="malformed-header")
        if n_leads != N_LEADS:
            raise DataError(
                f"lead count mismatch: header declares {n_leads}", code="lead-count-mismatch"
            )
        if n_samples < 1 or fs <= 0:
            raise DataError("header declares empty record", code="malformed-header")
        need = N_LEADS * n_samples * 4
        body = blob[_HEADER.size:]
        if len(body) < need:
            raise DataError(
                f"payload truncated: need {need} bytes, have {len(body)}",
                code="truncated-payload",
            )
        samples = np.frombuffer(body[:need], dtype="<f4").reshape(N_LEADS, n_samples)
        record_id, subject_id, labels = path.stem, path.stem, ()
        trailer = body[need:]
        if len(trailer) >= 4:
            (mlen,) = struct.unpack_from("<I", trailer, 0)
            if len(trailer) < 4 + mlen:
                raise DataError("metadata trailer truncated", code="truncated-payload")
            meta = json.loads(trailer[4 : 4 + mlen].decode("utf-8"))
            record_id = meta.get("record_id", record_id)
            subject_id = meta.get("subject_id", subject_id)
            labels = tuple(meta.get("labels", ()))
        return EcgRecord(samples.copy(), fs, subject_id, record_id, labels)
    elif format == "csv":
        fs, record_id, subject_id, labels = None, path.stem, path.stem, ()
        rows = []
        header_seen = False
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition("=")
                    if key == "fs":
                        fs = float(value)
                    elif key == "record_id":
                        record_id = value
                    elif key == "subject_id":
                        subject_id = value
                    elif key == "labels":
                        labels = tuple(v for v in value.split(";") if v)
                    continue
                if not header_seen:
                    names = tuple(line.split(","))
                    if len(names) != N_LEADS:
                        raise DataError(
                            f"lead count mismatch: {len(names)} columns",
                            code="lead-count-mismatch",
                        )
                    header_seen = True
                    continue
                parts = line.split(",")
                if len(parts) != N_LEADS:
                    raise DataError("ragged csv row", code="truncated-payload")
                rows.append([float(v) for v in parts])
        if fs is None or not header_seen or not rows:
            raise DataError("missing fs comment, header row, or samples", code="malformed-header")
        samples = np.asarray(rows, dtype=np.float32).T
        return EcgRecord(samples, fs, subject_id, record_id, labels)
    raise DataError(f"unknown format {format!r}", code="unknown-format")


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

# Per-lead QRS amplitudes for the base beat (limb then precordial).
_BASE_AMPLITUDE = np.array(
    [0.6, 1.0, 0.7, -0.5, 0.4, 0.8, 0.9, 1.1, 1.2, 1.3, 1.1, 1.0], dtype=np.float64
)
_QRS_SIGMA_S = 0.02
_TWAVE_OFFSET_S = 0.25
_TWAVE_SIGMA_S = 0.06
_TWAVE_AMPLITUDE = 0.25

# Morphology classes differ from the base beat only on V1-V6.
MORPHOLOGY_CLASSES = ("morph_normal", "morph_wide", "morph_notch", "morph_invert")


@dataclass(frozen=True)
class SynthSpec:
    """Generator input; the generator is a pure function of this spec."""

    n_beats: int
    mean_rr_s: float
    rr_jitter_s: float = 0.0
    morphology_class: str = "morph_normal"
    noise_std: float = 0.0
    seed: int = 0
    fs: float = 500.0
    subject_id: str = ""
    record_id: str = ""
    labels: tuple = None  # defaults to (morphology_class,)


def _gauss_bump(t_rel: np.ndarray, center: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((t_rel - center) / sigma) ** 2)


def _beat_waveform(t_rel: np.ndarray, lead: int, morphology_class: str) -> np.ndarray:
    """One beat on one lead, sampled at times `t_rel` relative to the R index."""
    amp = _BASE_AMPLITUDE[lead]
    base = amp * _gauss_bump(t_rel, 0.0, _QRS_SIGMA_S)
    base += amp * _TWAVE_AMPLITUDE * _gauss_bump(t_rel, _TWAVE_OFFSET_S, _TWAVE_SIGMA_S)
    if lead not in PRECORDIAL_LEADS or morphology_class == "morph_normal":
        return base
    if morphology_class == "morph_wide":
        wide = amp * _gauss_bump(t_rel, 0.0, 2.0 * _QRS_SIGMA_S)
        return wide + amp * _TWAVE_AMPLITUDE * _gauss_bump(t_rel, _TWAVE_OFFSET_S, _TWAVE_SIGMA_S)
    if morphology_class == "morph_notch":
        notch = 0.7 * amp * (
            _gauss_bump(t_rel, -0.022, _QRS_SIGMA_S) + _gauss_bump(t_rel, 0.022, _QRS_SIGMA_S)
        )
        return notch + amp * _TWAVE_AMPLITUDE * _gauss_bump(t_rel, _TWAVE_OFFSET_S, _TWAVE_SIGMA_S)
    if morphology_class == "morph_invert":
        return -base
    raise DataError(f"unknown morphology class {morphology_class!r}", code="unknown-class")


def synth_ecg(spec: SynthSpec):
    """Generate a synthetic record; returns ``(record, r_peak_indices)``.

    RR gaps are ``round((mean_rr + jitter) * fs)`` samples with jitter
    drawn i.i.d. Gaussian truncated at +/-3 sigma, so `rr_jitter_s = 0`
    yields exactly periodic beats. The returned R indices are the ground
    truth template centers.
    """
    if spec.n_beats < 2:
        raise DataError("need at least 2 beats", code="bad-spec")
    if spec.mean_rr_s <= 0 or spec.rr_jitter_s < 0:
        raise DataError("mean_rr_s must be > 0 and rr_jitter_s >= 0", code="bad-spec")
    rng = np.random.default_rng(spec.seed)
    fs = spec.fs

    jitter = np.clip(rng.standard_normal(spec.n_beats - 1), -3.0, 3.0) * spec.rr_jitter_s
    rr_s = np.maximum(spec.mean_rr_s + jitter, 2.0 / fs)
    gaps = np.maximum(np.rint(rr_s * fs).astype(int), 1)

    margin = int(round(0.4 * fs))
    peaks = margin + np.concatenate([[0], np.cumsum(gaps)])
    n = int(peaks[-1] + margin)

    samples = np.zeros((N_LEADS, n), dtype=np.float64)
    half = int(round(0.4 * fs))
    for peak in peaks:
        lo, hi = max(0, peak - half), min(n, peak + half + 1)
        t_rel = (np.arange(lo, hi) - peak) / fs
        for lead in range(N_LEADS):
            samples[lead, lo:hi] += _beat_waveform(t_rel, lead, spec.morphology_class)
    if spec.noise_std > 0:
        samples += spec.noise_std * rng.standard_normal(samples.shape)

    labels = spec.labels if spec.labels is not None else (spec.morphology_class,)
    record = EcgRecord(
        samples=samples.astype(np.float32),
        fs=fs,
        subject_id=spec.subject_id or f"subj-{spec.seed:08d}",
        record_id=spec.record_id or f"synth-{spec.seed:08d}",
        label_names=tuple(labels),
    )
    return record, peaks.astype(np.int64)


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    record_id: str
    subject_id: str
    label_names: tuple
    path: str = ""


@dataclass
class DatasetCatalog:
    """Record metadata plus the sorted class vocabulary.

    Label vectors are materialized here so that their length and class
    ordering are reproducible across runs (lexicographic vocabulary).
    """

    entries: list
    class_names: tuple
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {e.record_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def subjects(self) -> tuple:
        seen = []
        for e in self.entries:
            if e.subject_id not in seen:
                seen.append(e.subject_id)
        return tuple(seen)

    def entry(self, record_id: str) -> CatalogEntry:
        return self._by_id[record_id]

    def label_vector(self, record_id: str) -> np.ndarray:
        names = set(self._by_id[record_id].label_names)
        return np.array([1.0 if c in names else 0.0 for c in self.class_names], dtype=np.float32)

    def label_matrix(self) -> np.ndarray:
        return np.stack([self.label_vector(e.record_id) for e in self.entries])

    def to_json(self) -> str:
        doc = {
            "class_names": list(self.class_names),
            "records": [
                {
                    "record_id": e.record_id,
                    "subject_id": e.subject_id,
                    "labels": list(e.label_names),
                    "path": e.path,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "DatasetCatalog":
        doc = json.loads(text)
        entries = [
            CatalogEntry(r["record_id"], r["subject_id"], tuple(r["labels"]), r.get("path", ""))
            for r in doc["records"]
        ]
        return cls(entries=entries, class_names=tuple(doc["class_names"]))

    @classmethod
    def load(cls, path) -> "DatasetCatalog":
        return cls.from_json(Path(path).read_text())


def catalog_build(records, paths=None) -> DatasetCatalog:
    """Build a catalog from records or pre-made entries.

    The class vocabulary is the lexicographically sorted union of all
    observed label names. Duplicate record ids are rejected.
    """
    if not records:
        raise DataError("cannot build a catalog from zero records", code="empty-catalog")
    entries = []
    for i, r in enumerate(records):
        if isinstance(r, CatalogEntry):
            entries.append(r)
        else:
            path = "" if paths is None else str(paths[i])
            entries.append(CatalogEntry(r.record_id, r.subject_id, tuple(r.label_names), path))
    seen = set()
    for e in entries:
        if e.record_id in seen:
            raise DataError(f"duplicate record_id {e.record_id!r}", code="duplicate-record-id")
        seen.add(e.record_id)
    class_names = tuple(sorted({name for e in entries for name in e.label_names}))
    if not class_names:
        raise DataError("no labels observed; class vocabulary is empty", code="empty-vocabulary")
    return DatasetCatalog(entries=entries, class_names=class_names)
