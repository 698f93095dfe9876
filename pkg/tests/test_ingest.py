import json
import struct

import numpy as np
import pytest

from ecgfusion.errors import DataError
from ecgfusion.ingest import (
    EcgRecord, SynthSpec, catalog_build, read_record, synth_ecg, write_record,
    DatasetCatalog, N_LEADS,
)


def random_record(rng, n=200, record_id="r0", subject_id="s0", labels=("a", "b")):
    return EcgRecord(
        samples=rng.standard_normal((N_LEADS, n)).astype(np.float32),
        fs=500.0,
        subject_id=subject_id,
        record_id=record_id,
        label_names=labels,
    )


class TestRawFormat:
    def test_round_trip_random_records_bit_exact(self, tmp_path):
        rng = np.random.default_rng(42)
        for i in range(20):
            rec = random_record(rng, n=int(rng.integers(1, 400)), record_id=f"r{i}")
            path = tmp_path / f"{i}.ecgf"
            write_record(rec, path, "raw-f32")
            back = read_record(path, "raw-f32")
            assert back.equals_bitwise(rec)

    def test_minimal_one_sample_record(self, tmp_path):
        rng = np.random.default_rng(0)
        rec = random_record(rng, n=1)
        write_record(rec, tmp_path / "one.ecgf")
        back = read_record(tmp_path / "one.ecgf")
        assert back.equals_bitwise(rec)

    def test_deterministic_bytes(self, tmp_path):
        rec = random_record(np.random.default_rng(1), n=50)
        write_record(rec, tmp_path / "a.ecgf")
        write_record(rec, tmp_path / "b.ecgf")
        assert (tmp_path / "a.ecgf").read_bytes() == (tmp_path / "b.ecgf").read_bytes()

    def test_full_size_round_trip_zero_difference(self, tmp_path):
        rng = np.random.default_rng(7)
        rec = random_record(rng, n=5000)
        write_record(rec, tmp_path / "big.ecgf")
        back = read_record(tmp_path / "big.ecgf")
        assert back.samples.shape == (12, 5000)
        assert np.max(np.abs(back.samples - rec.samples)) == 0.0

    def test_lead_count_mismatch_code(self, tmp_path):
        header = struct.Struct("<4sIIQd").pack(b"ECGF", 1, 3, 10, 500.0)
        payload = np.zeros(30, dtype="<f4").tobytes()
        (tmp_path / "bad.ecgf").write_bytes(header + payload)
        with pytest.raises(DataError) as exc:
            read_record(tmp_path / "bad.ecgf")
        assert exc.value.code == "lead-count-mismatch"

    def test_malformed_header_code(self, tmp_path):
        (tmp_path / "junk.ecgf").write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(DataError) as exc:
            read_record(tmp_path / "junk.ecgf")
        assert exc.value.code == "malformed-header"

    def test_truncated_payload_code(self, tmp_path):
        rec = random_record(np.random.default_rng(2), n=100)
        path = tmp_path / "trunc.ecgf"
        write_record(rec, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DataError) as exc:
            read_record(path)
        assert exc.value.code == "truncated-payload"

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError) as exc:
            read_record(tmp_path / "nothere.ecgf")
        assert exc.value.code == "missing-file"


class TestCsvFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        rec = random_record(rng, n=40)
        write_record(rec, tmp_path / "r.csv", "csv")
        back = read_record(tmp_path / "r.csv", "csv")
        # %.9g preserves every float32 exactly
        assert np.array_equal(back.samples, rec.samples)
        assert back.record_id == rec.record_id
        assert back.label_names == rec.label_names
        assert back.fs == rec.fs

    def test_wrong_column_count(self, tmp_path):
        (tmp_path / "bad.csv").write_text("# fs=500.0\nI,II,III\n1,2,3\n")
        with pytest.raises(DataError) as exc:
            read_record(tmp_path / "bad.csv", "csv")
        assert exc.value.code == "lead-count-mismatch"


class TestSynth:
    def test_zero_jitter_gaps_exact(self):
        spec = SynthSpec(n_beats=10, mean_rr_s=0.8, rr_jitter_s=0.0, seed=7)
        _, peaks = synth_ecg(spec)
        gaps = np.diff(peaks)
        assert len(peaks) == 10
        assert np.all(gaps == round(0.8 * 500))

    def test_determinism(self):
        spec = SynthSpec(n_beats=12, mean_rr_s=0.7, rr_jitter_s=0.08,
                         noise_std=0.05, seed=99)
        rec1, p1 = synth_ecg(spec)
        rec2, p2 = synth_ecg(spec)
        assert np.array_equal(rec1.samples, rec2.samples)
        assert np.array_equal(p1, p2)

    def test_jitter_statistics_match_draw(self):
        # independent recount: the ground-truth gaps are the generator's
        # own RR draw quantized to samples
        spec = SynthSpec(n_beats=200, mean_rr_s=0.8, rr_jitter_s=0.1, seed=5)
        _, peaks = synth_ecg(spec)
        rr = np.diff(peaks) / 500.0
        assert 0.08 <= np.std(rr) <= 0.12

    def test_labels_from_spec(self):
        rec, _ = synth_ecg(SynthSpec(n_beats=3, mean_rr_s=0.5, seed=1,
                                     labels=("x", "y")))
        assert rec.label_names == ("x", "y")
        rec, _ = synth_ecg(SynthSpec(n_beats=3, mean_rr_s=0.5, seed=1,
                                     morphology_class="morph_wide"))
        assert rec.label_names == ("morph_wide",)

    def test_precondition_violations(self):
        with pytest.raises(DataError):
            synth_ecg(SynthSpec(n_beats=1, mean_rr_s=0.8))
        with pytest.raises(DataError):
            synth_ecg(SynthSpec(n_beats=5, mean_rr_s=-1.0))

    def test_morphology_only_alters_precordial_leads(self):
        base, _ = synth_ecg(SynthSpec(n_beats=5, mean_rr_s=0.8, seed=3,
                                      morphology_class="morph_normal"))
        notch, _ = synth_ecg(SynthSpec(n_beats=5, mean_rr_s=0.8, seed=3,
                                       morphology_class="morph_notch"))
        assert np.array_equal(base.samples[:6], notch.samples[:6])
        assert not np.array_equal(base.samples[6:], notch.samples[6:])


class TestCatalog:
    def test_counting(self):
        rng = np.random.default_rng(0)
        records = [
            random_record(rng, record_id="a", subject_id="s1", labels=("x",)),
            random_record(rng, record_id="b", subject_id="s1", labels=("y",)),
            random_record(rng, record_id="c", subject_id="s2", labels=("x", "y")),
        ]
        catalog = catalog_build(records)
        assert len(catalog) == 3
        counts = sorted(
            sum(1 for e in catalog.entries if e.subject_id == s) for s in catalog.subjects()
        )
        assert counts == [1, 2]
        assert catalog.class_names == ("x", "y")

    def test_duplicate_record_id(self):
        rng = np.random.default_rng(0)
        records = [random_record(rng, record_id="dup"), random_record(rng, record_id="dup")]
        with pytest.raises(DataError) as exc:
            catalog_build(records)
        assert exc.value.code == "duplicate-record-id"

    def test_prevalence_matches_generator(self):
        # independent recount of the generator's label assignment
        rng = np.random.default_rng(8)
        assigned = {}
        records = []
        for i in range(100):
            label = ("morph_wide",) if rng.random() < 0.3 else ("morph_normal",)
            rec, _ = synth_ecg(SynthSpec(n_beats=3, mean_rr_s=0.6, seed=1000 + i,
                                         record_id=f"r{i}", subject_id=f"s{i}",
                                         labels=label))
            records.append(rec)
            assigned[f"r{i}"] = label
        catalog = catalog_build(records)
        matrix = catalog.label_matrix()
        for c, name in enumerate(catalog.class_names):
            expected = sum(1 for lab in assigned.values() if name in lab)
            assert matrix[:, c].sum() == expected

    def test_class_order_lexicographic(self):
        rng = np.random.default_rng(0)
        records = [random_record(rng, record_id="a", labels=("zeta", "alpha"))]
        assert catalog_build(records).class_names == ("alpha", "zeta")

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        catalog = catalog_build([random_record(rng, record_id="a")], paths=["a.ecgf"])
        catalog.save(tmp_path / "cat.json")
        back = DatasetCatalog.load(tmp_path / "cat.json")
        assert back.class_names == catalog.class_names
        assert back.entries == catalog.entries

    def test_label_vector_layout(self):
        rng = np.random.default_rng(0)
        catalog = catalog_build([
            random_record(rng, record_id="a", labels=("x",)),
            random_record(rng, record_id="b", labels=("y",)),
        ])
        assert np.array_equal(catalog.label_vector("a"), [1.0, 0.0])
        assert np.array_equal(catalog.label_vector("b"), [0.0, 1.0])
        assert len(catalog.label_vector("a")) == len(catalog.class_names)


class TestRecordInvariants:
    def test_rejects_wrong_lead_count(self):
        with pytest.raises(DataError):
            EcgRecord(np.zeros((3, 10), dtype=np.float32), 500.0, "s", "r")

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            EcgRecord(np.zeros((12, 0), dtype=np.float32), 500.0, "s", "r")

    def test_rejects_missing_subject(self):
        with pytest.raises(DataError):
            EcgRecord(np.zeros((12, 5), dtype=np.float32), 500.0, "", "r")
