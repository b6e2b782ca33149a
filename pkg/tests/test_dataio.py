"""Parser, label-table, and split tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgintervals import dataio


def make_record(adc, gain=1000.0, baseline=0, rate=500, record_id="r1", patient="p1"):
    samples = (np.asarray(adc, dtype=np.int64) - baseline) / gain
    return dataio.EcgRecord(record_id, patient, samples, rate)


class TestWfdbRoundTrip:
    def test_adc_to_mv(self):
        rec = make_record([2048], gain=1000.0, baseline=0)
        hdr, dat = dataio.write_wfdb_record(rec, gain=1000.0, baseline=0, fmt=16)
        parsed = dataio.parse_wfdb_record(hdr, dat, "I")
        assert parsed.samples[0] == pytest.approx(2.048)

    def test_adc_equal_baseline_is_zero(self):
        rec = make_record([512], gain=200.0, baseline=512)
        hdr, dat = dataio.write_wfdb_record(rec, gain=200.0, baseline=512, fmt=212)
        parsed = dataio.parse_wfdb_record(hdr, dat, "I")
        assert parsed.samples[0] == 0.0

    @pytest.mark.parametrize("fmt,lo,hi", [(16, -32768, 32767), (212, -2048, 2047)])
    def test_round_trip_exact(self, fmt, lo, hi):
        rng = np.random.default_rng(7)
        adc = rng.integers(lo, hi + 1, size=2500)
        rec = make_record(adc, gain=500.0, baseline=3)
        hdr, dat = dataio.write_wfdb_record(rec, gain=500.0, baseline=3, fmt=fmt)
        parsed = dataio.parse_wfdb_record(hdr, dat, "I")
        assert np.array_equal(parsed.samples, rec.samples)
        assert parsed.sampling_rate == rec.sampling_rate
        assert parsed.patient_id == "p1"

    def test_round_trip_odd_length_212(self):
        adc = np.array([1, -2, 3, -2048, 2047])
        rec = make_record(adc, gain=100.0)
        hdr, dat = dataio.write_wfdb_record(rec, gain=100.0, fmt=212)
        parsed = dataio.parse_wfdb_record(hdr, dat, "I")
        assert np.array_equal(parsed.samples, rec.samples)

    @settings(max_examples=25, deadline=None)
    @given(
        adc=st.lists(st.integers(min_value=-2048, max_value=2047), min_size=1, max_size=64),
        fmt=st.sampled_from([16, 212]),
    )
    def test_round_trip_property(self, adc, fmt):
        rec = make_record(adc, gain=250.0, baseline=-5)
        hdr, dat = dataio.write_wfdb_record(rec, gain=250.0, baseline=-5, fmt=fmt)
        parsed = dataio.parse_wfdb_record(hdr, dat, "I")
        assert np.array_equal(parsed.samples, rec.samples)

    def test_round_half_even_rule(self):
        # 2.0485 mV * 1000 = 2048.5 -> nearest even = 2048
        rec = dataio.EcgRecord("r", "p", np.array([2.0485]), 500)
        _, dat = dataio.write_wfdb_record(rec, gain=1000.0, baseline=0, fmt=16)
        assert np.frombuffer(dat, dtype="<i2")[0] == 2048
        rec2 = dataio.EcgRecord("r", "p", np.array([2.0495]), 500)
        _, dat2 = dataio.write_wfdb_record(rec2, gain=1000.0, baseline=0, fmt=16)
        assert np.frombuffer(dat2, dtype="<i2")[0] == 2050

    def test_zero_mv_zero_adc(self):
        rec = dataio.EcgRecord("r", "p", np.array([0.0]), 500)
        _, dat = dataio.write_wfdb_record(rec, gain=1000.0, baseline=0, fmt=16)
        assert np.frombuffer(dat, dtype="<i2")[0] == 0


class TestWfdbErrors:
    def test_unsupported_format(self):
        rec = make_record([1, 2, 3])
        hdr, dat = dataio.write_wfdb_record(rec, gain=100.0)
        bad = hdr.decode().replace(" 16 ", " 80 ").encode()
        with pytest.raises(dataio.UnsupportedFormatError):
            dataio.parse_wfdb_record(bad, dat, "I")

    def test_lead_not_found(self):
        rec = make_record([1, 2, 3])
        hdr, dat = dataio.write_wfdb_record(rec, gain=100.0)
        with pytest.raises(dataio.LeadNotFoundError):
            dataio.parse_wfdb_record(hdr, dat, "II")

    def test_truncated_payload(self):
        rec = make_record(np.arange(100))
        hdr, dat = dataio.write_wfdb_record(rec, gain=100.0)
        with pytest.raises(dataio.TruncatedSignalError):
            dataio.parse_wfdb_record(hdr, dat[:50], "I")

    def test_zero_gain(self):
        rec = make_record([1, 2])
        hdr, dat = dataio.write_wfdb_record(rec, gain=100.0)
        bad = hdr.decode().replace(" 100 ", " 0 ").encode()
        with pytest.raises(dataio.GainError):
            dataio.parse_wfdb_record(bad, dat, "I")

    def test_overflow_on_write(self):
        rec = dataio.EcgRecord("r", "p", np.array([40.0]), 500)
        with pytest.raises(dataio.RangeError):
            dataio.write_wfdb_record(rec, gain=1000.0, fmt=16)
        with pytest.raises(dataio.RangeError):
            dataio.write_wfdb_record(rec, gain=100.0, fmt=212)

    @settings(max_examples=50, deadline=None)
    @given(header=st.binary(max_size=200), payload=st.binary(max_size=200))
    def test_parsing_is_total(self, header, payload):
        # arbitrary bytes -> either a record or a typed DataError, never a crash
        try:
            dataio.parse_wfdb_record(header, payload, "I")
        except dataio.DataError:
            pass


class TestLabels:
    def test_pr_present_derived(self):
        lab = dataio.IntervalLabels(pr_ms=160, qrs_ms=96, qt_ms=400, hr_bpm=73)
        assert lab.pr_present
        lab0 = dataio.IntervalLabels(pr_ms=0, qrs_ms=96, qt_ms=400, hr_bpm=73)
        assert not lab0.pr_present

    def test_qt_must_exceed_qrs(self):
        with pytest.raises(dataio.LabelError):
            dataio.IntervalLabels(pr_ms=160, qrs_ms=400, qt_ms=300, hr_bpm=73)

    def test_parse_table(self):
        csv_bytes = (
            "ecg_id,PR_Int_Global,QRS_Dur_Global,QT_Int_Global,Heart_Rate_Global\n"
            "a,160,96,400,73\n"
            "b,0,90,380,80\n"
            "c,150,95,NaN,70\n"
            "d,150,95,,70\n"
        ).encode()
        entries, skipped = dataio.parse_label_table(csv_bytes)
        assert len(entries) == 2
        assert entries[0][1].pr_present and not entries[1][1].pr_present
        reasons = {s.record_id: s.reason for s in skipped}
        assert "non-numeric QT" in reasons["c"]
        assert "missing QT" in reasons["d"]

    def test_custom_column_map(self):
        csv_bytes = b"id,pr,qrs,qt,hr\nx,150,90,380,60\n"
        entries, skipped = dataio.parse_label_table(
            csv_bytes,
            {"record_id": "id", "pr_ms": "pr", "qrs_ms": "qrs", "qt_ms": "qt", "hr_bpm": "hr"},
        )
        assert entries[0][0] == "x" and not skipped

    def test_missing_column_and_empty_table(self):
        with pytest.raises(dataio.DataError):
            dataio.parse_label_table(b"ecg_id,PR_Int_Global\nx,1\n")
        with pytest.raises(dataio.DataError):
            dataio.parse_label_table(
                b"ecg_id,PR_Int_Global,QRS_Dur_Global,QT_Int_Global,Heart_Rate_Global\n"
            )


def toy_manifest(n_patients, records_per_patient=1):
    labels = dataio.IntervalLabels(pr_ms=160, qrs_ms=96, qt_ms=400, hr_bpm=73)
    entries = []
    for p in range(n_patients):
        for r in range(records_per_patient):
            entries.append(
                dataio.ManifestEntry(f"rec{p}_{r}", f"pat{p}", None, labels)
            )
    return dataio.DatasetManifest(entries=entries)


class TestSplits:
    def test_deterministic(self):
        m = toy_manifest(100)
        a = dataio.split_by_patient(m, seed=42)
        b = dataio.split_by_patient(m, seed=42)
        assert a.split_assignment == b.split_assignment
        c = dataio.split_by_patient(m, seed=43)
        assert a.split_assignment != c.split_assignment

    def test_patient_disjoint(self):
        m = toy_manifest(50, records_per_patient=3)
        s = dataio.split_by_patient(m, seed=1)
        by_split = {
            name: {e.patient_id for e in s.split(name)} for name in dataio.SPLIT_NAMES
        }
        assert not (by_split["train"] & by_split["validation"])
        assert not (by_split["train"] & by_split["holdout"])
        assert not (by_split["validation"] & by_split["holdout"])

    def test_exact_sizes_1000(self):
        m = toy_manifest(1000)
        s = dataio.split_by_patient(m, seed=9)
        counts = {name: len(s.split(name)) for name in dataio.SPLIT_NAMES}
        assert abs(counts["train"] - 700) <= 20
        assert abs(counts["validation"] - 150) <= 20
        assert abs(counts["holdout"] - 150) <= 20

    def test_fraction_tolerance_100_patients(self):
        for seed in range(5):
            s = dataio.split_by_patient(toy_manifest(100), seed=seed)
            counts = {name: len(s.split(name)) for name in dataio.SPLIT_NAMES}
            assert abs(counts["train"] / 100 - 0.70) <= 0.02
            assert abs(counts["validation"] / 100 - 0.15) <= 0.02

    def test_preconditions(self):
        with pytest.raises(dataio.ManifestError):
            dataio.split_by_patient(toy_manifest(2), seed=0)
        with pytest.raises(dataio.ManifestError):
            dataio.split_by_patient(toy_manifest(10), fractions=(0.5, 0.3, 0.1), seed=0)

    def test_stability_under_growth(self):
        # adding patients must not move existing ones far: most keep their split
        small = dataio.split_by_patient(toy_manifest(300), seed=5)
        big = dataio.split_by_patient(toy_manifest(400), seed=5)
        same = sum(
            1
            for e in small.entries
            if small.split_assignment[e.record_id] == big.split_assignment[e.record_id]
        )
        assert same / len(small.entries) > 0.85

    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(min_value=3, max_value=200), seed=st.integers(0, 2**32 - 1))
    def test_disjoint_property(self, n, seed):
        s = dataio.split_by_patient(toy_manifest(n), seed=seed)
        seen = {}
        for e in s.entries:
            split = s.split_assignment[e.record_id]
            assert seen.setdefault(e.patient_id, split) == split


class TestManifestJson:
    def test_round_trip(self):
        m = dataio.split_by_patient(toy_manifest(10), seed=3)
        text = dataio.manifest_to_json(m)
        back = dataio.manifest_from_json(text)
        assert back.split_assignment == m.split_assignment
        assert [e.record_id for e in back.entries] == [e.record_id for e in m.entries]
        assert dataio.manifest_to_json(back) == text

    def test_duplicate_ids_rejected(self):
        labels = dataio.IntervalLabels(pr_ms=1, qrs_ms=2, qt_ms=3, hr_bpm=4)
        with pytest.raises(dataio.ManifestError):
            dataio.DatasetManifest(
                entries=[
                    dataio.ManifestEntry("same", "p1", None, labels),
                    dataio.ManifestEntry("same", "p2", None, labels),
                ]
            )
