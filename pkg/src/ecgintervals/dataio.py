"""Waveform and label parsing plus patient-disjoint dataset splits.

Waveform records use a two-file layout modeled on the PhysioBank
convention: a text header and a raw binary signal payload.

Header layout (UTF-8 text, ``#`` lines are comments)::

    <record_id> <n_signals> <sampling_rate_hz> <n_samples>
    <dat_filename> <format> <gain_adc_per_mV> <baseline_adc> <units> <lead_name>
    ... one line per signal ...
    # patient <patient_id>

Signal payload: samples interleaved by frame (all channels' sample 0,
then sample 1, ...), little-endian, in one of two storage formats:

* format 16 - 16-bit two's complement integers;
* format 212 - pairs of 12-bit two's complement values packed into
  3 bytes (low byte of the first sample; high nibbles of both samples;
  low byte of the second). An odd trailing sample occupies a final
  triplet with the second slot zeroed.

Conversion to physical units is ``(adc - baseline) / gain`` millivolts.
The write path quantizes with round-half-even, so writing then parsing
is the identity for values representable on the quantization grid.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SUPPORTED_FORMATS = (16, 212)
SPLIT_NAMES = ("train", "validation", "holdout")

_MANIFEST_FORMAT = "ecgintervals-manifest-v1"

DEFAULT_LABEL_COLUMNS = {
    "record_id": "ecg_id",
    "pr_ms": "PR_Int_Global",
    "qrs_ms": "QRS_Dur_Global",
    "qt_ms": "QT_Int_Global",
    "hr_bpm": "Heart_Rate_Global",
}


class DataError(Exception):
    """Base class for parsing and manifest failures."""


class HeaderError(DataError):
    """Malformed or undecodable header."""


class UnsupportedFormatError(DataError):
    """Signal storage format code outside the supported set."""


class LeadNotFoundError(DataError):
    """Requested lead is not described by the header."""


class TruncatedSignalError(DataError):
    """Signal payload shorter than the header promises."""


class GainError(DataError):
    """Zero or negative ADC gain cannot be inverted."""


class RangeError(DataError):
    """Quantized sample exceeds the storage format's range."""


class LabelError(DataError):
    """Interval label violates its invariants."""


class ManifestError(DataError):
    """Manifest construction or split precondition failure."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class EcgRecord:
    """One lead's sampled waveform in millivolts."""

    record_id: str
    patient_id: str
    samples: np.ndarray
    sampling_rate: int
    lead_name: str = "I"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise DataError(f"record {self.record_id}: empty sample sequence")
        if self.sampling_rate <= 0:
            raise DataError(f"record {self.record_id}: non-positive sampling rate")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sampling_rate


@dataclass(frozen=True)
class IntervalLabels:
    """PR/QRS/QT in ms and heart rate in bpm; zero PR encodes 'no P-wave'."""

    pr_ms: float
    qrs_ms: float
    qt_ms: float
    hr_bpm: float
    pr_present: bool = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.pr_ms < 0:
            raise LabelError(f"pr_ms must be >= 0, got {self.pr_ms}")
        if self.qrs_ms <= 0 or self.qt_ms <= 0 or self.hr_bpm <= 0:
            raise LabelError("qrs_ms, qt_ms and hr_bpm must be positive")
        if self.qt_ms <= self.qrs_ms:
            raise LabelError(f"qt_ms ({self.qt_ms}) must exceed qrs_ms ({self.qrs_ms})")
        derived = self.pr_ms > 0
        if self.pr_present is None:
            object.__setattr__(self, "pr_present", derived)
        elif self.pr_present != derived:
            raise LabelError("pr_present must equal (pr_ms > 0)")


@dataclass(frozen=True)
class ManifestEntry:
    record_id: str
    patient_id: str
    locator: Optional[str]
    labels: IntervalLabels


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split_assignment: dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    config_hash: Optional[str] = None

    def __post_init__(self):
        ids = [e.record_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate record_id in manifest")
        bad = set(self.split_assignment.values()) - set(SPLIT_NAMES)
        if bad:
            raise ManifestError(f"unknown split names: {sorted(bad)}")

    def patient_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.patient_id, None)
        return list(seen)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLIT_NAMES:
            raise ManifestError(f"unknown split {name!r}")
        return [e for e in self.entries if self.split_assignment.get(e.record_id) == name]


# ---------------------------------------------------------------------------
# waveform parsing / writing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _SignalSpec:
    filename: str
    fmt: int
    gain: float
    baseline: int
    units: str
    lead_name: str


def _parse_header(header_bytes: bytes) -> tuple[str, int, int, list[_SignalSpec], str]:
    try:
        text = header_bytes.decode("utf-8")
    except UnicodeDecodeError as e:
        raise HeaderError(f"header is not valid UTF-8: {e}") from e
    patient_id = ""
    lines = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if len(fields) >= 2 and fields[0] == "patient":
                patient_id = fields[1]
            continue
        lines.append(line)
    if not lines:
        raise HeaderError("empty header")
    head = lines[0].split()
    if len(head) != 4:
        raise HeaderError(f"record line must have 4 fields, got {len(head)}: {lines[0]!r}")
    record_id = head[0]
    try:
        n_sig, rate, n_samples = int(head[1]), int(head[2]), int(head[3])
    except ValueError as e:
        raise HeaderError(f"non-numeric record line field in {lines[0]!r}") from e
    if n_sig < 1:
        raise HeaderError("header describes no signals")
    if rate <= 0 or n_samples <= 0:
        raise HeaderError("sampling rate and sample count must be positive")
    if len(lines) - 1 != n_sig:
        raise HeaderError(f"expected {n_sig} signal lines, found {len(lines) - 1}")
    specs = []
    for line in lines[1:]:
        fields = line.split()
        if len(fields) != 6:
            raise HeaderError(f"signal line must have 6 fields: {line!r}")
        try:
            spec = _SignalSpec(
                filename=fields[0],
                fmt=int(fields[1]),
                gain=float(fields[2]),
                baseline=int(fields[3]),
                units=fields[4],
                lead_name=fields[5],
            )
        except ValueError as e:
            raise HeaderError(f"non-numeric signal field in {line!r}") from e
        specs.append(spec)
    return record_id, rate, n_samples, specs, patient_id


def _decode_format16(payload: bytes, total: int) -> np.ndarray:
    if len(payload) < 2 * total:
        raise TruncatedSignalError(
            f"format 16 payload holds {len(payload) // 2} samples, header promises {total}"
        )
    return np.frombuffer(payload, dtype="<i2", count=total).astype(np.int64)


def _decode_format212(payload: bytes, total: int) -> np.ndarray:
    need = (total + 1) // 2 * 3
    if len(payload) < need:
        raise TruncatedSignalError(
            f"format 212 payload has {len(payload)} bytes, header promises {need}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8, count=need).astype(np.int64)
    first = raw[0::3] | ((raw[1::3] & 0x0F) << 8)
    second = raw[2::3] | ((raw[1::3] >> 4) << 8)
    out = np.empty(first.size + second.size, dtype=np.int64)
    out[0::2] = first
    out[1::2] = second
    out = out[:total]
    out[out > 2047] -= 4096
    return out


def _encode_format16(adc: np.ndarray) -> bytes:
    if adc.min() < -32768 or adc.max() > 32767:
        raise RangeError("sample overflows format 16 range [-32768, 32767]")
    return adc.astype("<i2").tobytes()


def _encode_format212(adc: np.ndarray) -> bytes:
    if adc.min() < -2048 or adc.max() > 2047:
        raise RangeError("sample overflows format 212 range [-2048, 2047]")
    vals = np.where(adc < 0, adc + 4096, adc).astype(np.uint16)
    if vals.size % 2:
        vals = np.append(vals, np.uint16(0))
    first, second = vals[0::2], vals[1::2]
    out = np.empty(first.size * 3, dtype=np.uint8)
    out[0::3] = first & 0xFF
    out[1::3] = ((first >> 8) & 0x0F) | (((second >> 8) & 0x0F) << 4)
    out[2::3] = second & 0xFF
    return out.tobytes()


def parse_wfdb_record(header_bytes: bytes, signal_bytes: bytes, lead_selector: str) -> EcgRecord:
    """Decode one lead from a header/payload pair into millivolt samples.

    Raises a typed ``DataError`` subclass for every malformed input;
    never propagates a bare parsing exception.
    """
    record_id, rate, n_samples, specs, patient_id = _parse_header(header_bytes)
    leads = [s.lead_name for s in specs]
    try:
        idx = leads.index(lead_selector)
    except ValueError:
        raise LeadNotFoundError(
            f"record {record_id}: lead {lead_selector!r} not in {leads}"
        ) from None
    spec = specs[idx]
    if spec.fmt not in SUPPORTED_FORMATS:
        raise UnsupportedFormatError(
            f"record {record_id}: unsupported format {spec.fmt} (supported: {SUPPORTED_FORMATS})"
        )
    if spec.gain == 0:
        raise GainError(f"record {record_id}: zero gain for lead {spec.lead_name}")
    total = n_samples * len(specs)
    try:
        if spec.fmt == 16:
            flat = _decode_format16(signal_bytes, total)
        else:
            flat = _decode_format212(signal_bytes, total)
    except TruncatedSignalError:
        raise
    except Exception as e:  # defensive: totality over arbitrary byte streams
        raise TruncatedSignalError(f"record {record_id}: undecodable payload ({e})") from e
    adc = flat[idx :: len(specs)]
    mv = (adc - spec.baseline) / spec.gain
    return EcgRecord(
        record_id=record_id,
        patient_id=patient_id,
        samples=mv,
        sampling_rate=rate,
        lead_name=spec.lead_name,
    )


def write_wfdb_record(
    record: EcgRecord,
    gain: float = 1000.0,
    baseline: int = 0,
    fmt: int = 16,
    dat_filename: Optional[str] = None,
) -> tuple[bytes, bytes]:
    """Quantize and serialize a record; the exact inverse of the parser.

    Quantization is round-half-even on ``samples * gain + baseline``.
    Raises ``RangeError`` when a quantized value overflows the format.
    """
    if gain <= 0:
        raise GainError("gain must be positive")
    if fmt not in SUPPORTED_FORMATS:
        raise UnsupportedFormatError(f"unsupported format {fmt}")
    adc = np.rint(np.asarray(record.samples, dtype=np.float64) * gain + baseline).astype(np.int64)
    payload = _encode_format16(adc) if fmt == 16 else _encode_format212(adc)
    dat = dat_filename or f"{record.record_id}.dat"
    header = io.StringIO()
    header.write(f"{record.record_id} 1 {record.sampling_rate} {record.samples.size}\n")
    header.write(f"{dat} {fmt} {gain!r} {baseline} mV {record.lead_name}\n")
    if record.patient_id:
        header.write(f"# patient {record.patient_id}\n")
    return header.getvalue().encode("utf-8"), payload


def read_record(header_path, lead_selector: str = "I") -> EcgRecord:
    """Read a record from disk given its header path."""
    from pathlib import Path

    hp = Path(header_path)
    header_bytes = hp.read_bytes()
    _, _, _, specs, _ = _parse_header(header_bytes)
    leads = [s.lead_name for s in specs]
    if lead_selector not in leads:
        raise LeadNotFoundError(f"{hp}: lead {lead_selector!r} not in {leads}")
    dat = hp.parent / specs[leads.index(lead_selector)].filename
    return parse_wfdb_record(header_bytes, dat.read_bytes(), lead_selector)


# ---------------------------------------------------------------------------
# label tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkippedRow:
    line_no: int
    record_id: str
    reason: str


def parse_label_table(
    csv_bytes: bytes, column_map: Optional[dict[str, str]] = None
) -> tuple[list[tuple[str, IntervalLabels]], list[SkippedRow]]:
    """Parse an interval-label CSV into (record_id, labels) pairs.

    ``column_map`` maps logical fields (record_id, pr_ms, qrs_ms, qt_ms,
    hr_bpm) to CSV column names; the default targets 12SL-style feature
    tables. Rows with missing or non-numeric interval fields come back in
    the skip list with a reason instead of being silently dropped.
    """
    columns = dict(DEFAULT_LABEL_COLUMNS)
    if column_map:
        columns.update(column_map)
    try:
        text = csv_bytes.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise DataError(f"label table is not valid UTF-8: {e}") from e
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise DataError("label table has no header row")
    missing = [c for c in columns.values() if c not in reader.fieldnames]
    if missing:
        raise DataError(f"label table missing required columns: {missing}")

    entries: list[tuple[str, IntervalLabels]] = []
    skipped: list[SkippedRow] = []
    n_rows = 0
    for line_no, row in enumerate(reader, start=2):
        n_rows += 1
        record_id = (row.get(columns["record_id"]) or "").strip()
        if not record_id:
            skipped.append(SkippedRow(line_no, "", "missing record_id"))
            continue
        values = {}
        reason = None
        for logical in ("pr_ms", "qrs_ms", "qt_ms", "hr_bpm"):
            cell = (row.get(columns[logical]) or "").strip()
            if not cell:
                reason = f"missing {logical.split('_')[0].upper()}"
                break
            try:
                v = float(cell)
            except ValueError:
                reason = f"non-numeric {logical.split('_')[0].upper()}"
                break
            if not np.isfinite(v):
                reason = f"non-numeric {logical.split('_')[0].upper()}"
                break
            values[logical] = v
        if reason is None:
            try:
                labels = IntervalLabels(**values)
            except LabelError as e:
                reason = str(e)
        if reason is not None:
            skipped.append(SkippedRow(line_no, record_id, reason))
            continue
        entries.append((record_id, labels))
    if n_rows == 0:
        raise DataError("label table has a header but no rows")
    return entries, skipped


# ---------------------------------------------------------------------------
# patient-disjoint splits
# ---------------------------------------------------------------------------

def _patient_rank_key(patient_id: str, seed: int) -> tuple[int, str]:
    digest = hashlib.sha256(f"{seed}|{patient_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big"), patient_id


def split_by_patient(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> DatasetManifest:
    """Assign every patient (and all their records) to exactly one split.

    Patients are ordered by a seeded hash of their id and cut at the
    requested quantiles, so the assignment is a deterministic function of
    the patient-id set and the seed, split sizes are exact to within one
    patient, and growing the dataset only reshuffles patients near the
    quantile boundaries.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise ManifestError(f"need {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ManifestError(f"fractions must sum to 1, got {sum(fractions)!r}")
    if not manifest.entries:
        raise ManifestError("cannot split an empty manifest")
    patients = manifest.patient_ids()
    if len(patients) < 3:
        raise ManifestError(f"need at least 3 patients to split, got {len(patients)}")

    ordered = sorted(patients, key=lambda p: _patient_rank_key(p, seed))
    n = len(ordered)
    counts = [int(f * n) for f in fractions]
    remainders = sorted(
        range(len(fractions)), key=lambda i: (fractions[i] * n) - counts[i], reverse=True
    )
    for i in range(n - sum(counts)):
        counts[remainders[i % len(remainders)]] += 1

    patient_split: dict[str, str] = {}
    start = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for p in ordered[start : start + count]:
            patient_split[p] = name
        start += count

    assignment = {e.record_id: patient_split[e.patient_id] for e in manifest.entries}
    return DatasetManifest(
        entries=list(manifest.entries),
        split_assignment=assignment,
        seed=seed,
        config_hash=manifest.config_hash,
    )


# ---------------------------------------------------------------------------
# manifest serialization (schema documented in README)
# ---------------------------------------------------------------------------

def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "format": _MANIFEST_FORMAT,
        "seed": manifest.seed,
        "config_hash": manifest.config_hash,
        "entries": [
            {
                "record_id": e.record_id,
                "patient_id": e.patient_id,
                "locator": e.locator,
                "labels": {
                    "pr_ms": e.labels.pr_ms,
                    "qrs_ms": e.labels.qrs_ms,
                    "qt_ms": e.labels.qt_ms,
                    "hr_bpm": e.labels.hr_bpm,
                    "pr_present": e.labels.pr_present,
                },
            }
            for e in manifest.entries
        ],
        "split_assignment": dict(sorted(manifest.split_assignment.items())),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def manifest_from_json(text: str) -> DatasetManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    if doc.get("format") != _MANIFEST_FORMAT:
        raise ManifestError(f"unknown manifest format {doc.get('format')!r}")
    entries = []
    for item in doc.get("entries", []):
        lab = item["labels"]
        entries.append(
            ManifestEntry(
                record_id=item["record_id"],
                patient_id=item["patient_id"],
                locator=item.get("locator"),
                labels=IntervalLabels(
                    pr_ms=lab["pr_ms"],
                    qrs_ms=lab["qrs_ms"],
                    qt_ms=lab["qt_ms"],
                    hr_bpm=lab["hr_bpm"],
                    pr_present=lab["pr_present"],
                ),
            )
        )
    return DatasetManifest(
        entries=entries,
        split_assignment=doc.get("split_assignment", {}),
        seed=doc.get("seed"),
        config_hash=doc.get("config_hash"),
    )
