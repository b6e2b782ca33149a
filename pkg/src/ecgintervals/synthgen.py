"""Parametric 10-second single-lead ECG with exactly known interval labels.

Each beat is anchored at its QRS onset. The P wave is a Gaussian bump,
the QRS a biphasic piecewise-linear spike spanning exactly the requested
duration, and the T wave a wider Gaussian whose tangent-method offset
(inflection tangent intersecting the baseline, which for a Gaussian is
center + 2 sigma) lands exactly ``qt_ms`` after QRS onset. The analytic
fiducials therefore reproduce the requested intervals exactly, and a
competent delineator can recover them from the noiseless render.

This is deliberately not a physiological simulator; it exists to give
the pipeline a corpus with exact ground truth at desk scale.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .dataio import DatasetManifest, EcgRecord, IntervalLabels, ManifestEntry

BEAT_START_S = 0.4  # first QRS onset; leaves room for the longest PR
R_PEAK_FRAC = 0.4  # R apex position within the QRS span
S_DIP_FRAC = 0.25  # S amplitude as a fraction of R


class SynthError(Exception):
    """Parameter set violates the generator's invariants."""


@dataclass(frozen=True)
class BeatTemplateParams:
    pr_ms: float
    qrs_ms: float
    qt_ms: float
    hr_bpm: float
    p_amplitude: float = 0.15
    r_amplitude: float = 1.0
    t_amplitude: float = 0.35
    p_present: bool = True
    noise_rms: float = 0.0
    wander_amplitude: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.qrs_ms <= 0 or self.qt_ms <= 0 or self.hr_bpm <= 0:
            raise SynthError("qrs_ms, qt_ms and hr_bpm must be positive")
        if self.qt_ms <= self.qrs_ms:
            raise SynthError(f"qt_ms ({self.qt_ms}) must exceed qrs_ms ({self.qrs_ms})")
        if self.pr_ms < 0:
            raise SynthError("pr_ms must be >= 0")
        if self.p_present and self.pr_ms <= 0:
            raise SynthError("p_present requires a positive pr_ms")
        if 60000.0 / self.hr_bpm <= self.qt_ms:
            raise SynthError(
                f"beats overlap: period {60000.0 / self.hr_bpm:.1f} ms <= qt {self.qt_ms} ms"
            )
        if self.pr_ms > BEAT_START_S * 1000.0:
            raise SynthError(f"pr_ms must be <= {BEAT_START_S * 1000:.0f} ms")
        if min(self.p_amplitude, self.r_amplitude, self.t_amplitude) < 0:
            raise SynthError("wave amplitudes must be non-negative")
        if self.noise_rms < 0 or self.wander_amplitude < 0:
            raise SynthError("noise_rms and wander_amplitude must be non-negative")


@dataclass(frozen=True)
class BeatGroundTruth:
    """Analytic fiducial times for one rendered beat, in seconds."""

    p_onset_s: Optional[float]
    qrs_onset_s: float
    r_peak_s: float
    qrs_offset_s: float
    t_offset_s: float


def _p_sigma_s(pr_s: float) -> float:
    return min(0.022, pr_s / 4.0)


def _t_sigma_s(qt_s: float, qrs_s: float) -> float:
    return float(np.clip(0.18 * (qt_s - qrs_s), 0.008, 0.055))


def beat_times(params: BeatTemplateParams, duration_s: float = 10.0) -> list[float]:
    """QRS-onset times of every beat rendered fully inside the record."""
    period = 60.0 / params.hr_bpm
    qt_s = params.qt_ms / 1000.0
    times = []
    k = 0
    while True:
        onset = BEAT_START_S + k * period
        if onset + qt_s > duration_s:
            break
        times.append(onset)
        k += 1
    return times


def ground_truth_fiducials(
    params: BeatTemplateParams, duration_s: float = 10.0
) -> list[BeatGroundTruth]:
    """Exact fiducials per beat; intervals derived from them equal the params."""
    params.validate()
    pr_s, qrs_s, qt_s = params.pr_ms / 1e3, params.qrs_ms / 1e3, params.qt_ms / 1e3
    out = []
    for onset in beat_times(params, duration_s):
        out.append(
            BeatGroundTruth(
                p_onset_s=(onset - pr_s) if params.p_present else None,
                qrs_onset_s=onset,
                r_peak_s=onset + R_PEAK_FRAC * qrs_s,
                qrs_offset_s=onset + qrs_s,
                t_offset_s=onset + qt_s,
            )
        )
    return out


def synth_record(
    params: BeatTemplateParams,
    rate: int = 500,
    duration_s: float = 10.0,
    record_id: str = "syn0",
    patient_id: str = "pt0",
) -> tuple[EcgRecord, IntervalLabels]:
    """Render one record plus its labels.

    The label PR is zero (flagged absent) when ``p_present`` is false;
    everything else echoes the parameters.
    """
    params.validate()
    n = int(round(rate * duration_s))
    t = np.arange(n) / rate
    x = np.zeros(n)

    pr_s, qrs_s, qt_s = params.pr_ms / 1e3, params.qrs_ms / 1e3, params.qt_ms / 1e3
    sig_p = _p_sigma_s(pr_s) if params.p_present else 0.0
    sig_t = _t_sigma_s(qt_s, qrs_s)

    for onset in beat_times(params, duration_s):
        # QRS: biphasic piecewise-linear spike spanning exactly qrs_s
        xs = np.array([onset, onset + R_PEAK_FRAC * qrs_s, onset + 0.7 * qrs_s,
                       onset + 0.85 * qrs_s, onset + qrs_s])
        ys = np.array([0.0, params.r_amplitude, 0.0,
                       -S_DIP_FRAC * params.r_amplitude, 0.0])
        x += np.interp(t, xs, ys, left=0.0, right=0.0)
        if params.p_present and params.p_amplitude > 0:
            c_p = onset - pr_s + 2.0 * sig_p
            x += params.p_amplitude * np.exp(-0.5 * ((t - c_p) / sig_p) ** 2)
        if params.t_amplitude > 0:
            c_t = onset + qt_s - 2.0 * sig_t
            x += params.t_amplitude * np.exp(-0.5 * ((t - c_t) / sig_t) ** 2)

    rng = np.random.default_rng(params.seed)
    if params.wander_amplitude > 0:
        f_w = rng.uniform(0.15, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        x += params.wander_amplitude * np.sin(2 * np.pi * f_w * t + phase)
    if params.noise_rms > 0:
        x += rng.normal(0.0, params.noise_rms, size=n)

    record = EcgRecord(record_id, patient_id, x, rate, lead_name="I")
    labels = IntervalLabels(
        pr_ms=params.pr_ms if params.p_present else 0.0,
        qrs_ms=params.qrs_ms,
        qt_ms=params.qt_ms,
        hr_bpm=params.hr_bpm,
    )
    return record, labels


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamDistribution:
    """Independent clipped Gaussians for the intervals, uniform nuisances.

    Joint draws violating the no-overlap invariant are rejected and
    redrawn, which perturbs the configured moments by well under a
    millisecond at the default settings.
    """

    pr_mean: float = 158.0
    pr_std: float = 43.9
    pr_range: tuple[float, float] = (80.0, 300.0)
    qrs_mean: float = 97.0
    qrs_std: float = 24.6
    qrs_range: tuple[float, float] = (60.0, 200.0)
    qt_mean: float = 394.0
    qt_std: float = 49.9
    qt_range: tuple[float, float] = (280.0, 560.0)
    hr_mean: float = 77.0
    hr_std: float = 20.3
    hr_range: tuple[float, float] = (40.0, 140.0)
    zero_pr_fraction: float = 0.03
    r_amp: tuple[float, float, float, float] = (1.1, 0.25, 0.5, 2.0)  # mean, std, lo, hi
    p_amp: tuple[float, float, float, float] = (0.15, 0.05, 0.05, 0.30)
    t_amp: tuple[float, float, float, float] = (0.35, 0.10, 0.12, 0.70)
    noise_rms_range: tuple[float, float] = (0.03, 0.12)
    wander_range: tuple[float, float] = (0.05, 0.30)
    sampling_rates: tuple[int, ...] = (250, 500)
    records_per_patient: tuple[int, int] = (1, 3)


@dataclass
class SynthCorpus:
    manifest: DatasetManifest
    records: list[EcgRecord]
    labels: list[IntervalLabels]
    params: list[BeatTemplateParams]


def _clipped_normal(rng: np.random.Generator, mean, std, lo, hi) -> float:
    return float(np.clip(rng.normal(mean, std), lo, hi))


def sample_params(
    rng: np.random.Generator, dist: ParamDistribution, seed: int, p_present: bool
) -> BeatTemplateParams:
    for _ in range(200):
        pr = _clipped_normal(rng, dist.pr_mean, dist.pr_std, *dist.pr_range)
        qrs = _clipped_normal(rng, dist.qrs_mean, dist.qrs_std, *dist.qrs_range)
        qt = _clipped_normal(rng, dist.qt_mean, dist.qt_std, *dist.qt_range)
        hr = _clipped_normal(rng, dist.hr_mean, dist.hr_std, *dist.hr_range)
        if qt <= qrs or 60000.0 / hr <= qt + 10.0:
            continue
        return BeatTemplateParams(
            pr_ms=pr,
            qrs_ms=qrs,
            qt_ms=qt,
            hr_bpm=hr,
            p_amplitude=_clipped_normal(rng, *dist.p_amp),
            r_amplitude=_clipped_normal(rng, *dist.r_amp),
            t_amplitude=_clipped_normal(rng, *dist.t_amp),
            p_present=p_present,
            noise_rms=float(rng.uniform(*dist.noise_rms_range)),
            wander_amplitude=float(rng.uniform(*dist.wander_range)),
            seed=seed,
        )
    raise SynthError("could not sample a valid parameter tuple in 200 tries")


def synth_corpus(
    n: int, dist: ParamDistribution = ParamDistribution(), seed: int = 0
) -> SynthCorpus:
    """Generate ``n`` records deterministically from ``seed``.

    A ``zero_pr_fraction`` share of records renders no P wave and carries a
    zero PR label. Patients receive 1-3 consecutive records each so splits
    have something to keep disjoint.
    """
    if n < 1:
        raise SynthError("corpus size must be >= 1")
    rng = np.random.default_rng(seed)
    records, labels, params_list, entries = [], [], [], []
    patient_idx = 0
    remaining_for_patient = int(rng.integers(dist.records_per_patient[0],
                                             dist.records_per_patient[1] + 1))
    for i in range(n):
        if remaining_for_patient == 0:
            patient_idx += 1
            remaining_for_patient = int(rng.integers(dist.records_per_patient[0],
                                                     dist.records_per_patient[1] + 1))
        remaining_for_patient -= 1
        p_present = bool(rng.random() >= dist.zero_pr_fraction)
        record_seed = int(rng.integers(0, 2**63 - 1))
        params = sample_params(rng, dist, record_seed, p_present)
        rate = int(dist.sampling_rates[int(rng.integers(0, len(dist.sampling_rates)))])
        rid = f"syn{i:05d}"
        pid = f"pt{patient_idx:05d}"
        record, label = synth_record(params, rate=rate, record_id=rid, patient_id=pid)
        records.append(record)
        labels.append(label)
        params_list.append(params)
        entries.append(ManifestEntry(rid, pid, None, label))
    manifest = DatasetManifest(entries=entries, seed=seed)
    return SynthCorpus(manifest=manifest, records=records, labels=labels, params=params_list)


def write_corpus(corpus: SynthCorpus, out_dir, config_hash: Optional[str] = None) -> DatasetManifest:
    """Persist a corpus through the waveform write path plus a label CSV.

    Formats alternate between 16 and 212 so both parser paths stay
    exercised end to end. Returns the manifest with locators filled in.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    label_rows = []
    for i, (record, entry) in enumerate(zip(corpus.records, corpus.manifest.entries)):
        fmt, gain = (16, 1000.0) if i % 2 == 0 else (212, 200.0)
        header, payload = dataio.write_wfdb_record(record, gain=gain, baseline=0, fmt=fmt)
        hea = out / f"{record.record_id}.hea"
        hea.write_bytes(header)
        (out / f"{record.record_id}.dat").write_bytes(payload)
        entries.append(replace(entry, locator=hea.name))
        label_rows.append(
            {
                dataio.DEFAULT_LABEL_COLUMNS["record_id"]: record.record_id,
                dataio.DEFAULT_LABEL_COLUMNS["pr_ms"]: f"{entry.labels.pr_ms:.6g}",
                dataio.DEFAULT_LABEL_COLUMNS["qrs_ms"]: f"{entry.labels.qrs_ms:.6g}",
                dataio.DEFAULT_LABEL_COLUMNS["qt_ms"]: f"{entry.labels.qt_ms:.6g}",
                dataio.DEFAULT_LABEL_COLUMNS["hr_bpm"]: f"{entry.labels.hr_bpm:.6g}",
            }
        )
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(label_rows[0].keys()))
    writer.writeheader()
    writer.writerows(label_rows)
    (out / "labels.csv").write_text(buf.getvalue(), encoding="utf-8")
    manifest = DatasetManifest(
        entries=entries,
        split_assignment=dict(corpus.manifest.split_assignment),
        seed=corpus.manifest.seed,
        config_hash=config_hash,
    )
    (out / "manifest.json").write_text(dataio.manifest_to_json(manifest), encoding="utf-8")
    return manifest
