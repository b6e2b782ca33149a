"""Heuristic single-lead delineation: R peaks, fiducial windows, intervals.

The pipeline is a classic energy detector followed by rule-based
windowing: squared-derivative energy with moving-window integration and
an adaptive threshold finds the R peaks; QRS onset/offset come from a
slope-threshold search around each peak; the P onset and T offset are
refined with the tangent method (steepest-slope tangent intersected with
the local baseline). Every window length and threshold lives in
``DelineatorConfig``.

All detection runs at a fixed internal rate of 500 Hz; records at other
rates are resampled up front, and fiducials are reported in the
caller's sample coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import sigproc


class DelineationError(Exception):
    """No usable beats or malformed inputs."""


@dataclass(frozen=True)
class DelineatorConfig:
    operating_rate: int = 500
    # R-peak detector
    integration_window_ms: float = 120.0
    refractory_ms: float = 200.0
    min_peak_fraction: float = 0.25  # of the rolling energy maximum
    refine_window_ms: float = 60.0
    # QRS onset/offset search
    qrs_search_ms: float = 120.0
    slope_fraction: float = 0.08  # of the peak |slope| within the QRS
    amp_fraction: float = 0.12  # |v - baseline| must also fall below this x R height
    flat_run_samples: int = 3
    # P wave
    p_window_ms: tuple[float, float] = (-300.0, -50.0)
    p_min_amp_fraction: float = 0.08  # of R height, else "no P"
    # T wave
    t_window_ms: tuple[float, float] = (80.0, 450.0)
    t_min_amp_fraction: float = 0.05

    def ms(self, v: float) -> int:
        return int(round(v * self.operating_rate / 1000.0))


@dataclass(frozen=True)
class BeatFiducials:
    """Per-beat sample indices (fractional) at the analysis rate."""

    p_onset: Optional[float]
    qrs_onset: Optional[float]
    r_peak: float
    qrs_offset: Optional[float]
    t_offset: Optional[float]

    def ordered(self) -> bool:
        seq = [v for v in (self.p_onset, self.qrs_onset, self.r_peak,
                           self.qrs_offset, self.t_offset) if v is not None]
        return all(a < b for a, b in zip(seq, seq[1:]))


@dataclass(frozen=True)
class IntervalEstimate:
    """Per-record interval averages; a field is None when no beat produced it."""

    pr_ms: Optional[float]
    qrs_ms: Optional[float]
    qt_ms: Optional[float]
    hr_bpm: Optional[float]
    n_beats: int
    n_pr: int
    n_qrs: int
    n_qt: int


def detect_r_peaks(
    samples: np.ndarray, rate: int, config: DelineatorConfig = DelineatorConfig()
) -> list[int]:
    """Indices of R peaks, at least the refractory period apart.

    Squared first difference, moving-window integration, adaptive
    threshold at ``min_peak_fraction`` of the running maximum, then peak
    refinement on the raw waveform. Returns an empty list on flat input.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        return []
    if np.max(np.abs(x - x[0])) == 0:
        return []
    energy = np.square(np.diff(x))
    win = max(1, int(round(config.integration_window_ms * rate / 1000.0)))
    kernel = np.ones(win) / win
    integrated = np.convolve(energy, kernel, mode="same")
    floor = config.min_peak_fraction * np.max(integrated)
    if floor <= 0:
        return []

    refractory = max(1, int(round(config.refractory_ms * rate / 1000.0)))
    refine = max(1, int(round(config.refine_window_ms * rate / 1000.0)))
    candidates = np.flatnonzero(
        (integrated[1:-1] >= integrated[:-2])
        & (integrated[1:-1] > integrated[2:])
        & (integrated[1:-1] >= floor)
    ) + 1

    peaks: list[int] = []
    for c in candidates:
        lo, hi = max(0, c - refine), min(x.size, c + refine + 1)
        p = lo + int(np.argmax(x[lo:hi]))
        if peaks and p - peaks[-1] < refractory:
            # keep the taller of the colliding pair
            if x[p] > x[peaks[-1]]:
                peaks[-1] = p
            continue
        if not peaks or p != peaks[-1]:
            peaks.append(p)
    return peaks


def _local_baseline(x: np.ndarray, around: int, rate: int) -> float:
    lo = max(0, around - int(0.6 * rate))
    hi = min(x.size, around + int(0.6 * rate))
    return float(np.median(x[lo:hi]))


def _pq_baseline(x: np.ndarray, onset: int, config: DelineatorConfig, fallback: float) -> float:
    # the PQ segment between the P tail and the QRS onset is the cleanest
    # isoelectric stretch near the beat
    lo = max(0, onset - config.ms(45.0))
    hi = onset - config.ms(12.0)
    if hi - lo < 3:
        return fallback
    return float(np.median(x[lo:hi]))


def _p_baseline(x: np.ndarray, onset: int, config: DelineatorConfig, fallback: float) -> float:
    # the P wave sits somewhere in [-300, -40] ms; whichever of the TP and
    # PQ segments it does not occupy gives the cleaner (lower) estimate
    candidates = []
    for lo_ms, hi_ms in ((-300.0, -200.0), (-45.0, -12.0)):
        lo = max(0, onset + config.ms(lo_ms))
        hi = onset + config.ms(hi_ms)
        if hi - lo >= 3:
            candidates.append(float(np.median(x[lo:hi])))
    return min(candidates) if candidates else fallback


def _slope_search(
    x: np.ndarray,
    slope: np.ndarray,
    start: int,
    stop: int,
    step: int,
    slope_thr: float,
    amp_thr: float,
    baseline: float,
    run: int,
) -> Optional[int]:
    """March from start toward stop until slope and amplitude stay small."""
    count = 0
    i = start
    while 0 <= i != stop:
        flat = abs(slope[min(i, slope.size - 1)]) < slope_thr
        low = abs(x[i] - baseline) < amp_thr
        count = count + 1 if (flat and low) else 0
        if count >= run:
            return i - step * (run - 1)
        i += step
    return None


def _noise_sigma(x: np.ndarray, xs: np.ndarray) -> float:
    # robust high-frequency noise scale from the smoothing residual
    return 1.4826 * float(np.median(np.abs(x - xs)))


def _crossing_scan(
    x: np.ndarray, start: int, stop: int, step: int, threshold: float, above: bool, run: int = 2
) -> Optional[int]:
    """First index from start (exclusive) where x stays on the threshold's
    far side for ``run`` consecutive samples."""
    count = 0
    i = start + step
    while 0 <= i != stop and 0 <= i < x.size:
        ok = (x[i] <= threshold) if above else (x[i] >= threshold)
        count = count + 1 if ok else 0
        if count >= run:
            return i - step * (run - 1)
        i += step
    return None


def _qrs_bounds(
    x: np.ndarray,
    slope: np.ndarray,
    r: int,
    baseline: float,
    height: float,
    eps: float,
    search: int,
    config: DelineatorConfig,
) -> tuple[Optional[int], Optional[int]]:
    """QRS onset/offset as the points where the complex leaves and rejoins
    the baseline band, with a slope-threshold fallback for flat-S beats."""
    lo = max(0, r - search)
    hi = min(x.size, r + search)
    onset = _crossing_scan(x, r, lo - 1, -1, baseline + eps, above=True)
    offset = None
    seg = x[r:hi]
    if seg.size >= 3:
        s_nadir = r + int(np.argmin(seg))
        if x[s_nadir] < baseline - 3 * eps:
            offset = _crossing_scan(x, s_nadir, hi, +1, baseline - eps, above=False)
    if onset is None or offset is None:
        qrs_slope = np.max(np.abs(slope[lo:hi]))
        slope_thr = config.slope_fraction * qrs_slope
        amp_thr = config.amp_fraction * height
        if onset is None:
            onset = _slope_search(
                x, slope, r - 1, lo - 1, -1, slope_thr, amp_thr, baseline,
                config.flat_run_samples,
            )
        if offset is None:
            offset = _slope_search(
                x, slope, r + 1, hi, +1, slope_thr, amp_thr, baseline,
                config.flat_run_samples,
            )
    return onset, offset


def _limb_tangent_crossing(
    x: np.ndarray,
    peak: int,
    direction: int,
    limit: int,
    baseline: float,
    lo_frac: float = 0.30,
    hi_frac: float = 0.75,
) -> Optional[float]:
    """Regression-tangent method: fit a line to the wave's limb and extrapolate.

    Collects the samples between ``lo_frac`` and ``hi_frac`` of the peak
    height on the chosen side (direction +1: the limb after the peak,
    -1: before it), least-squares fits them, and returns the fractional
    index where the fit crosses the baseline. Averaging over the limb
    makes the crossing far more noise-tolerant than a single-point
    tangent; for a Gaussian wave it lands within a few percent of
    center + 2 sigma, the classic tangent-offset landmark.

    The wave is assumed positive relative to ``baseline``; callers negate
    for downward waves.
    """
    height = x[peak] - baseline
    if height <= 0:
        return None
    idxs = []
    i = peak + direction
    while 0 <= i != limit and 0 <= i < x.size:
        dev = x[i] - baseline
        if dev < lo_frac * height:
            break
        if dev <= hi_frac * height:
            idxs.append(i)
        i += direction
    if len(idxs) < 2:
        return None
    t = np.asarray(idxs, dtype=np.float64)
    v = x[idxs]
    a, b = np.polyfit(t, v, 1)
    if a == 0 or not np.isfinite(a) or np.sign(a) != -np.sign(direction):
        return None
    crossing = (baseline - b) / a
    if direction > 0 and crossing < peak:
        return None
    if direction < 0 and crossing > peak:
        return None
    return float(crossing)


def delineate(
    samples: np.ndarray,
    rate: int,
    r_peaks: list[int],
    config: DelineatorConfig = DelineatorConfig(),
) -> list[BeatFiducials]:
    """Locate per-beat fiducials around previously detected R peaks."""
    if not r_peaks:
        raise DelineationError("delineate requires at least one R peak")
    x = np.asarray(samples, dtype=np.float64)
    # slopes from a lightly smoothed copy; amplitudes stay raw. The wide
    # T wave gets a heavier smoother for its peak scan and limb fit.
    smooth_w = max(1, config.ms(6.0)) | 1
    xs = np.convolve(x, np.ones(smooth_w) / smooth_w, mode="same")
    slope = np.gradient(xs)
    t_w = max(1, config.ms(14.0)) | 1
    xt = np.convolve(x, np.ones(t_w) / t_w, mode="same")
    sigma = _noise_sigma(x, xs)
    beats: list[BeatFiducials] = []
    search = config.ms(config.qrs_search_ms)

    for bi, r in enumerate(r_peaks):
        baseline = _local_baseline(x, r, rate)
        height = abs(x[r] - baseline)
        if height == 0:
            continue
        eps = max(0.02 * height, 1.5 * sigma)
        onset, offset = _qrs_bounds(x, slope, r, baseline, height, eps, search, config)
        if onset is not None:
            refined = _pq_baseline(x, onset, config, baseline)
            # re-run the bounds once against the cleaner PQ baseline
            if abs(refined - baseline) > 0.25 * eps:
                baseline = refined
                height = abs(x[r] - baseline)
                eps = max(0.02 * height, 1.5 * sigma)
                onset, offset = _qrs_bounds(
                    x, slope, r, baseline, height, eps, search, config
                )
            else:
                baseline = refined
                height = abs(x[r] - baseline)
        if onset is None and offset is None:
            continue

        p_onset = None
        if onset is not None:
            pb = _p_baseline(x, onset, config, baseline)
            w_lo = onset + config.ms(config.p_window_ms[0])
            w_hi = onset + config.ms(config.p_window_ms[1])
            if bi > 0:
                w_lo = max(w_lo, r_peaks[bi - 1] + config.ms(160.0))
            if bi > 0 and beats and beats[-1].t_offset is not None:
                w_lo = max(w_lo, int(np.ceil(beats[-1].t_offset)) + config.ms(10))
            w_lo = max(0, w_lo)
            if w_hi - w_lo >= 3:
                seg = xs[w_lo:w_hi]
                p_peak = w_lo + int(np.argmax(seg))
                p_height = xs[p_peak] - pb
                p_floor = max(config.p_min_amp_fraction * height, 2.5 * sigma)
                if p_height >= p_floor and w_lo < p_peak < w_hi - 1:
                    p_onset = _limb_tangent_crossing(xs, p_peak, -1, w_lo, pb)
                    if p_onset is not None and (
                        p_onset >= onset or p_onset < w_lo - config.ms(40.0)
                    ):
                        p_onset = None

        t_offset = None
        if offset is not None:
            w_lo = offset + config.ms(config.t_window_ms[0])
            w_hi = min(x.size, offset + config.ms(config.t_window_ms[1]))
            if bi + 1 < len(r_peaks):
                w_hi = min(w_hi, r_peaks[bi + 1] - config.ms(80.0))
            if w_hi - w_lo >= 3 and w_lo >= 0:
                dev = np.abs(xt[w_lo:w_hi] - baseline)
                t_peak = w_lo + int(np.argmax(dev))
                t_height = abs(xt[t_peak] - baseline)
                t_floor = max(config.t_min_amp_fraction * height, 2.5 * sigma)
                if t_height >= t_floor and w_lo < t_peak < w_hi - 1:
                    if xt[t_peak] >= baseline:
                        t_offset = _limb_tangent_crossing(xt, t_peak, +1, w_hi, baseline)
                    else:
                        t_offset = _limb_tangent_crossing(-xt, t_peak, +1, w_hi, -baseline)
                    if t_offset is not None and (
                        t_offset <= offset
                        or t_offset > w_hi + config.ms(60)
                        or (onset is not None and t_offset - onset > config.ms(620.0))
                    ):
                        t_offset = None

        beat = BeatFiducials(
            p_onset=p_onset,
            qrs_onset=float(onset) if onset is not None else None,
            r_peak=float(r),
            qrs_offset=float(offset) if offset is not None else None,
            t_offset=t_offset,
        )
        if not beat.ordered():
            beat = BeatFiducials(None, beat.qrs_onset, beat.r_peak, beat.qrs_offset, None)
        if beat.ordered():
            beats.append(beat)
    return beats


def intervals_from_fiducials(
    beats: list[BeatFiducials], rate: int
) -> IntervalEstimate:
    """Per-beat intervals averaged over the beats that produced them.

    Beats missing a fiducial are excluded from that interval's average
    only. Heart rate uses the span between the first and last R peak.
    """
    if not beats:
        raise DelineationError("no delineated beats")
    ms = 1000.0 / rate
    pr = [
        (b.qrs_onset - b.p_onset) * ms
        for b in beats
        if b.p_onset is not None and b.qrs_onset is not None
    ]
    qrs = [
        (b.qrs_offset - b.qrs_onset) * ms
        for b in beats
        if b.qrs_onset is not None and b.qrs_offset is not None
    ]
    qt = [
        (b.t_offset - b.qrs_onset) * ms
        for b in beats
        if b.qrs_onset is not None and b.t_offset is not None
    ]
    hr = None
    if len(beats) >= 2:
        span = (beats[-1].r_peak - beats[0].r_peak) / rate
        if span > 0:
            hr = 60.0 * (len(beats) - 1) / span
    return IntervalEstimate(
        pr_ms=float(np.mean(pr)) if pr else None,
        qrs_ms=float(np.mean(qrs)) if qrs else None,
        qt_ms=float(np.mean(qt)) if qt else None,
        hr_bpm=hr,
        n_beats=len(beats),
        n_pr=len(pr),
        n_qrs=len(qrs),
        n_qt=len(qt),
    )


def delineate_record(
    samples: np.ndarray, rate: int, config: DelineatorConfig = DelineatorConfig()
) -> IntervalEstimate:
    """Full pipeline at the internal operating rate.

    The input is expected band-limited already (the shared preprocessing
    chain); this only adjusts the sampling rate.
    """
    x = np.asarray(samples, dtype=np.float64)
    op_rate = config.operating_rate
    if rate != op_rate:
        x = sigproc.resample(x, rate, op_rate)
    peaks = detect_r_peaks(x, op_rate, config)
    if not peaks:
        raise DelineationError("no R peaks found")
    beats = delineate(x, op_rate, peaks, config)
    return intervals_from_fiducials(beats, op_rate)
