"""Preprocessing chain and filtering/resampling primitives.

The model-input pipeline is: resample to the target rate, band-limit to
0.05-40 Hz, reject records whose absolute amplitude exceeds 5 mV, and
emit a fixed-length vector in millivolts with no amplitude normalization.

Band-limiting is zero-phase throughout so fiducial timing survives:
the low-frequency cut subtracts a baseline estimated by a 4th-order
Butterworth low-pass run forward-backward with its state pinned to the
record mean (reflection-padded high-pass filters of this corner
frequency ring for seconds on a 10-s record; baseline subtraction does
not), and the high-frequency cut is a 4th-order Butterworth low-pass
applied forward-backward with reflected padding.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.signal import butter, resample_poly, sosfilt, sosfilt_zi, sosfiltfilt

from .dataio import EcgRecord

log = logging.getLogger(__name__)

_CACHE_MAGIC = b"ECGVEC01"


class SigprocError(Exception):
    """Base class for signal-processing failures."""


class FilterDesignError(SigprocError):
    """Invalid band edges or rates."""


class RecordRejected(SigprocError):
    """A record was excluded by the preprocessing chain (expected outcome)."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate: int = 250
    band_low: float = 0.05
    band_high: float = 40.0
    amplitude_limit_mv: float = 5.0
    duration_s: float = 10.0

    @property
    def target_samples(self) -> int:
        return int(round(self.target_rate * self.duration_s))

    def validate(self) -> None:
        if self.target_rate <= 0:
            raise FilterDesignError("target_rate must be positive")
        if not (0 < self.band_low < self.band_high < self.target_rate / 2):
            raise FilterDesignError(
                f"band edges must satisfy 0 < low < high < rate/2, got "
                f"({self.band_low}, {self.band_high}) at {self.target_rate} Hz"
            )
        if self.amplitude_limit_mv <= 0:
            raise FilterDesignError("amplitude_limit_mv must be positive")


@dataclass(frozen=True)
class GateDecision:
    keep: bool
    max_abs_mv: float
    reason: Optional[str] = None


def resample(samples: np.ndarray, from_rate: int, to_rate: int) -> np.ndarray:
    """Rate conversion by polyphase filtering with a windowed-sinc kernel.

    Output length is round(len * to_rate / from_rate) (banker's rounding).
    Equal rates return an unmodified copy.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise SigprocError("cannot resample an empty signal")
    if from_rate <= 0 or to_rate <= 0:
        raise SigprocError("sampling rates must be positive")
    if from_rate == to_rate:
        return x.copy()
    ratio = Fraction(to_rate, from_rate) if isinstance(to_rate, int) and isinstance(from_rate, int) \
        else Fraction(to_rate).limit_denominator(10**6) / Fraction(from_rate).limit_denominator(10**6)
    up, down = ratio.numerator, ratio.denominator
    y = resample_poly(x, up, down)
    want = round(x.size * to_rate / from_rate)
    if y.size > want:
        y = y[:want]
    elif y.size < want:
        y = np.pad(y, (0, want - y.size), mode="edge")
    return y


def _baseline(x: np.ndarray, rate: float, corner_hz: float) -> np.ndarray:
    # Forward-backward low-pass with state initialized at the record mean,
    # so a constant record passes through transient-free.
    sos = butter(4, corner_hz, btype="lowpass", fs=rate, output="sos")
    zi = sosfilt_zi(sos)
    m = float(np.mean(x))
    y, _ = sosfilt(sos, x, zi=zi * m)
    y, _ = sosfilt(sos, y[::-1], zi=zi * m)
    return y[::-1]


def bandpass(samples: np.ndarray, rate: float, low: float = 0.05, high: float = 40.0) -> np.ndarray:
    """Zero-phase band-limit to (low, high) Hz; see the module docstring."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise SigprocError("cannot filter an empty signal")
    if not (0 < low < high < rate / 2):
        raise FilterDesignError(
            f"band edges must satisfy 0 < low < high < rate/2, got ({low}, {high}) at {rate} Hz"
        )
    y = x - _baseline(x, rate, low)
    sos = butter(4, high, btype="lowpass", fs=rate, output="sos")
    settle = int(np.ceil(3 * rate / high)) + 8 * 3  # ~3 cycles + IIR section count margin
    return sosfiltfilt(sos, y, padlen=min(x.size - 1, 2 * settle))


def amplitude_gate(samples: np.ndarray, limit_mv: float, record_id: str = "") -> GateDecision:
    """Reject iff max |sample| exceeds the limit. Total function; logs the call."""
    x = np.asarray(samples, dtype=np.float64)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > limit_mv:
        decision = GateDecision(False, peak, f"amplitude {peak:.3f} mV exceeds {limit_mv:g} mV limit")
    else:
        decision = GateDecision(True, peak)
    log.debug("amplitude_gate record=%s max=%.4f mV keep=%s", record_id, peak, decision.keep)
    return decision


def preprocess(record: EcgRecord, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Full chain: center-crop to 10 s, resample, band-limit, gate.

    Returns the fixed-length vector in mV (float64, never amplitude
    normalized). Raises ``RecordRejected`` for too-short records and for
    gate rejections.
    """
    config.validate()
    x = np.asarray(record.samples, dtype=np.float64)
    need = int(round(record.sampling_rate * config.duration_s))
    if x.size < need:
        raise RecordRejected(
            f"too short: {x.size / record.sampling_rate:.2f} s < {config.duration_s:g} s"
        )
    if x.size > need:
        start = (x.size - need) // 2
        x = x[start : start + need]
    x = resample(x, record.sampling_rate, config.target_rate)
    x = bandpass(x, config.target_rate, config.band_low, config.band_high)
    decision = amplitude_gate(x, config.amplitude_limit_mv, record.record_id)
    if not decision.keep:
        raise RecordRejected(decision.reason)
    if x.size != config.target_samples:
        raise SigprocError(
            f"preprocess produced {x.size} samples, expected {config.target_samples}"
        )
    return x


# ---------------------------------------------------------------------------
# flat binary cache for preprocessed vectors
# ---------------------------------------------------------------------------
# Layout: 8-byte magic, u32 count, u32 length, then count*length float32
# little-endian values in row order.

def save_vectors(path, vectors: np.ndarray) -> None:
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise SigprocError("vector cache expects a 2-d array [count, length]")
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def load_vectors(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:8] != _CACHE_MAGIC:
        raise SigprocError(f"{path}: not a vector cache file")
    count, length = struct.unpack("<II", blob[8:16])
    expected = 16 + 4 * count * length
    if len(blob) != expected:
        raise SigprocError(f"{path}: truncated cache (have {len(blob)} bytes, want {expected})")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(count, length).copy()
