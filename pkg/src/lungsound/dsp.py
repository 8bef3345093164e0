"""Preprocessing chain: Butterworth bandpass, polyphase resampling to 4 kHz,
peak normalization, record-window selection, and event extraction.

The canonical order is filter at the native rate, then resample, then
normalize.  Filtering must happen before resampling because the 2000 Hz
upper cutoff equals the post-resample Nyquist frequency, which makes a
bandpass design at 4 kHz degenerate (and raises InvalidBandError).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, firwin, resample_poly, sosfilt, sosfreqz

from .errors import DataError
from .ingest import AudioRecording

__all__ = [
    "FilterCoefficients", "SegmentPolicy", "InvalidBandError", "TooShortError",
    "design_butterworth_bandpass", "sos_frequency_response", "apply_filter",
    "resample", "normalize_amplitude",
    "extract_record_segment", "extract_event_segment", "preprocess",
]

_REFLECT_PAD = 3 * 512  # reflection-padding length for zero-phase filtering


class InvalidBandError(DataError):
    """Bandpass corners incompatible with the sampling rate."""


class TooShortError(DataError):
    """Recording shorter than the record window plus head trim."""


@dataclass(frozen=True)
class FilterCoefficients:
    """Cascade of normalized biquads plus the design metadata."""
    sos: np.ndarray  # (n_sections, 6) scipy layout b0,b1,b2,a0,a1,a2 with a0=1
    order: int
    low_hz: float
    high_hz: float
    fs: float

    @property
    def sections(self) -> list[dict]:
        out = []
        for row in self.sos:
            b0, b1, b2, _a0, a1, a2 = (float(v) for v in row)
            out.append({"b0": b0, "b1": b1, "b2": b2, "a1": a1, "a2": a2})
        return out


@dataclass(frozen=True)
class SegmentPolicy:
    """Windowing constants for record- and event-level segmentation."""
    record_window: float = 8.216
    head_trim: float = 1.0
    event_length: float = 3.0
    target_rate: int = 4000

    def __post_init__(self):
        if min(self.record_window, self.head_trim, self.event_length, self.target_rate) <= 0:
            raise ValueError("all segment policy fields must be positive")


def design_butterworth_bandpass(order: int = 4, low_hz: float = 50.0,
                                high_hz: float = 2000.0, fs: float = 8000.0) -> FilterCoefficients:
    """Maximally flat bandpass as second-order sections.

    A bandpass of analog order N yields a digital filter of order 2N,
    i.e. N biquads: the default order-4 design has 4 sections.
    """
    if not 0 < low_hz < high_hz:
        raise InvalidBandError(f"need 0 < low < high, got ({low_hz}, {high_hz})")
    if high_hz >= fs / 2:
        raise InvalidBandError(
            f"upper cutoff {high_hz} Hz >= Nyquist {fs / 2} Hz; "
            "filter at the native rate before resampling")
    sos = butter(order, [low_hz, high_hz], btype="bandpass", output="sos", fs=fs)
    return FilterCoefficients(sos=sos, order=order, low_hz=low_hz, high_hz=high_hz, fs=fs)


def sos_frequency_response(coeffs: FilterCoefficients, freqs_hz) -> np.ndarray:
    """Single-pass complex response at the given frequencies."""
    _w, h = sosfreqz(coeffs.sos, worN=np.atleast_1d(freqs_hz), fs=coeffs.fs)
    return h


def apply_filter(coeffs: FilterCoefficients, signal: np.ndarray) -> np.ndarray:
    """Zero-phase filtering: forward, reverse, forward again, reverse.

    Edge transients are suppressed by odd-reflection padding (point
    symmetry about each endpoint) of 3x the nominal 512-sample impulse
    response length, trimmed afterwards.  Output length equals input.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot filter an empty signal")
    pad = min(_REFLECT_PAD, x.size - 1)
    if pad > 0:
        head = 2.0 * x[0] - x[pad:0:-1]
        tail = 2.0 * x[-1] - x[-2:-pad - 2:-1]
        xp = np.concatenate([head, x, tail])
    else:
        xp = x
    y = sosfilt(coeffs.sos, xp)
    y = sosfilt(coeffs.sos, y[::-1])[::-1]
    return y[pad:pad + x.size] if pad > 0 else y


def resample(signal: np.ndarray, from_fs: int, to_fs: int = 4000) -> np.ndarray:
    """Rational-rate polyphase resampling with a Kaiser-windowed sinc.

    The anti-alias FIR has 32 taps per phase (Kaiser beta 8.6) cut off at
    the lower of the two Nyquist frequencies.  Output length is
    round(n * to_fs / from_fs).
    """
    x = np.asarray(signal, dtype=np.float64)
    if from_fs <= 0 or to_fs <= 0:
        raise ValueError("sampling rates must be positive")
    if from_fs == to_fs:
        return x.copy()
    g = math.gcd(int(from_fs), int(to_fs))
    up, down = int(to_fs) // g, int(from_fs) // g
    h = firwin(32 * up, 1.0 / max(up, down), window=("kaiser", 8.6))
    y = resample_poly(x, up, down, window=h)
    n_out = (2 * x.size * up + down) // (2 * down)  # round(n*up/down), half away from zero
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return y[:n_out]


def normalize_amplitude(signal: np.ndarray) -> np.ndarray:
    """Scale so the peak magnitude is 1; an all-zero signal passes through."""
    x = np.asarray(signal, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    return x / peak if peak > 0 else x.copy()


# ---------------------------------------------------------------------------
# segmentation

def _slice_window(x: np.ndarray, rate: int, start_s: float, n_out: int) -> np.ndarray:
    i0 = int(round(start_s * rate))
    seg = x[i0:i0 + n_out]
    if seg.size < n_out:
        seg = np.pad(seg, (0, n_out - seg.size))
    return seg


def extract_record_segment(recording: AudioRecording, events,
                           policy: SegmentPolicy = SegmentPolicy()) -> AudioRecording:
    """Pick the record-level analysis window.

    Recordings of about head_trim + record_window seconds (the common
    9.216 s case) drop the first second of stethoscope friction and keep
    the rest.  The long 15.216 s form offers two candidate windows,
    [0, 8.216] and [7.0, 15.216]; the one containing more event midpoints
    wins, ties and any other duration falling back to the head-trimmed
    leading window.  The output always has record_window * rate samples.
    """
    rate = recording.sample_rate
    dur = recording.duration
    min_dur = policy.head_trim + policy.record_window
    if dur < min_dur - 0.001:
        raise TooShortError(f"{recording.id}: {dur:.3f} s < {min_dur:.3f} s minimum")
    n_out = int(round(policy.record_window * rate))
    long_dur = 15.216  # the corpus's long recording form
    start_s = policy.head_trim
    if abs(dur - long_dur) <= 0.01:
        w_a = (0.0, policy.record_window)
        w_b = (dur - policy.record_window, dur)

        def midpoints_in(window):
            lo, hi = window
            n = 0
            for ev in events:
                mid = (ev.start_ms + ev.end_ms) / 2000.0
                if lo <= mid < hi:
                    n += 1
            return n

        na, nb = midpoints_in(w_a), midpoints_in(w_b)
        if na > nb:
            start_s = w_a[0]
        elif nb > na:
            start_s = w_b[0]
        # tie: keep the head-trimmed leading window
    seg = _slice_window(recording.samples, rate, start_s, n_out)
    return AudioRecording(id=f"{recording.id}:record", samples=seg, sample_rate=rate)


def extract_event_segment(recording: AudioRecording, event,
                          policy: SegmentPolicy = SegmentPolicy()) -> AudioRecording:
    """Cut one annotated event and fit it to exactly event_length seconds.

    Shorter events sit at the segment start with a zero tail; longer ones
    are center-cropped so the core of the event survives.
    """
    rate = recording.sample_rate
    i0 = int(round(event.start_ms / 1000.0 * rate))
    i1 = int(round(event.end_ms / 1000.0 * rate))
    if i0 < 0 or event.end_ms > recording.duration * 1000.0 + 1.0:
        raise DataError(
            f"{recording.id}: event [{event.start_ms}, {event.end_ms}] ms "
            f"outside the {recording.duration * 1000:.0f} ms recording")
    i1 = min(i1, recording.samples.size)
    seg = recording.samples[i0:i1]
    n_out = int(round(policy.event_length * rate))
    if seg.size > n_out:
        off = (seg.size - n_out) // 2
        seg = seg[off:off + n_out]
    elif seg.size < n_out:
        seg = np.pad(seg, (0, n_out - seg.size))
    return AudioRecording(id=f"{recording.id}:event@{event.start_ms}",
                          samples=seg, sample_rate=rate)


def preprocess(recording: AudioRecording, policy: SegmentPolicy = SegmentPolicy(),
               low_hz: float = 50.0, high_hz: float = 2000.0,
               order: int = 4) -> AudioRecording:
    """Bandpass at the native rate, resample to the target rate, normalize."""
    coeffs = design_butterworth_bandpass(order, low_hz, high_hz, fs=recording.sample_rate)
    y = apply_filter(coeffs, recording.samples)
    y = resample(y, recording.sample_rate, policy.target_rate)
    y = normalize_amplitude(y)
    return AudioRecording(id=recording.id, samples=y, sample_rate=policy.target_rate)
