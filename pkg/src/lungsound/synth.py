"""Deterministic synthetic lung-sound generator.

Produces labeled recordings with the gross spectral signatures of the real
classes so the whole pipeline can run and be scored without the licensed
corpus: continuous adventitious classes are frequency-modulated tones
(rhonchi low, wheeze mid, stridor high), discontinuous classes are trains
of short Gaussian-windowed noise bursts (coarse wide, fine narrow), the
mixed class carries both, normal is band-limited noise alone, and poor
quality is loud clipped noise.  Everything is seeded through the
counter-based Rng, so a spec maps to one exact waveform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .ingest import (
    AudioRecording, DatasetManifest, EventAnnotation, EventLabel, RecordLabel,
    build_manifest, write_annotations, write_wav,
)
from .rng import Rng

__all__ = [
    "ToneComponent", "BurstComponent", "SyntheticSpec",
    "preset_spec", "synthesize_recording", "synthesize_corpus",
]

DEFAULT_RATE = 8000
DEFAULT_DURATION = 9.216
_FM_RATE_HZ = 4.0  # vibrato rate of the tonal components


@dataclass(frozen=True)
class ToneComponent:
    """Sustained FM tone: center frequency, modulation depth, amplitude."""
    center_hz: float
    fm_depth_hz: float
    amplitude: float
    start_s: float = 1.5
    end_s: float = 4.5


@dataclass(frozen=True)
class BurstComponent:
    """Train of short Gaussian-windowed noise bursts."""
    rate_hz: float
    width_ms: float
    amplitude: float
    start_s: float = 1.5
    end_s: float = 4.5


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic recording."""
    label: object  # EventLabel or RecordLabel
    duration: float = DEFAULT_DURATION
    base_noise_level: float = 0.05
    tones: tuple = ()
    bursts: tuple = ()
    seed: int = 0
    sample_rate: int = DEFAULT_RATE

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        for c in tuple(self.tones) + tuple(self.bursts):
            if c.amplitude < 0:
                raise ValueError("component amplitudes must be >= 0")


_TONE_CENTER = {
    EventLabel.Rhonchi: 150.0,
    EventLabel.Wheeze: 400.0,
    EventLabel.Stridor: 850.0,
}


def preset_spec(label, seed: int = 0, duration: float = DEFAULT_DURATION,
                sample_rate: int = DEFAULT_RATE) -> SyntheticSpec:
    """Standard component recipe for a class; timing is jittered per seed."""
    gen = Rng(seed, ("synth", "layout")).generator()
    start = 1.5 + float(gen.uniform(0.0, min(3.0, duration - 5.0) if duration > 5.0 else 0.0))
    length = float(gen.uniform(1.8, 3.2))
    end = min(start + length, duration - 0.2)
    tones: tuple = ()
    bursts: tuple = ()
    # identity comparisons throughout: the two IntEnums share integer codes
    if isinstance(label, EventLabel):
        if label in (EventLabel.Rhonchi, EventLabel.Wheeze, EventLabel.Stridor):
            tones = (ToneComponent(_TONE_CENTER[label], 8.0, 0.4, start, end),)
        elif label is EventLabel.CoarseCrackle:
            bursts = (BurstComponent(6.0, 18.0, 0.6, start, end),)
        elif label is EventLabel.FineCrackle:
            bursts = (BurstComponent(14.0, 6.0, 0.6, start, end),)
        elif label is EventLabel.WheezeAndCrackle:
            tones = (ToneComponent(400.0, 8.0, 0.4, start, end),)
            bursts = (BurstComponent(14.0, 6.0, 0.5, start, end),)
    elif isinstance(label, RecordLabel):
        if label is RecordLabel.CAS:
            tones = (ToneComponent(400.0, 8.0, 0.4, start, end),)
        elif label is RecordLabel.DAS:
            bursts = (BurstComponent(14.0, 6.0, 0.6, start, end),)
        elif label is RecordLabel.CASandDAS:
            tones = (ToneComponent(400.0, 8.0, 0.4, start, end),)
            bursts = (BurstComponent(14.0, 6.0, 0.5, start, end),)
    else:
        raise ValueError(f"label must be an EventLabel or RecordLabel, got {label!r}")
    noise = 0.9 if label is RecordLabel.PoorQuality else 0.05
    return SyntheticSpec(label=label, duration=duration, base_noise_level=noise,
                         tones=tones, bursts=bursts, seed=seed, sample_rate=sample_rate)


def _band_noise(gen, n: int, rate: int, lo: float, hi: float, rms: float) -> np.ndarray:
    """White noise masked to [lo, hi] Hz in the frequency domain."""
    x = gen.standard_normal(n)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    y = np.fft.irfft(spec, n=n)
    cur = np.sqrt(np.mean(y ** 2))
    return y * (rms / cur) if cur > 0 else y


def _tone(t: np.ndarray, comp: ToneComponent, phase0: float) -> np.ndarray:
    # instantaneous frequency = center + depth*sin(2*pi*fm_rate*t)
    phase = (2.0 * np.pi * comp.center_hz * t
             - comp.fm_depth_hz / _FM_RATE_HZ * np.cos(2.0 * np.pi * _FM_RATE_HZ * t)
             + phase0)
    out = comp.amplitude * np.sin(phase)
    return out * _window_mask(t, comp.start_s, comp.end_s)


def _window_mask(t: np.ndarray, start: float, end: float, ramp: float = 0.01) -> np.ndarray:
    """Unit window over [start, end] with raised-cosine edges."""
    up = np.clip((t - start) / ramp, 0.0, 1.0)
    down = np.clip((end - t) / ramp, 0.0, 1.0)
    return 0.5 * (1 - np.cos(np.pi * up)) * 0.5 * (1 - np.cos(np.pi * down))


def _bursts(t: np.ndarray, comp: BurstComponent, gen, rate: int) -> np.ndarray:
    out = np.zeros_like(t)
    width_s = comp.width_ms / 1000.0
    sigma = width_s / 6.0
    period = 1.0 / comp.rate_hz
    center = comp.start_s + period / 2.0
    while center < comp.end_s:
        jittered = center + float(gen.uniform(-0.2, 0.2)) * period
        lo = max(jittered - 3 * sigma, 0.0)
        hi = min(jittered + 3 * sigma, t[-1])
        i0, i1 = int(lo * rate), int(hi * rate) + 1
        if i1 > i0:
            seg = t[i0:i1]
            envelope = np.exp(-0.5 * ((seg - jittered) / sigma) ** 2)
            out[i0:i1] += comp.amplitude * envelope * gen.standard_normal(seg.size)
        center += period
    return out


def _record_label_for(spec: SyntheticSpec) -> RecordLabel:
    if isinstance(spec.label, RecordLabel):
        return spec.label
    has_tone, has_burst = bool(spec.tones), bool(spec.bursts)
    if has_tone and has_burst:
        return RecordLabel.CASandDAS
    if has_tone:
        return RecordLabel.CAS
    if has_burst:
        return RecordLabel.DAS
    return RecordLabel.Normal


def _event_annotations(spec: SyntheticSpec) -> list:
    def span(components):
        return (min(c.start_s for c in components), max(c.end_s for c in components))

    def ann(interval, label):
        return EventAnnotation(int(round(interval[0] * 1000)),
                               int(round(interval[1] * 1000)), label)

    if isinstance(spec.label, EventLabel):
        comps = tuple(spec.tones) + tuple(spec.bursts)
        if not comps:
            # an unremarkable breathing cycle in the body of the recording
            return [ann((1.5, min(4.5, spec.duration - 0.2)), spec.label)]
        return [ann(span(comps), spec.label)]
    # record-level spec: annotate each component family separately
    events = []
    if spec.tones:
        events.append(ann(span(spec.tones), EventLabel.Wheeze))
    if spec.bursts:
        events.append(ann(span(spec.bursts), EventLabel.FineCrackle))
    events.sort(key=lambda ev: ev.start_ms)
    return events


def synthesize_recording(spec: SyntheticSpec):
    """Render a spec -> (AudioRecording, RecordLabel, event annotations)."""
    rate = spec.sample_rate
    n = int(round(spec.duration * rate))
    t = np.arange(n) / rate
    gen = Rng(spec.seed, ("synth", "audio")).generator()
    x = _band_noise(gen, n, rate, 100.0, 600.0, spec.base_noise_level)
    for comp in spec.tones:
        x = x + _tone(t, comp, float(gen.uniform(0, 2 * np.pi)))
    for comp in spec.bursts:
        x = x + _bursts(t, comp, gen, rate)
    if spec.label is RecordLabel.PoorQuality:
        x = np.clip(x, -0.35, 0.35)  # harsh saturation, the telltale of bad takes
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    label_tag = spec.label.name.lower()
    rec = AudioRecording(id=f"syn_{label_tag}_{spec.seed}", samples=x, sample_rate=rate)
    return rec, _record_label_for(spec), _event_annotations(spec)


def synthesize_corpus(out_dir, level: str = "event", n_per_class: int = 10,
                      seed: int = 0, duration: float = DEFAULT_DURATION,
                      sample_rate: int = DEFAULT_RATE, classes=None,
                      split_tag: str = "train") -> DatasetManifest:
    """Write WAV + JSON pairs for n recordings per class; return the manifest."""
    if classes is None:
        classes = list(EventLabel) if level == "event" else list(RecordLabel)
    os.makedirs(out_dir, exist_ok=True)
    for label in classes:
        for i in range(n_per_class):
            rec_seed = int(Rng(seed, ("corpus", label.name, i)).generator().integers(2 ** 31))
            spec = preset_spec(label, seed=rec_seed, duration=duration,
                               sample_rate=sample_rate)
            rec, record_label, events = synthesize_recording(spec)
            stem = os.path.join(os.fspath(out_dir), f"{label.name.lower()}_{i:03d}")
            write_wav(stem + ".wav", rec)
            write_annotations(stem + ".json", record_label, events)
    return build_manifest(out_dir, split_tag)
