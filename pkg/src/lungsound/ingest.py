"""Recording and annotation ingestion: WAV I/O, label parsing, dataset
manifests with per-class counts, and seeded stratified splits.

Annotation documents are JSON with a record-level label (key
``record_annotation`` or ``label``) and an event list (key
``event_annotation`` or ``events``) whose items carry ``start`` / ``end``
in milliseconds and a ``type`` string.  Label strings are matched through a
case-insensitive table that also strips whitespace and maps ``&`` / ``+``
to "and", so "Fine Crackle", "finecrackle" and "Wheeze+Crackle" all parse.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.io import wavfile

from .errors import DataError
from .rng import Rng

__all__ = [
    "EventLabel", "RecordLabel", "EventAnnotation", "AudioRecording",
    "ManifestEntry", "DatasetManifest",
    "UnsupportedFormatError", "CorruptHeaderError", "UnknownLabelStringError",
    "NonMonotoneEventError", "DegenerateClassWarning",
    "load_wav", "write_wav", "parse_label", "parse_annotations",
    "write_annotations", "build_manifest", "save_manifest", "load_manifest",
    "stratified_split",
]


class EventLabel(IntEnum):
    """Respiratory-event classes, codes stable in this order."""
    Normal = 0
    Rhonchi = 1
    Wheeze = 2
    Stridor = 3
    CoarseCrackle = 4
    FineCrackle = 5
    WheezeAndCrackle = 6


class RecordLabel(IntEnum):
    """Whole-recording classes, codes stable in this order."""
    Normal = 0
    CAS = 1
    DAS = 2
    CASandDAS = 3
    PoorQuality = 4


class UnsupportedFormatError(DataError):
    """Audio file is not mono 16-bit PCM or 32-bit float WAV."""


class CorruptHeaderError(DataError):
    """File cannot be parsed as RIFF WAV."""


class UnknownLabelStringError(DataError):
    """Label string has no entry in the normalization table."""


class NonMonotoneEventError(DataError):
    """Event annotation with end <= start."""


class DegenerateClassWarning(UserWarning):
    """A split class had a single member; it was placed in train."""


@dataclass(frozen=True)
class EventAnnotation:
    """One annotated respiratory event: [start_ms, end_ms) with a label."""
    start_ms: int
    end_ms: int
    label: EventLabel

    def __post_init__(self):
        if self.start_ms < 0 or self.end_ms <= self.start_ms:
            raise NonMonotoneEventError(
                f"event must have 0 <= start < end, got [{self.start_ms}, {self.end_ms}]")


@dataclass
class AudioRecording:
    """A mono sampled signal with its rate and an identity string."""
    id: str
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedFormatError(f"{self.id}: expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"{self.id}: sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    recording: str
    annotation: str
    record_label: RecordLabel
    events: tuple


@dataclass
class DatasetManifest:
    """A split's worth of (recording, annotation) pairs with label counts."""
    entries: list
    split_tag: str
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def class_counts(self, level: str) -> dict:
        """Label -> count at the 'record' or 'event' level."""
        counts: dict = {}
        if level == "record":
            for e in self.entries:
                counts[e.record_label] = counts.get(e.record_label, 0) + 1
        elif level == "event":
            for e in self.entries:
                for ev in e.events:
                    counts[ev.label] = counts.get(ev.label, 0) + 1
        else:
            raise ValueError(f"level must be 'record' or 'event', got {level!r}")
        return counts

    def event_samples(self) -> list:
        """Flattened (entry, event) pairs for event-level pipelines."""
        return [(e, ev) for e in self.entries for ev in e.events]


# ---------------------------------------------------------------------------
# WAV I/O

def load_wav(path) -> AudioRecording:
    """Read a mono PCM16 or float32 WAV into [-1, 1] float samples."""
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise CorruptHeaderError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample format {data.dtype}")
    stem = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return AudioRecording(id=stem, samples=samples, sample_rate=int(rate))


def write_wav(path, recording: AudioRecording) -> None:
    """Write 16-bit PCM; amplitudes are clipped to [-1, 1] first."""
    x = np.clip(recording.samples, -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, recording.sample_rate, pcm)


# ---------------------------------------------------------------------------
# label and annotation parsing

def _squash(text: str) -> str:
    text = text.lower().replace("&", " and ").replace("+", " and ")
    return "".join(text.split())


_EVENT_TABLE = {_squash(m.name): m for m in EventLabel}
_EVENT_TABLE["wheezecrackle"] = EventLabel.WheezeAndCrackle
_RECORD_TABLE = {_squash(m.name): m for m in RecordLabel}
_RECORD_TABLE["pq"] = RecordLabel.PoorQuality
# CamelCase enum names squash to e.g. "coarsecrackle", matching spaced forms
# like "Coarse Crackle" after whitespace removal


def parse_label(text: str, level: str):
    """Map a label string to its enum via the normalization table."""
    table = _EVENT_TABLE if level == "event" else _RECORD_TABLE
    try:
        return table[_squash(text)]
    except KeyError:
        raise UnknownLabelStringError(f"unknown {level} label string {text!r}") from None


def parse_annotations(path, duration_s: float | None = None):
    """Read one annotation document -> (RecordLabel, sorted event list).

    When the recording duration is known, events running past it are
    clamped (with a warning) so no event extends more than 1 ms beyond
    the audio.
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON: {exc}") from exc
    record_text = doc.get("record_annotation", doc.get("label"))
    if record_text is None:
        raise DataError(f"{path}: missing record-level label")
    record_label = parse_label(str(record_text), "record")
    raw_events = doc.get("event_annotation", doc.get("events", []))
    events = []
    for item in raw_events:
        start = int(float(item["start"]))
        end = int(float(item["end"]))
        label = parse_label(str(item["type"]), "event")
        if duration_s is not None and end > duration_s * 1000.0 + 1.0:
            warnings.warn(f"{path}: event end {end} ms past audio end; clamped")
            end = int(duration_s * 1000.0)
        events.append(EventAnnotation(start, end, label))
    events.sort(key=lambda ev: (ev.start_ms, ev.end_ms))
    return record_label, events


def write_annotations(path, record_label: RecordLabel, events) -> None:
    doc = {
        "record_annotation": record_label.name,
        "event_annotation": [
            {"start": ev.start_ms, "end": ev.end_ms, "type": ev.label.name}
            for ev in events
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)


# ---------------------------------------------------------------------------
# manifests

def build_manifest(root, split_tag: str) -> DatasetManifest:
    """Pair every .wav under root with its same-stem .json annotation.

    Orphans (audio without annotation or vice versa) go to the skip list
    instead of failing the build.  Entries are sorted by path.
    """
    root = os.fspath(root)
    wavs: dict[str, str] = {}
    jsons: dict[str, str] = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for fn in filenames:
            stem, ext = os.path.splitext(fn)
            full = os.path.join(dirpath, fn)
            if ext.lower() == ".wav":
                wavs[os.path.join(dirpath, stem)] = full
            elif ext.lower() == ".json":
                jsons[os.path.join(dirpath, stem)] = full
    entries = []
    skipped = []
    for key in sorted(set(wavs) | set(jsons)):
        if key not in jsons:
            skipped.append((wavs[key], "no matching annotation"))
            continue
        if key not in wavs:
            skipped.append((jsons[key], "no matching audio"))
            continue
        try:
            record_label, events = parse_annotations(jsons[key])
        except DataError as exc:
            skipped.append((jsons[key], str(exc)))
            continue
        entries.append(ManifestEntry(wavs[key], jsons[key], record_label, tuple(events)))
    return DatasetManifest(entries=entries, split_tag=split_tag, skipped=skipped)


def save_manifest(manifest: DatasetManifest, path) -> None:
    """One JSON line per entry: paths, record label, split tag, events."""
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            row = {
                "recording": e.recording,
                "annotation": e.annotation,
                "record_label": e.record_label.name,
                "split": manifest.split_tag,
                "events": [[ev.start_ms, ev.end_ms, ev.label.name] for ev in e.events],
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    entries = []
    tags = set()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            tags.add(row["split"])
            events = tuple(
                EventAnnotation(s, t, EventLabel[name]) for s, t, name in row["events"])
            entries.append(ManifestEntry(
                row["recording"], row["annotation"],
                RecordLabel[row["record_label"]], events))
    if len(tags) > 1:
        raise DataError(f"manifest mixes split tags {sorted(tags)}")
    tag = tags.pop() if tags else "train"
    return DatasetManifest(entries=entries, split_tag=tag)


def stratified_split(manifest: DatasetManifest, ratio: float = 0.9,
                     seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Per-record-label split into (train, val), deterministic given seed.

    Each class contributes round(ratio * count) entries to train.  A class
    with a single member goes entirely to train with a warning.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if not manifest.entries:
        raise DataError("cannot split an empty manifest")
    by_class: dict[RecordLabel, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.record_label, []).append(i)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) == 1:
            warnings.warn(f"class {label.name} has a single member; kept in train",
                          DegenerateClassWarning)
            train_idx.extend(idx)
            continue
        gen = Rng(seed, ("split", label.name)).generator()
        order = gen.permutation(len(idx))
        n_train = int(np.floor(ratio * len(idx) + 0.5))
        n_train = min(n_train, len(idx))
        shuffled = [idx[j] for j in order]
        train_idx.extend(shuffled[:n_train])
        val_idx.extend(shuffled[n_train:])
    train = DatasetManifest([manifest.entries[i] for i in sorted(train_idx)], "train")
    val = DatasetManifest([manifest.entries[i] for i in sorted(val_idx)], "val")
    return train, val
