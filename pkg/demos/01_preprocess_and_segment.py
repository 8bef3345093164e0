"""
Front-end walkthrough: synthesize a wheeze, filter, resample, segment
=====================================================================
"""

import numpy as np

from lungsound.dsp import SegmentPolicy, extract_event_segment, preprocess
from lungsound.synth import preset_spec, synthesize_recording
from lungsound.ingest import EventLabel

# one synthetic recording with a single annotated wheeze
spec = preset_spec(EventLabel.Wheeze, seed=7)
recording, record_label, events = synthesize_recording(spec)
print(f"raw: {recording.samples.size} samples at {recording.sample_rate} Hz, "
      f"record label {record_label.name}")
for ev in events:
    print(f"  event {ev.label.name} at {ev.start_ms}..{ev.end_ms} ms")

# bandpass 50..2000 Hz, resample to 4 kHz, peak-normalize
policy = SegmentPolicy()
clean = preprocess(recording, policy)
print(f"preprocessed: {clean.samples.size} samples at {clean.sample_rate} Hz, "
      f"peak {np.max(np.abs(clean.samples)):.3f}")

# cut the fixed-length window around the first event
segment = extract_event_segment(clean, events[0], policy)
print(f"event segment: {segment.samples.size} samples "
      f"({segment.samples.size / segment.sample_rate:.3f} s)")
