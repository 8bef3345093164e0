"""
Wavelet scalogram of a chirp, rendered to the model's input image
=================================================================
"""

import os
import tempfile

import numpy as np

from lungsound.scalogram import MorseParams, cwt, render_image, power_scalogram, scale_to_freq, select_scales

# a 1-second chirp sweeping 100 -> 800 Hz at 4 kHz
fs = 4000.0
t = np.arange(4096) / fs
signal = np.sin(2.0 * np.pi * (100.0 * t + 350.0 * t ** 2))

# transform on a log-spaced scale grid (10 voices per octave)
morse = MorseParams()
grid = select_scales(morse, signal.size)
matrix = cwt(signal, morse, grid, sample_rate=fs)
freqs = scale_to_freq(grid.scales, fs, morse)
print(f"{len(grid)} scales covering {freqs.min():.1f}..{freqs.max():.1f} Hz")

# the ridge should sweep upward through the plane
power = power_scalogram(matrix)
for frac in (0.2, 0.5, 0.8):
    col = int(frac * signal.size)
    print(f"  at t={frac:.1f}s the ridge sits near "
          f"{freqs[int(np.argmax(power[:, col]))]:.0f} Hz")

# resize to 224x224, repeat to 3 channels, write a PNG
image = render_image(power, 224, 224)
from PIL import Image
png = os.path.join(tempfile.mkdtemp(prefix="scalogram_"), "chirp.png")
Image.fromarray(np.round(image.pixels * 255.0).astype(np.uint8), "RGB").save(png)
print(f"image {image.pixels.shape} written to {png}")
