"""Continuous wavelet transform with a generalized Morse analytic wavelet,
power scalograms, and 224x224x3 image rendering.

The wavelet is defined in the frequency domain as

    Psi(w) = 2 * (e*gamma/beta)^(beta/gamma) * w^beta * exp(-w^gamma),  w > 0

and zero for w <= 0 (analytic).  With time-bandwidth 60 and symmetry 3,
beta = 20 and the peak sits at w_p = (beta/gamma)^(1/gamma) ~ 1.8821
radians per sample, where Psi = 2.  Scales ascend by 2^(1/10) (10 voices
per octave) from the scale that maps the peak to Nyquist; the top scale is
capped so the wavelet's Gaussian-approximation time spread s*sqrt(beta)/w_p
stays under a quarter of the signal length.

Evaluation runs in log space, since w^beta overflows float64 long before
the exp(-w^gamma) decay wins.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = [
    "MorseParams", "ScaleGrid", "ScalogramMatrix", "ScalogramImage",
    "morse_wavelet_freq", "select_scales", "cwt", "power_scalogram",
    "render_image", "scale_to_freq", "freq_to_scale",
    "save_scalogram", "load_scalogram", "load_colormap", "cache_key",
]

_LOG_EPS = 1e-12
_SCG_MAGIC = b"SCG1"
_SCALE_CHUNK = 32


@dataclass(frozen=True)
class MorseParams:
    """Wavelet shape: symmetry, time-bandwidth product, voices per octave."""
    gamma_sym: float = 3.0
    time_bandwidth: float = 60.0
    voices_per_octave: int = 10

    def __post_init__(self):
        if self.gamma_sym <= 0 or self.time_bandwidth <= 0:
            raise ValueError("gamma_sym and time_bandwidth must be positive")
        if self.voices_per_octave < 1:
            raise ValueError("voices_per_octave must be >= 1")

    @property
    def beta(self) -> float:
        return self.time_bandwidth / self.gamma_sym

    @property
    def peak_omega(self) -> float:
        """Frequency-domain argmax of Psi, radians/sample at scale 1."""
        return (self.beta / self.gamma_sym) ** (1.0 / self.gamma_sym)


@dataclass(frozen=True)
class ScaleGrid:
    """Ascending dimensionless scales with the wavelet's reference peak."""
    scales: np.ndarray
    peak_freq: float

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=np.float64)
        if s.size == 0 or np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("scales must be a nonempty ascending positive vector")
        object.__setattr__(self, "scales", s)

    def __len__(self):
        return self.scales.size


@dataclass
class ScalogramMatrix:
    """Complex CWT coefficients, one row per scale."""
    coefficients: np.ndarray
    grid: ScaleGrid
    sample_rate: float


@dataclass
class ScalogramImage:
    """224x224x3 image in [0, 1]; channels identical unless a colormap ran."""
    pixels: np.ndarray


def morse_wavelet_freq(params: MorseParams, omega) -> np.ndarray:
    """Evaluate Psi on a radians-per-sample grid; zero at omega <= 0.

    Computed as exp(log 2 + (beta/gamma)(1 + log gamma - log beta)
    + beta*log w - w^gamma) so large arguments underflow to 0 instead of
    overflowing through w^beta.
    """
    w = np.asarray(omega, dtype=np.float64)
    beta, gam = params.beta, params.gamma_sym
    out = np.zeros_like(w)
    pos = w > 0
    wp = w[pos]
    log_amp = np.log(2.0) + (beta / gam) * (1.0 + np.log(gam) - np.log(beta))
    out[pos] = np.exp(log_amp + beta * np.log(wp) - wp ** gam)
    return out


def select_scales(params: MorseParams, n_samples: int) -> ScaleGrid:
    """Geometric scale grid from Nyquist up to the duration-limited scale."""
    if n_samples < 64:
        raise DataError(f"need at least 64 samples, got {n_samples}")
    w_p = params.peak_omega
    s_min = w_p / np.pi
    s_max = (n_samples / 4.0) * w_p / np.sqrt(params.beta)
    v = params.voices_per_octave
    n_scales = int(np.floor(v * np.log2(s_max / s_min))) + 1
    ratio = 2.0 ** (1.0 / v)
    scales = s_min * ratio ** np.arange(n_scales)
    return ScaleGrid(scales=scales, peak_freq=w_p)


def scale_to_freq(scale, fs: float, params: MorseParams = MorseParams()) -> np.ndarray:
    """Hz at which a scale's response peaks."""
    return params.peak_omega * fs / (2.0 * np.pi * np.asarray(scale, dtype=np.float64))


def freq_to_scale(freq_hz, fs: float, params: MorseParams = MorseParams()) -> np.ndarray:
    """Scale whose peak lands on the given frequency."""
    return params.peak_omega * fs / (2.0 * np.pi * np.asarray(freq_hz, dtype=np.float64))


def cwt(signal, params: MorseParams = MorseParams(),
        grid: ScaleGrid | None = None, sample_rate: float = 1.0) -> ScalogramMatrix:
    """Z[a] = IDFT( X(w) * Psi(a*w) * sqrt(a) ), circular boundary.

    Negative-frequency bins (Nyquist included) carry Psi = 0, making each
    row an analytic signal.  Scales are processed in chunks to bound the
    live (n_scales x n_samples) wavelet block.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 64:
        raise DataError(f"signal must be 1-D with >= 64 samples, got shape {x.shape}")
    if grid is None:
        grid = select_scales(params, x.size)
    n = x.size
    spectrum = np.fft.fft(x)
    omega = 2.0 * np.pi * np.fft.fftfreq(n)  # signed; upper half negative
    scales = grid.scales
    out = np.empty((scales.size, n), dtype=np.complex128)
    for lo in range(0, scales.size, _SCALE_CHUNK):
        chunk = scales[lo:lo + _SCALE_CHUNK]
        psi = morse_wavelet_freq(params, chunk[:, None] * omega[None, :])
        psi *= np.sqrt(chunk)[:, None]
        out[lo:lo + chunk.size] = np.fft.ifft(spectrum[None, :] * psi, axis=1)
    return ScalogramMatrix(coefficients=out, grid=grid, sample_rate=sample_rate)


def power_scalogram(matrix) -> np.ndarray:
    """Elementwise squared magnitude of the coefficients."""
    z = matrix.coefficients if isinstance(matrix, ScalogramMatrix) else np.asarray(matrix)
    return (z.real ** 2 + z.imag ** 2) if np.iscomplexobj(z) else np.square(np.real(z))


def _axis_map(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _bilinear_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable align-corners bilinear resize; identity at equal sizes."""
    r0, r1, wr = _axis_map(m.shape[0], out_h)
    rows = m[r0] * (1.0 - wr)[:, None] + m[r1] * wr[:, None]
    c0, c1, wc = _axis_map(m.shape[1], out_w)
    return rows[:, c0] * (1.0 - wc) + rows[:, c1] * wc


def render_image(power, height: int = 224, width: int = 224,
                 colormap: np.ndarray | None = None) -> ScalogramImage:
    """log10 -> per-image min-max to [0,1] -> bilinear resize -> 3 channels.

    Row order follows the ascending scale grid, so the largest scale
    (lowest frequency) lands on the bottom row.  A constant power matrix
    normalizes to all-zero.  ``colormap`` is an optional (256, 3) lookup
    table in [0, 1]; by default the gray value is replicated.
    """
    p = np.asarray(power, dtype=np.float64)
    if p.size == 0:
        raise DataError("power matrix is empty")
    if np.any(p < 0):
        raise DataError("power matrix must be nonnegative")
    logp = np.log10(p + _LOG_EPS)
    lo, hi = float(logp.min()), float(logp.max())
    norm = (logp - lo) / (hi - lo) if hi > lo else np.zeros_like(logp)
    resized = np.clip(_bilinear_resize(norm, height, width), 0.0, 1.0)
    if colormap is None:
        img = np.repeat(resized[:, :, None], 3, axis=2)
    else:
        lut = np.asarray(colormap, dtype=np.float64)
        if lut.shape != (256, 3):
            raise DataError(f"colormap must be (256, 3), got {lut.shape}")
        idx = np.clip(np.round(resized * 255.0).astype(np.intp), 0, 255)
        img = lut[idx]
    return ScalogramImage(pixels=img.astype(np.float32))


def load_colormap(path) -> np.ndarray:
    """Read a 256-row CSV of r,g,b values in [0, 1]."""
    lut = np.loadtxt(path, delimiter=",", dtype=np.float64)
    if lut.shape != (256, 3) or lut.min() < 0 or lut.max() > 1:
        raise DataError(f"{path}: colormap must be 256 rows of r,g,b in [0, 1]")
    return lut


# ---------------------------------------------------------------------------
# cache file format

def save_scalogram(path, image: ScalogramImage) -> None:
    """Write magic 'SCG1', u32 LE height/width/channels, float32 LE pixels.

    The write lands in a temp file first and is renamed into place, so a
    crash never leaves a truncated cache entry.
    """
    px = np.ascontiguousarray(image.pixels, dtype="<f4")
    if px.ndim != 3:
        raise DataError(f"pixels must be HxWxC, got shape {px.shape}")
    payload = (_SCG_MAGIC
               + np.asarray(px.shape, dtype="<u4").tobytes()
               + px.tobytes())
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_scalogram(path) -> ScalogramImage:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _SCG_MAGIC:
        raise DataError(f"{path}: bad scalogram magic")
    h, w, c = np.frombuffer(blob[4:16], dtype="<u4").tolist()
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != h * w * c:
        raise DataError(f"{path}: truncated pixel data")
    return ScalogramImage(pixels=data.reshape(int(h), int(w), int(c)).copy())


def cache_key(recording_id: str, window, params: MorseParams = MorseParams()) -> str:
    """Content-addressed name for one segment's cached image."""
    ident = (str(recording_id), tuple(np.round(np.atleast_1d(window), 6).tolist()),
             params.gamma_sym, params.time_bandwidth, params.voices_per_octave)
    return hashlib.sha256(repr(ident).encode("utf-8")).hexdigest()
