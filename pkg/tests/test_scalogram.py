"""Morse wavelet, scale selection, CWT, and image rendering checks."""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from lungsound.errors import DataError
from lungsound.scalogram import (
    MorseParams, cache_key, cwt, freq_to_scale, load_scalogram,
    morse_wavelet_freq, power_scalogram, render_image, save_scalogram,
    scale_to_freq, select_scales,
)

P = MorseParams()
PEAK_W = (20.0 / 3.0) ** (1.0 / 3.0)


# ---------------------------------------------------------------------------
# wavelet

def test_wavelet_zero_at_nonpositive_frequencies():
    w = np.array([-5.0, -1e-9, 0.0])
    assert np.array_equal(morse_wavelet_freq(P, w), np.zeros(3))


def test_wavelet_peak_location_and_value():
    res = minimize_scalar(lambda w: -morse_wavelet_freq(P, w).item(),
                          bounds=(0.5, 4.0), method="bounded",
                          options={"xatol": 1e-10})
    assert abs(res.x - PEAK_W) < 1e-6
    assert abs(morse_wavelet_freq(P, PEAK_W).item() - 2.0) < 1e-12


def test_wavelet_matches_direct_formula_where_safe():
    # below ~3 rad/sample the naive product does not overflow, so the
    # log-space evaluation must agree with it to roundoff
    w = np.linspace(0.05, 3.0, 200)
    beta, gam = 20.0, 3.0
    direct = 2.0 * (np.e * gam / beta) ** (beta / gam) * w ** beta * np.exp(-w ** gam)
    np.testing.assert_allclose(morse_wavelet_freq(P, w), direct, rtol=1e-12)


def test_wavelet_finite_at_extreme_arguments():
    vals = morse_wavelet_freq(P, np.array([1e3, 1e6, 1e12]))
    assert np.all(np.isfinite(vals))
    assert np.array_equal(vals, np.zeros(3))  # decay underflows to exactly 0


# ---------------------------------------------------------------------------
# scale selection

def test_scale_ratio_is_tenth_octave():
    g = select_scales(P, 4096)
    np.testing.assert_allclose(np.diff(np.log2(g.scales)), 0.1, rtol=1e-12)


def test_smallest_scale_puts_peak_at_nyquist():
    g = select_scales(P, 4096)
    assert abs(g.scales[0] - PEAK_W / np.pi) < 1e-12
    assert abs(g.scales[0] - 0.5991) < 1e-4


def test_largest_scale_respects_duration_bound():
    for n in (256, 4096, 12000):
        g = select_scales(P, n)
        bound = (n / 4.0) * PEAK_W / np.sqrt(20.0)
        assert g.scales[-1] <= bound
        assert g.scales[-1] * 2.0 ** 0.1 > bound  # one more voice would violate it


def test_doubling_length_adds_ten_scales():
    for n in (64, 512, 4096):
        assert len(select_scales(P, 2 * n)) - len(select_scales(P, n)) == 10


def test_short_signal_rejected():
    with pytest.raises(DataError):
        select_scales(P, 63)


def test_scale_frequency_maps_invert():
    f = np.array([100.0, 400.0, 1000.0])
    np.testing.assert_allclose(scale_to_freq(freq_to_scale(f, 4000.0), 4000.0), f,
                               rtol=1e-12)


# ---------------------------------------------------------------------------
# transform

def test_zero_signal_gives_zero_matrix():
    m = cwt(np.zeros(256))
    assert m.coefficients.shape == (len(select_scales(P, 256)), 256)
    assert np.array_equal(m.coefficients, np.zeros_like(m.coefficients))


@pytest.mark.parametrize("tone_hz", [100.0, 400.0, 1000.0])
def test_ridge_lands_within_half_voice(tone_hz):
    fs, n = 4000.0, 4096
    t = np.arange(n) / fs
    m = cwt(np.sin(2 * np.pi * tone_hz * t), sample_rate=fs)
    col = np.abs(m.coefficients[:, n // 2])
    found = m.grid.scales[int(np.argmax(col))]
    target = freq_to_scale(tone_hz, fs).item()
    assert abs(np.log2(found / target)) <= 0.05 + 1e-9


def test_transform_is_linear():
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal(512), rng.standard_normal(512)
    a, b = 0.7, -2.3
    lhs = cwt(a * x + b * y).coefficients
    rhs = a * cwt(x).coefficients + b * cwt(y).coefficients
    assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) < 1e-5


def test_circular_shift_covariance():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(512)
    shift = 173
    ref = np.roll(cwt(x).coefficients, shift, axis=1)
    moved = cwt(np.roll(x, shift)).coefficients
    assert np.max(np.abs(moved - ref)) / np.max(np.abs(ref)) < 1e-5


def test_rows_are_analytic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(256)
    z = cwt(x).coefficients
    row_spec = np.fft.fft(z[len(z) // 2])
    neg = np.abs(row_spec[256 // 2:])  # Nyquist and negative bins
    assert np.max(neg) < 1e-9 * np.max(np.abs(row_spec))


def test_ridge_energy_grows_linearly_with_tone_duration():
    fs, n, tone_hz = 4000.0, 16384, 300.0
    t = np.arange(n) / fs
    grid = select_scales(P, n)
    ridge = int(np.argmin(np.abs(grid.scales - freq_to_scale(tone_hz, fs))))

    def ridge_energy(duration_s):
        mid = n / (2 * fs)
        gate = (np.abs(t - mid) < duration_s / 2).astype(np.float64)
        z = cwt(np.sin(2 * np.pi * tone_hz * t) * gate, grid=grid).coefficients
        return float(np.sum(np.abs(z[ridge]) ** 2))

    e1, e2, e4 = ridge_energy(0.5), ridge_energy(1.0), ridge_energy(2.0)
    assert abs(e2 / e1 - 2.0) < 0.1
    assert abs(e4 / e1 - 4.0) < 0.2


def test_transform_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(300)
    assert np.array_equal(cwt(x).coefficients, cwt(x).coefficients)


def test_transform_rejects_bad_input():
    with pytest.raises(DataError):
        cwt(np.zeros((4, 64)))
    with pytest.raises(DataError):
        cwt(np.zeros(32))


# ---------------------------------------------------------------------------
# power

def test_power_of_known_complex_value():
    z = np.array([[3.0 + 4.0j]])
    assert power_scalogram(z).item() == 25.0


def test_power_conjugate_invariant():
    rng = np.random.default_rng(9)
    z = rng.standard_normal((5, 8)) + 1j * rng.standard_normal((5, 8))
    assert np.array_equal(power_scalogram(z), power_scalogram(z.conj()))


def test_power_accepts_matrix_wrapper():
    m = cwt(np.sin(np.arange(128) * 0.3))
    np.testing.assert_allclose(power_scalogram(m), np.abs(m.coefficients) ** 2,
                               rtol=1e-12)


# ---------------------------------------------------------------------------
# rendering

def test_constant_power_renders_black():
    img = render_image(np.full((40, 90), 3.7))
    assert img.pixels.shape == (224, 224, 3)
    assert img.pixels.dtype == np.float32
    assert np.array_equal(img.pixels, np.zeros((224, 224, 3), np.float32))


def test_matching_size_render_is_identity():
    rng = np.random.default_rng(2)
    p = rng.random((224, 224)) + 0.01
    logp = np.log10(p + 1e-12)
    expected = (logp - logp.min()) / (logp.max() - logp.min())
    img = render_image(p)
    np.testing.assert_allclose(img.pixels[:, :, 0], expected, atol=1e-7)


def test_channels_are_identical_copies():
    rng = np.random.default_rng(4)
    img = render_image(rng.random((30, 50)))
    assert np.array_equal(img.pixels[:, :, 0], img.pixels[:, :, 1])
    assert np.array_equal(img.pixels[:, :, 0], img.pixels[:, :, 2])


def test_pixels_stay_in_unit_interval():
    rng = np.random.default_rng(6)
    img = render_image(rng.random((100, 333)) * 1e6)
    assert img.pixels.min() >= 0.0
    assert img.pixels.max() <= 1.0


def test_rendered_ridge_row_tracks_tone():
    fs, n, tone_hz = 4000.0, 4096, 400.0
    t = np.arange(n) / fs
    m = cwt(np.sin(2 * np.pi * tone_hz * t), sample_rate=fs)
    p = power_scalogram(m)
    ridge = int(np.argmin(np.abs(m.grid.scales - freq_to_scale(tone_hz, fs))))
    expected_row = round(ridge * 223 / (p.shape[0] - 1))
    img = render_image(p)
    found_row = int(np.argmax(img.pixels[:, 112, 0]))
    assert abs(found_row - expected_row) <= 2


def test_render_is_deterministic():
    rng = np.random.default_rng(8)
    p = rng.random((60, 80))
    assert np.array_equal(render_image(p).pixels, render_image(p).pixels)


def test_colormap_lookup_table():
    lut = np.zeros((256, 3))
    lut[:, 0] = np.arange(256) / 255.0
    rng = np.random.default_rng(10)
    p = rng.random((224, 224)) + 0.01
    img = render_image(p, colormap=lut)
    gray = render_image(p).pixels[:, :, 0]
    np.testing.assert_allclose(img.pixels[:, :, 0],
                               np.round(gray.astype(np.float64) * 255) / 255,
                               atol=1e-7)
    assert np.array_equal(img.pixels[:, :, 1], np.zeros((224, 224), np.float32))


def test_render_rejects_bad_input():
    with pytest.raises(DataError):
        render_image(np.array([[1.0, -2.0]]))
    with pytest.raises(DataError):
        render_image(np.ones((4, 4)), colormap=np.ones((3, 256)))


# ---------------------------------------------------------------------------
# cache format

def test_scalogram_file_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    img = render_image(rng.random((50, 70)))
    path = tmp_path / "seg.scg"
    save_scalogram(path, img)
    back = load_scalogram(path)
    assert np.array_equal(back.pixels, img.pixels)
    raw = path.read_bytes()
    assert raw[:4] == b"SCG1"
    assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [224, 224, 3]


def test_scalogram_file_rejects_corruption(tmp_path):
    img = render_image(np.random.default_rng(13).random((20, 20)))
    path = tmp_path / "seg.scg"
    save_scalogram(path, img)
    blob = path.read_bytes()
    (tmp_path / "bad_magic.scg").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        load_scalogram(tmp_path / "bad_magic.scg")
    (tmp_path / "short.scg").write_bytes(blob[:-40])
    with pytest.raises(DataError):
        load_scalogram(tmp_path / "short.scg")


def test_cache_key_content_addressing():
    k1 = cache_key("rec_001", (0.0, 8.216))
    assert len(k1) == 64 and set(k1) <= set("0123456789abcdef")
    assert cache_key("rec_001", (0.0, 8.216)) == k1
    assert cache_key("rec_002", (0.0, 8.216)) != k1
    assert cache_key("rec_001", (1.0, 9.216)) != k1
    assert cache_key("rec_001", (0.0, 8.216),
                     MorseParams(voices_per_octave=12)) != k1
