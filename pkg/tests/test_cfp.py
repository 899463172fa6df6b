from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftanet.audio_io import AudioBuffer
from ftanet.cfp import (DEFAULT_GRID, CfpTensor, LogFreqGrid, bin_to_hz, compute_cfp, hz_to_bin,
                        load_cfp, save_cfp, stft)
from ftanet.errors import CorruptFileError, EmptyAudioError, SampleRateError, ShapeError

from oracles import bandlimited_sawtooth, sine

SR = 44100


def _exact_center(b):
    getcontext().prec = 40
    return Decimal(31) * Decimal(2) ** (Decimal(b) / Decimal(60))


def _exact_bin(f):
    getcontext().prec = 40
    return int((Decimal(60) * (Decimal(f) / Decimal(31)).ln() / Decimal(2).ln() + Decimal("0.5"))
               .to_integral_value(rounding="ROUND_FLOOR"))


# ----------------------------------------------------------------------
# grid
# ----------------------------------------------------------------------

def test_grid_bounds():
    c = DEFAULT_GRID.centers
    assert c.shape == (320,)
    assert c[0] == 31.0
    assert np.all(np.diff(c) > 0)
    assert c[-1] < 1250.0


@pytest.mark.parametrize("f,b", [(31.0, 0), (62.0, 60), (440.0, 230), (1240.0, 319)])
def test_hz_to_bin_examples(f, b):
    assert hz_to_bin(f) == b == min(_exact_bin(f), 319)


@pytest.mark.parametrize("b,f", [(0, 31.0), (60, 62.0)])
def test_bin_to_hz_examples(b, f):
    assert bin_to_hz(b) == pytest.approx(f, rel=1e-15)


def test_bin_230_center():
    # exact value is 441.886; the documented figure is a rounded approximation
    assert bin_to_hz(230) == pytest.approx(441.93, abs=0.05)
    assert bin_to_hz(230) == pytest.approx(float(_exact_center(230)), rel=1e-14)


def test_bin_grid_matches_exact_arithmetic():
    for b in range(320):
        assert bin_to_hz(b) == pytest.approx(float(_exact_center(b)), rel=1e-14)
        assert hz_to_bin(bin_to_hz(b)) == b


@settings(max_examples=200, deadline=None)
@given(st.floats(31.0, 1240.0))
def test_hz_to_bin_matches_decimal_oracle(f):
    assert hz_to_bin(f) == min(_exact_bin(f), 319)


def test_hz_to_bin_clips_and_validates():
    assert hz_to_bin(10.0) == 0
    assert hz_to_bin(5000.0) == 319
    np.testing.assert_array_equal(hz_to_bin(np.array([31.0, 62.0])), [0, 60])
    with pytest.raises(ValueError):
        hz_to_bin(0.0)
    with pytest.raises(IndexError):
        bin_to_hz(320)


def test_grid_validation():
    with pytest.raises(ValueError):
        LogFreqGrid(n_bins=400)


# ----------------------------------------------------------------------
# STFT
# ----------------------------------------------------------------------

def test_stft_shapes_and_silence():
    spec = stft(AudioBuffer(np.zeros(SR), SR))
    assert spec.mags.shape == (1025, SR // 256 + 1)
    assert np.all(spec.mags == 0)
    np.testing.assert_allclose(spec.frame_times[:3], [0, 256 / SR, 512 / SR])


def test_stft_sine_peak():
    spec = stft(AudioBuffer(sine(440.0, amp=1.0), SR))
    assert np.all(spec.mags >= 0)
    peaks = np.argmax(spec.mags[:, 4:-4], axis=0)
    assert round(440 * 2048 / SR) == 20
    assert np.all(peaks == 20)


def test_stft_dc_peak():
    spec = stft(AudioBuffer(np.ones(SR // 2), SR))
    assert np.all(np.argmax(spec.mags[:, 4:-4], axis=0) == 0)


def test_stft_rejects_bad_input():
    with pytest.raises(SampleRateError):
        stft(AudioBuffer(np.zeros(100), 22050))
    with pytest.raises(EmptyAudioError):
        stft(AudioBuffer(np.zeros(0), SR))


# ----------------------------------------------------------------------
# CFP
# ----------------------------------------------------------------------

def _interior_argmax(cfp, ch, margin=8):
    return np.argmax(cfp.data[:, margin:-margin, ch], axis=0)


def test_silence_gives_zeros():
    cfp = compute_cfp(AudioBuffer(np.zeros(SR // 4), SR))
    assert cfp.data.shape == (320, SR // 4 // 256 + 1, 3)
    assert np.all(cfp.data == 0)


def test_sine_440_channel0():
    cfp = compute_cfp(AudioBuffer(sine(440.0, amp=1.0), SR))
    assert np.all(_interior_argmax(cfp, 0) == 230)


def test_sawtooth_220_periodicity_channels():
    cfp = compute_cfp(AudioBuffer(bandlimited_sawtooth(220.0), SR))
    assert np.all(_interior_argmax(cfp, 1) == 170)
    assert np.all(_interior_argmax(cfp, 2) == 170)


@pytest.mark.parametrize("b", list(range(30, 320, 7)) + [319])
def test_sine_at_grid_center_peaks_at_its_bin(b):
    cfp = compute_cfp(AudioBuffer(sine(bin_to_hz(b), seconds=0.15), SR))
    assert np.all(_interior_argmax(cfp, 0, margin=4) == b)


def test_values_nonnegative_and_max_normalised():
    rng = np.random.default_rng(0)
    x = 0.3 * rng.normal(size=SR // 4) + sine(300.0, seconds=0.25)
    cfp = compute_cfp(AudioBuffer(x, SR))
    assert np.all(cfp.data >= 0)
    np.testing.assert_allclose(cfp.data.max(axis=(0, 1)), 1.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 50.0), st.integers(0, 2**31))
def test_gain_invariance(alpha, seed):
    rng = np.random.default_rng(seed)
    x = 0.2 * rng.normal(size=6000) + sine(float(rng.uniform(80, 900)), seconds=6000 / SR)
    a = compute_cfp(AudioBuffer(x, SR)).data
    b = compute_cfp(AudioBuffer(alpha * x, SR)).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_frame_times_follow_hop():
    cfp = compute_cfp(AudioBuffer(np.zeros(1000), SR))
    assert cfp.n_frames == 1000 // 256 + 1
    np.testing.assert_allclose(cfp.frame_times, np.arange(cfp.n_frames) * 256 / SR)


def test_compute_cfp_validation():
    buf = AudioBuffer(np.zeros(1000), SR)
    with pytest.raises(ValueError):
        compute_cfp(buf, gammas=(0.0, 0.6, 1.0))
    with pytest.raises(ValueError):
        compute_cfp(buf, cutoffs=(-1.0, 0.001))
    with pytest.raises(SampleRateError):
        compute_cfp(AudioBuffer(np.zeros(1000), 16000))


# ----------------------------------------------------------------------
# binary dump
# ----------------------------------------------------------------------

def test_cfp_roundtrip(tmp_path):
    cfp = compute_cfp(AudioBuffer(sine(200.0, seconds=0.1), SR))
    path = tmp_path / "x.cfp"
    save_cfp(cfp, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CFP1"
    assert len(raw) == 4 + 4 * 3 + 8 + 4 + 4 * cfp.data.size
    back = load_cfp(path)
    np.testing.assert_array_equal(back.data, cfp.data.astype(np.float32))
    np.testing.assert_allclose(back.frame_times, cfp.frame_times)
    assert back.sample_rate == SR and back.hop == 256


def test_cfp_layout_is_channel_major(tmp_path):
    data = np.zeros((320, 2, 3))
    data[5, 1, 2] = 7.0
    path = tmp_path / "y.cfp"
    save_cfp(CfpTensor(data, DEFAULT_GRID, np.zeros(2), SR, 256), path)
    values = np.frombuffer(path.read_bytes()[28:], dtype="<f4")
    assert values[2 * 320 * 2 + 5 * 2 + 1] == 7.0


def test_cfp_corruption(tmp_path):
    cfp = compute_cfp(AudioBuffer(sine(200.0, seconds=0.05), SR))
    path = tmp_path / "z.cfp"
    save_cfp(cfp, path)
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(CorruptFileError):
        load_cfp(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptFileError):
        load_cfp(tmp_path / "magic")
    (tmp_path / "tiny").write_bytes(raw[:10])
    with pytest.raises(CorruptFileError):
        load_cfp(tmp_path / "tiny")
    with pytest.raises(ShapeError):
        load_cfp(path, grid=LogFreqGrid(n_bins=100))
