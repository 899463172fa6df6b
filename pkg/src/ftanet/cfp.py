"""STFT and the three-channel combined frequency/periodicity representation.

Channel 0 is the power-law compressed power spectrum, channel 1 the
generalized cepstrum (a lag-domain periodicity view) and channel 2 the
generalized cepstrum of spectrum. All three are mapped onto a shared
log-frequency grid so that, for a periodic input, each channel peaks near
the fundamental (channel 0 may instead peak at a strong harmonic).
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .audio_io import AudioBuffer
from .errors import CorruptFileError, EmptyAudioError, SampleRateError, ShapeError

SAMPLE_RATE = 44100
WINDOW = 2048
HOP = 256
#: FFT length used inside compute_cfp; the 2048-sample frame is zero padded
#: so the spectrum is sampled finely enough for the 20-cent grid.
CFP_NFFT = 8192
#: Lag oversampling factor for the generalized cepstrum before it is mapped
#: to pitch; integer lags alone are too coarse above ~200 Hz.
LAG_OVERSAMPLE = 4
#: Spectrum samples per grid bin for channel 0. Below ~460 Hz the grid is
#: finer than any practical FFT bin spacing, so channel 0 evaluates the
#: DFT directly at log-spaced frequencies instead.
SPECTRUM_OVERSAMPLE = 4
#: gamma0 acts on the power spectrum, so 0.12 compresses magnitudes by 0.24.
DEFAULT_GAMMAS = (0.12, 0.6, 1.0)
DEFAULT_CUTOFFS = (31.0, 1.0 / 1250.0)

_FRAME_CHUNK = 256


@dataclass(frozen=True)
class LogFreqGrid:
    """Log-spaced pitch grid; bin ``b`` is centred at ``f_min * 2**(b / bins_per_octave)``."""

    n_bins: int = 320
    bins_per_octave: int = 60
    f_min: float = 31.0
    f_max: float = 1250.0

    def __post_init__(self):
        if self.n_bins < 1 or self.bins_per_octave < 1 or self.f_min <= 0:
            raise ValueError("invalid grid parameters")
        if self.center(self.n_bins - 1) >= self.f_max:
            raise ValueError("top grid centre must lie below f_max")

    def center(self, b):
        return self.f_min * 2.0 ** (np.asarray(b, dtype=np.float64) / self.bins_per_octave)

    @property
    def centers(self) -> np.ndarray:
        return self.center(np.arange(self.n_bins))


DEFAULT_GRID = LogFreqGrid()


def hz_to_bin(f, grid: LogFreqGrid = DEFAULT_GRID):
    """Nearest grid bin of frequency ``f`` (Hz), clipped to the grid.

    Accepts scalars or arrays; halves round upwards.
    """
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(~(f_arr > 0)):
        raise ValueError("frequency must be positive")
    b = np.floor(grid.bins_per_octave * np.log2(f_arr / grid.f_min) + 0.5)
    b = np.clip(b, 0, grid.n_bins - 1).astype(np.int64)
    return int(b) if b.ndim == 0 else b


def bin_to_hz(b, grid: LogFreqGrid = DEFAULT_GRID):
    """Centre frequency (Hz) of grid bin ``b``."""
    b_arr = np.asarray(b)
    if np.any((b_arr < 0) | (b_arr > grid.n_bins - 1)):
        raise IndexError(f"bin index out of range [0, {grid.n_bins - 1}]")
    hz = grid.center(b_arr)
    return float(hz) if hz.ndim == 0 else hz


@dataclass(frozen=True)
class Spectrogram:
    mags: np.ndarray          # (n_freq, T), nonnegative
    bin_hz: np.ndarray        # (n_freq,)
    frame_times: np.ndarray   # (T,) seconds


@dataclass(frozen=True)
class CfpTensor:
    data: np.ndarray          # (F, T, 3)
    grid: LogFreqGrid = DEFAULT_GRID
    frame_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample_rate: float = SAMPLE_RATE
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def _frames(buf: AudioBuffer, window: int, hop: int) -> np.ndarray:
    pad = window // 2
    x = np.pad(buf.samples, (pad, pad))
    frames = sliding_window_view(x, window)[::hop]
    # floor(len / hop) + 1 frames, one per hop starting at sample 0
    return frames[: len(buf) // hop + 1]


def _check_input(buf: AudioBuffer, sample_rate: int) -> None:
    if len(buf) == 0:
        raise EmptyAudioError("empty audio buffer")
    if buf.sample_rate != sample_rate:
        raise SampleRateError(
            f"expected {sample_rate} Hz audio, got {buf.sample_rate} Hz; resample first")


def stft(buf: AudioBuffer, window: int = WINDOW, hop: int = HOP,
         n_fft: int | None = None, sample_rate: int = SAMPLE_RATE) -> Spectrogram:
    """Centred Hann-window STFT magnitudes.

    The signal is zero padded by ``window // 2`` on both sides, giving
    ``len(buf) // hop + 1`` frames. ``n_fft`` defaults to ``window``.
    """
    _check_input(buf, sample_rate)
    n_fft = window if n_fft is None else n_fft
    win = get_window("hann", window)
    frames = _frames(buf, window, hop)
    mags = np.abs(np.fft.rfft(frames * win, n=n_fft, axis=1)).T
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    frame_times = np.arange(mags.shape[1]) * hop / sample_rate
    return Spectrogram(mags, bin_hz, frame_times)


def _rect(x: np.ndarray, gamma: float) -> np.ndarray:
    x = np.maximum(x, 0.0)
    return x if gamma == 1.0 else x ** gamma


@lru_cache(maxsize=8)
def freq_filterbank(grid: LogFreqGrid, n_fft: int, sample_rate: float) -> np.ndarray:
    """Triangular map from linear FFT bins to grid bins, shape (F, n_fft//2 + 1).

    Each row is a triangle peaking at the grid centre and reaching zero at
    the neighbouring centres, widened to at least one FFT bin spacing so
    that no row is empty; rows sum to one.
    """
    df = sample_rate / n_fft
    lin = np.arange(n_fft // 2 + 1) * df
    idx = np.arange(-1, grid.n_bins + 1)
    c = grid.center(idx)
    fb = np.zeros((grid.n_bins, lin.shape[0]))
    for b in range(grid.n_bins):
        lo_c, mid, hi_c = c[b], c[b + 1], c[b + 2]
        lo = max(mid - lo_c, df)
        hi = max(hi_c - mid, df)
        w = np.where(lin <= mid, 1.0 - (mid - lin) / lo, 1.0 - (lin - mid) / hi)
        w = np.maximum(w, 0.0)
        fb[b] = w / w.sum()
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=4)
def log_dft_basis(grid: LogFreqGrid, window: int, sample_rate: float,
                  oversample: int = SPECTRUM_OVERSAMPLE):
    """DFT basis at ``oversample`` log-spaced points per grid bin plus triangle weights.

    Returns ``(cos, sin, tri, hz)``: ``cos``/``sin`` have shape
    (window, n_points) so that ``frames @ cos`` and ``frames @ sin`` are the
    real and imaginary DFT parts at frequencies ``hz``; ``tri`` (F, n_points)
    averages the points with a triangle that peaks at each grid centre and
    vanishes at the neighbouring centres.
    """
    R = oversample
    k = np.arange(-(R - 1), grid.n_bins * R)
    hz = grid.f_min * 2.0 ** (k / (R * grid.bins_per_octave))
    phase = 2.0 * np.pi * np.outer(np.arange(window), hz) / sample_rate
    cos, sin = np.cos(phase), -np.sin(phase)
    tri = np.zeros((grid.n_bins, k.size))
    weights = 1.0 - np.abs(np.arange(-(R - 1), R)) / R
    for b in range(grid.n_bins):
        tri[b, b * R: b * R + 2 * R - 1] = weights / weights.sum()
    for arr in (cos, sin, tri, hz):
        arr.setflags(write=False)
    return cos, sin, tri, hz


@lru_cache(maxsize=8)
def lag_filterbank(grid: LogFreqGrid, n_fft: int, sample_rate: float,
                   oversample: int = LAG_OVERSAMPLE):
    """Map from oversampled lag index to grid bins.

    Lag index ``m`` stands for ``m / oversample`` samples, i.e. pitch
    ``sample_rate * oversample / m``, and adds all of its energy to the
    nearest grid bin. Lags whose pitch falls off the grid are dropped.

    Returns ``(m_lo, fb)`` where ``fb`` has shape (F, n_cols) and applies to
    lag indices ``m_lo .. m_lo + n_cols - 1``.
    """
    m = np.arange(1, oversample * n_fft // 2 + 1)
    pitch = sample_rate * oversample / m
    b = np.floor(grid.bins_per_octave * np.log2(pitch / grid.f_min) + 0.5).astype(np.int64)
    keep = (pitch >= grid.f_min) & (pitch <= grid.f_max) & (b >= 0) & (b < grid.n_bins)
    m, b = m[keep], b[keep]
    m_lo = int(m[0])
    fb = np.zeros((grid.n_bins, int(m[-1]) - m_lo + 1))
    fb[b, m - m_lo] = 1.0
    fb.setflags(write=False)
    return m_lo, fb


def cfp_frames(frames: np.ndarray, gammas=DEFAULT_GAMMAS, cutoffs=DEFAULT_CUTOFFS,
               n_fft: int = CFP_NFFT, sample_rate: float = SAMPLE_RATE,
               oversample: int = LAG_OVERSAMPLE):
    """Linear-axis CFP layers for already windowed frames (rows).

    Returns ``(z0, z1, z2)``: the rectified, compressed power spectrum
    (n_frames, n_fft//2 + 1); the generalized cepstrum on lags spaced
    ``1 / oversample`` samples apart (n_frames, oversample*n_fft//2 + 1);
    and the generalized cepstrum of spectrum (n_frames, n_fft//2 + 1),
    taken from the integer-lag samples of the cepstrum.
    """
    g0, g1, g2 = gammas
    freq_hp, quef_hp = cutoffs
    k_hp = int(math.ceil(freq_hp * n_fft / sample_rate))
    q_hp = int(math.ceil(quef_hp * sample_rate))

    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    z0 = _rect(spec.real ** 2 + spec.imag ** 2, g0)
    z0[:, :k_hp] = 0.0

    # the spectrum is real and even, so its inverse DFT is real and even;
    # zero padding the spectrum interpolates the lag axis
    n_up = n_fft * oversample
    z1_up = _rect(np.fft.irfft(z0, n=n_up, axis=1) * oversample, g1)
    m_hp = q_hp * oversample
    z1_up[:, :m_hp] = 0.0
    z1_up[:, n_up - m_hp + 1:] = 0.0

    z1_int = z1_up[:, ::oversample]
    z2 = _rect(np.fft.rfft(z1_int, axis=1).real, g2)
    z2[:, :k_hp] = 0.0
    return z0, z1_up[:, : n_up // 2 + 1], z2


def compute_cfp(buf: AudioBuffer, grid: LogFreqGrid = DEFAULT_GRID,
                gammas=DEFAULT_GAMMAS, cutoffs=DEFAULT_CUTOFFS,
                window: int = WINDOW, hop: int = HOP, n_fft: int = CFP_NFFT,
                sample_rate: int = SAMPLE_RATE) -> CfpTensor:
    """Combined frequency and periodicity representation of ``buf``.

    Parameters
    ----------
    buf : AudioBuffer
        Mono audio at ``sample_rate``.
    grid : LogFreqGrid
        Output pitch grid.
    gammas : tuple of float
        Power-law exponents for the spectrum, cepstrum and cepstrum of
        spectrum.
    cutoffs : tuple of float
        ``(freq_hp, quef_hp)``: FFT bins below ``freq_hp`` Hz and lags
        below ``quef_hp`` seconds are zeroed.

    Returns
    -------
    CfpTensor
        ``data`` has shape ``(grid.n_bins, T, 3)``; each channel is scaled
        so its maximum over the clip is 1 (or left at 0 for silence).
    """
    if any(g <= 0 for g in gammas):
        raise ValueError("gammas must be positive")
    if cutoffs[0] < 0 or cutoffs[1] < 0:
        raise ValueError("cutoffs must be nonnegative")
    _check_input(buf, sample_rate)
    if n_fft < window:
        raise ValueError("n_fft must be at least the window length")

    win = get_window("hann", window)
    frames = _frames(buf, window, hop)
    fb_freq = freq_filterbank(grid, n_fft, float(sample_rate))
    m_lo, fb_lag = lag_filterbank(grid, n_fft, float(sample_rate))
    m_hi = m_lo + fb_lag.shape[1]
    dft_cos, dft_sin, tri, fine_hz = log_dft_basis(grid, window, float(sample_rate))
    below_hp = fine_hz < cutoffs[0]

    n_frames = frames.shape[0]
    out = np.empty((3, grid.n_bins, n_frames))
    for start in range(0, n_frames, _FRAME_CHUNK):
        stop = min(start + _FRAME_CHUNK, n_frames)
        chunk = frames[start:stop] * win
        _, z1, z2 = cfp_frames(chunk, gammas, cutoffs, n_fft, sample_rate)
        re, im = chunk @ dft_cos, chunk @ dft_sin
        z0 = _rect(re * re + im * im, gammas[0])
        z0[:, below_hp] = 0.0
        out[0, :, start:stop] = tri @ z0.T
        out[1, :, start:stop] = fb_lag @ z1[:, m_lo:m_hi].T
        out[2, :, start:stop] = fb_freq @ z2.T

    for ch in range(3):
        peak = out[ch].max()
        if peak > 0:
            out[ch] /= peak
    data = np.ascontiguousarray(out.transpose(1, 2, 0))
    frame_times = np.arange(n_frames) * hop / sample_rate
    return CfpTensor(data, grid, frame_times, float(sample_rate), hop)


_CFP_MAGIC = b"CFP1"
_CFP_HEADER = struct.Struct("<4sIIIdI")


def save_cfp(cfp: CfpTensor, path: str | os.PathLike) -> None:
    """Binary dump: header then f32 values in (channel, frequency, time) order."""
    F, T, C = cfp.data.shape
    header = _CFP_HEADER.pack(_CFP_MAGIC, F, T, C, float(cfp.sample_rate), int(cfp.hop))
    body = np.ascontiguousarray(cfp.data.transpose(2, 0, 1), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def load_cfp(path: str | os.PathLike, grid: LogFreqGrid = DEFAULT_GRID) -> CfpTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CFP_HEADER.size:
        raise CorruptFileError(f"{os.fspath(path)!r}: truncated header")
    magic, F, T, C, sample_rate, hop = _CFP_HEADER.unpack_from(raw)
    if magic != _CFP_MAGIC:
        raise CorruptFileError(f"{os.fspath(path)!r}: bad magic {magic!r}")
    expected = _CFP_HEADER.size + 4 * F * T * C
    if len(raw) != expected:
        raise CorruptFileError(
            f"{os.fspath(path)!r}: expected {expected} bytes, found {len(raw)}")
    if F != grid.n_bins:
        raise ShapeError(f"file has {F} frequency bins, grid has {grid.n_bins}")
    data = np.frombuffer(raw, dtype="<f4", offset=_CFP_HEADER.size).reshape(C, F, T)
    data = np.ascontiguousarray(data.transpose(1, 2, 0)).astype(np.float64)
    frame_times = np.arange(T) * hop / sample_rate
    return CfpTensor(data, grid, frame_times, sample_rate, hop)
