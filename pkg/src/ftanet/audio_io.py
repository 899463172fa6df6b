"""WAV decoding/encoding and band-limited resampling."""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from .errors import AudioReadError, EmptyAudioError, UnsupportedAudioError

#: Zero crossings of the sinc kernel on each side of the centre tap.
SINC_ZERO_CROSSINGS = 16
KAISER_BETA = 8.6


@dataclass(frozen=True)
class AudioBuffer:
    """Mono float64 samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioBuffer samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"invalid sample rate {self.sample_rate!r}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def load_wav(path: str | os.PathLike) -> AudioBuffer:
    """Read a 16-bit PCM or 32-bit float WAV file as a mono buffer.

    Stereo files are mixed down by averaging the two channels. Integer
    PCM is scaled by 1/32768 so that full-scale positive is 32767/32768.
    """
    if not os.path.isfile(path):
        raise AudioReadError(f"cannot open {os.fspath(path)!r}: no such file")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "bit depth" in msg or "Unsupported" in msg:
            raise UnsupportedAudioError(f"{os.fspath(path)!r}: {msg}") from exc
        raise AudioReadError(f"{os.fspath(path)!r}: {msg}") from exc
    except (OSError, EOFError) as exc:
        raise AudioReadError(f"{os.fspath(path)!r}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedAudioError(
            f"{os.fspath(path)!r}: sample type {data.dtype} not supported "
            "(expected 16-bit PCM or 32-bit float)")

    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise UnsupportedAudioError(
                f"{os.fspath(path)!r}: {samples.shape[1]} channels (max 2)")
        samples = samples.mean(axis=1)
    if samples.shape[0] == 0:
        raise EmptyAudioError(f"{os.fspath(path)!r}: zero-length audio")
    if not np.all(np.isfinite(samples)):
        raise UnsupportedAudioError(f"{os.fspath(path)!r}: non-finite samples")
    return AudioBuffer(samples, int(rate))


def write_wav(path: str | os.PathLike, buf: AudioBuffer) -> None:
    """Write ``buf`` as 16-bit little-endian PCM, clipping to full scale."""
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, buf.sample_rate, pcm)


def _sinc_filter(up: int, down: int) -> np.ndarray:
    # cutoff at the lower of the two Nyquist rates, in units of the
    # upsampled rate
    ratio = max(up, down)
    n_taps = 2 * SINC_ZERO_CROSSINGS * ratio + 1
    return firwin(n_taps, 1.0 / ratio, window=("kaiser", KAISER_BETA))


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Windowed-sinc (Kaiser) resampling to ``target_rate``.

    The output holds ``round(len(buf) * target_rate / sample_rate)``
    samples. Matching rates return ``buf`` itself.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise ValueError(f"invalid target rate {target_rate!r}")
    target_rate = int(target_rate)
    if target_rate == buf.sample_rate:
        return buf
    frac = Fraction(target_rate, buf.sample_rate)
    up, down = frac.numerator, frac.denominator
    n_out = int(math.floor(len(buf) * target_rate / buf.sample_rate + 0.5))
    if len(buf) == 0:
        return AudioBuffer(np.zeros(0), target_rate)
    y = resample_poly(buf.samples, up, down, window=_sinc_filter(up, down))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return AudioBuffer(y, target_rate)
