"""Salience decoding and the five standard melody-extraction metrics.

Contours follow the MIREX sign convention: a positive frequency is a voiced
estimate, a negative one is an unvoiced frame carrying a fallback ("shadow")
pitch, and zero is unvoiced with no pitch at all. Only the sign decides
voicing; pitch metrics compare absolute values, so a correct shadow pitch
still counts towards raw pitch and chroma accuracy.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .cfp import DEFAULT_GRID, LogFreqGrid, bin_to_hz
from .errors import ContourFormatError, ShapeError

FREQ_SANITY = (20.0, 5000.0)
#: relative jitter allowed between consecutive hops of a "uniform" time grid;
#: annotation files round their timestamps.
HOP_RTOL = 1e-3


@dataclass(frozen=True)
class MelodyContour:
    times: np.ndarray
    freqs: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        freqs = np.asarray(self.freqs, dtype=np.float64).reshape(-1)
        if times.shape != freqs.shape:
            raise ShapeError(f"{times.size} timestamps but {freqs.size} frequencies")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(freqs))):
            raise ValueError("contour values must be finite")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("contour timestamps must be strictly increasing")
        mag = np.abs(freqs)
        bad = (mag != 0) & ((mag < FREQ_SANITY[0]) | (mag > FREQ_SANITY[1]))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"frequency {freqs[i]} Hz at t={times[i]} outside the sanity band")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "freqs", freqs)

    def __len__(self):
        return self.times.size

    @property
    def voiced(self) -> np.ndarray:
        return self.freqs > 0

    @property
    def hop(self) -> float:
        if self.times.size < 2:
            raise ValueError("hop undefined for fewer than two frames")
        return float(np.median(np.diff(self.times)))


@dataclass(frozen=True)
class EvalReport:
    oa: float
    rpa: float
    rca: float
    vr: float
    vfa: float
    n_frames: int
    n_ref_voiced: int
    n_ref_unvoiced: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def format_percent(self) -> str:
        """``OA 85.9 RPA 85.2 ...``: percentages with one decimal."""
        return " ".join(f"{name.upper()} {100.0 * getattr(self, name):.1f}"
                        for name in ("oa", "rpa", "rca", "vr", "vfa"))


def decode_salience(sal, grid: LogFreqGrid = DEFAULT_GRID, frame_times=None) -> MelodyContour:
    """Per-frame argmax decoding of an (F+1) x T salience map.

    If the non-melody row (index F) wins, the frame is unvoiced and gets the
    negated centre frequency of the best pitch row as its shadow pitch.
    Ties go to the lower row index.
    """
    values = getattr(sal, "values", sal)
    if frame_times is None:
        frame_times = getattr(sal, "frame_times", None)
    values = np.asarray(values)
    F = grid.n_bins
    if values.ndim != 2 or values.shape[0] != F + 1:
        raise ShapeError(f"salience must have {F + 1} rows, got shape {values.shape}")
    T = values.shape[1]
    if frame_times is None or len(frame_times) != T:
        raise ShapeError("salience map needs one timestamp per frame")
    best = np.argmax(values, axis=0)
    best_pitch = np.argmax(values[:F], axis=0)
    hz = bin_to_hz(best_pitch, grid)
    freqs = np.where(best == F, -hz, hz)
    return MelodyContour(np.asarray(frame_times, dtype=np.float64), freqs)


def _check_uniform(times: np.ndarray) -> float:
    if times.size < 2:
        raise ValueError("need at least two timestamps")
    d = np.diff(times)
    hop = float(np.median(d))
    if np.any(np.abs(d - hop) > HOP_RTOL * hop + 1e-9):
        raise ValueError("time grid is not uniform")
    return hop


def resample_contour(ref: MelodyContour, target_times) -> MelodyContour:
    """Nearest-neighbour resampling of ``ref`` onto ``target_times``.

    A target time exactly midway between two reference frames takes the
    earlier one. Targets more than half a reference hop outside the
    reference coverage are unvoiced (0 Hz).
    """
    if len(ref) == 0:
        raise ValueError("cannot resample an empty contour")
    target_times = np.asarray(target_times, dtype=np.float64)
    if target_times.size > 1:
        _check_uniform(target_times)
    if len(ref) > 1:
        ref_hop = ref.hop
        idx = np.searchsorted(ref.times, target_times, side="left")
        idx = np.clip(idx, 1, len(ref) - 1)
        left = ref.times[idx - 1]
        right = ref.times[idx]
        take_right = (target_times - left) > (right - target_times)
        idx = np.where(take_right, idx, idx - 1)
    else:
        ref_hop = float(np.median(np.diff(target_times))) if target_times.size > 1 else 0.0
        idx = np.zeros(target_times.size, dtype=np.int64)
    freqs = ref.freqs[idx]
    half = 0.5 * ref_hop
    outside = (target_times < ref.times[0] - half) | (target_times > ref.times[-1] + half)
    freqs = np.where(outside, 0.0, freqs)
    return MelodyContour(target_times, freqs)


def _cents(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Cent distance |est| vs |ref|; NaN where either has no pitch."""
    out = np.full(ref.shape, np.nan)
    ok = (est != 0) & (ref != 0)
    out[ok] = 1200.0 * np.log2(np.abs(est[ok]) / np.abs(ref[ok]))
    return out


def evaluate(ref: MelodyContour, est: MelodyContour, tolerance_cents: float = 50.0) -> EvalReport:
    """Overall accuracy, raw pitch/chroma accuracy, voicing recall and false alarm.

    ``est`` must already be on the same time grid as ``ref`` (see
    :func:`resample_contour`). Rates with an empty denominator are 0.
    """
    n = len(ref)
    if n == 0:
        raise ValueError("cannot evaluate zero frames")
    if len(est) != n or not np.allclose(est.times, ref.times, rtol=0, atol=1e-6):
        raise ShapeError("reference and estimate are on different time grids")

    ref_v = ref.freqs > 0
    est_v = est.freqs > 0
    cents = _cents(est.freqs, ref.freqs)
    with np.errstate(invalid="ignore"):
        pitch_hit = np.abs(cents) <= tolerance_cents
        folded = np.mod(cents + 600.0, 1200.0) - 600.0
        chroma_hit = np.abs(folded) <= tolerance_cents
    pitch_hit &= ~np.isnan(cents)
    chroma_hit &= ~np.isnan(cents)

    n_v = int(ref_v.sum())
    n_uv = n - n_v

    def rate(num, den):
        return float(num) / den if den else 0.0

    return EvalReport(
        oa=rate(np.sum(ref_v & est_v & pitch_hit) + np.sum(~ref_v & ~est_v), n),
        rpa=rate(np.sum(ref_v & pitch_hit), n_v),
        rca=rate(np.sum(ref_v & chroma_hit), n_v),
        vr=rate(np.sum(ref_v & est_v), n_v),
        vfa=rate(np.sum(~ref_v & est_v), n_uv),
        n_frames=n,
        n_ref_voiced=n_v,
        n_ref_unvoiced=n_uv,
    )


def evaluate_files(ref_path, est_path, tolerance_cents: float = 50.0) -> EvalReport:
    """Evaluate two contour files after resampling the estimate onto the reference grid."""
    ref = read_contour(ref_path)
    est = read_contour(est_path)
    if len(est) == 0:
        raise ContourFormatError(f"{os.fspath(est_path)}: no frames")
    return evaluate(ref, resample_contour(est, ref.times), tolerance_cents)


def read_contour(path: str | os.PathLike) -> MelodyContour:
    """Parse a two-column (time, frequency) text file.

    Columns may be separated by whitespace or commas; blank lines and
    lines starting with ``#`` are skipped.
    """
    times, freqs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").split()
            if len(fields) < 2:
                raise ContourFormatError("expected two columns (time, frequency)", lineno)
            try:
                t, f = float(fields[0]), float(fields[1])
            except ValueError:
                raise ContourFormatError(f"non-numeric value in {line!r}", lineno) from None
            if not (np.isfinite(t) and np.isfinite(f)):
                raise ContourFormatError(f"non-finite value in {line!r}", lineno)
            times.append(t)
            freqs.append(f)
    if not times:
        raise ContourFormatError(f"{os.fspath(path)}: no frames")
    try:
        return MelodyContour(np.array(times), np.array(freqs))
    except ValueError as exc:
        raise ContourFormatError(f"{os.fspath(path)}: {exc}") from exc


def write_contour(path: str | os.PathLike, contour: MelodyContour) -> None:
    with open(path, "w") as fh:
        for t, f in zip(contour.times, contour.freqs):
            fh.write(f"{t:.8f}\t{f:.4f}\n")
