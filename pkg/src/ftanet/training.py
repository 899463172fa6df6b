"""Training data preparation, the BCE/Adam loop, and synthetic datasets."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .audio_io import AudioBuffer, load_wav, resample, write_wav
from .cfp import DEFAULT_GRID, HOP, SAMPLE_RATE, CfpTensor, LogFreqGrid, compute_cfp, hz_to_bin
from .errors import InputError, TrainingError
from .evaluation import MelodyContour, read_contour, resample_contour
from .model import LayerConfig, forward_tensor, init_params
from .tensor import ModelParams

log = logging.getLogger(__name__)

SEGMENT_FRAMES = 128


@dataclass
class TrainSegment:
    input: np.ndarray    # (F, SEGMENT_FRAMES, 3)
    target: np.ndarray   # (F + 1, SEGMENT_FRAMES), one-hot columns
    source_clip: str
    offset: int


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def encode_labels(contour: MelodyContour, frame_times, grid: LogFreqGrid = DEFAULT_GRID) -> np.ndarray:
    """One-hot (F+1) x T targets; unvoiced frames light up row F.

    Labels are looked up by nearest annotation time; frames further than
    half an annotation hop outside the annotated span count as unvoiced.
    """
    frame_times = np.asarray(frame_times, dtype=np.float64)
    on_grid = resample_contour(contour, frame_times)
    F = grid.n_bins
    rows = np.full(frame_times.size, F, dtype=np.int64)
    voiced = on_grid.freqs > 0
    if np.any(voiced):
        rows[voiced] = hz_to_bin(on_grid.freqs[voiced], grid)
    target = np.zeros((F + 1, frame_times.size), dtype=np.float32)
    target[rows, np.arange(frame_times.size)] = 1.0
    return target


def segment_clip(cfp, target: np.ndarray, clip_id: str = "",
                 length: int = SEGMENT_FRAMES) -> list[TrainSegment]:
    """Cut a clip into non-overlapping ``length``-frame segments.

    The last segment is zero padded on the input side and padded with
    non-melody columns on the target side.
    """
    data = cfp.data if isinstance(cfp, CfpTensor) else np.asarray(cfp)
    F, T, C = data.shape
    if target.shape != (F + 1, T):
        raise InputError(f"target shape {target.shape} does not match input {(F + 1, T)}")
    segments = []
    for offset in range(0, T, length):
        n = min(length, T - offset)
        x = np.zeros((F, length, C), dtype=np.float32)
        x[:, :n] = data[:, offset:offset + n]
        y = np.zeros((F + 1, length), dtype=np.float32)
        y[:, :n] = target[:, offset:offset + n]
        y[F, n:] = 1.0
        segments.append(TrainSegment(x, y, clip_id, offset))
    return segments


def train(segments: list[TrainSegment], layer_cfg: LayerConfig, epochs: int,
          lr: float = 1e-4, batch: int = 8, seed: int = 0,
          max_steps: int | None = None, params: ModelParams | None = None,
          callback=None) -> TrainResult:
    """Fit the network with mean BCE and Adam.

    Segments are reshuffled every epoch from a generator seeded with
    ``seed``; the run stops early once ``max_steps`` updates are done.
    ``callback(step, loss)`` is called after every update.
    """
    if not segments:
        raise InputError("training set is empty")
    if batch < 1 or epochs < 0:
        raise InputError("batch must be positive and epochs nonnegative")
    if params is None:
        params = init_params(layer_cfg, seed)
    state = tn.AdamState(params)
    rng = np.random.default_rng([seed, 1])
    result = TrainResult(params)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(segments))
        losses = []
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            x = np.stack([segments[i].input for i in idx]).astype(np.float32)
            y = np.stack([segments[i].target for i in idx]).astype(np.float32)
            loss = tn.bce_loss(forward_tensor(x, params, layer_cfg), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, step {step} "
                    f"(segments {[segments[i].source_clip for i in idx]})")
            tn.zero_grad(params)
            tn.backward(loss)
            tn.adam_step(params, {n: p.grad for n, p in params.items()}, state, lr)
            losses.append(value)
            result.step_losses.append(value)
            step += 1
            if callback is not None:
                callback(step, value)
            if max_steps is not None and step >= max_steps:
                break
        if losses:
            result.epoch_losses.append(float(np.mean(losses)))
            log.info("epoch %d: mean loss %.6f", epoch, result.epoch_losses[-1])
        if max_steps is not None and step >= max_steps:
            break
    tn.zero_grad(params)
    return result


# ----------------------------------------------------------------------
# manifests and datasets
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    wav_path: str
    annotation_path: str
    repeat: int = 1


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """``wav<TAB>annotation<TAB>repeat`` lines; relative paths resolve against the manifest."""
    base = Path(path).parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise InputError(f"{os.fspath(path)} line {lineno}: expected 2 or 3 tab-separated fields")
            try:
                repeat = int(fields[2]) if len(fields) == 3 else 1
            except ValueError:
                raise InputError(f"{os.fspath(path)} line {lineno}: bad repeat count {fields[2]!r}") from None
            if repeat < 0:
                raise InputError(f"{os.fspath(path)} line {lineno}: negative repeat count")
            wav, ann = (str(p if os.path.isabs(p) else base / p) for p in fields[:2])
            entries.append(ManifestEntry(wav, ann, repeat))
    return entries


def write_manifest(path: str | os.PathLike, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.wav_path}\t{e.annotation_path}\t{e.repeat}\n")


def clip_features(wav_path, grid: LogFreqGrid = DEFAULT_GRID, **cfp_kwargs) -> CfpTensor:
    buf = load_wav(wav_path)
    return compute_cfp(resample(buf, SAMPLE_RATE), grid, **cfp_kwargs)


def segments_from_manifest(entries: list[ManifestEntry], grid: LogFreqGrid = DEFAULT_GRID,
                           **cfp_kwargs) -> list[TrainSegment]:
    """Feature-extract every clip once and duplicate its segments ``repeat`` times."""
    segments = []
    for e in entries:
        if e.repeat == 0:
            continue
        cfp = clip_features(e.wav_path, grid, **cfp_kwargs)
        target = encode_labels(read_contour(e.annotation_path), cfp.frame_times, grid)
        clip_segments = segment_clip(cfp, target, Path(e.wav_path).stem)
        segments.extend(clip_segments * e.repeat)
    return segments


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic harmonic-melody dataset.

    Each clip alternates held notes (with sinusoidal vibrato) and silent
    gaps; ``unvoiced_fraction`` of its duration is gap. ``noise_db`` is the
    RMS level of added white noise relative to full scale, ``None`` or
    ``-inf`` for none.
    """

    seed: int = 0
    n_clips: int = 8
    duration_s: float = 5.0
    f0_range: tuple = (110.0, 880.0)
    note_duration_s: float = 0.5
    vibrato_cents: float = 30.0
    vibrato_hz: float = 5.5
    n_harmonics: int = 3
    rolloff: float = 0.6
    noise_db: float | None = None
    unvoiced_fraction: float = 0.2
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP

    def __post_init__(self):
        lo, hi = self.f0_range
        cents = 2.0 ** (abs(self.vibrato_cents) / 1200.0)
        if not (DEFAULT_GRID.f_min <= lo / cents and hi * cents <= DEFAULT_GRID.f_max and lo <= hi):
            raise InputError(f"f0 range {self.f0_range} (with vibrato) leaves [31, 1250] Hz")
        if self.n_clips < 1 or self.duration_s <= 0 or self.n_harmonics < 1:
            raise InputError("n_clips, duration_s and n_harmonics must be positive")
        if not 0.0 <= self.unvoiced_fraction < 1.0:
            raise InputError("unvoiced_fraction must be in [0, 1)")
        if self.note_duration_s <= 0:
            raise InputError("note_duration_s must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown synth spec keys: {sorted(unknown)}")
        d = dict(d)
        if "f0_range" in d:
            d["f0_range"] = tuple(d["f0_range"])
        return cls(**d)


def _schedule(rng: np.random.Generator, spec: SynthSpec, n_samples: int):
    """Sample-accurate (start, stop, f0) notes; gaps fill the rest."""
    n_notes = max(1, int(round(spec.duration_s / spec.note_duration_s)))
    n_gap = int(round(spec.unvoiced_fraction * n_samples))
    n_voiced = n_samples - n_gap
    note_lens = _split(rng, n_voiced, n_notes)
    # one gap before each note and one at the end
    gap_lens = _split(rng, n_gap, n_notes + 1) if n_gap else [0] * (n_notes + 1)
    lo, hi = np.log2(spec.f0_range[0]), np.log2(spec.f0_range[1])
    notes, pos = [], 0
    for i in range(n_notes):
        pos += gap_lens[i]
        f0 = float(2.0 ** rng.uniform(lo, hi))
        notes.append((pos, pos + note_lens[i], f0))
        pos += note_lens[i]
    return notes


def _split(rng: np.random.Generator, total: int, parts: int) -> list[int]:
    """Random positive-ish integer lengths summing exactly to ``total``."""
    w = rng.dirichlet(np.full(parts, 4.0))
    lens = np.floor(w * total).astype(np.int64)
    lens[: total - lens.sum()] += 1
    return [int(n) for n in lens]


def synth_clip(rng: np.random.Generator, spec: SynthSpec):
    """One clip: (AudioBuffer, per-sample f0 with 0 in gaps)."""
    fs = spec.sample_rate
    n = int(round(spec.duration_s * fs))
    f0 = np.zeros(n)
    for start, stop, base in _schedule(rng, spec, n):
        t = np.arange(stop - start) / fs
        phase0 = rng.uniform(0, 2 * np.pi)
        f0[start:stop] = base * 2.0 ** (spec.vibrato_cents / 1200.0
                                         * np.sin(2 * np.pi * spec.vibrato_hz * t + phase0))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    env = (f0 > 0).astype(np.float64)
    # 5 ms ramps at note edges avoid broadband clicks
    ramp = max(1, int(0.005 * fs))
    env = np.convolve(env, np.ones(ramp) / ramp, mode="same") * env
    x = np.zeros(n)
    for k in range(1, spec.n_harmonics + 1):
        audible = k * f0 < 0.5 * fs
        x += np.where(audible, spec.rolloff ** (k - 1) * np.sin(k * phase), 0.0)
    x *= env
    peak = np.abs(x).max()
    if peak > 0:
        x *= 0.8 / peak
    if spec.noise_db is not None and math.isfinite(spec.noise_db):
        x += rng.normal(0.0, 10.0 ** (spec.noise_db / 20.0), n)
    return AudioBuffer(np.clip(x, -1.0, 1.0), fs), f0


def synth_dataset(spec: SynthSpec, out_dir: str | os.PathLike) -> list[ManifestEntry]:
    """Write ``clip_NNN.wav`` / ``clip_NNN.txt`` pairs and ``manifest.tsv``.

    Annotations are sampled every ``hop`` samples from t = 0, with 0 Hz in
    the gaps. Output is byte-identical for equal specs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"cannot write to {os.fspath(out_dir)!r}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.n_clips):
        buf, f0 = synth_clip(rng, spec)
        wav_name, ann_name = f"clip_{i:03d}.wav", f"clip_{i:03d}.txt"
        write_wav(out / wav_name, buf)
        idx = np.arange(0, len(buf), spec.hop)
        with open(out / ann_name, "w") as fh:
            for j in idx:
                fh.write(f"{j / spec.sample_rate:.8f}\t{f0[j]:.4f}\n")
        entries.append(ManifestEntry(wav_name, ann_name, 1))
    write_manifest(out / "manifest.tsv", entries)
    return [ManifestEntry(str(out / e.wav_path), str(out / e.annotation_path), e.repeat)
            for e in entries]
