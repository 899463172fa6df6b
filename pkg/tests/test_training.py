import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftanet.audio_io import load_wav
from ftanet.cfp import DEFAULT_GRID, CfpTensor, bin_to_hz, compute_cfp, hz_to_bin
from ftanet.errors import InputError
from ftanet.evaluation import MelodyContour, read_contour
from ftanet.model import LayerConfig, init_params
from ftanet.training import (ManifestEntry, SynthSpec, TrainSegment, encode_labels, read_manifest,
                             segment_clip, segments_from_manifest, synth_clip, synth_dataset, train,
                             write_manifest)


HOP = 256 / 44100
ONE_BLOCK = LayerConfig(n_blocks=1, widths=(4,), mdb_widths=(4, 4, 4))


def _fake_cfp(T, seed=0):
    data = np.random.default_rng(seed).random((320, T, 3))
    return CfpTensor(data, DEFAULT_GRID, np.arange(T) * HOP, 44100, 256)


def _unvoiced_target(T):
    y = np.zeros((321, T), np.float32)
    y[320] = 1
    return y


# ----------------------------------------------------------------------
# labels and segments
# ----------------------------------------------------------------------

def test_encode_voiced_and_unvoiced():
    contour = MelodyContour([0.0, HOP], [440.0, 0.0])
    y = encode_labels(contour, [0.0, HOP])
    assert y[230, 0] == 1 and y[320, 1] == 1
    np.testing.assert_array_equal(y.sum(axis=0), 1)


def test_encode_uses_nearest_annotation():
    contour = MelodyContour([0.0, 0.01, 0.02], [100.0, 200.0, 300.0])
    y = encode_labels(contour, [0.0058])
    # 5.8 ms is 4.2 ms from the 10 ms label and 5.8 ms from the 0 ms one
    assert y[hz_to_bin(200.0), 0] == 1
    y = encode_labels(contour, [0.004])
    assert y[hz_to_bin(100.0), 0] == 1


def test_encode_outside_coverage_is_unvoiced():
    contour = MelodyContour([0.0, 0.01], [100.0, 200.0])
    y = encode_labels(contour, np.arange(5) * 0.01)
    np.testing.assert_array_equal(np.argmax(y, axis=0), [hz_to_bin(100.0), hz_to_bin(200.0), 320, 320, 320])


def test_encode_rejects_non_monotonic_times():
    with pytest.raises(ValueError):
        encode_labels(MelodyContour([0.0, 0.0], [100.0, 100.0]), [0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_encode_then_decode_quantises(seed):
    rng = np.random.default_rng(seed)
    n = 50
    freqs = np.where(rng.random(n) < 0.7, 2.0 ** rng.uniform(np.log2(32), np.log2(1200), n), 0.0)
    times = np.arange(n) * HOP
    y = encode_labels(MelodyContour(times, freqs), times)
    rows = np.argmax(y, axis=0)
    np.testing.assert_array_equal(rows == 320, freqs == 0)
    voiced = freqs > 0
    cents = 1200 * np.log2(bin_to_hz(rows[voiced]) / freqs[voiced])
    assert np.all(np.abs(cents) <= 10.0 + 1e-9)


@pytest.mark.parametrize("T,offsets,last_real", [(256, [0, 128], 128), (300, [0, 128, 256], 44),
                                                 (128, [0], 128), (1, [0], 1)])
def test_segment_counts_and_padding(T, offsets, last_real):
    cfp = _fake_cfp(T)
    y = encode_labels(MelodyContour(np.arange(T) * HOP, np.full(T, 220.0)), cfp.frame_times)
    segs = segment_clip(cfp, y, "clip")
    assert [s.offset for s in segs] == offsets
    last = segs[-1]
    assert last.input.shape == (320, 128, 3) and last.target.shape == (321, 128)
    assert np.all(last.input[:, last_real:] == 0)
    assert np.all(last.target[320, last_real:] == 1)
    assert np.all(last.target[hz_to_bin(220.0), :last_real] == 1)
    for s in segs:
        np.testing.assert_array_equal(s.target.sum(axis=0), 1)
        assert s.source_clip == "clip"


def test_segment_rejects_mismatched_target():
    with pytest.raises(InputError):
        segment_clip(_fake_cfp(10), np.zeros((321, 9)))


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------

def _segments(n=3, T=16):
    rng = np.random.default_rng(1)
    out = []
    for i in range(n):
        y = np.zeros((321, T), np.float32)
        y[rng.integers(0, 321, T), np.arange(T)] = 1
        out.append(TrainSegment(rng.random((320, T, 3)).astype(np.float32), y, f"c{i}", 0))
    return out


def test_lr_zero_leaves_params_bitwise_unchanged():
    before = init_params(ONE_BLOCK, 0)
    result = train(_segments(), ONE_BLOCK, epochs=3, lr=0.0, batch=2, seed=0)
    assert all(before[n].data.tobytes() == result.params[n].data.tobytes() for n in before)
    assert len(result.step_losses) == 6 and len(result.epoch_losses) == 3


def test_same_seed_same_history():
    a = train(_segments(), ONE_BLOCK, epochs=2, batch=2, seed=9)
    b = train(_segments(), ONE_BLOCK, epochs=2, batch=2, seed=9)
    assert a.step_losses == b.step_losses
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


def test_max_steps_stops_early():
    r = train(_segments(5), ONE_BLOCK, epochs=10, batch=2, seed=0, max_steps=4)
    assert len(r.step_losses) == 4


def test_empty_dataset_rejected():
    with pytest.raises(InputError):
        train([], ONE_BLOCK, epochs=1)


def test_nonfinite_loss_aborts():
    from ftanet.errors import TrainingError
    seg = _segments(1)[0]
    bad = TrainSegment(np.full_like(seg.input, np.nan), seg.target, "nan", 0)
    with pytest.raises(TrainingError, match="non-finite"):
        train([bad], ONE_BLOCK, epochs=1)


@pytest.mark.slow
def test_single_segment_overfit_halves_loss():
    spec = SynthSpec(seed=3, n_clips=1, duration_s=128 * HOP + 0.01)
    buf, f0 = synth_clip(np.random.default_rng(3), spec)
    cfp = compute_cfp(buf)
    idx = np.arange(0, len(buf), 256)
    y = encode_labels(MelodyContour(idx / 44100, f0[idx]), cfp.frame_times)
    seg = segment_clip(cfp, y)[:1]
    cfg = LayerConfig(n_blocks=3, widths=(8, 8, 8), mdb_widths=(4, 4, 4))
    r = train(seg, cfg, epochs=500, batch=1, seed=0)
    losses = r.step_losses
    assert len(losses) == 500
    assert losses[-1] <= 0.5 * losses[0]
    windows = [losses[i + 10] <= losses[i] for i in range(0, 490, 10)]
    assert np.mean(windows) >= 0.9


# ----------------------------------------------------------------------
# synthetic data and manifests
# ----------------------------------------------------------------------

def test_synth_pure_tone_peaks_at_440(tmp_path):
    spec = SynthSpec(seed=1, n_clips=1, duration_s=0.5, f0_range=(440.0, 440.0), vibrato_cents=0.0,
                     n_harmonics=1, noise_db=float("-inf"), unvoiced_fraction=0.0)
    entries = synth_dataset(spec, tmp_path)
    cfp = compute_cfp(load_wav(entries[0].wav_path))
    assert np.all(np.argmax(cfp.data[:, 8:-8, 0], axis=0) == 230)
    ann = read_contour(entries[0].annotation_path)
    np.testing.assert_allclose(ann.freqs, 440.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.5))
def test_synth_voicing_fraction(seed, frac):
    spec = SynthSpec(seed=seed, n_clips=1, duration_s=1.0, unvoiced_fraction=frac)
    _, f0 = synth_clip(np.random.default_rng(seed), spec)
    frames = f0[::256]
    assert abs(np.mean(frames == 0) - frac) <= 1.0 / frames.size * 4 + 1e-12
    voiced = f0[f0 > 0]
    assert voiced.size == 0 or (voiced.min() >= 31.0 and voiced.max() <= 1250.0)


def test_synth_is_byte_deterministic(tmp_path):
    spec = SynthSpec(seed=5, n_clips=2, duration_s=0.3, noise_db=-40.0)
    synth_dataset(spec, tmp_path / "a")
    synth_dataset(spec, tmp_path / "b")
    for name in ("clip_000.wav", "clip_000.txt", "clip_001.wav", "clip_001.txt", "manifest.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_spec_validation():
    with pytest.raises(InputError):
        SynthSpec(f0_range=(20.0, 400.0))
    with pytest.raises(InputError):
        SynthSpec(f0_range=(100.0, 1240.0), vibrato_cents=30.0)
    with pytest.raises(InputError):
        SynthSpec.from_dict({"seed": 1, "tempo": 120})


def test_synth_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InputError):
        synth_dataset(SynthSpec(n_clips=1, duration_s=0.1), blocker / "sub")


def test_manifest_roundtrip_and_repeat(tmp_path):
    entries = synth_dataset(SynthSpec(seed=2, n_clips=2, duration_s=0.8), tmp_path)
    back = read_manifest(tmp_path / "manifest.tsv")
    assert [e.wav_path for e in back] == [e.wav_path for e in entries]
    write_manifest(tmp_path / "m2.tsv", [ManifestEntry(entries[0].wav_path, entries[0].annotation_path, 3),
                                         ManifestEntry(entries[1].wav_path, entries[1].annotation_path, 0)])
    segs = segments_from_manifest(read_manifest(tmp_path / "m2.tsv"))
    n_frames = int(0.8 * 44100) // 256 + 1
    assert len(segs) == 3 * -(-n_frames // 128)


@pytest.mark.parametrize("line", ["a.wav\n", "a.wav\tb.txt\tx\n", "a.wav\tb.txt\t-1\n"])
def test_manifest_errors(tmp_path, line):
    p = tmp_path / "m.tsv"
    p.write_text(line)
    with pytest.raises(InputError, match="line 1"):
        read_manifest(p)
