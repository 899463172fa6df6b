"""Melody extraction from the command line: synth, cfp, train, extract, evaluate.

Exit codes: 0 success, 1 internal error, 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cfp as cfp_mod
from .audio_io import load_wav, resample
from .errors import ConfigError, InputError
from .evaluation import EvalReport, decode_salience, evaluate_files, write_contour
from .model import LayerConfig, SalienceMap, config_path, forward, load_model, save_model
from .training import SEGMENT_FRAMES, SynthSpec, read_manifest, segments_from_manifest, synth_dataset, train

log = logging.getLogger("ftanet")


@dataclass
class RunConfig:
    sample_rate: int = cfp_mod.SAMPLE_RATE
    window: int = cfp_mod.WINDOW
    hop: int = cfp_mod.HOP
    n_fft: int = cfp_mod.CFP_NFFT
    f_min: float = 31.0
    f_max: float = 1250.0
    bins_per_octave: int = 60
    n_bins: int = 320
    gammas: list = field(default_factory=lambda: list(cfp_mod.DEFAULT_GAMMAS))
    freq_hp: float = cfp_mod.DEFAULT_CUTOFFS[0]
    quef_hp: float = cfp_mod.DEFAULT_CUTOFFS[1]
    layer_cfg: dict = field(default_factory=lambda: LayerConfig().to_dict())
    lr: float = 1e-4
    epochs: int = 100
    max_steps: int | None = None
    batch: int = 8
    seed: int = 0

    FEATURE_KEYS = ("sample_rate", "window", "hop", "n_fft", "f_min", "f_max",
                    "bins_per_octave", "n_bins", "gammas", "freq_hp", "quef_hp")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sample_rate != cfp_mod.SAMPLE_RATE:
            raise ConfigError(f"sample_rate must be {cfp_mod.SAMPLE_RATE}")
        if self.n_bins != 320:
            raise ConfigError("n_bins must be 320 (the melody detection branch downsamples 320 -> 1)")
        if self.window < 2 or self.hop < 1 or self.n_fft < self.window:
            raise ConfigError("need window >= 2, hop >= 1 and n_fft >= window")
        if len(self.gammas) != 3 or any(g <= 0 for g in self.gammas):
            raise ConfigError("gammas must be three positive numbers")
        if self.freq_hp < 0 or self.quef_hp < 0:
            raise ConfigError("cutoffs must be nonnegative")
        if not self.lr >= 0 or self.epochs < 0 or self.batch < 1:
            raise ConfigError("need lr >= 0, epochs >= 0, batch >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        self.layer()
        self.grid()

    def layer(self) -> LayerConfig:
        return LayerConfig.from_dict(self.layer_cfg)

    def grid(self) -> cfp_mod.LogFreqGrid:
        try:
            return cfp_mod.LogFreqGrid(self.n_bins, self.bins_per_octave, self.f_min, self.f_max)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def features(self) -> dict:
        return {k: getattr(self, k) for k in self.FEATURE_KEYS}

    def cfp_kwargs(self) -> dict:
        return dict(gammas=tuple(self.gammas), cutoffs=(self.freq_hp, self.quef_hp),
                    window=self.window, hop=self.hop, n_fft=self.n_fft,
                    sample_rate=self.sample_rate)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = asdict(base)
        merged.update(d)
        if "layer_cfg" in d:
            layer = LayerConfig().to_dict()
            layer.update(d["layer_cfg"])
            merged["layer_cfg"] = layer
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {os.fspath(path)!r}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    overrides = {}
    for key in ("seed", "epochs", "max_steps", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        d = asdict(cfg)
        d.update(overrides)
        cfg = RunConfig.from_dict(d)
    return cfg


def _features_from_sidecar(model_path) -> RunConfig:
    with open(config_path(model_path)) as fh:
        side = json.load(fh)
    return RunConfig.from_dict(side.get("features", {}))


def extract_contour(wav_path, model_path):
    """Run the full pipeline on one file; returns (contour, salience map)."""
    params, layer = load_model(model_path)
    feats = _features_from_sidecar(model_path)
    grid = feats.grid()
    buf = resample(load_wav(wav_path), feats.sample_rate)
    cfp = cfp_mod.compute_cfp(buf, grid, **feats.cfp_kwargs())
    sal = forward(cfp, params, layer, chunk=SEGMENT_FRAMES)
    return decode_salience(sal, grid), sal


def write_salience_png(sal: SalienceMap, path, strip_height: int = 8) -> None:
    """Heatmap with log-magnitude colours, time left to right, pitch bottom to top.

    The non-melody row is drawn as a separate strip above the pitch rows.
    """
    from matplotlib import colormaps
    from PIL import Image

    values = np.log10(np.maximum(sal.values, 1e-6))
    norm = (values + 6.0) / 6.0
    cmap = colormaps["magma"]
    pitch = cmap(norm[:-1][::-1])[..., :3]
    strip = np.repeat(cmap(norm[-1:])[..., :3], strip_height, axis=0)
    gap = np.ones((2, norm.shape[1], 3))
    rgb = np.concatenate([strip, gap, pitch], axis=0)
    Image.fromarray((rgb * 255).round().astype(np.uint8)).save(path, format="PNG")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        with open(args.spec) as fh:
            spec_dict = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read synth spec {args.spec!r}: {exc}") from exc
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    entries = synth_dataset(spec, args.out)
    print(f"wrote {len(entries)} clips to {args.out}")
    return 0


def cmd_cfp(args) -> int:
    cfg = _config(args)
    buf = resample(load_wav(args.wav), cfg.sample_rate)
    cfp = cfp_mod.compute_cfp(buf, cfg.grid(), **cfg.cfp_kwargs())
    cfp_mod.save_cfp(cfp, args.out)
    print(f"wrote {cfp.data.shape[0]}x{cfp.data.shape[1]}x{cfp.data.shape[2]} CFP to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    entries = read_manifest(args.manifest)
    if not entries:
        raise InputError(f"manifest {args.manifest!r} lists no clips")
    layer = cfg.layer()
    segments = segments_from_manifest(entries, cfg.grid(), **cfg.cfp_kwargs())
    log.info("training on %d segments from %d clips", len(segments), len(entries))

    def progress(step, loss):
        if step % 50 == 0:
            log.info("step %d loss %.6f", step, loss)

    result = train(segments, layer, cfg.epochs, lr=cfg.lr, batch=cfg.batch, seed=cfg.seed,
                   max_steps=cfg.max_steps, callback=progress)
    save_model(result.params, layer, args.out)
    side = config_path(args.out)
    with open(side) as fh:
        meta = json.load(fh)
    meta["features"] = cfg.features()
    with open(side, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(str(args.out) + ".loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(result.epoch_losses):
            fh.write(f"{i},{loss:.8f}\n")
    with open(str(args.out) + ".steps.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(result.step_losses, start=1):
            fh.write(f"{i},{loss:.8f}\n")
    final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"trained {len(result.step_losses)} steps, final epoch loss {final:.6f}; model -> {args.out}")
    return 0


def cmd_extract(args) -> int:
    if not os.path.isfile(args.model):
        raise InputError(f"model not found: {args.model}")
    contour, sal = extract_contour(args.wav, args.model)
    write_contour(args.out, contour)
    if args.salience:
        write_salience_png(sal, args.salience)
    n_voiced = int(contour.voiced.sum())
    print(f"{len(contour)} frames, {n_voiced} voiced -> {args.out}")
    return 0


def _report_line(report: EvalReport, label: str | None = None) -> str:
    line = report.format_percent()
    return f"{label}\t{line}" if label else line


def _mean_report(reports: list[EvalReport]) -> EvalReport:
    return EvalReport(
        *(float(np.mean([getattr(r, k) for r in reports])) for k in ("oa", "rpa", "rca", "vr", "vfa")),
        n_frames=sum(r.n_frames for r in reports),
        n_ref_voiced=sum(r.n_ref_voiced for r in reports),
        n_ref_unvoiced=sum(r.n_ref_unvoiced for r in reports),
    )


def cmd_evaluate(args) -> int:
    ref, est = Path(args.ref), Path(args.est)
    if ref.is_dir() != est.is_dir():
        raise InputError("ref and est must both be files or both be directories")
    if ref.is_dir():
        names = sorted(p.name for p in est.glob("*.txt") if (ref / p.name).is_file())
        if not names:
            raise InputError(f"no matching .txt contour files in {ref} and {est}")
        reports = []
        for name in names:
            r = evaluate_files(ref / name, est / name)
            reports.append(r)
            print(_report_line(r, name))
        report = _mean_report(reports)
        print(_report_line(report, "mean"))
    else:
        report = evaluate_files(ref, est)
        print(_report_line(report))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("spec", help="synth spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cfp", help="compute and dump CFP features")
    p.add_argument("wav")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_cfp)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract the melody of a WAV file")
    p.add_argument("wav")
    p.add_argument("model")
    p.add_argument("--out", required=True, help="contour file to write")
    p.add_argument("--salience", help="optional PNG heatmap of the salience map")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score an estimated contour against a reference")
    p.add_argument("ref")
    p.add_argument("est")
    p.add_argument("--out", help="JSON report to write")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
