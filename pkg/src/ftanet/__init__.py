"""Singing melody extraction from polyphonic audio.

The pipeline runs WAV -> CFP features -> attention network -> salience map
-> melody contour. Everything, including the autodiff engine used for
training, is plain numpy.
"""
from .audio_io import AudioBuffer, load_wav, resample, write_wav
from .cfp import CfpTensor, LogFreqGrid, bin_to_hz, compute_cfp, hz_to_bin
from .evaluation import EvalReport, MelodyContour, decode_salience, evaluate, read_contour, write_contour
from .model import LayerConfig, forward, init_params, load_model, save_model
from .training import SynthSpec, synth_dataset, train

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "CfpTensor", "EvalReport", "LayerConfig", "LogFreqGrid", "MelodyContour",
    "SynthSpec", "bin_to_hz", "compute_cfp", "decode_salience", "evaluate", "forward",
    "hz_to_bin", "init_params", "load_model", "load_wav", "read_contour", "resample",
    "save_model", "synth_dataset", "train", "write_contour", "write_wav",
]
