"""The frequency-temporal attention network.

The bottom branch stacks ``n_blocks`` stages. Each stage lifts channels
with a 3x3 conv, runs the frequency-temporal attention module and merges
its outputs with the selective fusion module. A 1x1 conv then produces one
logit per (pitch bin, frame). The top branch, the melody detection branch,
downsamples the raw CFP input along frequency to a single non-melody logit
per frame. The two are stacked into an (F+1) x T map and normalised per
frame with a softmax; row F is the non-melody row.

All tensors are channels-last, ``(N, F, T, C)``; the single-example form
``(F, T, C)`` is accepted by the module-level functions as well.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .cfp import CfpTensor, DEFAULT_GRID
from .errors import ConfigError, InputError, ShapeError
from .tensor import ModelParams, Tensor

N_BINS = DEFAULT_GRID.n_bins
#: (kernel height, stride) of each melody-detection conv; 320 -> 80 -> 20 -> 5 -> 1
MDB_KERNELS = (4, 4, 4, 5)


@dataclass(frozen=True)
class LayerConfig:
    n_blocks: int = 3
    widths: tuple = (32, 64, 128)
    reduction: int = 4
    attn_depth: int = 2
    attn_kernel: int = 5
    mdb_widths: tuple = (32, 64, 128)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "mdb_widths", tuple(int(w) for w in self.mdb_widths))
        if self.n_blocks < 1 or len(self.widths) != self.n_blocks:
            raise ConfigError("widths must list one channel count per block")
        if any(w < 1 for w in self.widths + self.mdb_widths):
            raise ConfigError("channel widths must be positive")
        if len(self.mdb_widths) != len(MDB_KERNELS) - 1:
            raise ConfigError("mdb_widths needs three entries (the last layer has one channel)")
        if self.reduction < 1 or self.attn_depth < 1:
            raise ConfigError("reduction and attn_depth must be positive")
        if self.attn_kernel < 1 or self.attn_kernel % 2 == 0:
            raise ConfigError("attn_kernel must be a positive odd number")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["mdb_widths"] = list(self.mdb_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown layer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FtaOutput:
    E_f: Tensor
    E_t: Tensor
    A_f: Tensor
    A_t: Tensor


@dataclass
class SalienceMap:
    """Column-stochastic (F+1) x T map; row F is the non-melody row."""

    values: np.ndarray
    frame_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# ----------------------------------------------------------------------
# parameter initialisation
# ----------------------------------------------------------------------

def _conv_param(params, rng, name, kshape, dtype):
    *spatial, cin, cout = kshape
    field_size = int(np.prod(spatial))
    params[name + ".k"] = tn.glorot_uniform(rng, kshape, field_size * cin, field_size * cout, dtype)
    params[name + ".b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def _fc_param(params, rng, name, n_in, n_out, dtype):
    params[name + ".w"] = tn.glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype)
    params[name + ".b"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def init_fta_params(params, rng, prefix, c_in, c_out, cfg: LayerConfig, dtype=np.float32):
    K = cfg.attn_kernel
    for axis in ("freq", "time"):
        c = c_in
        for layer in range(cfg.attn_depth):
            _conv_param(params, rng, f"{prefix}.{axis}{layer}", (K, c, c_out), dtype)
            c = c_out
    _conv_param(params, rng, f"{prefix}.sf", (3, 3, c_in, c_out), dtype)
    _conv_param(params, rng, f"{prefix}.st", (5, 5, c_in, c_out), dtype)


def init_sfm_params(params, rng, prefix, channels, cfg: LayerConfig, dtype=np.float32):
    hidden = max(1, channels // cfg.reduction)
    _fc_param(params, rng, f"{prefix}.fc", channels, hidden, dtype)
    for head in ("s", "f", "t"):
        _fc_param(params, rng, f"{prefix}.head_{head}", hidden, channels, dtype)


def init_params(cfg: LayerConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng([seed, 0])
    params: ModelParams = {}
    c_prev = cfg.in_channels
    for i, c in enumerate(cfg.widths):
        p = f"block{i}"
        _conv_param(params, rng, f"{p}.lift", (3, 3, c_prev, c), dtype)
        init_fta_params(params, rng, f"{p}.fta", c, c, cfg, dtype)
        _conv_param(params, rng, f"{p}.sfm.proj", (1, 1, c, c), dtype)
        init_sfm_params(params, rng, f"{p}.sfm", c, cfg, dtype)
        c_prev = c
    _conv_param(params, rng, "out", (1, 1, c_prev, 1), dtype)
    c_prev = cfg.in_channels
    for layer, (kh, c) in enumerate(zip(MDB_KERNELS, cfg.mdb_widths + (1,))):
        _conv_param(params, rng, f"mdb{layer}", (kh, 1, c_prev, c), dtype)
        c_prev = c
    return params


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return {name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in params.items()}


# ----------------------------------------------------------------------
# network pieces
# ----------------------------------------------------------------------

def _attention_path(pooled: Tensor, params: ModelParams, prefix: str, depth: int) -> Tensor:
    h = pooled
    for layer in range(depth):
        if layer:
            h = tn.relu(h)
        h = tn.conv1d(h, params[f"{prefix}{layer}.k"], params[f"{prefix}{layer}.b"])
    # softmax over the pooled axis (frequency or time), per channel
    return tn.softmax(h, axis=-2)


def fta_module(S: Tensor, params: ModelParams, prefix: str = "fta",
               depth: int | None = None) -> FtaOutput:
    """Frequency-temporal attention on ``S`` of shape ``(..., F, T, C')``.

    The frequency attention map is a softmax over frequency of 1-D convs
    applied to the time-averaged input; the temporal map is the same along
    time. They rescale 3x3 and 5x5 conv features of ``S`` respectively.
    """
    if S.ndim not in (3, 4):
        raise ShapeError(f"fta_module expects (F, T, C) or (N, F, T, C), got {S.shape}")
    if depth is None:
        depth = 0
        while f"{prefix}.freq{depth}.k" in params:
            depth += 1
    A_f = _attention_path(tn.row_avg_pool(S), params, f"{prefix}.freq", depth)
    A_t = _attention_path(tn.col_avg_pool(S), params, f"{prefix}.time", depth)
    S_f = tn.conv2d(S, params[f"{prefix}.sf.k"], params[f"{prefix}.sf.b"])
    S_t = tn.conv2d(S, params[f"{prefix}.st.k"], params[f"{prefix}.st.b"])
    C = A_f.shape[-1]
    E_f = tn.mul(S_f, tn.reshape(A_f, A_f.shape[:-1] + (1, C)))
    E_t = tn.mul(S_t, tn.reshape(A_t, A_t.shape[:-2] + (1,) + A_t.shape[-2:]))
    return FtaOutput(E_f, E_t, A_f, A_t)


def sfm_weights(gamma: Tensor, params: ModelParams, prefix: str = "sfm") -> Tensor:
    """Branch weights ``(..., 3, C)`` for (S', E_f, E_t); softmax over the 3 branches."""
    g = tn.global_avg_pool(gamma)
    z = tn.relu(tn.linear(g, params[f"{prefix}.fc.w"], params[f"{prefix}.fc.b"]))
    heads = [tn.linear(z, params[f"{prefix}.head_{h}.w"], params[f"{prefix}.head_{h}.b"])
             for h in ("s", "f", "t")]
    return tn.softmax(tn.stack(heads, axis=-2), axis=-2)


def selective_fusion(S_prime: Tensor, E_f: Tensor, E_t: Tensor, params: ModelParams,
                     prefix: str = "sfm", return_weights: bool = False):
    """Fuse the three ``(..., F, T, C)`` inputs with learned channel weights."""
    if not (S_prime.shape == E_f.shape == E_t.shape):
        raise ShapeError(f"selective_fusion inputs differ: {S_prime.shape}, {E_f.shape}, {E_t.shape}")
    gamma = tn.add_n([S_prime, E_f, E_t])
    w = sfm_weights(gamma, params, prefix)
    C = w.shape[-1]
    bshape = w.shape[:-2] + (1, 1, C)
    parts = [tn.mul(x, tn.reshape(tn.index(w, i, axis=-2), bshape))
             for i, x in enumerate((S_prime, E_f, E_t))]
    out = tn.add_n(parts)
    return (out, w) if return_weights else out


def melody_detection_branch(S: Tensor, params: ModelParams, prefix: str = "mdb") -> Tensor:
    """Non-melody logits ``(..., 1, T)`` from the raw ``(..., 320, T, 3)`` input."""
    if S.ndim not in (3, 4) or S.shape[-3] != N_BINS:
        raise ShapeError(f"melody detection branch needs {N_BINS} frequency rows, got {S.shape}")
    h = S
    n_layers = len(MDB_KERNELS)
    for layer, kh in enumerate(MDB_KERNELS):
        h = tn.conv2d(h, params[f"{prefix}{layer}.k"], params[f"{prefix}{layer}.b"],
                      stride=(kh, 1))
        if layer < n_layers - 1:
            h = tn.relu(h)
    # (..., 1, T, 1) -> (..., 1, T)
    return tn.reshape(h, h.shape[:-1])


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, CfpTensor):
        x = x.data
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def forward_logits(x, params: ModelParams, cfg: LayerConfig) -> Tensor:
    """Pre-softmax (F+1) x T logits for input ``(..., 320, T, 3)``."""
    dtype = next(iter(params.values())).dtype
    S = _as_input(x, dtype)
    if S.ndim not in (3, 4) or S.shape[-3] != N_BINS or S.shape[-1] != cfg.in_channels:
        raise ShapeError(f"expected input (..., {N_BINS}, T, {cfg.in_channels}), got {S.shape}")
    h = S
    for i in range(cfg.n_blocks):
        p = f"block{i}"
        h = tn.relu(tn.conv2d(h, params[f"{p}.lift.k"], params[f"{p}.lift.b"]))
        fta = fta_module(h, params, f"{p}.fta", cfg.attn_depth)
        s_prime = tn.conv2d(h, params[f"{p}.sfm.proj.k"], params[f"{p}.sfm.proj.b"])
        h = selective_fusion(s_prime, fta.E_f, fta.E_t, params, f"{p}.sfm")
    pitch = tn.conv2d(h, params["out.k"], params["out.b"])
    pitch = tn.reshape(pitch, pitch.shape[:-1])          # (..., F, T)
    voicing = melody_detection_branch(S, params)          # (..., 1, T)
    return tn.concat([pitch, voicing], axis=-2)


def forward_tensor(x, params: ModelParams, cfg: LayerConfig) -> Tensor:
    """Column-softmaxed salience as a graph node (used for training)."""
    return tn.softmax(forward_logits(x, params, cfg), axis=-2)


def forward(cfp, params: ModelParams, cfg: LayerConfig, chunk: int | None = None) -> SalienceMap:
    """Salience map for a whole clip.

    With ``chunk`` set, frames are processed in independent windows of that
    many frames (the last one zero padded), matching how the network sees
    training segments.
    """
    frame_times = cfp.frame_times if isinstance(cfp, CfpTensor) else np.zeros(0)
    data = cfp.data if isinstance(cfp, CfpTensor) else np.asarray(cfp)
    dtype = next(iter(params.values())).dtype
    if data.ndim != 3:
        raise ShapeError(f"forward expects a (F, T, C) input, got {data.shape}")
    T = data.shape[1]
    if chunk is None:
        values = forward_tensor(data.astype(dtype), params, cfg).data
    else:
        n_chunks = -(-T // chunk)
        padded = np.zeros((data.shape[0], n_chunks * chunk, data.shape[2]), dtype=dtype)
        padded[:, :T] = data
        batch = padded.reshape(data.shape[0], n_chunks, chunk, data.shape[2]).transpose(1, 0, 2, 3)
        out = forward_tensor(np.ascontiguousarray(batch), params, cfg).data
        values = out.transpose(1, 0, 2).reshape(out.shape[1], n_chunks * chunk)[:, :T]
    return SalienceMap(np.ascontiguousarray(values), frame_times)


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def config_path(model_path) -> Path:
    model_path = Path(model_path)
    return model_path.with_name(model_path.name + ".json")


def save_model(params: ModelParams, cfg: LayerConfig, path: str | os.PathLike) -> None:
    """Write the parameter file and its ``.json`` layer-config sidecar."""
    tn.save_params(params, path)
    with open(config_path(path), "w") as fh:
        json.dump({"layer_cfg": cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str | os.PathLike) -> tuple[ModelParams, LayerConfig]:
    if not os.path.isfile(path):
        raise InputError(f"model not found: {os.fspath(path)}")
    params = tn.load_params(path)
    side = config_path(path)
    if not side.is_file():
        raise InputError(f"model config not found: {side}")
    with open(side) as fh:
        cfg = LayerConfig.from_dict(json.load(fh)["layer_cfg"])
    expected = init_params(cfg)
    if set(expected) != set(params) or any(expected[n].shape != params[n].shape for n in expected):
        raise ShapeError("model file does not match its layer config")
    return {name: params[name] for name in expected}, cfg
