"""Shared builders for the model-level checks (unit tests and acceptance)."""
from __future__ import annotations

import numpy as np

from ftanet import tensor as tn
from ftanet.model import (LayerConfig, cast_params, fta_module, forward_tensor,
                          init_fta_params, init_params, init_sfm_params, selective_fusion,
                          sfm_weights)
from ftanet.tensor import Tensor

from oracles import fta_reference, relative_error, sfm_reference, smooth_side_difference

TINY = LayerConfig(n_blocks=3, widths=(4, 4, 4), mdb_widths=(4, 4, 4))


def _randomise(params, rng, scale=0.8):
    """Replace every tensor (biases too) with fresh f64 normal draws."""
    return {n: Tensor(rng.normal(scale=scale, size=t.shape), requires_grad=True)
            for n, t in params.items()}


def random_fta_case(rng):
    """Random small (S, params) for the attention/fusion equation oracles."""
    F, T = (int(v) for v in rng.integers(1, 9, size=2))
    C = int(rng.integers(1, 5))
    depth = int(rng.integers(1, 3))
    K = int(rng.choice([1, 3, 5]))
    cfg = LayerConfig(n_blocks=1, widths=(C,), mdb_widths=(1, 1, 1), attn_depth=depth,
                      attn_kernel=K, reduction=int(rng.integers(1, 3)))
    params = {}
    init_fta_params(params, np.random.default_rng(0), "fta", C, C, cfg, np.float64)
    init_sfm_params(params, np.random.default_rng(0), "sfm", C, cfg, np.float64)
    params = _randomise(params, rng)
    S = rng.normal(size=(F, T, C))
    S_prime = rng.normal(size=(F, T, C))
    return S, S_prime, params, depth


def fta_sfm_errors(rng):
    """Max abs deviation of fta_module / selective_fusion from the loop oracles."""
    S, S_prime, params, depth = random_fta_case(rng)
    got = fta_module(Tensor(S), params, "fta", depth)
    E_f, E_t, A_f, A_t = fta_reference(S, {k: v.data for k, v in params.items()}, "fta", depth)
    fta_err = max(np.max(np.abs(got.E_f.data - E_f)), np.max(np.abs(got.E_t.data - E_t)),
                  np.max(np.abs(got.A_f.data - A_f)), np.max(np.abs(got.A_t.data - A_t)))
    out, w = selective_fusion(Tensor(S_prime), Tensor(E_f), Tensor(E_t), params, "sfm",
                              return_weights=True)
    ref_out, ref_w = sfm_reference(S_prime, E_f, E_t, {k: v.data for k, v in params.items()})
    sfm_err = max(np.max(np.abs(out.data - ref_out)), np.max(np.abs(w.data - ref_w)))
    return fta_err, sfm_err


def normalisation_sums(rng, T=16, cfg=TINY):
    """Column sums of A_f, A_t, the SFM weights and the salience for one parameter draw.

    Returns the largest deviation from 1 for each of the four.
    """
    params = init_params(cfg, int(rng.integers(2**31)), dtype=np.float32)
    params = {n: Tensor((t.data + rng.normal(scale=0.3, size=t.shape)).astype(np.float32),
                        requires_grad=True) for n, t in params.items()}
    x = Tensor(rng.random((320, T, 3)).astype(np.float32))
    dev = {"A_f": 0.0, "A_t": 0.0, "sfm": 0.0, "salience": 0.0}
    h = x
    for i in range(cfg.n_blocks):
        p = f"block{i}"
        h = tn.relu(tn.conv2d(h, params[f"{p}.lift.k"], params[f"{p}.lift.b"]))
        fta = fta_module(h, params, f"{p}.fta", cfg.attn_depth)
        s_prime = tn.conv2d(h, params[f"{p}.sfm.proj.k"], params[f"{p}.sfm.proj.b"])
        gamma = tn.add_n([s_prime, fta.E_f, fta.E_t])
        w = sfm_weights(gamma, params, f"{p}.sfm")
        dev["A_f"] = max(dev["A_f"], np.max(np.abs(fta.A_f.data.sum(axis=0) - 1)))
        dev["A_t"] = max(dev["A_t"], np.max(np.abs(fta.A_t.data.sum(axis=0) - 1)))
        dev["sfm"] = max(dev["sfm"], np.max(np.abs(w.data.sum(axis=0) - 1)))
        h = selective_fusion(s_prime, fta.E_f, fta.E_t, params, f"{p}.sfm")
    sal = forward_tensor(x, params, cfg).data
    dev["salience"] = float(np.max(np.abs(sal.sum(axis=0) - 1)))
    return dev


def end_to_end_gradient_errors(seed, n_params=50, cfg=TINY, frames=8):
    """f32 analytic BCE gradient vs f64 finite differences on random parameters.

    Gradients smaller than 1e-5 of the largest one are compared against
    that floor instead of themselves (they sit at f32 round-off level).
    """
    rng = np.random.default_rng(seed)
    x = rng.random((320, frames, 3))
    y = np.zeros((321, frames))
    y[rng.integers(0, 321, frames), np.arange(frames)] = 1.0
    params = init_params(cfg, seed, dtype=np.float32)
    loss = tn.bce_loss(forward_tensor(x.astype(np.float32), params, cfg), y.astype(np.float32))
    tn.backward(loss)
    p64 = cast_params(params, np.float64)

    def f():
        return float(tn.bce_loss(forward_tensor(x, p64, cfg), y).data)

    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names], dtype=np.float64)
    gmax = max(float(np.max(np.abs(params[n].grad))) for n in names)
    errs = []
    for _ in range(n_params):
        j = int(rng.choice(len(names), p=sizes / sizes.sum()))
        name = names[j]
        idx = np.unravel_index(int(rng.integers(sizes[j])), params[name].shape)
        numeric = smooth_side_difference(f, p64[name].data, idx)
        errs.append(relative_error(params[name].grad[idx], numeric, floor=1e-5 * gmax))
    return errs


def random_contour_pair(rng):
    """Random (ref, est) frequency arrays with a share of near-hits and octave errors."""
    n = int(rng.integers(1, 65))
    ref = np.where(rng.random(n) < 0.6, rng.uniform(50, 1000, n), 0.0)
    est = rng.uniform(50, 1000, n)
    # about a third of estimates land near the reference or an octave of it
    near = rng.random(n) < 0.35
    base = np.where(ref > 0, ref, 200.0)
    est = np.where(near, base * 2.0 ** (rng.integers(-1, 2, n) + rng.normal(scale=0.03, size=n)), est)
    sign = rng.choice([1.0, -1.0, 0.0], size=n, p=[0.6, 0.3, 0.1])
    return ref, sign * est
