"""Finite-difference verification of the end-to-end training gradient."""

from __future__ import annotations

import numpy as np

from gacr.encoder import EncoderConfig, EncoderParams, assemble_single, assemble_target, init_params
from gacr.training import loss_and_grads

DEFAULT_CONFIG = EncoderConfig(vocab_size=20, num_layers=2, num_heads=2, model_dim=16,
                               ffn_dim=32, max_seq_len=24)
# Denominator floor. Key biases get an exactly-zero gradient (softmax is
# shift invariant) while central differences return round-off of ~1e-11.
ABS_FLOOR = 1e-6


def random_problem(config: EncoderConfig, seed: int, batch_size: int = 3):
    """Perturbed params plus a batch of random fused queries and targets."""
    rng = np.random.default_rng(seed)
    params = init_params(config)
    for name, arr in params.arrays.items():
        arr += rng.normal(0.0, 0.1, size=arr.shape)
    L = config.max_seq_len
    lo, hi = 4, config.vocab_size
    queries, targets = [], []
    for _ in range(batch_size):
        m = int(rng.integers(1, (L - 4) // 2 + 1))
        p = int(rng.integers(0, L - 4 - m + 1))
        queries.append(assemble_single(rng.integers(lo, hi, m).tolist(),
                                       rng.integers(lo, hi, p).tolist(), L, config.mask_type))
        targets.append(assemble_target(rng.integers(lo, hi, int(rng.integers(1, L - 1))).tolist(), L))
    return params, queries, targets


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


def grad_check(config: EncoderConfig = DEFAULT_CONFIG, seed: int = 0, num_probes: int = 200,
               eps: float = 1e-4, loss_form: str = "log", batch_size: int = 3) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Probes are parameter coordinates drawn uniformly over all parameters.
    """
    if num_probes <= 0:
        return 0.0
    params, queries, targets = random_problem(config, seed, batch_size)
    _, grads = loss_and_grads(params, queries, targets, loss_form)

    def loss_at(p: EncoderParams) -> float:
        return loss_and_grads(p, queries, targets, loss_form)[0]

    names = params.names()
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed + 1)
    flat_idx = rng.choice(offsets[-1], size=num_probes, replace=num_probes > offsets[-1])

    worst = 0.0
    for flat in flat_idx:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        coord = np.unravel_index(int(flat - offsets[which]), params[name].shape)
        arr = params.arrays[name]
        orig = arr[coord]
        arr[coord] = orig + eps
        up = loss_at(params)
        arr[coord] = orig - eps
        down = loss_at(params)
        arr[coord] = orig
        numeric = (up - down) / (2 * eps)
        worst = max(worst, relative_error(float(grads[name][coord]), numeric))
    return worst
