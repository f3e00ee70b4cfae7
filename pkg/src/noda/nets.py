"""Dense tanh networks on top of :mod:`noda.diffcore`.

Parameters live in flat dicts keyed ``"<prefix>.layer<i>.weight"`` /
``"<prefix>.layer<i>.bias"``; weights are stored ``(fan_in, fan_out)`` so a
batch ``x`` of shape ``(B, fan_in)`` maps as ``x @ W + b``.
"""
import numpy as np

from .diffcore import Tensor, apply_op


def glorot_layer(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_mlp(rng, prefix, sizes):
    """Glorot-uniform weights, zero biases, for layer widths ``sizes``."""
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w, b = glorot_layer(rng, n_in, n_out)
        params[f"{prefix}.layer{i}.weight"] = w
        params[f"{prefix}.layer{i}.bias"] = b
    return params


def n_layers(params, prefix):
    n = 0
    while f"{prefix}.layer{n}.weight" in params:
        n += 1
    return n


def mlp(params, prefix, x, activation="tanh"):
    """Apply the network ``prefix`` to ``x``; the last layer is linear."""
    depth = n_layers(params, prefix)
    h = x
    for i in range(depth):
        h = apply_op("matmul", h, params[f"{prefix}.layer{i}.weight"])
        h = apply_op("add", h, params[f"{prefix}.layer{i}.bias"])
        if i < depth - 1:
            h = apply_op(activation, h)
    return h


def mlp_numpy(params, prefix, x):
    """Tape-free tanh forward pass on raw arrays (for acting and rollouts)."""
    depth = n_layers(params, prefix)
    h = x
    for i in range(depth):
        h = h @ params[f"{prefix}.layer{i}.weight"] + params[f"{prefix}.layer{i}.bias"]
        if i < depth - 1:
            h = np.tanh(h)
    return h


def count_params(params, prefixes=None):
    return int(sum(v.size for k, v in params.items()
                   if prefixes is None or k.split(".")[0] in prefixes))


def as_tensors(params):
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
