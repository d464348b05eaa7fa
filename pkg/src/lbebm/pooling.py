"""History encoding and masked self-attention pooling across agents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError

MASK_FILL = -1e9


@dataclass
class PoolingMask:
    m: np.ndarray  # [n, n] of 0/1
    threshold_d: float


def min_pair_distances(past_raw: np.ndarray) -> np.ndarray:
    """[n, n] matrix of min_{t,s} |x_i^t - x_j^s| over all past step pairs."""
    past_raw = np.asarray(past_raw, dtype=np.float64)
    n, t, _ = past_raw.shape
    pts = past_raw.reshape(n * t, 2)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(-1)).reshape(n, t, n, t)
    return dist.min(axis=(1, 3))


def build_mask(past_raw: np.ndarray, d: float) -> PoolingMask:
    """Agents i and j attend to each other iff their past paths come within ``d``."""
    if d <= 0:
        raise ValueError("mask threshold d must be positive")
    m = (min_pair_distances(past_raw) <= d).astype(np.float64)
    return PoolingMask(m, float(d))


def identity_mask(n: int) -> PoolingMask:
    return PoolingMask(np.eye(n), 0.0)


def block_mask(masks) -> np.ndarray:
    """Block-diagonal union of per-scene masks; scenes never attend to each other."""
    sizes = [mk.m.shape[0] for mk in masks]
    out = np.zeros((sum(sizes), sum(sizes)))
    pos = 0
    for mk, n in zip(masks, sizes):
        out[pos : pos + n, pos : pos + n] = mk.m
        pos += n
    return out


def init_pooling_params(params, t_past, hidden, layers, dim, rng):
    params.init_mlp("past", [2 * t_past] + [hidden] * (layers - 1) + [dim], rng)
    for name in ("q", "k", "v", "out"):
        params.init_dense(f"pool.{name}", dim, dim, rng)
    # A key bias only shifts every logit in a row by q_i . b and cancels in the softmax.
    params.remove("pool.k.b")


def past_layer_names(params) -> list[str]:
    names = []
    k = 0
    while f"past.{k}.W" in params:
        names.append(f"past.{k}")
        k += 1
    return names


def encode_past(past_normalized, params, tape) -> nx.Node:
    """Flatten each agent's normalized history and run it through the encoder MLP."""
    past = np.asarray(past_normalized, dtype=np.float64)
    if past.ndim != 3 or past.shape[2] != 2:
        raise DimensionError(f"past must be [n, t_past, 2], got {past.shape}")
    return nx.mlp_forward(past.reshape(past.shape[0], -1), past_layer_names(params), params, tape)


def social_pool(x_enc: nx.Node, mask, params, tape) -> nx.Node:
    """Single-head scaled dot-product attention restricted by ``mask``.

    out_i = W_out (sum_j a_ij v_j + x_i) + b_out
    """
    m = mask.m if isinstance(mask, PoolingMask) else np.asarray(mask)
    n = x_enc.value.shape[0]
    if m.shape != (n, n):
        raise DimensionError(f"mask shape {m.shape} does not match {n} agents")
    q = nx.dense(x_enc, "pool.q", params, tape)
    k = nx.matmul(x_enc, tape.param(params, "pool.k.W"))
    v = nx.dense(x_enc, "pool.v", params, tape)
    scale = 1.0 / np.sqrt(q.value.shape[1])
    logits = nx.mul(nx.matmul(q, nx.transpose(k)), scale)
    attn = nx.masked_softmax(logits, m, MASK_FILL)
    mixed = nx.add(nx.matmul(attn, v), x_enc)
    return nx.dense(mixed, "pool.out", params, tape)


def attention_weights(x_enc_values, mask, params) -> np.ndarray:
    """Attention matrix for inspection; rows sum to one."""
    tape = nx.Tape()
    x = tape.input(x_enc_values)
    q = nx.dense(x, "pool.q", params, tape).value
    k = x_enc_values @ params.value("pool.k.W")
    m = mask.m if isinstance(mask, PoolingMask) else np.asarray(mask)
    logits = q @ k.T / np.sqrt(q.shape[1])
    return nx.masked_softmax(tape.input(logits), m, MASK_FILL).value
