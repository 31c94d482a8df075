"""Batched message-passing primitives on padded node/slot layouts.

Messages live on edges as (B, E) arrays. For node-wise work they are
gathered into (B, nodes, D) slot arrays, where padding slots (and edges
masked out of the active rate) carry a neutral value. All reductions along
the slot axis are explicit sequential loops: inserting neutral elements
anywhere leaves every result bit-identical, which the rate-masking
equivalences rely on.
"""
from __future__ import annotations

import numpy as np

ATANH_DELTA = 1e-12


def gather(x: np.ndarray, slots: np.ndarray, fill: float, mask=None) -> np.ndarray:
    """(B, E) edge values -> (B, rows, D) slot values, neutral ``fill`` on pads."""
    if mask is not None:
        x = np.where(mask, x, fill)
    pad = np.full(x.shape[:-1] + (1,), fill, dtype=x.dtype)
    return np.concatenate([x, pad], axis=-1)[..., slots]


def scatter(y: np.ndarray, node: np.ndarray, slot: np.ndarray) -> np.ndarray:
    """(B, rows, D) slot values -> (B, E) in edge order."""
    return y[:, node, slot]


def seq_sum(g: np.ndarray) -> np.ndarray:
    acc = g[..., 0].copy()
    for k in range(1, g.shape[-1]):
        acc += g[..., k]
    return acc


def excl_sum(g: np.ndarray) -> np.ndarray:
    """Sum over all other slots, via prefix and suffix sums."""
    d = g.shape[-1]
    pre = np.zeros_like(g)
    suf = np.zeros_like(g)
    for k in range(1, d):
        pre[..., k] = pre[..., k - 1] + g[..., k - 1]
    for k in range(d - 2, -1, -1):
        suf[..., k] = suf[..., k + 1] + g[..., k + 1]
    return pre + suf


def excl_prod(t: np.ndarray) -> np.ndarray:
    """Product over all other slots, via prefix and suffix products."""
    d = t.shape[-1]
    pre = np.ones_like(t)
    suf = np.ones_like(t)
    for k in range(1, d):
        pre[..., k] = pre[..., k - 1] * t[..., k - 1]
    for k in range(d - 2, -1, -1):
        suf[..., k] = suf[..., k + 1] * t[..., k + 1]
    return pre * suf


def excl_argmin(a: np.ndarray) -> np.ndarray:
    """Index of the smallest *other* slot; ties go to the lowest slot.

    Needs at least two slots. When every other slot is +inf the result is
    one of those +inf slots, never the slot itself.
    """
    i1 = np.argmin(a, axis=-1)
    b = a.copy()
    np.put_along_axis(b, i1[..., None], np.inf, axis=-1)
    i2 = np.argmin(b, axis=-1)
    i2 = np.where(i2 == i1, (i1 + 1) % a.shape[-1], i2)
    k = np.arange(a.shape[-1])
    return np.where(k == i1[..., None], i2[..., None], i1[..., None])


def sgn(x: np.ndarray) -> np.ndarray:
    """Sign with sgn(0) = +1."""
    return np.where(x < 0, -1.0, 1.0)


def bp_check(v_slots: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tanh-rule extrinsic value per slot.

    Returns (u, t, P): u = 2 atanh(clamped P), t = tanh(V/2) and the raw
    exclusive product P. Padding slots must already hold t-neutral V (inf).
    """
    t = np.tanh(v_slots / 2.0)
    p = excl_prod(t)
    u = 2.0 * np.arctanh(np.clip(p, -1.0 + ATANH_DELTA, 1.0 - ATANH_DELTA))
    return u, t, p
