"""Flooding BP, min-sum and normalized min-sum decoders.

Every function works on a batch: LLRs are (B, N), messages (B, E). An
optional ``edge_mask`` of shape (E,) or (B, E) restricts decoding to the
active edges of a rate; masked edges carry exact zeros and are invisible
to every node update.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .code_model import TannerGraph

__all__ = [
    "CLIP",
    "DecodeTrace",
    "MessageState",
    "c2v_update_bp",
    "c2v_update_ms",
    "c2v_update_nms",
    "decode",
    "marginalize_and_decide",
    "syndrome_check",
    "v2c_update",
]

CLIP = 20.0
ALGORITHMS = ("bp", "ms", "nms")


@dataclass
class MessageState:
    v2c: np.ndarray
    c2v: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, batch: int, n_edges: int) -> "MessageState":
        z = np.zeros((batch, n_edges))
        return cls(v2c=z.copy(), c2v=z.copy())


@dataclass
class DecodeTrace:
    """Per-iteration record of a batched decode.

    Index 0 of ``soft``/``hard``/``syndrome_ok`` is the channel-only
    decision; index t is the state after iteration t.
    """

    soft: np.ndarray  # (T+1, B, N)
    hard: np.ndarray  # (T+1, B, N) uint8
    syndrome_ok: np.ndarray  # (T+1, B)
    iterations_used: np.ndarray  # (B,)
    decoded: np.ndarray  # (B, N)
    v2c: np.ndarray | None = None  # (T, B, E)
    c2v: np.ndarray | None = None

    @property
    def iterations_run(self) -> int:
        return self.soft.shape[0] - 1


def _as_batch(llr) -> np.ndarray:
    llr = np.asarray(llr, dtype=np.float64)
    return llr[None] if llr.ndim == 1 else llr


def _mask_for(mask, batch: int, n_edges: int):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n_edges:
        raise ValueError(f"edge mask has {mask.shape[-1]} entries, graph has {n_edges} edges")
    return mask


def v2c_update(graph: TannerGraph, llr: np.ndarray, c2v: np.ndarray, edge_mask=None, clip: float = CLIP) -> np.ndarray:
    """V = L_v + sum of C over the other active edges at v, clipped."""
    g = K.gather(c2v, graph.vn_slots, 0.0, edge_mask)
    v = llr[:, :, None] + K.excl_sum(g)
    v = np.clip(K.scatter(v, graph.edge_vn, graph.edge_vn_slot), -clip, clip)
    if edge_mask is not None:
        v = np.where(edge_mask, v, 0.0)
    return v


def c2v_update_bp(graph: TannerGraph, v2c: np.ndarray, edge_mask=None, clip: float = CLIP) -> np.ndarray:
    # inf is tanh-neutral: tanh(inf / 2) == 1
    vs = K.gather(v2c, graph.cn_slots, np.inf, edge_mask)
    u, _, _ = K.bp_check(vs)
    c = np.clip(K.scatter(u, graph.edge_cn, graph.edge_cn_slot), -clip, clip)
    return c if edge_mask is None else np.where(edge_mask, c, 0.0)


def _ms_magnitude_sign(graph: TannerGraph, v2c: np.ndarray, edge_mask, clip: float):
    vs = K.gather(v2c, graph.cn_slots, np.inf, edge_mask)
    a = np.abs(vs)
    s = K.excl_prod(K.sgn(vs))
    m = np.take_along_axis(a, K.excl_argmin(a), axis=-1)
    # a check with a single active edge saturates
    m = np.where(np.isinf(m), clip, m)
    return m, s


def c2v_update_ms(graph: TannerGraph, v2c: np.ndarray, edge_mask=None, clip: float = CLIP) -> np.ndarray:
    m, s = _ms_magnitude_sign(graph, v2c, edge_mask, clip)
    c = np.clip(K.scatter(s * m, graph.edge_cn, graph.edge_cn_slot), -clip, clip)
    return c if edge_mask is None else np.where(edge_mask, c, 0.0)


def c2v_update_nms(graph: TannerGraph, v2c: np.ndarray, alpha: float = 0.8, edge_mask=None, clip: float = CLIP) -> np.ndarray:
    m, s = _ms_magnitude_sign(graph, v2c, edge_mask, clip)
    c = np.clip(alpha * K.scatter(s * m, graph.edge_cn, graph.edge_cn_slot), -clip, clip)
    return c if edge_mask is None else np.where(edge_mask, c, 0.0)


def marginalize_and_decide(graph: TannerGraph, llr: np.ndarray, c2v: np.ndarray, edge_mask=None):
    """Full-sum marginal o_v and hard decision (o_v < 0 -> 1, ties -> 0)."""
    o = llr + K.seq_sum(K.gather(c2v, graph.vn_slots, 0.0, edge_mask))
    return o, (o < 0).astype(np.uint8)


def syndrome_check(graph: TannerGraph, bits: np.ndarray, edge_mask=None) -> np.ndarray:
    """True per frame iff every active check is satisfied."""
    bits = np.asarray(bits)
    if bits.ndim == 1:
        bits = bits[None]
    x = bits[:, graph.edge_vn].astype(np.int64)
    if edge_mask is not None:
        x = np.where(edge_mask, x, 0)
    par = K.seq_sum(K.gather(x, graph.cn_slots, 0)) & 1
    return ~par.any(axis=-1)


def decode(
    graph: TannerGraph,
    llr,
    algorithm: str = "bp",
    max_iter: int = 20,
    early_exit: bool = False,
    alpha: float = 0.8,
    edge_mask=None,
    clip: float = CLIP,
    keep_messages: bool = False,
) -> DecodeTrace:
    """Run a flooding decoder on a batch of LLR frames.

    ``algorithm`` is one of ``bp``, ``ms`` or ``nms`` (scaled by ``alpha``).
    With ``early_exit``, a frame stops at the first iteration whose hard
    decision satisfies all active checks; the loop ends when every frame
    has stopped.
    """
    algorithm = algorithm.lower()
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    llr = _as_batch(llr)
    batch = llr.shape[0]
    mask = _mask_for(edge_mask, batch, graph.E)

    state = MessageState.zeros(batch, graph.E)
    o, hard = marginalize_and_decide(graph, llr, state.c2v, mask)
    soft, hards = [o], [hard]
    ok = [syndrome_check(graph, hard, mask)]
    done = np.zeros(batch, dtype=bool)
    used = np.full(batch, max_iter)
    decided = hard.copy()
    v2cs, c2vs = [], []

    for it in range(1, max_iter + 1):
        state.v2c = v2c_update(graph, llr, state.c2v, mask, clip)
        if algorithm == "bp":
            state.c2v = c2v_update_bp(graph, state.v2c, mask, clip)
        elif algorithm == "ms":
            state.c2v = c2v_update_ms(graph, state.v2c, mask, clip)
        else:
            state.c2v = c2v_update_nms(graph, state.v2c, alpha, mask, clip)
        state.iteration = it
        o, hard = marginalize_and_decide(graph, llr, state.c2v, mask)
        sat = syndrome_check(graph, hard, mask)
        soft.append(o)
        hards.append(hard)
        ok.append(sat)
        if keep_messages:
            v2cs.append(state.v2c)
            c2vs.append(state.c2v)
        live = ~done
        decided[live] = hard[live]
        if early_exit:
            stop = live & sat
            used[stop] = it
            done |= stop
            if done.all():
                break

    return DecodeTrace(
        soft=np.stack(soft),
        hard=np.stack(hards),
        syndrome_ok=np.stack(ok),
        iterations_used=used,
        decoded=decided,
        v2c=np.stack(v2cs) if keep_messages else None,
        c2v=np.stack(c2vs) if keep_messages else None,
    )
