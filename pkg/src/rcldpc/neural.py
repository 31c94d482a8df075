"""Unrolled rate-compatible neural BP / min-sum decoders.

Each decoding iteration becomes a VN sublayer (plain extrinsic sum) and a
CN sublayer carrying one weight and one bias per edge. The parameter
matrix has 2 rows per layer (weights, then biases) and one column per
edge in canonical order. Because active edges of every rate form a
prefix of that order, the columns split into nested blocks
``[W_1 | W_2 | ... | W_rmax]`` and the t-th highest rate reads only the
first t blocks.

``run_network`` records an optional tape; ``backward`` walks it in
reverse to produce exact gradients with these subgradient conventions:
min/max route to the selected input (ties to the lowest edge index),
signs are constants, ReLU'(0) = 0, and clips pass gradient only strictly
inside (-clip, clip).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .classic import CLIP, DecodeTrace, syndrome_check
from .code_model import RaptorLikeCode, TannerGraph

__all__ = [
    "ModelFileError",
    "NeuralDecoder",
    "NeuralDecoderConfig",
    "NetworkOutput",
    "ParameterMatrix",
    "activate",
    "backward",
    "c2v_update_nnbp",
    "c2v_update_nnms",
    "load_model",
    "run_network",
    "save_model",
    "sigmoid",
    "tie_parameters_pb",
]

VARIANTS = ("nnbp", "nnms")
TYINGS = ("edge", "pb")


class ModelFileError(ValueError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ParameterMatrix:
    """Weights and biases, shape (2 * L_max, F).

    Row ``2l`` holds the weights of layer ``l`` (0-based), row ``2l + 1`` its
    biases. Without tying F = E; with protograph tying F is the number of
    base-graph entries and ``edge_map`` sends every edge to its column.
    """

    values: np.ndarray
    block_boundaries: tuple[int, ...]
    edge_map: np.ndarray | None = None

    @classmethod
    def initial(cls, L_max: int, block_boundaries, edge_map=None) -> "ParameterMatrix":
        width = block_boundaries[-1]
        values = np.zeros((2 * L_max, width))
        values[0::2] = 1.0
        return cls(values, tuple(int(b) for b in block_boundaries), edge_map)

    @property
    def L_max(self) -> int:
        return self.values.shape[0] // 2

    @property
    def r_max(self) -> int:
        return len(self.block_boundaries)

    @property
    def tied(self) -> bool:
        return self.edge_map is not None

    @property
    def free_parameters(self) -> int:
        return self.values.size

    def expanded(self) -> np.ndarray:
        """Per-edge (2 L_max, E) matrix."""
        return self.values if self.edge_map is None else self.values[:, self.edge_map]

    def reduce_grad(self, grad: np.ndarray) -> np.ndarray:
        """Per-edge gradient -> gradient of the free parameters."""
        if self.edge_map is None:
            return grad
        width = self.values.shape[1]
        return np.stack([np.bincount(self.edge_map, weights=row, minlength=width) for row in grad])

    def copy(self) -> "ParameterMatrix":
        return ParameterMatrix(self.values.copy(), self.block_boundaries, self.edge_map)


def activate(params: ParameterMatrix, rate_index: int) -> np.ndarray:
    """Read-only view of blocks W_1..W_t for the t-th highest rate (0-based index)."""
    if not 0 <= rate_index < params.r_max:
        raise IndexError(f"rate index {rate_index} outside ladder of {params.r_max}")
    view = params.values[:, : params.block_boundaries[rate_index]]
    view.flags.writeable = False
    return view


def tie_parameters_pb(params: ParameterMatrix, edge_to_base: np.ndarray, base_boundaries) -> ParameterMatrix:
    """Share one scalar per (layer, w/b) among all lifted copies of a base edge.

    Each free column takes the value of the first edge mapped to it.
    """
    edge_to_base = np.asarray(edge_to_base, dtype=np.int64)
    if params.tied:
        raise ValueError("parameters are already tied")
    if len(edge_to_base) != params.values.shape[1]:
        raise ValueError(f"edge map has {len(edge_to_base)} entries for {params.values.shape[1]} edges")
    n_base = int(base_boundaries[-1])
    if edge_to_base.min() < 0 or edge_to_base.max() >= n_base:
        raise ValueError("edge map points outside the base entries")
    first = np.full(n_base, -1)
    for e in range(len(edge_to_base) - 1, -1, -1):
        first[edge_to_base[e]] = e
    if (first < 0).any():
        raise ValueError("some base entries have no edges")
    return ParameterMatrix(params.values[:, first].copy(), tuple(int(b) for b in base_boundaries), edge_to_base)


# ---------------------------------------------------------------- network


@dataclass
class _Layer:
    v: np.ndarray  # V after clip, (B, E)
    v_gate: np.ndarray  # |V| strictly inside clip and active
    c_pre: np.ndarray  # before the output clip
    c: np.ndarray
    extra: dict = field(default_factory=dict)


@dataclass
class Tape:
    graph: TannerGraph
    llr: np.ndarray
    weights: np.ndarray
    variant: str
    mask: np.ndarray | None
    clip: float
    layers: list[_Layer]
    pre_sigmoid: np.ndarray


@dataclass
class NetworkOutput:
    pre_sigmoid: np.ndarray  # (T, B, N)
    v2c: np.ndarray  # (T, B, E)
    c2v: np.ndarray
    tape: Tape | None = None

    @property
    def probs(self) -> np.ndarray:
        """Per-bit probability of a 1."""
        return sigmoid(-self.pre_sigmoid)


def _v2c(graph, llr, c2v, mask, clip):
    g = K.gather(c2v, graph.vn_slots, 0.0, mask)
    v = K.scatter(llr[:, :, None] + K.excl_sum(g), graph.edge_vn, graph.edge_vn_slot)
    gate = np.abs(v) < clip
    v = np.clip(v, -clip, clip)
    if mask is not None:
        v = np.where(mask, v, 0.0)
        gate &= mask
    return v, gate


def c2v_update_nnbp(graph: TannerGraph, v2c, w, b, edge_mask=None, clip: float = CLIP):
    """C = w * 2 atanh(prod tanh(V/2)) + b over the other active edges."""
    c_pre, _ = _nnbp(graph, v2c, w, b, edge_mask)
    c = np.clip(c_pre, -clip, clip)
    return c if edge_mask is None else np.where(edge_mask, c, 0.0)


def _nnbp(graph, v, w, b, mask):
    u, t, p = K.bp_check(K.gather(v, graph.cn_slots, np.inf, mask))
    u_e = K.scatter(u, graph.edge_cn, graph.edge_cn_slot)
    return w * u_e + b, dict(t=t, p=p, u=u_e)


def c2v_update_nnms(graph: TannerGraph, v2c, w, b, edge_mask=None, clip: float = CLIP):
    """C = prod sgn(V) * ReLU(min_e' w_e |V_e'| + b_e), w and b of the outgoing edge e."""
    c_pre, _ = _nnms(graph, v2c, w, b, edge_mask, clip)
    c = np.clip(c_pre, -clip, clip)
    return c if edge_mask is None else np.where(edge_mask, c, 0.0)


def _nnms(graph, v, w, b, mask, clip):
    vs = K.gather(v, graph.cn_slots, np.inf, mask)
    a = np.abs(vs)
    s = K.excl_prod(K.sgn(vs))
    w_s = np.concatenate([w, [1.0]])[graph.cn_slots]
    b_s = np.concatenate([b, [0.0]])[graph.cn_slots]
    # min of w|V| is w * min|V| for w >= 0 and w * max|V| for w < 0
    idx = K.excl_argmin(a)
    if (w_s < 0).any():
        i_max = K.excl_argmin(-np.where(np.isinf(a), -np.inf, a))
        idx = np.where(w_s >= 0, idx, i_max)
    sel = np.take_along_axis(a, idx, axis=-1)
    has_other = np.isfinite(sel)
    sel = np.where(has_other, sel, 0.0)
    z = np.where(has_other, w_s * sel + b_s, np.inf)
    r = np.maximum(z, 0.0)
    c_pre = K.scatter(s * r, graph.edge_cn, graph.edge_cn_slot)
    return c_pre, dict(vs=vs, s=s, idx=idx, sel=sel, z=z, has_other=has_other, w_s=w_s)


def run_network(
    graph: TannerGraph,
    llr,
    weights: np.ndarray,
    variant: str = "nnms",
    edge_mask=None,
    n_layers: int | None = None,
    clip: float = CLIP,
    record: bool = False,
) -> NetworkOutput:
    """Forward pass over ``n_layers`` (default: all) unrolled iterations.

    ``weights`` is the per-edge (2 L_max, E) matrix for ``graph``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    llr = np.asarray(llr, dtype=np.float64)
    llr = llr[None] if llr.ndim == 1 else llr
    if weights.shape[1] != graph.E:
        raise ValueError(f"parameter matrix has {weights.shape[1]} columns, graph has {graph.E} edges")
    L_max = weights.shape[0] // 2
    n_layers = L_max if n_layers is None else n_layers
    if not 1 <= n_layers <= L_max:
        raise ValueError(f"n_layers must lie in [1, {L_max}]")
    mask = None if edge_mask is None else np.asarray(edge_mask, dtype=bool)

    c = np.zeros((llr.shape[0], graph.E))
    pres, v2cs, c2vs, layers = [], [], [], []
    for l in range(n_layers):
        w, b = weights[2 * l], weights[2 * l + 1]
        v, v_gate = _v2c(graph, llr, c, mask, clip)
        if variant == "nnbp":
            c_pre, extra = _nnbp(graph, v, w, b, mask)
        else:
            c_pre, extra = _nnms(graph, v, w, b, mask, clip)
        c = np.clip(c_pre, -clip, clip)
        if mask is not None:
            c = np.where(mask, c, 0.0)
        pres.append(llr + K.seq_sum(K.gather(c, graph.vn_slots, 0.0, mask)))
        v2cs.append(v)
        c2vs.append(c)
        if record:
            layers.append(_Layer(v=v, v_gate=v_gate, c_pre=c_pre, c=c, extra=extra))

    out = NetworkOutput(pre_sigmoid=np.stack(pres), v2c=np.stack(v2cs), c2v=np.stack(c2vs))
    if record:
        out.tape = Tape(graph, llr, weights, variant, mask, clip, layers, out.pre_sigmoid)
    return out


def replay(tape: Tape) -> NetworkOutput:
    """Recompute the forward pass recorded on ``tape``."""
    return run_network(tape.graph, tape.llr, tape.weights, tape.variant, tape.mask, len(tape.layers), tape.clip)


def backward(tape: Tape, grad_pre_sigmoid: np.ndarray) -> np.ndarray:
    """Gradient of the per-edge parameter matrix, summed over the batch.

    ``grad_pre_sigmoid`` has shape (T, B, N) with one entry per recorded
    output head (zeros for heads outside the loss).
    """
    graph, mask, clip = tape.graph, tape.mask, tape.clip
    n_layers = len(tape.layers)
    grad_pre_sigmoid = np.asarray(grad_pre_sigmoid, dtype=np.float64)
    if grad_pre_sigmoid.shape != tape.pre_sigmoid.shape:
        raise ValueError(f"seed shape {grad_pre_sigmoid.shape} does not match tape {tape.pre_sigmoid.shape}")
    grad = np.zeros_like(tape.weights)
    g_c = np.zeros((tape.llr.shape[0], graph.E))

    for l in range(n_layers - 1, -1, -1):
        layer = tape.layers[l]
        w = tape.weights[2 * l]
        # output head: o_v = L_v + sum_e C_e
        g_c = g_c + grad_pre_sigmoid[l][:, graph.edge_vn]
        g_cp = g_c * (np.abs(layer.c_pre) < clip)
        if mask is not None:
            g_cp = np.where(mask, g_cp, 0.0)
        if tape.variant == "nnbp":
            gw, gb, g_v = _nnbp_backward(graph, layer, w, g_cp)
        else:
            gw, gb, g_v = _nnms_backward(graph, layer, g_cp)
        grad[2 * l] = gw
        grad[2 * l + 1] = gb
        # V = clip(L + sum over other edges of previous C)
        g_ext = np.where(layer.v_gate, g_v, 0.0)
        g_c = K.scatter(K.excl_sum(K.gather(g_ext, graph.vn_slots, 0.0)), graph.edge_vn, graph.edge_vn_slot)
    return grad


def _nnbp_backward(graph, layer, w, g_cp):
    t, p, u = layer.extra["t"], layer.extra["p"], layer.extra["u"]
    gw = (g_cp * u).sum(axis=0)
    gb = g_cp.sum(axis=0)
    g_u = K.gather(g_cp * w, graph.cn_slots, 0.0)
    lo, hi = -1.0 + K.ATANH_DELTA, 1.0 - K.ATANH_DELTA
    inside = (p > lo) & (p < hi)
    pc = np.clip(p, lo, hi)
    g_p = np.where(inside, g_u * 2.0 / (1.0 - pc * pc), 0.0)
    d = t.shape[-1]
    g_t = np.zeros_like(t)
    for j in range(d):
        t_j = t.copy()
        t_j[..., j] = 1.0
        q = K.excl_prod(t_j)  # products excluding both j and the output slot
        contrib = g_p * q
        contrib[..., j] = 0.0
        g_t[..., j] = K.seq_sum(contrib)
    g_vs = g_t * (1.0 - t * t) * 0.5
    return gw, gb, K.scatter(g_vs, graph.edge_cn, graph.edge_cn_slot)


def _nnms_backward(graph, layer, g_cp):
    x = layer.extra
    vs, s, idx, sel, z, has_other, w_s = x["vs"], x["s"], x["idx"], x["sel"], x["z"], x["has_other"], x["w_s"]
    g_cp_s = K.gather(g_cp, graph.cn_slots, 0.0)
    g_z = np.where(z > 0, g_cp_s * s, 0.0)
    g_z = np.where(has_other, g_z, 0.0)
    gb = K.scatter(g_z, graph.edge_cn, graph.edge_cn_slot).sum(axis=0)
    gw = K.scatter(g_z * sel, graph.edge_cn, graph.edge_cn_slot).sum(axis=0)
    g_sel = g_z * w_s
    d = vs.shape[-1]
    # route each slot's contribution to the slot it selected
    rows = np.arange(vs.size // d).reshape(vs.shape[:-1] + (1,)) * d
    g_a = np.bincount((rows + idx).ravel(), weights=g_sel.ravel(), minlength=vs.size).reshape(vs.shape)
    finite = np.isfinite(vs)
    g_vs = np.where(finite, g_a * np.sign(np.where(finite, vs, 0.0)), 0.0)
    return gw, gb, K.scatter(g_vs, graph.edge_cn, graph.edge_cn_slot)


# ---------------------------------------------------------------- decoder


@dataclass(frozen=True)
class NeuralDecoderConfig:
    variant: str = "nnms"
    tying: str = "edge"
    L_max: int = 5
    clip: float = CLIP

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.tying not in TYINGS:
            raise ValueError(f"tying must be one of {TYINGS}")
        if self.L_max < 1:
            raise ValueError("L_max must be >= 1")


def base_edge_map(code: RaptorLikeCode) -> tuple[np.ndarray, list[int]]:
    """Edge -> index of its base-graph entry, and per-rate active entry counts."""
    index = {(r, c): i for i, (r, c, _) in enumerate(code.base.entries)}
    Z = code.Z
    g = code.graph
    emap = np.array([index[(int(cn) // Z, int(vn) // Z)] for cn, vn in zip(g.edge_cn, g.edge_vn)], dtype=np.int64)
    bounds = [sum(1 for r, _, _ in code.base.entries if r < rb) for rb, _ in code.base.rate_boundaries]
    return emap, bounds


class NeuralDecoder:
    """A rate-compatible neural decoder bound to one code."""

    def __init__(self, code: RaptorLikeCode, config: NeuralDecoderConfig = NeuralDecoderConfig(), params=None):
        self.code = code
        self.config = config
        self.block_boundaries = [r.n_edges for r in code.ladder.rates]
        if params is None:
            params = ParameterMatrix.initial(config.L_max, self.block_boundaries)
            if config.tying == "pb":
                emap, bounds = base_edge_map(code)
                params = tie_parameters_pb(params, emap, bounds)
        if params.L_max != config.L_max:
            raise ValueError("parameter matrix depth does not match L_max")
        self.params = params

    @property
    def graph(self) -> TannerGraph:
        return self.code.graph

    def forward(self, llr, rate_index, n_layers=None, masked: bool = False, record: bool = False) -> NetworkOutput:
        """Run the network at ``rate_index``.

        By default the network is evaluated on the rate's subgraph using only
        blocks W_1..W_t. With ``masked`` (required when ``rate_index`` is a
        per-frame array) the full graph is used with inactive neurons forced
        to zero. Outputs always span all N variable nodes.
        """
        llr = np.asarray(llr, dtype=np.float64)
        llr = llr[None] if llr.ndim == 1 else llr
        ladder = self.code.ladder
        cfg = self.config
        if masked or np.ndim(rate_index):
            rate_index = np.asarray(rate_index)
            if rate_index.min() < 0 or rate_index.max() >= len(ladder):
                raise IndexError(f"rate index outside ladder of {len(ladder)}")
            mask = ladder.edge_masks[rate_index]
            return run_network(self.graph, llr, self.params.expanded(), cfg.variant, mask, n_layers, cfg.clip, record)
        if not 0 <= rate_index < len(ladder):
            raise IndexError(f"rate index {rate_index} outside ladder of {len(ladder)}")
        sub = ladder.subgraph(rate_index)
        weights = self.params.expanded()[:, : sub.E]
        out = run_network(sub, llr[:, : sub.N], weights, cfg.variant, None, n_layers, cfg.clip, record)
        return _pad_output(out, llr, self.graph.E)

    def decode(self, llr, rate_index, early_exit: bool = False) -> DecodeTrace:
        """DecodeTrace over all L_max layers (hard decision: prob of 1 > 0.5)."""
        llr = np.asarray(llr, dtype=np.float64)
        llr = llr[None] if llr.ndim == 1 else llr
        out = self.forward(llr, rate_index)
        entry = self.code.ladder[rate_index]
        mask = entry.active_edge_set
        soft = np.concatenate([llr[None], out.pre_sigmoid])
        hard = (soft < 0).astype(np.uint8)
        ok = np.stack([syndrome_check(self.graph, h, mask) for h in hard])
        used = np.full(llr.shape[0], self.config.L_max)
        decoded = hard[-1].copy()
        if early_exit:
            first = np.where(ok[1:].any(axis=0), ok[1:].argmax(axis=0) + 1, self.config.L_max)
            used = first
            decoded = hard[first, np.arange(llr.shape[0])]
        return DecodeTrace(soft=soft, hard=hard, syndrome_ok=ok, iterations_used=used, decoded=decoded)


def _pad_output(out: NetworkOutput, llr: np.ndarray, n_edges: int) -> NetworkOutput:
    T, B, n = out.pre_sigmoid.shape
    pre = np.broadcast_to(llr, (T,) + llr.shape).copy()
    pre[:, :, :n] = out.pre_sigmoid
    v2c = np.zeros((T, B, n_edges))
    c2v = np.zeros((T, B, n_edges))
    e = out.v2c.shape[-1]
    v2c[..., :e] = out.v2c
    c2v[..., :e] = out.c2v
    return NetworkOutput(pre_sigmoid=pre, v2c=v2c, c2v=c2v, tape=out.tape)


# ---------------------------------------------------------------- model files


def save_model(path, decoder: NeuralDecoder) -> None:
    p = decoder.params
    cfg = decoder.config
    lines = [
        "RCNN v1",
        f"variant {cfg.variant}",
        f"tying {cfg.tying}",
        f"L_max {cfg.L_max}",
        f"E {decoder.graph.E}",
        f"r_max {p.r_max}",
        "block_boundaries " + " ".join(str(b) for b in p.block_boundaries),
    ]
    if p.tied:
        lines.append(f"base_entries {p.values.shape[1]}")
    lines.append(f"code_fingerprint {decoder.graph.fingerprint()}")
    lines += [" ".join(format(float(x), ".17g") for x in row) for row in p.values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path, code: RaptorLikeCode) -> NeuralDecoder:
    """Read a model file; refuses files written for a different code."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "RCNN v1":
        raise ModelFileError(f"{path}: not an RCNN v1 model file")
    head = {}
    i = 1
    while i < len(lines) and lines[i].split() and lines[i].split()[0] in (
        "variant", "tying", "L_max", "E", "r_max", "block_boundaries", "base_entries", "code_fingerprint",
    ):
        key, *rest = lines[i].split()
        head[key] = rest
        i += 1
    try:
        cfg = NeuralDecoderConfig(variant=head["variant"][0], tying=head["tying"][0], L_max=int(head["L_max"][0]))
        n_edges = int(head["E"][0])
        bounds = tuple(int(x) for x in head["block_boundaries"])
        fingerprint = head["code_fingerprint"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise ModelFileError(f"{path}: malformed header ({exc})") from exc
    if fingerprint != code.graph.fingerprint() or n_edges != code.graph.E:
        raise ModelFileError(f"{path}: model was trained for a different code (fingerprint mismatch)")
    if len(bounds) != int(head["r_max"][0]):
        raise ModelFileError(f"{path}: r_max does not match block_boundaries")
    rows = [np.array([float(x) for x in ln.split()]) for ln in lines[i:] if ln.strip()]
    width = int(head["base_entries"][0]) if cfg.tying == "pb" else n_edges
    if len(rows) != 2 * cfg.L_max or any(len(r) != width for r in rows):
        raise ModelFileError(f"{path}: expected {2 * cfg.L_max} parameter rows of width {width}")
    values = np.stack(rows)
    emap = base_edge_map(code)[0] if cfg.tying == "pb" else None
    return NeuralDecoder(code, cfg, ParameterMatrix(values, bounds, emap))
