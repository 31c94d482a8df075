"""Raptor-like quasi-cyclic LDPC codes.

A code is described by a protograph base graph whose rows split into a
high-rate precode and a run of extension rows. Every extension row brings
exactly one new degree-1 column, which gives a ladder of nested rates:
the highest rate uses only the precode, lower rates append extension rows.

Lifting expands each base entry into a Z x Z cyclically shifted identity.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "BaseGraph",
    "BaseGraphError",
    "Codeword",
    "LiftedParityCheck",
    "RateEntry",
    "RateLadder",
    "RaptorLikeCode",
    "TannerGraph",
    "build_tanner",
    "derive_rate_ladder",
    "edge_counts",
    "lift",
    "load_code",
    "parse_base_graph",
    "syndrome",
]


class BaseGraphError(ValueError):
    """Invalid base-graph description. ``line`` is 1-based, or None."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class BaseGraph:
    rows: int
    cols: int
    entries: tuple[tuple[int, int, int], ...]
    info_cols: int
    precode_rows: int
    rate_boundaries: tuple[tuple[int, int], ...]
    # per boundary: number of transmitted bits, or None for "all available"
    transmitted: tuple[int | None, ...] = ()
    punctured_cols: int = 0
    lifting: int | None = None

    def __post_init__(self):
        if not self.transmitted:
            object.__setattr__(self, "transmitted", (None,) * len(self.rate_boundaries))
        _validate(self, {})

    @property
    def column_degrees(self) -> np.ndarray:
        deg = np.zeros(self.cols, dtype=int)
        for _, c, _ in self.entries:
            deg[c] += 1
        return deg

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.rows, self.cols), dtype=np.uint8)
        for r, c, _ in self.entries:
            a[r, c] = 1
        return a


def _validate(bg: BaseGraph, lines: dict) -> None:
    """Check the structural invariants; ``lines`` maps items to source lines."""
    kb, p = bg.info_cols, bg.precode_rows
    if bg.rows <= 0 or bg.cols <= 0:
        raise BaseGraphError("base graph must have positive dimensions", lines.get("header"))
    if not 0 < kb < bg.cols:
        raise BaseGraphError("info_cols must lie in [1, cols)", lines.get("header"))
    if not 0 < p <= bg.rows:
        raise BaseGraphError("precode_rows must lie in [1, rows]", lines.get("header"))
    if bg.cols != kb + bg.rows:
        raise BaseGraphError(
            f"raptor-like graph needs cols == info_cols + rows, got {bg.cols} != {kb} + {bg.rows}",
            lines.get("header"),
        )
    if not 0 <= bg.punctured_cols < kb:
        raise BaseGraphError("punctured columns must be fewer than info columns", lines.get("punct"))

    seen = set()
    for r, c, s in bg.entries:
        ln = lines.get((r, c))
        if not (0 <= r < bg.rows and 0 <= c < bg.cols):
            raise BaseGraphError(f"entry ({r}, {c}) outside {bg.rows}x{bg.cols}", ln)
        if s < 0:
            raise BaseGraphError(f"negative shift {s} at ({r}, {c})", ln)
        if (r, c) in seen:
            raise BaseGraphError(f"duplicate entry ({r}, {c})", ln)
        seen.add((r, c))

    deg = bg.column_degrees
    if np.any(deg == 0):
        raise BaseGraphError(f"column {int(np.argmin(deg))} has no entries")
    by_row: dict[int, list[int]] = {r: [] for r in range(bg.rows)}
    for r, c, _ in bg.entries:
        by_row[r].append(c)
    for r in range(bg.rows):
        tail = [c for c in by_row[r] if c >= kb + p]
        if r < p:
            if tail:
                raise BaseGraphError(
                    f"precode row {r} touches extension column {tail[0]}", lines.get((r, tail[0]))
                )
            continue
        if tail != [kb + r]:
            raise BaseGraphError(
                f"extension row {r} must connect exactly one new column ({kb + r}), got {sorted(tail)}",
                lines.get((r, tail[0])) if tail else None,
            )
        if deg[kb + r] != 1:
            other = next((rr, c) for rr, c, _ in bg.entries if c == kb + r and rr != r)
            raise BaseGraphError(f"column {kb + r} of extension row {r} is not degree 1", lines.get(other))

    if not bg.rate_boundaries:
        raise BaseGraphError("no rate boundaries", lines.get("rates"))
    if len(bg.transmitted) != len(bg.rate_boundaries):
        raise BaseGraphError("one transmitted count is needed per rate boundary", lines.get("rates"))
    prev = (0, 0)
    for i, (rb, cb) in enumerate(bg.rate_boundaries):
        ln = lines.get(("rate", i))
        if rb <= prev[0] or cb <= prev[1]:
            raise BaseGraphError("rate boundaries must increase strictly in rows and cols", ln)
        if rb < p or cb != kb + rb:
            raise BaseGraphError(
                f"boundary ({rb}, {cb}) must cover the precode and satisfy cols == info_cols + rows", ln
            )
        prev = (rb, cb)
    if prev != (bg.rows, bg.cols):
        raise BaseGraphError("last rate boundary must equal the full base graph", lines.get(("rate", len(bg.rate_boundaries) - 1)))


def parse_base_graph(text: str) -> BaseGraph:
    """Parse the text base-graph format.

    ``BG <rows> <cols> <info_cols> <precode_rows>`` comes first. A
    ``RATES <count>`` line is followed by ``count`` lines
    ``<rows_used> <cols_used> [<transmitted>|*]``, highest rate first; a bare
    ``RATES`` section instead runs until an ``ENTRIES`` line. Every other
    line is an entry ``<row> <col> <shift>``. Optional directives
    ``PUNCTURED <cols>`` and ``LIFT <Z>`` may appear anywhere. A shift of -1
    marks an absent entry and ``#`` starts a comment.
    """
    header = None
    lines: dict = {}
    entries: list[tuple[int, int, int]] = []
    boundaries: list[tuple[int, int]] = []
    transmitted: list[int | None] = []
    punctured = 0
    lifting = None
    rate_lines_left = 0  # -1: open-ended section

    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        key = tokens[0].upper()
        try:
            if header is None:
                if key != "BG" or len(tokens) != 5:
                    raise BaseGraphError("expected header 'BG <rows> <cols> <info_cols> <precode_rows>'", lineno)
                header = tuple(int(t) for t in tokens[1:])
                lines["header"] = lineno
            elif key == "RATES":
                if boundaries:
                    raise BaseGraphError("RATES given twice", lineno)
                rate_lines_left = int(tokens[1]) if len(tokens) > 1 else -1
                lines["rates"] = lineno
            elif key == "ENTRIES":
                rate_lines_left = 0
            elif key == "PUNCTURED":
                punctured = int(tokens[1])
                lines["punct"] = lineno
            elif key == "LIFT":
                lifting = int(tokens[1])
                if lifting <= 0:
                    raise BaseGraphError("LIFT must be positive", lineno)
            elif rate_lines_left:
                if len(tokens) not in (2, 3):
                    raise BaseGraphError("rate line needs <rows_used> <cols_used> [<transmitted>]", lineno)
                lines[("rate", len(boundaries))] = lineno
                boundaries.append((int(tokens[0]), int(tokens[1])))
                transmitted.append(int(tokens[2]) if len(tokens) == 3 and tokens[2] != "*" else None)
                rate_lines_left -= 1 if rate_lines_left > 0 else 0
            elif len(tokens) == 3:
                r, c, s = (int(t) for t in tokens)
                if s == -1:
                    continue
                if (r, c) in lines:
                    raise BaseGraphError(f"duplicate entry ({r}, {c})", lineno)
                lines[(r, c)] = lineno
                entries.append((r, c, s))
            else:
                raise BaseGraphError(f"unrecognised line {raw.strip()!r}", lineno)
        except (ValueError, IndexError) as exc:
            if isinstance(exc, BaseGraphError):
                raise
            raise BaseGraphError(f"malformed line {raw.strip()!r}", lineno) from exc

    if header is None:
        raise BaseGraphError("missing BG header")
    if rate_lines_left > 0:
        raise BaseGraphError(f"RATES section is missing {rate_lines_left} line(s)", lines.get("rates"))
    rows, cols, kb, p = header
    if not boundaries:
        boundaries, transmitted = [(rows, cols)], [None]

    # bypass __post_init__ so that errors carry line numbers
    bg = object.__new__(BaseGraph)
    for name, value in dict(
        rows=rows, cols=cols, entries=tuple(sorted(entries)), info_cols=kb, precode_rows=p,
        rate_boundaries=tuple(boundaries), transmitted=tuple(transmitted),
        punctured_cols=punctured, lifting=lifting,
    ).items():
        object.__setattr__(bg, name, value)
    _validate(bg, lines)
    return bg


@dataclass(frozen=True, eq=False)
class LiftedParityCheck:
    """Sparse binary H stored as sorted column indices per row."""

    Z: int
    m: int
    n: int
    rows: tuple[np.ndarray, ...]

    @property
    def popcount(self) -> int:
        return sum(len(r) for r in self.rows)

    def to_dense(self) -> np.ndarray:
        h = np.zeros((self.m, self.n), dtype=np.uint8)
        for i, cols in enumerate(self.rows):
            h[i, cols] = 1
        return h

    @classmethod
    def from_dense(cls, h) -> "LiftedParityCheck":
        h = np.asarray(h)
        if h.ndim != 2 or not np.isin(h, (0, 1)).all():
            raise ValueError("H must be a 2-D binary matrix")
        rows = tuple(np.flatnonzero(row).astype(np.int64) for row in h)
        return cls(Z=1, m=h.shape[0], n=h.shape[1], rows=rows)


def lift(bg: BaseGraph, Z: int) -> LiftedParityCheck:
    """Expand every base entry into a Z x Z circulant permutation.

    Block (r, c) with shift s puts ones at (r*Z + i, c*Z + (i + s) mod Z).
    Shifts are reduced mod Z.
    """
    if Z <= 0:
        raise ValueError(f"lifting factor must be positive, got {Z}")
    per_row: list[list[int]] = [[] for _ in range(bg.rows * Z)]
    i = np.arange(Z)
    for r, c, s in bg.entries:
        cols = c * Z + (i + s) % Z
        for k in range(Z):
            per_row[r * Z + k].append(int(cols[k]))
    rows = tuple(np.array(sorted(cols), dtype=np.int64) for cols in per_row)
    return LiftedParityCheck(Z=Z, m=bg.rows * Z, n=bg.cols * Z, rows=rows)


@dataclass(frozen=True, eq=False)
class TannerGraph:
    """Bipartite graph of H with edges in ascending (cn, vn) order."""

    N: int
    M: int
    edge_vn: np.ndarray
    edge_cn: np.ndarray

    @property
    def E(self) -> int:
        return len(self.edge_vn)

    @cached_property
    def vn_adjacency(self) -> list[np.ndarray]:
        order = np.argsort(self.edge_vn, kind="stable")
        split = np.searchsorted(self.edge_vn[order], np.arange(1, self.N))
        return np.split(order, split)

    @cached_property
    def cn_adjacency(self) -> list[np.ndarray]:
        split = np.searchsorted(self.edge_cn, np.arange(1, self.M))
        return np.split(np.arange(self.E), split)

    @cached_property
    def cn_slots(self) -> np.ndarray:
        """(M, max CN degree) edge indices, padded with E."""
        return _pad(self.cn_adjacency, self.E)

    @cached_property
    def vn_slots(self) -> np.ndarray:
        """(N, max VN degree) edge indices in ascending order, padded with E."""
        return _pad(self.vn_adjacency, self.E)

    @cached_property
    def edge_cn_slot(self) -> np.ndarray:
        return _slot_of(self.cn_slots, self.E)

    @cached_property
    def edge_vn_slot(self) -> np.ndarray:
        return _slot_of(self.vn_slots, self.E)

    def subgraph(self, n_vn: int, n_cn: int) -> "TannerGraph":
        """Graph induced by the first ``n_cn`` checks and ``n_vn`` variables.

        Only valid when those checks touch no variable at or beyond ``n_vn``;
        edge indices of the subgraph then coincide with a prefix of ours.
        """
        n_edges = int(np.searchsorted(self.edge_cn, n_cn))
        if n_edges and self.edge_vn[:n_edges].max() >= n_vn:
            raise ValueError("active checks touch variables outside the active set")
        return TannerGraph(N=n_vn, M=n_cn, edge_vn=self.edge_vn[:n_edges], edge_cn=self.edge_cn[:n_edges])

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.N} {self.M} {self.E}\n".encode())
        h.update(np.ascontiguousarray(self.edge_cn, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.edge_vn, dtype="<i8").tobytes())
        return h.hexdigest()[:32]


def _pad(groups: list[np.ndarray], fill: int) -> np.ndarray:
    # at least two slots, so exclusive reductions always see a neutral pad
    width = max((len(g) for g in groups), default=0)
    out = np.full((len(groups), max(width, 2)), fill, dtype=np.int64)
    for i, g in enumerate(groups):
        out[i, : len(g)] = g
    return out


def _slot_of(slots: np.ndarray, n_edges: int) -> np.ndarray:
    pos = np.empty(n_edges, dtype=np.int64)
    rows, cols = np.nonzero(slots < n_edges)
    pos[slots[rows, cols]] = cols
    return pos


def build_tanner(h: LiftedParityCheck) -> TannerGraph:
    cn = np.concatenate([np.full(len(cols), i, dtype=np.int64) for i, cols in enumerate(h.rows)] or [np.zeros(0, np.int64)])
    vn = np.concatenate([np.asarray(cols, dtype=np.int64) for cols in h.rows] or [np.zeros(0, np.int64)])
    empty = [i for i, cols in enumerate(h.rows) if len(cols) == 0]
    if empty:
        warnings.warn(f"check nodes {empty[:8]} have no edges", stacklevel=2)
    return TannerGraph(N=h.n, M=h.m, edge_vn=vn, edge_cn=cn)


@dataclass(frozen=True, eq=False)
class RateEntry:
    rate_value: float
    active_vn_count: int
    active_cn_count: int
    active_edge_set: np.ndarray  # bool over edges
    transmitted_positions: np.ndarray
    zero_llr_positions: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.active_edge_set.sum())


@dataclass(frozen=True, eq=False)
class RateLadder:
    """Nested rates, highest rate first."""

    rates: tuple[RateEntry, ...]
    graph: TannerGraph
    _subgraphs: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.rates)

    def __getitem__(self, i: int) -> RateEntry:
        return self.rates[i]

    def subgraph(self, rate_index: int) -> TannerGraph:
        if rate_index not in self._subgraphs:
            r = self.rates[rate_index]
            self._subgraphs[rate_index] = self.graph.subgraph(r.active_vn_count, r.active_cn_count)
        return self._subgraphs[rate_index]

    @cached_property
    def edge_masks(self) -> np.ndarray:
        return np.stack([r.active_edge_set for r in self.rates])

    @cached_property
    def vn_masks(self) -> np.ndarray:
        m = np.zeros((len(self.rates), self.graph.N), dtype=bool)
        for i, r in enumerate(self.rates):
            m[i, : r.active_vn_count] = True
        return m


def derive_rate_ladder(bg: BaseGraph, Z: int, tg: TannerGraph) -> RateLadder:
    k = bg.info_cols * Z
    rates = []
    for (rb, cb), t in zip(bg.rate_boundaries, bg.transmitted):
        if rb > bg.rows or cb > bg.cols:
            raise ValueError(f"rate boundary ({rb}, {cb}) exceeds the {bg.rows}x{bg.cols} base graph")
        n_vn, n_cn = cb * Z, rb * Z
        mask = (tg.edge_cn < n_cn) & (tg.edge_vn < n_vn)
        available = np.arange(bg.punctured_cols * Z, n_vn)
        if t is None:
            t = len(available)
        if not 0 < t <= len(available):
            raise ValueError(f"boundary ({rb}, {cb}) cannot transmit {t} bits ({len(available)} available)")
        sent = available[:t]
        rates.append(RateEntry(
            rate_value=k / t,
            active_vn_count=n_vn,
            active_cn_count=n_cn,
            active_edge_set=mask,
            transmitted_positions=sent,
            zero_llr_positions=np.setdiff1d(np.arange(n_vn), sent),
        ))
    return RateLadder(rates=tuple(rates), graph=tg)


def edge_counts(rl: RateLadder) -> list[int]:
    return [int(r.active_edge_set.sum()) for r in rl.rates]


def syndrome(graph: TannerGraph, bits: np.ndarray, n_cn: int | None = None) -> np.ndarray:
    """Per-check parity of ``bits`` (..., N) over the first ``n_cn`` checks."""
    bits = np.asarray(bits)
    n_cn = graph.M if n_cn is None else n_cn
    e = int(np.searchsorted(graph.edge_cn, n_cn))
    vals = bits[..., graph.edge_vn[:e]].astype(np.int64)
    out = np.zeros(bits.shape[:-1] + (n_cn,), dtype=np.int64)
    # edges are grouped by check, so a cumulative sum per group gives parities
    bounds = np.searchsorted(graph.edge_cn[:e], np.arange(n_cn + 1))
    csum = np.concatenate([np.zeros(bits.shape[:-1] + (1,), np.int64), np.cumsum(vals, axis=-1)], axis=-1)
    out[...] = csum[..., bounds[1:]] - csum[..., bounds[:-1]]
    return (out & 1).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Codeword:
    bits: np.ndarray
    rate_index: int


def _gf2_inverse(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    aug = np.concatenate([a.astype(np.uint8) & 1, np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        pivots = np.flatnonzero(aug[col:, col]) + col
        if len(pivots) == 0:
            raise ValueError("matrix is singular over GF(2)")
        piv = pivots[0]
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        hits = np.flatnonzero(aug[:, col])
        hits = hits[hits != col]
        aug[hits] ^= aug[col]
    return aug[:, n:]


class RaptorLikeCode:
    """A lifted raptor-like code with its Tanner graph, rate ladder and encoder."""

    def __init__(self, bg: BaseGraph, Z: int | None = None):
        Z = Z if Z is not None else bg.lifting
        if Z is None:
            raise ValueError("no lifting factor given and the base graph has no LIFT directive")
        self.base = bg
        self.Z = Z
        self.H = lift(bg, Z)
        self.graph = build_tanner(self.H)
        self.ladder = derive_rate_ladder(bg, Z, self.graph)
        self.k = bg.info_cols * Z
        self._prepare_encoder()

    def _prepare_encoder(self):
        bg, Z = self.base, self.Z
        k, p = self.k, bg.precode_rows * Z
        dense = self.H.to_dense()
        pre = dense[:p]
        try:
            self._precode_inv = _gf2_inverse(pre[:, k : k + p])
        except ValueError as exc:
            raise BaseGraphError("precode parity submatrix is singular; base graph cannot be encoded") from exc
        self._precode_info = pre[:, :k]
        # extension rows: each lifted row has exactly one degree-1 VN
        ext = dense[p:, : k + p]
        self._ext_matrix = ext
        deg1 = []
        for i in range(p, self.H.m):
            cols = self.H.rows[i]
            deg1.append(int(cols[cols >= k + p][0]))
        self._ext_targets = np.array(deg1, dtype=np.int64)

    @property
    def N(self) -> int:
        return self.graph.N

    @property
    def info_positions(self) -> np.ndarray:
        return np.arange(self.k)

    def encode(self, info_bits, rate_index: int | None = None) -> Codeword:
        """Systematic encoding; ``info_bits`` has shape (k,) or (B, k).

        Bits outside the active columns of ``rate_index`` are left at 0.
        The default rate is the lowest one, i.e. the full codeword.
        """
        rate_index = len(self.ladder) - 1 if rate_index is None else rate_index
        info = np.asarray(info_bits, dtype=np.uint8)
        if info.shape[-1] != self.k:
            raise ValueError(f"expected {self.k} info bits, got {info.shape[-1]}")
        lead = info.shape[:-1]
        info = info.reshape(-1, self.k).astype(np.int64)
        p = self.base.precode_rows * self.Z
        entry = self.ladder[rate_index]
        out = np.zeros((info.shape[0], self.N), dtype=np.uint8)
        out[:, : self.k] = info
        s = (info @ self._precode_info.T.astype(np.int64)) & 1
        out[:, self.k : self.k + p] = (s @ self._precode_inv.T.astype(np.int64)) & 1
        n_ext = entry.active_cn_count - p
        if n_ext > 0:
            pre = out[:, : self.k + p].astype(np.int64)
            par = (pre @ self._ext_matrix[:n_ext].T.astype(np.int64)) & 1
            out[:, self._ext_targets[:n_ext]] = par
        return Codeword(bits=out.reshape(lead + (self.N,)), rate_index=rate_index)


def load_code(path, Z: int | None = None) -> RaptorLikeCode:
    path = Path(path)
    return RaptorLikeCode(parse_base_graph(path.read_text(encoding="utf-8")), Z)
