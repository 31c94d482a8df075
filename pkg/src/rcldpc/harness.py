"""Monte-Carlo FER experiments, complexity tables and result files.

Frames for each (rate, SNR) point are generated in fixed-size chunks.
Chunk ``j`` always covers the same frame indices and draws its noise from
its own counter-based stream keyed by (seed, rate, SNR index, j). Early
stopping is decided by scanning completed chunks in index order, so the
outcome does not depend on how many worker processes ran them.
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .channel import ChannelModel, add_awgn, frame_rng, llr_from_channel, modulate
from .classic import DecodeTrace, decode
from .code_model import RaptorLikeCode, load_code
from .neural import NeuralDecoder, load_model

__all__ = [
    "CSV_HEADER",
    "ComplexityRow",
    "ExperimentSpec",
    "FerRecord",
    "complexity_report",
    "csv_text",
    "emit_results",
    "fer_sweep",
    "fer_vs_iteration",
    "format_complexity",
    "parse_snr_grid",
    "read_csv",
    "worker_count",
]

CSV_HEADER = "rate,snr_db,frames,frame_errors,bit_errors,fer,ber,avg_iter,seconds"
CLASSIC = ("bp", "ms", "nms")


@dataclass(frozen=True)
class ExperimentSpec:
    """One FER experiment.

    ``decoder`` is ``bp``, ``ms``, ``nms`` or the path of a model file.
    ``frames`` is the per-point budget; with ``target_errors`` set, a point
    stops after the first chunk that brings its error count to the target.
    """

    code: str
    decoder: str = "bp"
    rates: tuple[int, ...] | None = None
    snrs: tuple[float, ...] = (2.0,)
    frames: int = 10_000
    target_errors: int | None = 100
    max_iter: int = 20
    modulation: str = "bpsk"
    snr_convention: str = "ebn0"
    seed: int = 0
    early_exit: bool = False
    alpha: float = 0.8
    score: str = "info"
    chunk_size: int = 250
    label: str | None = None

    def __post_init__(self):
        if not self.snrs:
            raise ValueError("SNR grid must not be empty")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.score not in ("info", "all"):
            raise ValueError("score must be 'info' or 'all'")

    @property
    def series(self) -> str:
        return self.label or Path(self.decoder).stem


@dataclass
class FerRecord:
    rate: float
    snr_db: float
    frames: int
    frame_errors: int
    bit_errors: int
    fer: float
    ber: float
    avg_iter: float
    seconds: float
    series: str = field(default="", compare=False)

    def ci95(self) -> tuple[float, float]:
        """Normal-approximation binomial 95% interval for the FER."""
        half = 1.96 * math.sqrt(max(self.fer * (1.0 - self.fer), 0.0) / self.frames)
        return max(0.0, self.fer - half), min(1.0, self.fer + half)


def parse_snr_grid(text: str) -> tuple[float, ...]:
    """``a:step:b`` (inclusive) or a comma-separated list."""
    if ":" in text:
        parts = [float(x) for x in text.split(":")]
        if len(parts) != 3 or parts[1] <= 0 or parts[2] < parts[0]:
            raise ValueError(f"bad SNR range {text!r}; expected start:step:stop")
        a, step, b = parts
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return tuple(round(a + i * step, 10) for i in range(n))
    values = tuple(float(x) for x in text.split(",") if x.strip())
    if not values:
        raise ValueError("SNR grid must not be empty")
    return values


def worker_count(requested: int | None = None) -> int:
    """Requested worker count, bounded by RCLDPC_THREADS when set."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("RCLDPC_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


# ---------------------------------------------------------------- chunks


def _stamp(path: str) -> int:
    try:
        return os.stat(path).st_mtime_ns
    except OSError:
        return -1


@lru_cache(maxsize=8)
def _load_code(path: str, stamp: int) -> RaptorLikeCode:
    return load_code(path)


@lru_cache(maxsize=8)
def _load_model(path: str, stamp: int, code_path: str, code_stamp: int) -> NeuralDecoder:
    return load_model(path, _load_code(code_path, code_stamp))


def _code(path: str) -> RaptorLikeCode:
    return _load_code(path, _stamp(path))


def _model(path: str, code_path: str) -> NeuralDecoder:
    return _load_model(path, _stamp(path), code_path, _stamp(code_path))


def _decoder(spec: ExperimentSpec):
    code = _code(spec.code)
    if spec.decoder.lower() in CLASSIC:
        algo = spec.decoder.lower()

        def run(llr, rate_index, early_exit):
            entry = code.ladder[rate_index]
            return decode(code.graph, llr, algo, spec.max_iter, early_exit, spec.alpha, entry.active_edge_set)

        return run
    model = _model(spec.decoder, spec.code)
    return lambda llr, rate_index, early_exit: model.decode(llr, rate_index, early_exit)


def _chunk_frames(spec: ExperimentSpec, rate_index: int, snr_index: int, chunk: int):
    code = _code(spec.code)
    entry = code.ladder[rate_index]
    n = min(spec.chunk_size, spec.frames - chunk * spec.chunk_size)
    rng = frame_rng(spec.seed, rate_index, snr_index, chunk)
    info = rng.integers(0, 2, (n, code.k), dtype=np.uint8)
    bits = code.encode(info, rate_index).bits
    cm = ChannelModel(spec.snrs[snr_index], spec.modulation, spec.snr_convention, entry.rate_value)
    sym = modulate(bits[:, entry.transmitted_positions], spec.modulation)
    llr = llr_from_channel(add_awgn(sym, cm, rng, rate_index), cm, entry, code.N).llr
    return code, entry, bits, llr


def _scored(code: RaptorLikeCode, entry, spec: ExperimentSpec) -> np.ndarray:
    return code.info_positions if spec.score == "info" else np.arange(entry.active_vn_count)


def _run_chunk(spec: ExperimentSpec, rate_index: int, snr_index: int, chunk: int):
    """(frames, frame errors, bit errors, iteration sum, seconds) for one chunk."""
    t0 = time.perf_counter()
    code, entry, bits, llr = _chunk_frames(spec, rate_index, snr_index, chunk)
    trace: DecodeTrace = _decoder(spec)(llr, rate_index, spec.early_exit)
    pos = _scored(code, entry, spec)
    wrong = trace.decoded[:, pos] != bits[:, pos]
    return len(bits), int(wrong.any(axis=1).sum()), int(wrong.sum()), int(trace.iterations_used.sum()), time.perf_counter() - t0


def _run_iter_chunk(spec: ExperimentSpec, rate_index: int, snr_index: int, chunk: int):
    """Per-iteration (frame errors, bit errors) for one chunk; row 0 is the channel decision."""
    t0 = time.perf_counter()
    code, entry, bits, llr = _chunk_frames(spec, rate_index, snr_index, chunk)
    trace = _decoder(spec)(llr, rate_index, False)
    pos = _scored(code, entry, spec)
    wrong = trace.hard[:, :, pos] != bits[None, :, pos]
    return len(bits), wrong.any(axis=2).sum(axis=1), wrong.sum(axis=(1, 2)), time.perf_counter() - t0


def _point(spec, rate_index, snr_index, fn, errors_of, pool, workers):
    """Run chunks of one point in waves; keep results up to the stopping chunk."""
    n_chunks = -(-spec.frames // spec.chunk_size)
    kept, errors = [], 0
    for start in range(0, n_chunks, workers):
        ids = range(start, min(start + workers, n_chunks))
        if pool is None:
            results = [fn(spec, rate_index, snr_index, j) for j in ids]
        else:
            results = list(pool.map(fn, *zip(*[(spec, rate_index, snr_index, j) for j in ids])))
        for res in results:
            kept.append(res)
            errors += errors_of(res)
            if spec.target_errors is not None and errors >= spec.target_errors:
                return kept
    return kept


def _with_pool(workers: int, body):
    if workers <= 1:
        return body(None, 1)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return body(pool, workers)


def _rates(spec: ExperimentSpec) -> tuple[int, ...]:
    return spec.rates if spec.rates is not None else tuple(range(len(_code(spec.code).ladder)))


def _check_decoder(spec: ExperimentSpec) -> None:
    _code(spec.code)
    if spec.decoder.lower() not in CLASSIC:
        _model(spec.decoder, spec.code)


def fer_sweep(spec: ExperimentSpec, workers: int | None = None) -> list[FerRecord]:
    """FER/BER per (rate, SNR) after the final iteration (or early exit)."""
    _check_decoder(spec)
    code = _code(spec.code)
    workers = worker_count(workers)

    def body(pool, w):
        records = []
        for r in _rates(spec):
            entry = code.ladder[r]
            n_bits = len(_scored(code, entry, spec))
            for s, snr in enumerate(spec.snrs):
                kept = _point(spec, r, s, _run_chunk, lambda res: res[1], pool, w)
                frames = sum(k[0] for k in kept)
                fe = sum(k[1] for k in kept)
                be = sum(k[2] for k in kept)
                records.append(
                    FerRecord(
                        rate=entry.rate_value, snr_db=snr, frames=frames, frame_errors=fe, bit_errors=be,
                        fer=fe / frames, ber=be / (frames * n_bits), avg_iter=sum(k[3] for k in kept) / frames,
                        seconds=sum(k[4] for k in kept), series=spec.series,
                    )
                )
        return records

    return _with_pool(workers, body)


def fer_vs_iteration(spec: ExperimentSpec, workers: int | None = None) -> dict[int, list[FerRecord]]:
    """FER after every iteration at the first SNR of ``spec``, from one decoding pass.

    Returns, per rate index, records for iterations 0..T (``avg_iter`` holds
    the iteration number). Early stopping watches the final iteration.
    """
    _check_decoder(spec)
    spec = replace(spec, early_exit=False)
    code = _code(spec.code)
    workers = worker_count(workers)

    def body(pool, w):
        out = {}
        for r in _rates(spec):
            entry = code.ladder[r]
            n_bits = len(_scored(code, entry, spec))
            kept = _point(spec, r, 0, _run_iter_chunk, lambda res: int(res[1][-1]), pool, w)
            frames = sum(k[0] for k in kept)
            fe = np.sum([k[1] for k in kept], axis=0)
            be = np.sum([k[2] for k in kept], axis=0)
            secs = sum(k[3] for k in kept)
            out[r] = [
                FerRecord(
                    rate=entry.rate_value, snr_db=spec.snrs[0], frames=frames, frame_errors=int(fe[t]),
                    bit_errors=int(be[t]), fer=fe[t] / frames, ber=be[t] / (frames * n_bits), avg_iter=float(t),
                    seconds=secs, series=spec.series,
                )
                for t in range(len(fe))
            ]
        return out

    return _with_pool(workers, body)


# ---------------------------------------------------------------- complexity


@dataclass(frozen=True)
class ComplexityRow:
    decoder: str
    tanh: int
    mul: int
    add: int
    comp: int
    sign: int
    storage: int  # (w, b) pairs per iteration


def complexity_report(code: RaptorLikeCode, decoders=None) -> list[ComplexityRow]:
    """Per-iteration operation counts and parameter storage.

    Separate per-rate neural decoders store sum_i E_i parameter pairs per
    iteration; the rate-compatible decoder stores one full-width block of
    E pairs (the edge count of the lowest rate). PB-tied variants store one
    pair per base-graph entry.
    """
    counts = [r.n_edges for r in code.ladder.rates]
    E = counts[-1]
    base_counts = [sum(1 for r, _, _ in code.base.entries if r < rb) for rb, _ in code.base.rate_boundaries]
    rows = {
        "BP": ComplexityRow("BP", 2 * E, 2 * E, 2 * E, 0, 0, 0),
        "CNMS": ComplexityRow("CNMS", 0, E, 2 * E, 2 * E, 2 * E, 1),
        "NNBP": ComplexityRow("NNBP", 2 * E, 3 * E, 3 * E, 0, 0, sum(counts)),
        "RC-NNBP": ComplexityRow("RC-NNBP", 2 * E, 3 * E, 3 * E, 0, 0, E),
        "NNMS": ComplexityRow("NNMS", 0, E, 3 * E, 2 * E, 2 * E, sum(counts)),
        "RC-NNMS": ComplexityRow("RC-NNMS", 0, E, 3 * E, 2 * E, 2 * E, E),
        "PBRC-NNBP": ComplexityRow("PBRC-NNBP", 2 * E, 3 * E, 3 * E, 0, 0, base_counts[-1]),
        "PBRC-NNMS": ComplexityRow("PBRC-NNMS", 0, E, 3 * E, 2 * E, 2 * E, base_counts[-1]),
    }
    names = list(rows) if decoders is None else [d.upper() for d in decoders]
    return [rows[n] for n in names]


def format_complexity(code: RaptorLikeCode, rows: list[ComplexityRow]) -> str:
    counts = [r.n_edges for r in code.ladder.rates]
    lines = [
        "active edges per rate: " + ", ".join(f"R={r.rate_value:.4f}: {r.n_edges}" for r in code.ladder.rates),
        f"total E = {counts[-1]}, sum over rates = {sum(counts)}, lifting Z = {code.Z}",
        f"{'decoder':<10}{'tanh':>8}{'mul':>8}{'add':>8}{'comp':>8}{'sign':>8}{'storage':>9}",
    ]
    for r in rows:
        lines.append(f"{r.decoder:<10}{r.tanh:>8}{r.mul:>8}{r.add:>8}{r.comp:>8}{r.sign:>8}{r.storage:>9}")
    return "\n".join(lines)


# ---------------------------------------------------------------- output


def csv_text(records: list[FerRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow([repr(float(r.rate)), repr(float(r.snr_db)), r.frames, r.frame_errors, r.bit_errors,
                    repr(float(r.fer)), repr(float(r.ber)), repr(float(r.avg_iter)), repr(float(r.seconds))])
    return buf.getvalue()


def read_csv(path) -> list[FerRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ints = ("frames", "frame_errors", "bit_errors")
    return [
        FerRecord(**{k: (int(v) if k in ints else float(v)) for k, v in row.items()})
        for row in rows
    ]


def _svg(records: list[FerRecord]) -> str:
    width, height, pad = 640, 420, 50
    pos = [r for r in records if r.fer > 0]
    xs = [r.snr_db for r in records] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1.0
    lo = math.floor(math.log10(min(r.fer for r in pos))) if pos else -4
    hi = 0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(fer):
        f = math.log10(max(fer, 10.0**lo))
        return height - pad - (f - lo) / (hi - lo) * (height - 2 * pad)

    series: dict[tuple, list[FerRecord]] = {}
    for r in records:
        series.setdefault((r.series, r.rate), []).append(r)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="black"/>',
    ]
    for d in range(lo, hi + 1):
        out.append(f'<text x="{pad - 40}" y="{py(10.0**d):.1f}" font-size="11">1e{d}</text>')
    for i, ((name, rate), recs) in enumerate(sorted(series.items())):
        recs = sorted(recs, key=lambda r: r.snr_db)
        pts = " ".join(f"{px(r.snr_db):.1f},{py(r.fer):.1f}" for r in recs)
        color = palette[i % len(palette)]
        out.append(f'<polyline fill="none" stroke="{color}" points="{pts}"><title>{name} R={rate:.4f}</title></polyline>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">{name} {rate:.3f}</text>')
    out.append(f'<text x="{width / 2:.0f}" y="{height - 12}" font-size="12">SNR (dB)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_results(records: list[FerRecord], path, fmt: str = "csv") -> Path:
    """Write ``records`` as CSV or as an SVG plot with a log FER axis."""
    path = Path(path)
    if fmt == "csv":
        path.write_text(csv_text(records), encoding="utf-8")
    elif fmt == "svg":
        path.write_text(_svg(records), encoding="utf-8")
    else:
        raise ValueError(f"unknown result format {fmt!r}")
    return path
