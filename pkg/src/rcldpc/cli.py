"""Command line interface: ``rcldpc <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .code_model import BaseGraphError, edge_counts, load_code
from .neural import ModelFileError, NeuralDecoder, ParameterMatrix, load_model, save_model
from .training import TrainConfig, greedy_train, parse_config, save_checkpoint, validation_batch, validation_loss

log = logging.getLogger("rcldpc")


class UsageError(Exception):
    """Bad input file or argument; reported on stderr with exit status 2."""


def _code(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"code file not found: {p}")
    try:
        return load_code(p)
    except BaseGraphError as exc:
        where = f" (line {exc.line})" if exc.line else ""
        raise UsageError(f"invalid code file {p}{where}: {exc}") from exc


def _model(path, code):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model file not found: {p}")
    try:
        return load_model(p, code)
    except ModelFileError as exc:
        raise UsageError(str(exc)) from exc


def _int_list(text: str | None):
    if text is None or text == "all":
        return None
    return tuple(int(x) for x in text.split(",") if x.strip())


# ---------------------------------------------------------------- commands


def cmd_construct(args) -> int:
    code = _code(args.code)
    g = code.graph
    print(f"code file      {args.code}")
    print(f"base graph     {code.base.rows} x {code.base.cols}, info columns {code.base.info_cols}, "
          f"precode rows {code.base.precode_rows}, lifting Z={code.Z}")
    print(f"lifted graph   N={g.N} M={g.M} E={g.E} k={code.k}")
    print(f"fingerprint    {g.fingerprint()}")
    print("rate  active_vn  active_cn  edges  transmitted")
    for i, (r, e) in enumerate(zip(code.ladder.rates, edge_counts(code.ladder))):
        print(f"{i}: R={r.rate_value:.4f}  {r.active_vn_count:>6}  {r.active_cn_count:>6}  {e:>6}  "
              f"{len(r.transmitted_positions):>6}")
    return 0


def cmd_encode(args) -> int:
    code = _code(args.code)
    rate = len(code.ladder) - 1 if args.rate_index is None else args.rate_index
    if not 0 <= rate < len(code.ladder):
        raise UsageError(f"rate index {rate} outside ladder of {len(code.ladder)}")
    if args.info is not None:
        if len(args.info) != code.k or set(args.info) - {"0", "1"}:
            raise UsageError(f"--info must be a string of {code.k} binary digits")
        info = np.array([int(c) for c in args.info], dtype=np.uint8)[None]
    else:
        info = np.random.default_rng(args.seed).integers(0, 2, (args.count, code.k), dtype=np.uint8)
    cw = code.encode(info, rate)
    entry = code.ladder[rate]
    for row in cw.bits:
        bits = row if args.full else row[entry.transmitted_positions]
        print("".join(str(int(b)) for b in bits))
    return 0


def _spec(args, decoder: str) -> harness.ExperimentSpec:
    try:
        snrs = harness.parse_snr_grid(args.snr)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return harness.ExperimentSpec(
        code=str(args.code), decoder=decoder, rates=_int_list(args.rates), snrs=snrs, frames=args.frames,
        target_errors=None if args.exhaustive else args.target_errors, max_iter=args.max_iter,
        modulation=args.modulation, snr_convention=args.snr_convention, seed=args.seed,
        early_exit=args.early_exit, alpha=args.alpha, score=args.score, chunk_size=args.chunk_size,
    )


def _write(records, args) -> None:
    if args.out:
        harness.emit_results(records, args.out, "csv")
        log.info("wrote %s", args.out)
    else:
        sys.stdout.write(harness.csv_text(records))
    if args.svg:
        harness.emit_results(records, args.svg, "svg")


def _simulate(args, decoder: str) -> int:
    code = _code(args.code)
    if decoder.lower() not in harness.CLASSIC:
        _model(decoder, code)
    spec = _spec(args, decoder)
    if args.per_iteration:
        per_rate = harness.fer_vs_iteration(spec, args.workers)
        records = [r for recs in per_rate.values() for r in recs]
    else:
        records = harness.fer_sweep(spec, args.workers)
    _write(records, args)
    return 0


def cmd_simulate(args) -> int:
    return _simulate(args, args.decoder)


def cmd_eval(args) -> int:
    code = _code(args.code)
    model = _model(args.model, code)
    cfg = TrainConfig(validation_frames=args.bce_frames, seed=args.seed)
    held = validation_batch(code, cfg)
    for t in range(len(code.ladder)):
        sel = held.rate_index == t
        print(f"# held-out BCE at R={code.ladder[t].rate_value:.4f}: {validation_loss(model, held.subset(sel)):.6f}")
    return _simulate(args, args.model)


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in ("code", "variant", "tying", "L_max", "lr", "batch_size",
                                               "batches_per_stage", "seed")}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"training config not found: {p}")
        try:
            cfg = parse_config(p.read_text(encoding="utf-8"), **overrides)
        except ValueError as exc:
            raise UsageError(f"{p}: {exc}") from exc
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if not cfg.code:
        raise UsageError("no code file given (use --code or a 'code' line in the config)")
    code = _code(cfg.code)
    result = greedy_train(code, cfg)
    save_checkpoint(args.out, result.decoder, result.optimizer)
    for s, (losses, val) in enumerate(zip(result.stage_losses, result.validation), 1):
        print(f"stage {s}: final train BCE {losses[-min(100, len(losses)):].mean():.6f}, held-out BCE {val:.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    code = _code(args.code)
    names = args.decoders.split(",") if args.decoders else None
    try:
        rows = harness.complexity_report(code, names)
    except KeyError as exc:
        raise UsageError(f"unknown decoder in --decoders: {exc}") from exc
    print(harness.format_complexity(code, rows))
    return 0


def cmd_convert(args) -> int:
    code = _code(args.code)
    model = _model(args.model, code)
    out = Path(args.out)
    if out.suffix == ".npz":
        full = model.params.expanded()
        np.savez(out, weights=full[0::2], biases=full[1::2], block_boundaries=np.array(model.params.block_boundaries),
                 edge_vn=code.graph.edge_vn, edge_cn=code.graph.edge_cn)
    else:
        if args.expand and model.params.tied:
            cfg = replace(model.config, tying="edge")
            params = model.params
            bounds = tuple(r.n_edges for r in code.ladder.rates)
            model = NeuralDecoder(code, cfg, ParameterMatrix(params.expanded().copy(), bounds))
        save_model(out, model)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- parser


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--snr", default="1:0.5:4", help="SNR grid in dB, start:step:stop (inclusive) or a,b,c")
    p.add_argument("--frames", type=int, default=10_000, help="frame budget per point (default 10000)")
    p.add_argument("--target-errors", type=int, default=100, help="stop a point once this many frame errors are seen")
    p.add_argument("--exhaustive", action="store_true", help="always run the full frame budget")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--rates", default="all", help="comma-separated rate indices (0 = highest rate)")
    p.add_argument("--max-iter", type=int, default=20, help="iterations for classic decoders")
    p.add_argument("--alpha", type=float, default=0.8, help="normalization factor for nms")
    p.add_argument("--modulation", choices=("bpsk", "qpsk"), default="bpsk")
    p.add_argument("--snr-convention", choices=("ebn0", "esn0"), default="ebn0")
    p.add_argument("--score", choices=("info", "all"), default="info", help="bits that count toward frame errors")
    p.add_argument("--early-exit", action="store_true", help="stop each frame once its syndrome is satisfied")
    p.add_argument("--per-iteration", action="store_true", help="FER after every iteration at the first SNR")
    p.add_argument("--workers", type=int, default=None, help="worker processes (capped by RCLDPC_THREADS)")
    p.add_argument("--chunk-size", type=int, default=250, help="frames per work unit")
    p.add_argument("--deterministic", action="store_true",
                   help="accepted for compatibility; sweeps are always schedule-independent")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--svg", help="also write an SVG plot of FER vs SNR")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcldpc", description="Rate-compatible LDPC codes and neural decoders.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("construct", help="validate a base-graph file and print code statistics")
    p.add_argument("--code", required=True, help="base-graph file")
    p.set_defaults(func=cmd_construct)

    p = sub.add_parser("encode", help="encode information bits at a rate of the ladder")
    p.add_argument("--code", required=True, help="base-graph file")
    p.add_argument("--rate-index", type=int, default=None, help="rate index (default: lowest rate)")
    p.add_argument("--info", help="information bits as a 0/1 string")
    p.add_argument("--count", type=int, default=1, help="number of random messages when --info is absent")
    p.add_argument("--seed", type=int, default=0, help="seed for random messages")
    p.add_argument("--full", action="store_true", help="print all N codeword bits instead of transmitted ones")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("simulate", help="Monte-Carlo FER sweep over AWGN")
    p.add_argument("--code", required=True, help="base-graph file")
    p.add_argument("--decoder", default="bp", help="bp, ms, nms or a model file")
    _sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="held-out BCE and FER sweep of a trained model")
    p.add_argument("--code", required=True, help="base-graph file")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--bce-frames", type=int, default=3000, help="held-out frames for the BCE estimate")
    _sim_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="greedy multi-rate training of a neural decoder")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--code", help="base-graph file (overrides the config)")
    p.add_argument("--variant", choices=("nnbp", "nnms"))
    p.add_argument("--tying", choices=("edge", "pb"))
    p.add_argument("--L-max", dest="L_max", type=int, help="unrolled iterations")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches-per-stage", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="model file to write (optimizer state goes to <out>.adam.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="per-iteration operation and storage counts")
    p.add_argument("--code", required=True, help="base-graph file")
    p.add_argument("--decoders", help="comma-separated subset, e.g. BP,CNMS,RC-NNMS")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("convert", help="re-export a model (expand tying, or .npz arrays)")
    p.add_argument("--code", required=True, help="base-graph file")
    p.add_argument("--model", required=True, help="input model file")
    p.add_argument("--out", required=True, help="output path; .npz writes expanded numpy arrays")
    p.add_argument("--expand", action="store_true", help="write a PB-tied model as a per-edge model")
    p.set_defaults(func=cmd_convert)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rcldpc: error: {exc}", file=sys.stderr)
        return 2


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
