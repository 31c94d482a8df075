"""Multi-task training of rate-compatible neural decoders.

A minibatch mixes frames of every rate in the ladder. Each frame is run
through the full network with the edges outside its rate masked off, so
the gradient of parameter block W_i automatically collects contributions
from exactly those frames whose rate activates block i. Layers are trained
greedily: stage t attaches an output head after iteration t and updates
the parameters of iterations 1..t.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .channel import ChannelModel, add_awgn, frame_rng, llr_from_channel, modulate
from .code_model import RaptorLikeCode, load_code
from .neural import NeuralDecoder, NeuralDecoderConfig, backward, load_model, save_model, sigmoid

__all__ = [
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "TrainingBatch",
    "adam_step",
    "bce_grad",
    "bce_loss",
    "generate_dataset",
    "greedy_train",
    "load_checkpoint",
    "loss_and_grad",
    "mtl_accumulate",
    "parse_config",
    "save_checkpoint",
]

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

# stream tags keeping training, validation and evaluation noise disjoint
TRAIN_STREAM = 1
VALID_STREAM = 2


@dataclass(eq=False)
class TrainingBatch:
    llr: np.ndarray  # (B, N), zero outside each frame's transmitted positions
    bits: np.ndarray  # (B, N) uint8, zero outside each frame's active VNs
    rate_index: np.ndarray  # (B,)
    snr_db: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.rate_index)

    def subset(self, sel) -> "TrainingBatch":
        return TrainingBatch(self.llr[sel], self.bits[sel], self.rate_index[sel], self.snr_db[sel])


def generate_dataset(
    code: RaptorLikeCode,
    snr_range=(0.0, 6.0),
    count: int = 300,
    rng: np.random.Generator | None = None,
    rates=None,
    modulation: str = "bpsk",
    snr_convention: str = "ebn0",
    all_zero: bool = False,
) -> TrainingBatch:
    """Random codewords at uniformly drawn rates and SNRs, as channel LLRs."""
    rng = np.random.default_rng() if rng is None else rng
    ladder = code.ladder
    rates = np.arange(len(ladder)) if rates is None else np.asarray(rates)
    lo, hi = snr_range
    r = rng.choice(rates, size=count)
    snr = rng.uniform(lo, hi, size=count)
    info = np.zeros((count, code.k), dtype=np.uint8) if all_zero else rng.integers(0, 2, (count, code.k), dtype=np.uint8)
    # rate-t codewords are prefixes of the full (lowest-rate) codeword
    bits = code.encode(info).bits * ladder.vn_masks[r]
    llr = np.zeros((count, code.N))
    for i in range(count):
        entry = ladder[r[i]]
        cm = ChannelModel(float(snr[i]), modulation, snr_convention, entry.rate_value)
        sym = modulate(bits[i, entry.transmitted_positions], modulation)
        llr[i] = llr_from_channel(add_awgn(sym, cm, rng, int(r[i])), cm, entry, code.N).llr
    return TrainingBatch(llr=llr, bits=bits.astype(np.uint8), rate_index=r, snr_db=snr)


def _frame_norm(vn_mask: np.ndarray) -> np.ndarray:
    return 1.0 / vn_mask.sum(axis=-1, keepdims=True)


def bce_loss(probs, bits, vn_mask=None) -> float:
    """Mean over frames of the per-frame BCE across active VNs.

    ``probs`` are probabilities of bit value 1, clamped to
    [1e-12, 1 - 1e-12] before the logs.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    bits = np.atleast_2d(np.asarray(bits, dtype=np.float64))
    if probs.shape != bits.shape:
        raise ValueError(f"probabilities {probs.shape} and bits {bits.shape} differ in shape")
    mask = np.ones(bits.shape, dtype=bool) if vn_mask is None else np.broadcast_to(vn_mask, bits.shape)
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = -(bits * np.log(p) + (1.0 - bits) * np.log1p(-p))
    per_frame = np.where(mask, terms, 0.0).sum(axis=-1) * _frame_norm(mask)[:, 0]
    return float(per_frame.mean())


def bce_grad(pre_sigmoid, bits, vn_mask) -> np.ndarray:
    """d(bce_loss)/d(pre_sigmoid), in the exact logits form x - sigmoid(-o)."""
    mask = np.broadcast_to(vn_mask, bits.shape)
    g = (bits - sigmoid(-pre_sigmoid)) * _frame_norm(mask)
    return np.where(mask, g, 0.0) / bits.shape[0]


def loss_and_grad(decoder: NeuralDecoder, batch: TrainingBatch, n_layers: int | None = None):
    """BCE at the head after ``n_layers`` and its gradient w.r.t. the free parameters."""
    n_layers = decoder.config.L_max if n_layers is None else n_layers
    out = decoder.forward(batch.llr, batch.rate_index, n_layers=n_layers, masked=True, record=True)
    vn_mask = decoder.code.ladder.vn_masks[batch.rate_index]
    o = out.pre_sigmoid[-1]
    loss = bce_loss(sigmoid(-o), batch.bits, vn_mask)
    seed = np.zeros_like(out.pre_sigmoid)
    seed[-1] = bce_grad(o, batch.bits, vn_mask)
    grad = decoder.params.reduce_grad(backward(out.tape, seed))
    return loss, grad


def mtl_accumulate(decoder: NeuralDecoder, batch: TrainingBatch, n_layers: int | None = None) -> list[np.ndarray]:
    """Gradient split into the nested blocks [W_1 | ... | W_rmax]."""
    _, grad = loss_and_grad(decoder, batch, n_layers)
    b = (0,) + decoder.params.block_boundaries
    return [grad[:, b[i] : b[i + 1]] for i in range(len(b) - 1)]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, values: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(values), np.zeros_like(values), **kw)

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in ("step", "lr", "beta1", "beta2", "eps")}
        d["m"] = self.m.tolist()
        d["v"] = self.v.tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "AdamState":
        d = json.loads(text)
        return cls(np.array(d.pop("m")), np.array(d.pop("v")), **d)


def adam_step(values: np.ndarray, grads: np.ndarray, opt: AdamState, rows: slice = slice(None)) -> np.ndarray:
    """Bias-corrected Adam update of ``values[rows]`` (in place, returned)."""
    if grads.shape != values.shape or opt.m.shape != values.shape:
        raise ValueError("gradient, moments and parameters must share one shape")
    opt.step += 1
    g = grads[rows]
    opt.m[rows] = opt.beta1 * opt.m[rows] + (1.0 - opt.beta1) * g
    opt.v[rows] = opt.beta2 * opt.v[rows] + (1.0 - opt.beta2) * g * g
    m_hat = opt.m[rows] / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v[rows] / (1.0 - opt.beta2**opt.step)
    values[rows] -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return values


# ---------------------------------------------------------------- schedule


@dataclass
class TrainConfig:
    code: str = ""
    variant: str = "nnms"
    tying: str = "edge"
    L_max: int = 5
    lr: float = 1e-4
    batch_size: int = 300
    batches_per_stage: int = 2000
    joint_batches: int = 0
    snr_lo: float = 0.0
    snr_hi: float = 6.0
    rates: tuple[int, ...] | None = None
    seed: int = 0
    deterministic: bool = True
    modulation: str = "bpsk"
    snr_convention: str = "ebn0"
    all_zero: bool = False
    validation_frames: int = 3000
    log_every: int = 100


def _coerce(name: str, raw: str, default):
    if name == "rates":
        return None if raw.lower() in ("all", "") else tuple(int(x) for x in raw.replace(",", " ").split())
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> TrainConfig:
    """``key = value`` lines (or ``key value``); ``#`` starts a comment."""
    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, raw = line.partition("=") if "=" in line else line.partition(" ")
        key, raw = key.strip(), raw.strip()
        if key not in known:
            raise ValueError(f"line {n}: unknown training option {key!r}")
        try:
            values[key] = _coerce(key, raw, getattr(defaults, key))
        except ValueError as exc:
            raise ValueError(f"line {n}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


@dataclass
class TrainResult:
    decoder: NeuralDecoder
    optimizer: AdamState
    stage_losses: list[np.ndarray] = field(default_factory=list)  # training loss per batch
    validation: list[float] = field(default_factory=list)  # held-out BCE after each stage


def validation_batch(code: RaptorLikeCode, cfg: TrainConfig) -> TrainingBatch:
    rng = frame_rng(cfg.seed, VALID_STREAM)
    return generate_dataset(
        code, (cfg.snr_lo, cfg.snr_hi), cfg.validation_frames, rng, cfg.rates, cfg.modulation, cfg.snr_convention, cfg.all_zero
    )


def validation_loss(decoder: NeuralDecoder, batch: TrainingBatch, n_layers: int | None = None) -> float:
    out = decoder.forward(batch.llr, batch.rate_index, n_layers=n_layers, masked=True)
    vn_mask = decoder.code.ladder.vn_masks[batch.rate_index]
    return bce_loss(out.probs[-1], batch.bits, vn_mask)


def greedy_train(code: RaptorLikeCode, cfg: TrainConfig, decoder: NeuralDecoder | None = None) -> TrainResult:
    """Layer-by-layer training; stage t optimizes iterations 1..t against head t.

    The optimizer state carries over between stages. With ``joint_batches``
    a final pass trains all layers together against the last head.
    """
    if decoder is None:
        decoder = NeuralDecoder(code, NeuralDecoderConfig(cfg.variant, cfg.tying, cfg.L_max))
    opt = AdamState.like(decoder.params.values, lr=cfg.lr)
    result = TrainResult(decoder, opt)
    held_out = validation_batch(code, cfg)
    stages = [(t, cfg.batches_per_stage) for t in range(1, cfg.L_max + 1)]
    if cfg.joint_batches:
        stages.append((cfg.L_max, cfg.joint_batches))
    for s, (t, n_batches) in enumerate(stages):
        losses = np.empty(n_batches)
        for i in range(n_batches):
            batch = generate_dataset(
                code, (cfg.snr_lo, cfg.snr_hi), cfg.batch_size, frame_rng(cfg.seed, TRAIN_STREAM, s, i),
                cfg.rates, cfg.modulation, cfg.snr_convention, cfg.all_zero,
            )
            losses[i], grad = loss_and_grad(decoder, batch, t)
            adam_step(decoder.params.values, grad, opt, slice(0, 2 * t))
            if cfg.log_every and (i + 1) % cfg.log_every == 0:
                log.info("stage %d batch %d loss %.5f", s + 1, i + 1, losses[max(0, i - cfg.log_every + 1) : i + 1].mean())
        result.stage_losses.append(losses)
        result.validation.append(validation_loss(decoder, held_out, t))
        log.info("stage %d done: held-out BCE %.5f", s + 1, result.validation[-1])
    return result


def save_checkpoint(path, decoder: NeuralDecoder, opt: AdamState | None = None) -> Path:
    """Model file plus a JSON optimizer sidecar next to it."""
    path = Path(path)
    save_model(path, decoder)
    if opt is not None:
        path.with_name(path.name + ".adam.json").write_text(opt.to_json(), encoding="utf-8")
    return path


def load_checkpoint(path, code: RaptorLikeCode) -> tuple[NeuralDecoder, AdamState | None]:
    path = Path(path)
    decoder = load_model(path, code)
    side = path.with_name(path.name + ".adam.json")
    opt = AdamState.from_json(side.read_text(encoding="utf-8")) if side.exists() else None
    return decoder, opt


def train_from_config(cfg: TrainConfig) -> TrainResult:
    return greedy_train(load_code(cfg.code), cfg)
