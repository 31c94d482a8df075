"""BPSK/QPSK modulation over AWGN and channel LLR computation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .code_model import RateEntry

__all__ = [
    "ChannelModel",
    "LlrFrame",
    "NoisySymbolFrame",
    "add_awgn",
    "frame_rng",
    "llr_from_channel",
    "modulate",
]

MODULATIONS = ("bpsk", "qpsk")
CONVENTIONS = ("ebn0", "esn0")


@dataclass(frozen=True)
class ChannelModel:
    """AWGN channel at a given SNR.

    ``snr_convention`` is ``ebn0`` (needs ``rate``) or ``esn0``. Symbols have
    unit energy, so for BPSK at Eb/N0 the per-dimension noise variance is
    1 / (2 R 10^(snr/10)); QPSK carries two bits per symbol.
    """

    snr_db: float
    modulation: str = "bpsk"
    snr_convention: str = "ebn0"
    rate: float = 1.0

    def __post_init__(self):
        if self.modulation not in MODULATIONS:
            raise ValueError(f"modulation must be one of {MODULATIONS}")
        if self.snr_convention not in CONVENTIONS:
            raise ValueError(f"snr_convention must be one of {CONVENTIONS}")
        if not self.rate > 0:
            raise ValueError("code rate must be positive")

    @property
    def _bits_per_symbol(self) -> int:
        return 2 if self.modulation == "qpsk" else 1

    @property
    def _scale(self) -> float:
        # Es/N0 = scale * snr (linear)
        return self.rate * self._bits_per_symbol if self.snr_convention == "ebn0" else 1.0

    @property
    def noise_sigma2(self) -> float:
        return 1.0 / (2.0 * self._scale * 10.0 ** (self.snr_db / 10.0))

    @classmethod
    def from_sigma2(cls, sigma2: float, modulation="bpsk", snr_convention="ebn0", rate=1.0) -> "ChannelModel":
        if not sigma2 > 0:
            raise ValueError("noise variance must be positive")
        probe = cls(0.0, modulation, snr_convention, rate)
        snr_db = 10.0 * math.log10(1.0 / (2.0 * probe._scale * sigma2))
        return cls(snr_db, modulation, snr_convention, rate)


@dataclass(frozen=True, eq=False)
class NoisySymbolFrame:
    symbols: np.ndarray
    rate_index: int


@dataclass(frozen=True, eq=False)
class LlrFrame:
    llr: np.ndarray
    rate_index: int


def frame_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based stream for (master_seed, *key)."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def modulate(bits, scheme: str = "bpsk") -> np.ndarray:
    """BPSK: b -> 1 - 2b. QPSK: Gray pairs (b0, b1) -> ((1-2b0) + i(1-2b1)) / sqrt 2."""
    bits = np.asarray(bits)
    s = 1.0 - 2.0 * bits.astype(np.float64)
    if scheme == "bpsk":
        return s
    if scheme != "qpsk":
        raise ValueError(f"unknown modulation {scheme!r}")
    if bits.shape[-1] % 2:
        raise ValueError(f"QPSK needs an even number of bits, got {bits.shape[-1]}")
    return (s[..., 0::2] + 1j * s[..., 1::2]) / math.sqrt(2.0)


def add_awgn(symbols, cm: ChannelModel, rng: np.random.Generator, rate_index: int = 0) -> NoisySymbolFrame:
    symbols = np.asarray(symbols)
    sigma = math.sqrt(cm.noise_sigma2)
    if np.iscomplexobj(symbols):
        noise = rng.standard_normal(symbols.shape) + 1j * rng.standard_normal(symbols.shape)
    else:
        noise = rng.standard_normal(symbols.shape)
    return NoisySymbolFrame(symbols=symbols + sigma * noise, rate_index=rate_index)


def llr_from_channel(frame: NoisySymbolFrame, cm: ChannelModel, entry: RateEntry, n: int) -> LlrFrame:
    """Channel LLRs on all ``n`` VNs; untransmitted positions hold exactly 0.

    For a Gaussian channel ln p(y|0)/p(y|1) = 2 A y / sigma^2 with A the
    per-dimension amplitude (1 for BPSK, 1/sqrt 2 for QPSK).
    """
    y = np.asarray(frame.symbols)
    if np.iscomplexobj(y):
        dims = np.empty(y.shape[:-1] + (2 * y.shape[-1],))
        dims[..., 0::2], dims[..., 1::2] = y.real, y.imag
        amp = 1.0 / math.sqrt(2.0)
    else:
        dims, amp = y, 1.0
    pos = entry.transmitted_positions
    if dims.shape[-1] != len(pos):
        raise ValueError(f"frame carries {dims.shape[-1]} bits, rate expects {len(pos)}")
    llr = np.zeros(dims.shape[:-1] + (n,))
    llr[..., pos] = 2.0 * amp * dims / cm.noise_sigma2
    return LlrFrame(llr=llr, rate_index=frame.rate_index)
