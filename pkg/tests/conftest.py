from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from rcldpc.channel import ChannelModel, add_awgn, frame_rng, llr_from_channel, modulate
from rcldpc.code_model import load_code

DATA = Path(str(resources.files("rcldpc") / "data"))
TOY = DATA / "toy.bg"
BG2 = DATA / "bg2.bg"

# acceptance outcomes collected during the run: {criterion: (passed, detail)}
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy():
    return load_code(TOY)


@pytest.fixture(scope="session")
def bg2():
    return load_code(BG2)


def channel_llr(code, rate_index, n_frames, snr_db, seed=0, modulation="bpsk"):
    """Random codewords at one rate, returned as (bits, llr)."""
    rng = frame_rng(seed, 99, rate_index)
    entry = code.ladder[rate_index]
    info = rng.integers(0, 2, (n_frames, code.k), dtype=np.uint8)
    bits = code.encode(info, rate_index).bits
    cm = ChannelModel(snr_db, modulation, "ebn0", entry.rate_value)
    sym = modulate(bits[:, entry.transmitted_positions], modulation)
    llr = llr_from_channel(add_awgn(sym, cm, rng, rate_index), cm, entry, code.N).llr
    return bits, llr


def random_tree_h(rng: np.random.Generator, n_checks: int, max_new: int = 3) -> np.ndarray:
    """Parity-check matrix of a connected cycle-free Tanner graph.

    Each new check hangs off one existing variable and brings 1..max_new
    fresh variables, so no cycle can form.
    """
    cols = [list(range(int(rng.integers(2, max_new + 2))))]
    n_vars = len(cols[0])
    for _ in range(n_checks - 1):
        anchor = int(rng.integers(0, n_vars))
        fresh = int(rng.integers(1, max_new + 1))
        cols.append([anchor] + list(range(n_vars, n_vars + fresh)))
        n_vars += fresh
    h = np.zeros((n_checks, n_vars), dtype=np.uint8)
    for r, cs in enumerate(cols):
        h[r, cs] = 1
    return h


def logits_bce(pre_sigmoid, bits, vn_mask):
    """Unclamped BCE in logits form, the function whose gradient backward computes."""
    o = pre_sigmoid
    terms = bits * np.logaddexp(0.0, o) + (1 - bits) * np.logaddexp(0.0, -o)
    return float((np.where(vn_mask, terms, 0.0).sum(axis=1) / vn_mask.sum(axis=1)).mean())


def region(tape, delta=1e-12):
    """Every discrete choice the forward pass made: gates, argmins and signs."""
    parts = []
    for layer in tape.layers:
        parts += [layer.v_gate, np.abs(layer.c_pre) < tape.clip, layer.v >= 0]
        x = layer.extra
        if "idx" in x:
            parts += [x["idx"], x["z"] > 0]
        else:
            parts += [np.abs(x["p"]) >= 1 - delta]
    return np.concatenate([np.ravel(p).astype(np.int64) for p in parts])


def gradient_check(decoder, batch, n_layers, n_coords, rng, h=1e-4):
    """Central differences against backward on distinct random active coordinates.

    Returns (relative errors of the checked coordinates, number skipped).
    A coordinate is skipped when the forward pass crosses a kink between
    x - h and x + h, where the loss is not differentiable, or when the
    gradient is below the resolution of a central difference: roundoff in
    the loss limits it to about eps |L| / h, so a relative check at 1e-4
    needs |g| above 1e4 eps |L| / h.
    """
    from rcldpc.training import loss_and_grad

    vn_mask = decoder.code.ladder.vn_masks[batch.rate_index]
    loss, grad = loss_and_grad(decoder, batch, n_layers)
    floor = 1e4 * np.finfo(float).eps * loss / h
    values = decoder.params.values
    width = decoder.params.block_boundaries[int(batch.rate_index.max())]

    def probe(i, j, x):
        old = values[i, j]
        values[i, j] = x
        out = decoder.forward(batch.llr, batch.rate_index, n_layers=n_layers, masked=True, record=True)
        values[i, j] = old
        return logits_bce(out.pre_sigmoid[-1], batch.bits, vn_mask), region(out.tape)

    errors, skipped = [], 0
    for flat in rng.permutation(2 * n_layers * width):
        if len(errors) == n_coords:
            break
        i, j = divmod(int(flat), width)
        x = values[i, j]
        (up, r_up), (dn, r_dn) = probe(i, j, x + h), probe(i, j, x - h)
        if not np.array_equal(r_up, r_dn):
            skipped += 1
            continue
        fd = (up - dn) / (2 * h)
        if max(abs(fd), abs(grad[i, j])) < floor:
            skipped += 1
            continue
        errors.append(abs(fd - grad[i, j]) / max(abs(fd), abs(grad[i, j]), 1e-300))
    return np.array(errors), skipped
