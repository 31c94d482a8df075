import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcldpc.channel import frame_rng
from rcldpc.code_model import syndrome
from rcldpc.neural import NeuralDecoder, NeuralDecoderConfig, replay
from rcldpc.training import (
    AdamState,
    TrainConfig,
    TrainingBatch,
    adam_step,
    bce_grad,
    bce_loss,
    generate_dataset,
    greedy_train,
    load_checkpoint,
    loss_and_grad,
    mtl_accumulate,
    parse_config,
    save_checkpoint,
    validation_loss,
)

from conftest import gradient_check, logits_bce


def perturbed(code, variant, tying="edge", L=3, seed=0, spread=0.1):
    dec = NeuralDecoder(code, NeuralDecoderConfig(variant, tying, L))
    rng = np.random.default_rng(seed)
    dec.params.values += rng.normal(0, spread, dec.params.values.shape)
    return dec


def batch_at(code, rates, count, seed=0, snr=(1.0, 3.0)):
    return generate_dataset(code, snr, count, frame_rng(seed, 50), rates=rates)


class TestBce:
    def test_perfect_prediction(self):
        bits = np.array([[0, 1, 1, 0]])
        assert bce_loss(bits.astype(float), bits) < 1e-11

    def test_half_is_ln2(self):
        assert bce_loss(np.full((3, 5), 0.5), np.ones((3, 5))) == pytest.approx(math.log(2), abs=1e-15)

    def test_random_against_scalar_formula(self):
        rng = np.random.default_rng(0)
        p, x = rng.random((4, 7)), rng.integers(0, 2, (4, 7))
        mask = rng.random((4, 7)) < 0.7
        mask[:, 0] = True
        per = []
        for f in range(4):
            terms = [-(x[f, v] * math.log(p[f, v]) + (1 - x[f, v]) * math.log(1 - p[f, v])) for v in range(7) if mask[f, v]]
            per.append(sum(terms) / len(terms))
        assert bce_loss(p, x, mask) == pytest.approx(sum(per) / 4, rel=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(np.zeros((2, 3)), np.zeros((3, 2)))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_logit_gradient(self, seed):
        rng = np.random.default_rng(seed)
        o, x = rng.normal(0, 3, (3, 6)), rng.integers(0, 2, (3, 6))
        mask = np.ones((3, 6), dtype=bool)
        mask[1, 4:] = False
        g = bce_grad(o, x, mask)
        h = 1e-5
        for f, v in np.ndindex(o.shape):
            up, dn = o.copy(), o.copy()
            up[f, v] += h
            dn[f, v] -= h
            fd = (logits_bce(up, x, mask) - logits_bce(dn, x, mask)) / (2 * h)
            # a central difference resolves gradients only to about eps |L| / h
            assert g[f, v] == pytest.approx(fd, rel=1e-6, abs=1e-9)
        assert np.all(g[1, 4:] == 0)


class TestBackward:
    @pytest.mark.parametrize("variant", ["nnbp", "nnms"])
    @pytest.mark.parametrize("rate", [0, 1, 2])
    def test_finite_differences(self, toy, variant, rate):
        dec = perturbed(toy, variant, seed=rate)
        batch = batch_at(toy, [rate], 8, seed=rate)
        err, _ = gradient_check(dec, batch, 3, 200, np.random.default_rng(rate))
        assert len(err) == 200
        assert err.max() <= 1e-4

    @pytest.mark.parametrize("variant", ["nnbp", "nnms"])
    def test_finite_differences_tied(self, toy, variant):
        dec = perturbed(toy, variant, "pb", seed=4)
        batch = batch_at(toy, [0, 1, 2], 9, seed=4)
        err, skipped = gradient_check(dec, batch, 3, 10**6, np.random.default_rng(4))
        assert len(err) + skipped == dec.params.free_parameters == 6 * 48
        assert len(err) >= 200
        assert err.max() <= 1e-4

    def test_negative_weights(self, toy):
        dec = perturbed(toy, "nnms", seed=6, spread=0.8)
        assert (dec.params.values[0::2] < 0).any()
        err, _ = gradient_check(dec, batch_at(toy, [2], 6, seed=6), 3, 200, np.random.default_rng(6))
        assert err.max() <= 1e-4

    @pytest.mark.parametrize("variant", ["nnbp", "nnms"])
    def test_init_gradient_finite_on_clean_frames(self, toy, variant):
        dec = NeuralDecoder(toy, NeuralDecoderConfig(variant, "edge", 5))
        _, grad = loss_and_grad(dec, batch_at(toy, [0, 1, 2], 20, snr=(40.0, 40.0)))
        assert np.isfinite(grad).all()

    def test_inactive_edges_get_exact_zero(self, toy):
        dec = perturbed(toy, "nnbp", L=4)
        _, grad = loss_and_grad(dec, batch_at(toy, [1], 10), n_layers=2)
        assert np.all(grad[:, toy.ladder[1].n_edges :] == 0)
        assert np.all(grad[4:] == 0)
        assert np.any(grad[:4, : toy.ladder[1].n_edges] != 0)

    def test_tape_replay(self, toy):
        dec = perturbed(toy, "nnms")
        batch = batch_at(toy, [0, 1, 2], 12)
        out = dec.forward(batch.llr, batch.rate_index, masked=True, record=True)
        np.testing.assert_array_equal(replay(out.tape).pre_sigmoid, out.pre_sigmoid)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        x = np.array([1.0, 1.0, 1.0])
        opt = AdamState.like(x, lr=1e-3)
        adam_step(x, np.array([0.5, -2.0, 1e-3]), opt)
        np.testing.assert_allclose(x, [1 - 1e-3, 1 + 1e-3, 1 - 1e-3], rtol=0, atol=1e-8)

    def test_zero_gradient(self):
        x = np.array([0.3, -0.2])
        opt = AdamState.like(x)
        adam_step(x, np.zeros(2), opt)
        np.testing.assert_array_equal(x, [0.3, -0.2])

    @pytest.mark.parametrize("lr", [0.01, 0.02, 0.05])
    def test_quadratic(self, lr):
        # f(x) = (x - 1)^2
        x = np.array([0.8])
        opt = AdamState.like(x, lr=lr)
        for _ in range(100):
            adam_step(x, 2 * (x - 1.0), opt)
        assert abs(x[0] - 1.0) < 1e-3

    def test_row_slice(self):
        x = np.ones((4, 3))
        opt = AdamState.like(x)
        adam_step(x, np.ones((4, 3)), opt, slice(0, 2))
        assert np.all(x[2:] == 1) and np.all(x[:2] < 1)
        assert np.all(opt.m[2:] == 0)

    def test_json_round_trip(self):
        opt = AdamState.like(np.zeros((2, 2)), lr=0.3)
        adam_step(np.zeros((2, 2)), np.arange(4.0).reshape(2, 2), opt)
        back = AdamState.from_json(opt.to_json())
        np.testing.assert_array_equal(back.v, opt.v)
        assert (back.step, back.lr) == (1, 0.3)


class TestMultiTask:
    def test_highest_rate_touches_only_first_block(self, toy):
        blocks = mtl_accumulate(perturbed(toy, "nnms"), batch_at(toy, [0], 30))
        assert np.any(blocks[0] != 0)
        assert all(np.all(b == 0) for b in blocks[1:])

    def test_lowest_rate_touches_every_block(self, toy):
        blocks = mtl_accumulate(perturbed(toy, "nnms"), batch_at(toy, [2], 30))
        assert all(np.any(b != 0) for b in blocks)

    @pytest.mark.parametrize("variant", ["nnbp", "nnms"])
    def test_mixed_batch_is_sum_over_rates(self, toy, variant):
        dec = perturbed(toy, variant)
        batch = batch_at(toy, None, 60)
        mixed = mtl_accumulate(dec, batch)
        total = [np.zeros_like(b) for b in mixed]
        for t in range(3):
            sel = batch.rate_index == t
            part = mtl_accumulate(dec, batch.subset(sel))
            for acc, p in zip(total, part):
                acc += p * sel.sum() / len(batch)
        for a, b in zip(mixed, total):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestDataset:
    def test_deterministic(self, toy):
        a = generate_dataset(toy, count=50, rng=frame_rng(1, 1))
        b = generate_dataset(toy, count=50, rng=frame_rng(1, 1))
        np.testing.assert_array_equal(a.llr, b.llr)
        np.testing.assert_array_equal(a.rate_index, b.rate_index)

    def test_rate_histogram(self, toy):
        n = 30000
        batch = generate_dataset(toy, count=n, rng=frame_rng(2, 1))
        counts = np.bincount(batch.rate_index, minlength=3)
        sigma = math.sqrt(n * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - n / 3) <= 3 * sigma)

    def test_snr_range(self, toy):
        batch = generate_dataset(toy, count=2000, rng=frame_rng(3, 1))
        assert batch.snr_db.min() >= 0 and batch.snr_db.max() < 6
        assert batch.snr_db.min() < 0.05 and batch.snr_db.max() > 5.95

    def test_frames_are_codewords_at_their_rate(self, toy):
        batch = generate_dataset(toy, count=60, rng=frame_rng(4, 1))
        for f in range(60):
            entry = toy.ladder[batch.rate_index[f]]
            assert not syndrome(toy.graph, batch.bits[f], entry.active_cn_count).any()
            assert not batch.bits[f, entry.active_vn_count :].any()
            assert np.all(batch.llr[f, entry.zero_llr_positions] == 0)
            assert np.all(batch.llr[f, entry.active_vn_count :] == 0)

    def test_all_zero_mode(self, toy):
        batch = generate_dataset(toy, count=20, rng=frame_rng(5, 1), all_zero=True)
        assert not batch.bits.any()


def small(seed, **kw):
    base = dict(L_max=3, lr=1e-3, batch_size=100, batches_per_stage=60, validation_frames=600, seed=seed, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def runs(toy):
    return [greedy_train(toy, small(seed)) for seed in range(5)]


class TestGreedy:
    def test_single_stage(self, toy):
        res = greedy_train(toy, small(0, L_max=1, batches_per_stage=5))
        assert len(res.validation) == 1 and len(res.stage_losses[0]) == 5
        assert res.optimizer.step == 5

    def test_held_out_loss_refines_stage_by_stage(self, runs):
        ok = [all(b <= a for a, b in zip(r.validation, r.validation[1:])) for r in runs]
        assert sum(ok) >= 4

    def test_trained_beats_min_sum_initialisation_per_rate(self, toy, runs):
        trained = runs[0].decoder
        init = NeuralDecoder(toy, trained.config)
        for t in range(3):
            held = generate_dataset(toy, (0.0, 6.0), 600, frame_rng(9, 2, t), rates=[t])
            assert validation_loss(trained, held) < validation_loss(init, held)

    def test_joint_pass(self, toy):
        res = greedy_train(toy, small(0, L_max=2, batches_per_stage=3, joint_batches=4))
        assert [len(s) for s in res.stage_losses] == [3, 3, 4]

    def test_protocol_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.batch_size, cfg.snr_lo, cfg.snr_hi) == (1e-4, 300, 0.0, 6.0)
        assert NeuralDecoderConfig().clip == 20


class TestConfigAndCheckpoints:
    def test_parse(self):
        cfg = parse_config("# comment\ncode = toy.bg\nvariant nnbp\nL_max=4\nrates = 0, 2\ndeterministic = yes\nlr 1e-3\n", seed=7)
        assert (cfg.code, cfg.variant, cfg.L_max, cfg.rates, cfg.deterministic, cfg.lr, cfg.seed) == (
            "toy.bg", "nnbp", 4, (0, 2), True, 1e-3, 7
        )

    @pytest.mark.parametrize("text, match", [("colour = red", "unknown"), ("deterministic = maybe", "line 1")])
    def test_parse_errors(self, text, match):
        with pytest.raises(ValueError, match=match):
            parse_config(text)

    def test_checkpoint_round_trip(self, toy, tmp_path):
        res = greedy_train(toy, small(1, L_max=1, batches_per_stage=2))
        path = save_checkpoint(tmp_path / "ck.rcnn", res.decoder, res.optimizer)
        dec, opt = load_checkpoint(path, toy)
        np.testing.assert_array_equal(dec.params.values, res.decoder.params.values)
        np.testing.assert_array_equal(opt.m, res.optimizer.m)
        assert opt.step == 2

    def test_batch_subset(self):
        b = TrainingBatch(np.zeros((4, 2)), np.zeros((4, 2), np.uint8), np.arange(4), np.zeros(4))
        assert len(b.subset(b.rate_index > 1)) == 2
