import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rcldpc.channel import ChannelModel, add_awgn, frame_rng, llr_from_channel, modulate

from conftest import channel_llr


class TestChannelModel:
    @given(snr=st.floats(-5, 20), rate=st.floats(0.05, 1.0))
    def test_ebn0_bpsk_sigma(self, snr, rate):
        cm = ChannelModel(snr, "bpsk", "ebn0", rate)
        assert cm.noise_sigma2 == pytest.approx(1 / (2 * rate * 10 ** (snr / 10)))

    def test_qpsk_carries_two_bits(self):
        b = ChannelModel(2.0, "bpsk", "ebn0", 0.5).noise_sigma2
        q = ChannelModel(2.0, "qpsk", "ebn0", 0.5).noise_sigma2
        assert q == pytest.approx(b / 2)

    def test_esn0_ignores_rate(self):
        assert ChannelModel(3.0, snr_convention="esn0", rate=0.25).noise_sigma2 == pytest.approx(
            1 / (2 * 10**0.3)
        )

    @given(sigma2=st.floats(1e-4, 10.0))
    def test_from_sigma2_round_trip(self, sigma2):
        assert ChannelModel.from_sigma2(sigma2, rate=0.4).noise_sigma2 == pytest.approx(sigma2)

    @pytest.mark.parametrize("kw", [dict(modulation="8psk"), dict(snr_convention="snr"), dict(rate=0.0)])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValueError):
            ChannelModel(1.0, **kw)


class TestModulation:
    def test_bpsk(self):
        np.testing.assert_array_equal(modulate(np.array([0, 1, 1, 0])), [1.0, -1.0, -1.0, 1.0])

    def test_qpsk_gray_map(self):
        s = modulate(np.array([0, 0, 0, 1, 1, 0, 1, 1]), "qpsk") * math.sqrt(2)
        np.testing.assert_allclose(s, [1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j])
        np.testing.assert_allclose(np.abs(s / math.sqrt(2)), 1.0)

    def test_qpsk_odd_length(self):
        with pytest.raises(ValueError, match="even"):
            modulate(np.zeros(3, dtype=np.uint8), "qpsk")

    def test_unknown(self):
        with pytest.raises(ValueError):
            modulate(np.zeros(2), "fsk")


class TestLlr:
    def test_bpsk_matches_gaussian_log_ratio(self, toy):
        entry = toy.ladder[1]
        cm = ChannelModel(1.5, rate=entry.rate_value)
        rng = np.random.default_rng(0)
        y = rng.normal(0, 1.5, len(entry.transmitted_positions))
        llr = llr_from_channel(add_awgn(y, cm, rng), cm, entry, toy.N).llr
        sd = math.sqrt(cm.noise_sigma2)
        yy = llr[entry.transmitted_positions] * cm.noise_sigma2 / 2
        expect = stats.norm.logpdf(yy, 1, sd) - stats.norm.logpdf(yy, -1, sd)
        np.testing.assert_allclose(llr[entry.transmitted_positions], expect, rtol=1e-9, atol=1e-9)

    def test_qpsk_matches_per_dimension_ratio(self, toy):
        entry = toy.ladder[0]
        cm = ChannelModel(2.0, "qpsk", rate=entry.rate_value)
        rng = np.random.default_rng(1)
        n = len(entry.transmitted_positions)
        frame = add_awgn(modulate(rng.integers(0, 2, n), "qpsk"), cm, rng)
        llr = llr_from_channel(frame, cm, entry, toy.N).llr[entry.transmitted_positions]
        a, sd = 1 / math.sqrt(2), math.sqrt(cm.noise_sigma2)
        dims = np.stack([frame.symbols.real, frame.symbols.imag], axis=1).ravel()
        expect = stats.norm.logpdf(dims, a, sd) - stats.norm.logpdf(dims, -a, sd)
        np.testing.assert_allclose(llr, expect, rtol=1e-9, atol=1e-9)

    def test_untransmitted_are_exact_zero(self, bg2):
        _, llr = channel_llr(bg2, 0, 4, 1.0)
        entry = bg2.ladder[0]
        assert np.all(llr[:, entry.zero_llr_positions] == 0.0)
        assert np.all(llr[:, entry.active_vn_count :] == 0.0)
        assert np.all(llr[:, entry.transmitted_positions] != 0.0)

    def test_length_mismatch(self, toy):
        entry = toy.ladder[0]
        cm = ChannelModel(1.0)
        with pytest.raises(ValueError):
            llr_from_channel(add_awgn(np.ones(3), cm, np.random.default_rng()), cm, entry, toy.N)

    def test_high_snr_hard_decisions(self, toy):
        bits, llr = channel_llr(toy, 2, 200, 40.0)
        tx = toy.ladder[2].transmitted_positions
        np.testing.assert_array_equal((llr[:, tx] < 0).astype(np.uint8), bits[:, tx])

    def test_qpsk_and_bpsk_llrs_share_a_distribution(self, toy):
        # at equal Eb/N0 both give N(4 R snr, 8 R snr) LLRs for transmitted zeros
        entry = toy.ladder[2]
        zeros = np.zeros(len(entry.transmitted_positions), dtype=np.uint8)
        out = {}
        for mod in ("bpsk", "qpsk"):
            cm = ChannelModel(2.0, mod, rate=entry.rate_value)
            rng = frame_rng(5, 0 if mod == "bpsk" else 1)
            vals = [llr_from_channel(add_awgn(modulate(zeros, mod), cm, rng), cm, entry, toy.N).llr for _ in range(200)]
            out[mod] = np.stack(vals)[:, entry.transmitted_positions].ravel()
        assert stats.ks_2samp(out["bpsk"], out["qpsk"]).pvalue > 1e-3
        snr = entry.rate_value * 10**0.2
        assert out["qpsk"].mean() == pytest.approx(4 * snr, rel=0.02)
        assert out["qpsk"].var() == pytest.approx(8 * snr, rel=0.05)


class TestStreams:
    def test_reproducible(self):
        a = frame_rng(7, 1, 2).standard_normal(5)
        np.testing.assert_array_equal(a, frame_rng(7, 1, 2).standard_normal(5))

    def test_distinct_keys(self):
        assert not np.array_equal(frame_rng(7, 1, 2).standard_normal(5), frame_rng(7, 2, 1).standard_normal(5))
        assert not np.array_equal(frame_rng(7, 1).standard_normal(5), frame_rng(8, 1).standard_normal(5))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_noise_is_standard(self, seed):
        cm = ChannelModel.from_sigma2(1.0)
        noise = add_awgn(np.zeros(4000), cm, frame_rng(seed)).symbols
        assert abs(noise.mean()) < 5 / math.sqrt(4000)
        assert noise.var() == pytest.approx(1.0, abs=0.12)
