import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidir_mimo.channel_model import ChannelSet, TopologySpec
from bidir_mimo.errors import BiasDegenerateError, ConfigurationError
from bidir_mimo.mmse_core import (FilterBank, Kind, bias_factors,
                                  uplink_rx_update, uplink_tx_update)
from bidir_mimo.objectives import user_mse
from bidir_mimo.optimizer import OptimizerConfig, optimize_uplink
from bidir_mimo.training import (TrainingConfig, TrainingMode,
                                 backward_round, bidirectional_train,
                                 detect_offsets, dfd_outputs, estimate_bias,
                                 gen_pilots, ls_bts_rx, ls_user_rx, modulo,
                                 simulate_uplink_rx, thp_encode)

from conftest import make_channels, random_bank

TAU = 2 * np.sqrt(2)


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def converged(ch, kind=Kind.SUCCESSIVE, iters=30):
    return optimize_uplink(ch, OptimizerConfig(max_iters=iters,
                                               structure=kind)).bank


class TestPilots:

    def test_deterministic(self):
        assert np.array_equal(gen_pilots(3, 50, 7), gen_pilots(3, 50, 7))
        assert not np.array_equal(gen_pilots(3, 50, 7), gen_pilots(3, 50, 8))

    def test_unit_modulus_qpsk(self):
        S = gen_pilots(4, 1000, 1)
        assert np.all(np.abs(S) ** 2 == pytest.approx(1.0, abs=1e-15))
        assert set(np.unique(np.abs(S.real))) == {1 / np.sqrt(2)}

    def test_cross_correlation_small(self):
        S = gen_pilots(4, 10_000, 2)
        corr = S @ S.conj().T / 10_000
        off = corr[~np.eye(4, dtype=bool)]
        assert np.all(np.abs(off) < 0.03)

    @pytest.mark.parametrize("n", [16, 12])
    def test_orthogonal(self, n):
        S = gen_pilots(3, n, orthogonal=True)
        assert np.allclose(S @ S.conj().T, n * np.eye(3))
        assert np.allclose(np.abs(S), 1.0)

    def test_orthogonal_needs_enough_symbols(self):
        with pytest.raises(ConfigurationError):
            gen_pilots(5, 4, orthogonal=True)


class TestUplinkSimulation:

    def test_noiseless_scalar(self):
        spec = TopologySpec(1, 1, 1)
        ch = ChannelSet(spec, (((np.array([[2.0]]),),),))
        s = gen_pilots(1, 8, 0)
        Y = simulate_uplink_rx(ch, (np.ones(1),), s, noise_var=0.0)
        assert np.allclose(Y[0], 2 * s)

    def test_zero_precoders_give_noise(self):
        ch = make_channels(K=2, N=3, snr_db=3)
        Y = simulate_uplink_rx(ch, (np.zeros(2), np.zeros(2)),
                               gen_pilots(2, 20_000), seed=4)
        var = np.mean(np.abs(Y) ** 2)
        assert var == pytest.approx(ch.spec.uplink_noise_var, rel=0.03)

    def test_deterministic(self, rng):
        ch = make_channels(K=2, N=2, C=2)
        v = random_bank([2] * 4, rng)
        S = gen_pilots(4, 10)
        a = simulate_uplink_rx(ch, v, S, seed=[1, 2])
        b = simulate_uplink_rx(ch, v, S, seed=[1, 2])
        assert a.shape == (2, 2, 10) and np.array_equal(a, b)


class TestBtsEstimation:

    def test_noiseless_scalar(self):
        s = gen_pilots(1, 10, 3)
        est = ls_bts_rx(2 * s, s)
        assert est.g[0, 0] == pytest.approx(0.5)
        assert not est.regularized

    def test_converges_to_mmse(self):
        ch = make_channels(K=4, N=4, snr_db=10, seed=2)
        v = random_bank([2] * 4, np.random.default_rng(0), [1.0] * 4)
        g_ref, _ = uplink_rx_update(ch, v)
        S = gen_pilots(4, 20_000, 5)
        est = ls_bts_rx(simulate_uplink_rx(ch, v, S, seed=6)[0], S)
        for k in range(4):
            assert rel_err(est.g[:, k], g_ref[k]) < 0.05

    def test_successive_recovers_feedback_taps(self):
        # noiseless, orthogonal pilots: the block LS solution is exact
        ch = make_channels(K=3, N=3, snr_db=10, seed=3)
        v = random_bank([2] * 3, np.random.default_rng(1))
        S = gen_pilots(3, 16, orthogonal=True)
        Y = simulate_uplink_rx(ch, v, S, noise_var=0.0)[0]
        est = ls_bts_rx(Y, S, Kind.SUCCESSIVE)
        for k in range(3):
            for i in range(k):
                taps = est.g[:, k].conj() @ ch.link(0, i) @ v[i]
                assert abs(est.B[k, i] - taps) < 1e-8
        # the soft outputs then reproduce the pilots
        assert np.allclose(dfd_outputs(Y, S, est.g, est.B), S, atol=1e-8)

    def test_successive_estimate_consistent(self):
        ch = make_channels(K=4, N=4, snr_db=10, seed=4)
        v = random_bank([2] * 4, np.random.default_rng(2), [1.0] * 4)
        g_ref, B_ref = uplink_rx_update(ch, v, structure=Kind.SUCCESSIVE)
        S = gen_pilots(4, 20_000, 7)
        est = ls_bts_rx(simulate_uplink_rx(ch, v, S, seed=8)[0], S,
                        Kind.SUCCESSIVE)
        for k in range(4):
            assert rel_err(est.g[:, k], g_ref[k]) < 0.05
        assert np.allclose(est.B, B_ref[0], atol=0.05)

    def test_short_block_is_regularized(self):
        S = gen_pilots(2, 2, 0)
        Y = np.random.default_rng(0).standard_normal((4, 2)) + 0j
        est = ls_bts_rx(Y, S)
        assert est.regularized
        assert np.all(np.isfinite(est.g))

    def test_ls_error_shrinks_like_inverse_root_n(self):
        ch = make_channels(K=4, N=4, snr_db=10, seed=5)
        v = random_bank([2] * 4, np.random.default_rng(3), [1.0] * 4)
        g_ref, _ = uplink_rx_update(ch, v)
        errs = []
        for n in (100, 1000, 10_000):
            e = []
            for t in range(30):
                S = gen_pilots(4, n, [n, t])
                est = ls_bts_rx(simulate_uplink_rx(ch, v, S, seed=[n, t, 1])[0],
                                S)
                e.append(rel_err(est.g[:, 0], g_ref[0]))
            errs.append(np.median(e))
        for a, b in zip(errs, errs[1:]):
            assert np.sqrt(10) / 3 < a / b < 3 * np.sqrt(10)


class TestBias:

    def test_scaled_pilot(self):
        s = gen_pilots(1, 64, 1)[0]
        assert estimate_bias(0.7 * s, s) == pytest.approx(0.7)
        assert estimate_bias(s, s, 64) == pytest.approx(1.0)

    def test_noisy(self):
        rng = np.random.default_rng(4)
        s = gen_pilots(1, 10_000, 2)[0]
        sigma = 0.5
        noise = sigma * (rng.standard_normal(10_000)
                         + 1j * rng.standard_normal(10_000)) / np.sqrt(2)
        a = estimate_bias(0.6j * s + noise, s)
        assert abs(a - 0.6j) < 3 * sigma / 100


class TestTHP:

    def test_identity_feedback(self):
        S = gen_pilots(3, 20, 0)
        St, Z = thp_encode(S, np.eye(3), np.ones(3))
        assert np.array_equal(St, S) and not Z.any()

    def test_hand_example(self):
        S = np.array([[1 + 1j], [1 - 1j]]) / np.sqrt(2)
        B = np.array([[1, 0], [2 * np.sqrt(2), 1]], complex)
        St, Z = thp_encode(S, B, np.ones(2), TAU)
        assert St[1, 0] == pytest.approx(S[1, 0])
        assert St[0, 0] == pytest.approx(-1.2929 - 0.1213j, abs=1e-4)
        assert Z[0, 0] == pytest.approx(-2 * np.sqrt(2) * 1j)

    @settings(max_examples=40, deadline=None)
    @given(K=st.integers(1, 5), seed=st.integers(0, 2 ** 32),
           scale=st.floats(0.1, 20))
    def test_offset_arithmetic(self, K, seed, scale):
        rng = np.random.default_rng(seed)
        S = gen_pilots(K, 30, seed)
        B = np.tril(scale * (rng.standard_normal((K, K))
                             + 1j * rng.standard_normal((K, K))), -1)
        B += np.eye(K)
        alpha = rng.uniform(0.2, 1.0, K) * np.exp(2j * np.pi * rng.random(K))
        St, Z = thp_encode(S, B, alpha, TAU)
        for k in range(K):
            fb = np.conj(B[k + 1:, k] / alpha[k]) @ St[k + 1:]
            assert np.allclose(St[k] - Z[k] + fb, S[k], atol=1e-12)
        for part in (St.real, St.imag):
            assert np.all((part >= -TAU / 2 - 1e-12) & (part < TAU / 2))
        for part in (Z.real, Z.imag):
            m = part / TAU
            assert np.allclose(m, np.round(m), atol=1e-12)

    def test_degenerate_bias(self):
        with pytest.raises(BiasDegenerateError):
            thp_encode(gen_pilots(2, 4), np.eye(2), np.array([1.0, 1e-9]))

    def test_modulo_range(self):
        x = np.array([1.5, -1.5, 10.0 + 3j, TAU / 2])
        y = modulo(x, TAU)
        assert np.all((y.real >= -TAU / 2) & (y.real < TAU / 2))
        assert np.allclose(modulo(y, TAU), y)


class TestOffsetDetection:

    def test_noiseless_exact(self):
        s = gen_pilots(1, 50, 3)[0]
        Z = TAU * (np.random.default_rng(0).integers(-3, 4, 50)
                   + 1j * np.random.default_rng(1).integers(-3, 4, 50))
        gain = 0.4 - 0.3j
        assert np.array_equal(detect_offsets(gain * (s + Z), gain, s), Z)

    def test_small_noise_zero_offset(self):
        s = gen_pilots(1, 50, 3)[0]
        noisy = s + 0.05 * np.random.default_rng(2).standard_normal(50)
        assert not detect_offsets(noisy, 1.0, s).any()


class TestUserEstimation:

    def test_noiseless_scalar(self):
        s = gen_pilots(1, 16, 0)
        h = np.array([[2.0], [1.0j]]) / np.sqrt(5)
        v = ls_user_rx(2 * h @ s, s[0], 1.0)
        assert np.vdot(v, v).real == pytest.approx(1.0, rel=1e-9)
        assert np.vdot(h[:, 0], v).real > 0

    def test_norm_always_met(self, rng):
        for p in (0.1, 1.0, 7.0):
            Y = rng.standard_normal((3, 25)) + 1j * rng.standard_normal((3, 25))
            v = ls_user_rx(Y, gen_pilots(1, 25)[0], p)
            assert np.vdot(v, v).real == pytest.approx(p, rel=1e-9)

    def test_linear_round_matches_closed_form(self):
        # many pilots: the trained filters approach the precoder update
        ch = make_channels(K=4, N=4, snr_db=10, seed=7)
        g = random_bank([4] * 4, np.random.default_rng(5))
        ref = uplink_tx_update(ch, g)
        out = backward_round(ch, FilterBank(g=g), gen_pilots(4, 20_000, 1),
                             TrainingMode.LINEAR, seed=2)
        for u in range(4):
            assert rel_err(out.v[u], ref[u]) < 0.05
            assert np.vdot(out.v[u], out.v[u]).real == pytest.approx(1.0)


class TestBackwardRound:

    def test_sequential_layers_exclude_later_users(self):
        # with noiseless orthogonal pilots, user k's samples hold no energy
        # from the pilots of users encoded after it
        ch = make_channels(K=3, N=3, N_k=2, seed=8)
        bank = converged(ch)
        S = gen_pilots(3, 16, orthogonal=True)
        out = backward_round(ch, bank, S, "sequential", noise=0.0)
        alt = backward_round(ch, bank, S * np.array([[1], [1], [-1]]),
                             "sequential", noise=0.0)
        # flipping user 3's pilot changes nothing for users 1 and 2
        assert np.allclose(out.v[0], alt.v[0]) and np.allclose(out.v[1],
                                                               alt.v[1])

    def test_thp_cancels_later_users_exactly(self):
        ch = make_channels(K=4, N=4, N_k=2, snr_db=20, seed=9)
        bank = converged(ch)
        S = gen_pilots(4, 40, 3)
        St, Z = thp_encode(S, bank.B[0], bank.alpha, TAU)
        for k in range(4):
            out = sum(bank.v[k].conj() @ ch.link(0, k).conj().T @ bank.g[i]
                      * St[i] for i in range(k + 1, 4))
            own = np.conj(bank.alpha[k]) * (S[k] + Z[k] - St[k])
            scale = max(1.0, np.max(np.abs(own)))
            assert np.max(np.abs(out - own)) <= 1e-9 * scale

    def test_thp_offsets_detected_at_high_snr(self):
        ch = make_channels(K=4, N=4, N_k=2, snr_db=30, seed=10)
        bank = converged(ch)
        out = backward_round(ch, bank, gen_pilots(4, 2000, 4), "thp", seed=5)
        assert out.offset_total == 8000
        assert out.offset_errors / out.offset_total < 0.01

    def test_sequential_and_thp_agree_noiseless(self):
        # single-antenna users, exact filters, noiseless orthogonal pilots.
        # The first-decoded user sees no residual interference in either
        # scheme, so both give the same filter. Later users see THP symbols
        # that stay correlated with their own pilots, so agreement is loose.
        ch = make_channels(K=3, N=3, N_k=1, snr_db=15, seed=11)
        bank = converged(ch)
        S = gen_pilots(3, 1024, orthogonal=True)
        seq = backward_round(ch, bank, S, "sequential", noise=0.0)
        thp = backward_round(ch, bank, S, "thp", noise=0.0)
        g = bank.g
        m_seq = user_mse(ch, FilterBank(t=g, r=seq.v), Kind.SUCCESSIVE,
                         direction="downlink")
        m_thp = user_mse(ch, FilterBank(t=g, r=thp.v), Kind.SUCCESSIVE,
                         direction="downlink")
        assert m_seq[0] == pytest.approx(m_thp[0], rel=1e-6)
        assert np.allclose(m_seq, m_thp, rtol=1e-2)
        assert thp.offset_errors == 0

    def test_thp_needs_forward_estimates(self):
        ch = make_channels(K=2, N=2)
        with pytest.raises(ConfigurationError):
            backward_round(ch, FilterBank(g=(np.ones(2), np.ones(2))),
                           gen_pilots(2, 4), "thp")


class TestBidirectionalTraining:

    @pytest.mark.parametrize("mode", ["linear", "sequential", "thp"])
    def test_oracle_reproduces_optimizer(self, mode):
        ch = make_channels(K=3, N=3, C=2, snr_db=15, seed=12)
        kind = Kind.LINEAR if mode == "linear" else Kind.SUCCESSIVE
        ref = optimize_uplink(ch, OptimizerConfig(max_iters=6,
                                                  rel_tol=1e-300,
                                                  structure=kind))
        res = bidirectional_train(ch, TrainingConfig(rounds=6, mode=mode,
                                                     oracle_updates=True))
        got = [r["sum_mse"] for r in res.trajectory]
        assert np.allclose(got, ref.trajectory[1::2], rtol=0, atol=1e-9)

    def test_deterministic(self):
        ch = make_channels(seed=13)
        cfg = TrainingConfig(n=20, rounds=2, mode="thp", seed=3)
        a = bidirectional_train(ch, cfg)
        b = bidirectional_train(ch, cfg)
        assert a.trajectory == b.trajectory
        assert all(np.array_equal(x, y) for x, y in zip(a.bank.v, b.bank.v))

    @pytest.mark.parametrize("mode", ["linear", "sequential", "thp"])
    def test_trained_filters_meet_power(self, mode):
        ch = make_channels(K=2, N=3, C=2, seed=14)
        res = bidirectional_train(ch, TrainingConfig(n=30, rounds=3,
                                                     mode=mode))
        for x, p in zip(res.bank.v, ch.spec.user_powers):
            assert np.vdot(x, x).real == pytest.approx(p, rel=1e-9)
        assert [r["round"] for r in res.trajectory] == [1, 2, 3]

    def test_training_tracks_oracle(self):
        rates, oracle = [], []
        for s in range(10):
            ch = make_channels(snr_db=10, seed=100 + s)
            a = bidirectional_train(ch, TrainingConfig(n=200, rounds=2,
                                                       mode="thp", seed=s))
            b = bidirectional_train(ch, TrainingConfig(rounds=2, mode="thp",
                                                       oracle_updates=True))
            rates.append(a.trajectory[-1]["sum_rate"])
            oracle.append(b.trajectory[-1]["sum_rate"])
        assert np.mean(rates) > 0.9 * np.mean(oracle)

    @pytest.mark.parametrize("kw", [dict(n=0), dict(rounds=0), dict(tau=0.0),
                                    dict(gamma=-1.0), dict(mode="zf")])
    def test_invalid_config(self, kw):
        with pytest.raises((ConfigurationError, ValueError)):
            TrainingConfig(**kw)


def test_bias_of_exact_filters_matches_estimate():
    ch = make_channels(K=2, N=3, snr_db=40, seed=15)
    bank = converged(ch, Kind.LINEAR)
    S = gen_pilots(2, 4096, 1)
    Y = simulate_uplink_rx(ch, bank.v, S, seed=2)[0]
    G = np.stack(bank.g, axis=1)
    s_hat = dfd_outputs(Y, S, G, np.eye(2))
    exact = bias_factors(ch, bank.v, bank.g)
    for k in range(2):
        assert abs(estimate_bias(s_hat[k], S[k]) - exact[k]) < 0.05
