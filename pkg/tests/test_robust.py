import numpy as np
import pytest
import scipy.linalg

from netmor.errors import Infeasible, NotBistable, NotPositiveDefinite
from netmor.lft import (
    InterconnectionSpec,
    PartitionedModel,
    assemble_interconnection,
    build_environment,
    lower_lft_samples,
    upper_lft_samples,
)
from netmor.robust import (
    ChannelLayout,
    DScalePair,
    EpsilonOptions,
    WeightStack,
    build_N_env,
    build_N_sys,
    check_robust_condition,
    extended_environment,
    filter_weight,
    optimize_epsilon,
    per_frequency_diagonal_weights,
    spec_membership,
    stack_samples,
)
from netmor.sampling import sample_coupled_errors
from netmor.statespace import (
    FrequencyGrid,
    FrequencyResponse,
    StateSpaceModel,
    evaluate_response,
    identity,
    parallel_diag,
    static_gain,
)

from conftest import grid_max_sigma, random_interconnection, random_stable_model

GRID = FrequencyGrid.log_spaced(1e-2, 1e2, 25)


def identity_stack(spec, mode, perf_gain=1.0):
    """All-identity shape weights sized for the given interconnection."""
    k = spec.k
    v_abs, w_abs, v_red, w_red = [], [], [], []
    for m_j, p_j in spec.subsystem_io:
        if mode == "env":
            v_abs.append(identity(p_j))
            w_abs.append(identity(m_j))
        else:
            v_abs.append(identity(m_j))
            w_abs.append(identity(p_j))
        v_red.append(identity(m_j))
        w_red.append(identity(p_j))
    return WeightStack(
        mode,
        tuple(v_abs),
        tuple(w_abs),
        tuple(v_red),
        tuple(w_red),
        static_gain(perf_gain * np.eye(spec.p_C)),
        identity(spec.m_C),
    )


def random_hat_models(rng, spec, subsystems, scale=0.2):
    """Random stable stand-ins for abstracted environments and reduced parts."""
    env_hats = []
    sub_hats = []
    for j, (m_j, p_j) in enumerate(spec.subsystem_io, start=1):
        E = build_environment(spec, subsystems, j)
        pert = random_stable_model(rng, 3, E.base.m, E.base.p)
        pk = grid_max_sigma(pert, GRID)
        pert = StateSpaceModel(pert.A, pert.B * (scale / max(pk, 1e-12)), pert.C, pert.D)
        from netmor.statespace import add

        env_hats.append(PartitionedModel(add(E.base, pert), E.row_split, E.col_split))
        g = subsystems[j - 1]
        gp = random_stable_model(rng, 2, m_j, p_j)
        pk = grid_max_sigma(gp, GRID)
        gp = StateSpaceModel(gp.A, gp.B * (scale / max(pk, 1e-12)), gp.C, gp.D)
        sub_hats.append(add(g, gp))
    return env_hats, sub_hats


def coupled_error_sample(spec, subsystems, sub_hats, w):
    S = evaluate_response(spec.S.base, w)
    splits = ((spec.p_C, spec.m_B), (spec.m_C, spec.p_B))
    full = lower_lft_samples(S, splits, scipy.linalg.block_diag(*[evaluate_response(g, w) for g in subsystems]))
    red = lower_lft_samples(S, splits, scipy.linalg.block_diag(*[evaluate_response(g, w) for g in sub_hats]))
    return red - full


def bare_loop_sample(E22, sub):
    return sub @ np.linalg.inv(np.eye(E22.shape[0]) - E22 @ sub)


class TestBuildNEnv:
    def test_scalar_static_hand_oracle(self, rng):
        # one scalar subsystem, all-static coupling: every block hand-computed
        s11, s12, s21, s22 = 0.3, 0.7, -0.4, 0.25
        sig = 0.5
        spec = InterconnectionSpec(
            PartitionedModel(static_gain([[s11, s12], [s21, s22]]), (1, 1), (1, 1)),
            ((1, 1),),
        )
        N = build_N_env(spec, [static_gain([[sig]])])
        sample = N.response(1.0)
        M = sig / (1.0 - sig * s22)
        E22 = s22  # single subsystem: the environment is the coupling block
        Z = s22 - E22
        hand = np.array(
            [
                [-M, 1 + M * Z, M, M * s21],
                [-Z * M - 1, Z * (1 + M * Z), Z * M, (1 + Z * M) * s21],
                [-M, M * Z, M, M * s21],
                [-s12 * M, s12 * (1 + M * Z), s12 * M, 0.0],
            ]
        )
        assert np.allclose(sample, hand, atol=1e-12)

    def test_decoupled_collapse(self, rng):
        spec, subs = random_interconnection(rng, k=2)
        D = spec.S.base.D.copy()
        D[spec.p_C :, spec.m_C :] = 0.0
        spec0 = InterconnectionSpec(
            PartitionedModel(static_gain(D), spec.S.row_split, spec.S.col_split),
            spec.subsystem_io,
        )
        N = build_N_env(spec0, subs)
        w = 1.3
        SB = scipy.linalg.block_diag(*[evaluate_response(g, w) for g in subs])
        sample = N.response(w)
        p_B, m_B = spec0.p_B, spec0.m_B
        # Z = 0 and M = SB when the internal coupling vanishes
        assert np.allclose(sample[:p_B, :m_B], -SB, atol=1e-10)
        assert np.allclose(
            sample[p_B : p_B + m_B, m_B : m_B + p_B], np.zeros((m_B, p_B)), atol=1e-10
        )

    @pytest.mark.parametrize("seed", range(4))
    def test_theorem_oracle_equivalence(self, seed):
        rng = np.random.default_rng(777 + seed)
        spec, subs = random_interconnection(rng, k=3)
        N = build_N_env(spec, subs)
        env_hats, sub_hats = random_hat_models(rng, spec, subs)
        peak = max(
            np.linalg.norm(coupled_error_sample(spec, subs, sub_hats, w), 2)
            for w in GRID.omegas
        )
        for w in GRID.omegas[::3]:
            blocks = []
            e22h = []
            for j in range(1, spec.k + 1):
                E = build_environment(spec, subs, j)
                m_j, p_j = spec.subsystem_io[j - 1]
                Eh = env_hats[j - 1]
                e_true = evaluate_response(E.block(2, 2), w)
                e_hat = evaluate_response(Eh.block(2, 2), w)
                blocks.append(e_hat - e_true)
                e22h.append(e_hat)
            for j in range(1, spec.k + 1):
                sig = evaluate_response(subs[j - 1], w)
                sigh = evaluate_response(sub_hats[j - 1], w)
                blocks.append(bare_loop_sample(e22h[j - 1], sigh) - bare_loop_sample(e22h[j - 1], sig))
            blocks.extend(blocks[: spec.k])  # abstraction errors repeat
            lam = scipy.linalg.block_diag(*blocks)
            Ns = N.response(w)
            do = N.layout.dim("out")
            di = N.layout.dim("in")
            splits = ((do - spec.p_C, spec.p_C), (di - spec.m_C, spec.m_C))
            got = upper_lft_samples(Ns, splits, lam)
            want = coupled_error_sample(spec, subs, sub_hats, w)
            assert np.linalg.norm(got - want, 2) <= 1e-6 * max(peak, 1e-12)

    def test_realization_matches_samples(self, rng):
        spec, subs = random_interconnection(rng, k=2, max_order=3)
        N = build_N_env(spec, subs)
        real = N.realize()
        for w in (0.3, 2.0, 15.0):
            assert np.allclose(
                evaluate_response(real.base, w), N.response(w), rtol=1e-8, atol=1e-10
            )


class TestBuildNSys:
    def test_extended_environment_identity(self, rng):
        # closing the extended environment with the abstraction errors must
        # reproduce the abstracted environment's feedback block
        spec, subs = random_interconnection(rng, k=3)
        _, sub_hats = random_hat_models(rng, spec, subs)
        for j in range(1, spec.k + 1):
            ext = extended_environment(spec, subs, j)
            hats = [g for l, g in enumerate(sub_hats, start=1) if l != j]
            fulls = [g for l, g in enumerate(subs, start=1) if l != j]
            env_hat = build_environment(spec, sub_hats, j)
            for w in (0.2, 1.0, 8.0):
                ext_s = evaluate_response(ext.base, w)
                err = scipy.linalg.block_diag(
                    *[evaluate_response(h, w) - evaluate_response(f, w) for h, f in zip(hats, fulls)]
                )
                splits = ((ext.p1, ext.p2), (ext.m1, ext.m2))
                got = lower_lft_samples(ext_s, splits, err)
                want = evaluate_response(env_hat.block(2, 2), w)
                assert np.allclose(got, want, rtol=1e-8, atol=1e-10)

    def test_two_subsystem_static_hand_oracle(self, rng):
        spec, _ = random_interconnection(rng, k=2)
        subs = [static_gain(0.2 * rng.standard_normal((p, m))) for m, p in spec.subsystem_io]
        w = 1.0
        S22 = evaluate_response(spec.S.base, w)[spec.p_C :, spec.m_C :]
        in_off = spec.input_offsets() + [spec.m_B]
        out_off = spec.output_offsets() + [spec.p_B]
        for j in (1, 2):
            other = 2 if j == 1 else 1
            rj = slice(in_off[j - 1], in_off[j])
            cj = slice(out_off[j - 1], out_off[j])
            rl = slice(in_off[other - 1], in_off[other])
            cl = slice(out_off[other - 1], out_off[other])
            sig_l = subs[other - 1].D
            L = np.linalg.inv(np.eye(S22[rl, cl].shape[0]) - S22[rl, cl] @ sig_l)
            hand = np.block(
                [
                    [
                        S22[rj, cj] + S22[rj, cl] @ sig_l @ L @ S22[rl, cj],
                        S22[rj, cl] @ (np.eye(sig_l.shape[0]) + sig_l @ L @ S22[rl, cl]),
                    ],
                    [L @ S22[rl, cj], L @ S22[rl, cl]],
                ]
            )
            ext = extended_environment(spec, subs, j)
            assert np.allclose(evaluate_response(ext.base, w), hand, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_theorem_oracle_equivalence(self, seed):
        rng = np.random.default_rng(31337 + seed)
        spec, subs = random_interconnection(rng, k=3)
        N = build_N_sys(spec, subs)
        _, abs_hats = random_hat_models(rng, spec, subs)
        _, sub_hats = random_hat_models(rng, spec, subs, scale=0.15)
        env_hats = [build_environment(spec, abs_hats, j) for j in range(1, spec.k + 1)]
        peak = max(
            np.linalg.norm(coupled_error_sample(spec, subs, sub_hats, w), 2)
            for w in GRID.omegas
        )
        for w in GRID.omegas[::3]:
            ea = [
                evaluate_response(abs_hats[j], w) - evaluate_response(subs[j], w)
                for j in range(spec.k)
            ]
            abar = [
                scipy.linalg.block_diag(*[ea[l] for l in range(spec.k) if l != j])
                for j in range(spec.k)
            ]
            ef = []
            for j in range(spec.k):
                e22h = evaluate_response(env_hats[j].block(2, 2), w)
                sig = evaluate_response(subs[j], w)
                sigh = evaluate_response(sub_hats[j], w)
                ef.append(bare_loop_sample(e22h, sigh) - bare_loop_sample(e22h, sig))
            lam = scipy.linalg.block_diag(*(abar + ef + abar))
            Ns = N.response(w)
            do, di = N.layout.dim("out"), N.layout.dim("in")
            splits = ((do - spec.p_C, spec.p_C), (di - spec.m_C, spec.m_C))
            got = upper_lft_samples(Ns, splits, lam)
            want = coupled_error_sample(spec, subs, sub_hats, w)
            assert np.linalg.norm(got - want, 2) <= 1e-6 * max(peak, 1e-12)

    def test_zero_abstraction_consistency_with_env_mode(self, rng):
        # with exact abstractions both interconnections express the same error
        spec, subs = random_interconnection(rng, k=3)
        Ne = build_N_env(spec, subs)
        Ns = build_N_sys(spec, subs)
        _, sub_hats = random_hat_models(rng, spec, subs)
        for w in (0.5, 5.0):
            ef = []
            for j in range(spec.k):
                E = build_environment(spec, subs, j + 1)
                e22 = evaluate_response(E.block(2, 2), w)
                sig = evaluate_response(subs[j], w)
                sigh = evaluate_response(sub_hats[j], w)
                ef.append(bare_loop_sample(e22, sigh) - bare_loop_sample(e22, sig))
            want = coupled_error_sample(spec, subs, sub_hats, w)
            # env mode with zero abstraction errors
            blocks = [np.zeros((m, p)) for m, p in spec.subsystem_io]
            lam_e = scipy.linalg.block_diag(*(blocks + ef + blocks))
            do, di = Ne.layout.dim("out"), Ne.layout.dim("in")
            got_e = upper_lft_samples(
                Ne.response(w), ((do - spec.p_C, spec.p_C), (di - spec.m_C, spec.m_C)), lam_e
            )
            # sys mode with zero abstraction errors
            zbar = [
                scipy.linalg.block_diag(
                    *[np.zeros((p, m)) for l, (m, p) in enumerate(spec.subsystem_io) if l != j]
                )
                for j in range(spec.k)
            ]
            lam_s = scipy.linalg.block_diag(*(zbar + ef + zbar))
            do, di = Ns.layout.dim("out"), Ns.layout.dim("in")
            got_s = upper_lft_samples(
                Ns.response(w), ((do - spec.p_C, spec.p_C), (di - spec.m_C, spec.m_C)), lam_s
            )
            assert np.allclose(got_e, want, rtol=1e-7, atol=1e-10)
            assert np.allclose(got_s, want, rtol=1e-7, atol=1e-10)


class TestDScales:
    def test_identity_scales_assemble(self, rng):
        spec, subs = random_interconnection(rng, k=3)
        layout = ChannelLayout("env", spec.subsystem_io, (spec.m_C, spec.p_C))
        D = DScalePair.identity(layout)
        dl, dr = D.d_left(), D.d_right()
        assert np.allclose(dl, np.eye(layout.dim("out")))
        assert np.allclose(dr, np.eye(layout.dim("in")))

    def test_invalid_blocks_rejected(self, rng):
        spec, _ = random_interconnection(rng, k=2)
        layout = ChannelLayout("env", spec.subsystem_io, (spec.m_C, spec.p_C))
        with pytest.raises(NotPositiveDefinite):
            DScalePair(layout, (np.diag([1.0, -1.0]), np.eye(2)), (1.0, 1.0))
        with pytest.raises(NotPositiveDefinite):
            DScalePair(layout, (np.eye(2), np.eye(2)), (1.0, -2.0))

    @pytest.mark.parametrize("mode", ["env", "sys"])
    def test_scaling_commutes_with_repeated_structure(self, rng, mode):
        # D_r^-1/2 Lambda D_l^1/2 preserves each block's norm for admissible
        # repeated-block uncertainty
        spec, subs = random_interconnection(rng, k=3)
        layout = ChannelLayout(mode, spec.subsystem_io, (spec.m_C, spec.p_C))
        nc = layout.n_copies()
        blocks = []
        for _ in range(layout.k):
            X = rng.standard_normal((nc, nc)) + 1j * rng.standard_normal((nc, nc))
            blocks.append(X @ X.conj().T + 0.5 * np.eye(nc))
        D = DScalePair(layout, tuple(blocks), tuple(rng.uniform(0.5, 2.0, layout.k)), "full_blocks")
        # sorted admissible uncertainty: nc repeats of one random contraction per group
        lam_parts = []
        norms = []
        for l in range(layout.k):
            r = layout._abs_chunk("in", l)
            c = layout._abs_chunk("out", l)
            blk = rng.standard_normal((r, c)) + 1j * rng.standard_normal((r, c))
            blk /= np.linalg.norm(blk, 2) * rng.uniform(1.0, 3.0)
            norms.append(np.linalg.norm(blk, 2))
            lam_parts.extend([blk] * nc)
        for j in range(layout.k):
            r = layout.red_chunk("in", j).size
            c = layout.red_chunk("out", j).size
            blk = rng.standard_normal((r, c)) + 1j * rng.standard_normal((r, c))
            blk /= np.linalg.norm(blk, 2) * 1.7
            norms.append(np.linalg.norm(blk, 2))
            lam_parts.append(blk)
        blk = rng.standard_normal((layout.ext_chunk("in").size, layout.ext_chunk("out").size))
        blk = blk / np.linalg.norm(blk, 2) * 0.8
        norms.append(0.8)
        lam_parts.append(blk)
        lam_sorted = scipy.linalg.block_diag(*lam_parts)
        Sl = D.sorted_left()
        Sr = D.sorted_right()
        Sr_isqrt = np.linalg.inv(scipy.linalg.sqrtm(Sr))
        Sl_sqrt = scipy.linalg.sqrtm(Sl)
        scaled = Sr_isqrt @ lam_sorted @ Sl_sqrt
        assert np.linalg.norm(scaled, 2) == pytest.approx(max(norms), rel=1e-8)


class TestRobustCondition:
    def _layout(self, rng, k=2):
        spec, subs = random_interconnection(rng, k=k)
        return ChannelLayout("env", spec.subsystem_io, (spec.m_C, spec.p_C))

    def test_zero_interconnection(self, rng):
        layout = self._layout(rng)
        D = DScalePair.identity(layout)
        grid = FrequencyGrid.log_spaced(0.1, 10.0, 5)
        samples = np.zeros((5, layout.dim("out"), layout.dim("in")))
        ok, margin = check_robust_condition(FrequencyResponse(grid, samples), D)
        assert ok and margin == pytest.approx(1.0)

    def test_small_gain_violation(self, rng):
        layout = self._layout(rng)
        D = DScalePair.identity(layout)
        grid = FrequencyGrid.log_spaced(0.1, 10.0, 5)
        samples = np.zeros((5, layout.dim("out"), layout.dim("in")), dtype=complex)
        samples[2, 0, 0] = 1.1
        ok, margin = check_robust_condition(FrequencyResponse(grid, samples), D)
        assert not ok and margin == pytest.approx(1.0 - 1.21, rel=1e-9)

    def test_contractive_margin(self, rng):
        layout = self._layout(rng)
        D = DScalePair.identity(layout)
        grid = FrequencyGrid.log_spaced(0.1, 10.0, 7)
        do, di = layout.dim("out"), layout.dim("in")
        samples = np.empty((7, do, di), dtype=complex)
        for i in range(7):
            X = rng.standard_normal((do, di)) + 1j * rng.standard_normal((do, di))
            samples[i] = 0.9 * X / np.linalg.norm(X, 2)
        ok, margin = check_robust_condition(FrequencyResponse(grid, samples), D)
        assert ok
        assert margin == pytest.approx(1.0 - 0.81, rel=1e-9)


class TestSpecMembership:
    def test_zero_error_passes_with_full_margin(self, rng):
        g = static_gain(np.zeros((2, 2)))
        check = spec_membership(g, identity(2), identity(2), 0.5, GRID)
        assert check.passed and check.margin == pytest.approx(0.5)

    def test_constructed_violation(self, rng):
        w = filter_weight("low-pass", 1.0, 2.0, 0.5)
        v = filter_weight("high-pass", 3.0, 0.5, 2.0)
        # err = 1.5 * eps * W * V makes the weighted norm exactly 1.5 * eps
        eps = 0.4
        from netmor.statespace import series

        err = series(w, series(static_gain([[1.5 * eps]]), v))
        check = spec_membership(err, w, v, eps, GRID)
        assert not check.passed
        assert check.norm >= 1.4 * eps

    def test_unstable_fails_with_reason(self):
        bad = StateSpaceModel([[0.5]], [[1.0]], [[1.0]], [[0.0]])
        check = spec_membership(bad, identity(1), identity(1), 1.0, GRID)
        assert not check.passed and "unstable" in check.reason


class TestOptimizeEpsilon:
    def _perf_only_problem(self, layout, gain):
        grid = FrequencyGrid.log_spaced(0.1, 10.0, 9)
        do, di = layout.dim("out"), layout.dim("in")
        samples = np.zeros((9, do, di), dtype=complex)
        pe_o = layout.ext_chunk("out")
        pe_i = layout.ext_chunk("in")
        samples[:, pe_o[0], pe_i[0]] = gain
        return FrequencyResponse(grid, samples)

    def test_uncoupled_grows_to_cap(self, rng):
        spec, _ = random_interconnection(rng, k=2)
        layout = ChannelLayout("env", spec.subsystem_io, (spec.m_C, spec.p_C))
        P = self._perf_only_problem(layout, 0.5)
        opts = EpsilonOptions(eps_cap=1e6)
        eps, D = optimize_epsilon(P, DScalePair.identity(layout), opts)
        assert np.all(eps == pytest.approx(1e6))

    def test_performance_channel_infeasible(self, rng):
        spec, _ = random_interconnection(rng, k=2)
        layout = ChannelLayout("env", spec.subsystem_io, (spec.m_C, spec.p_C))
        P = self._perf_only_problem(layout, 1.2)
        with pytest.raises(Infeasible):
            optimize_epsilon(P, DScalePair.identity(layout))

    def test_unit_norm_bisection_oracle(self, rng):
        spec, _ = random_interconnection(rng, k=2)
        layout = ChannelLayout("env", spec.subsystem_io, (spec.m_C, spec.p_C))
        grid = FrequencyGrid.log_spaced(0.1, 10.0, 5)
        do, di = layout.dim("out"), layout.dim("in")
        samples = np.zeros((5, do, di), dtype=complex)
        samples[:, 0, 0] = 1.0  # budget row/col, spectral norm exactly one
        P = FrequencyResponse(grid, samples)
        opts = EpsilonOptions(round_robin=False, max_iters=0, bisect_rel_tol=1e-6)
        eps, _ = optimize_epsilon(P, DScalePair.identity(layout), opts)
        assert eps[0] == pytest.approx(1.0, rel=1e-3)

    def test_monotone_trace_on_random_instance(self, rng):
        spec, subs = random_interconnection(rng, k=2)
        N = build_N_env(spec, subs)
        stack = identity_stack(spec, "env", perf_gain=0.05)
        grid = FrequencyGrid.log_spaced(1e-2, 1e2, 30)
        V, W = stack_samples(stack, N.layout, grid)
        Ns = N.sample_on(grid)
        P = FrequencyResponse(grid, V @ Ns.samples @ W)
        trace = []
        eps, D = optimize_epsilon(P, DScalePair.identity(N.layout), trace=trace)
        assert all(b >= a * (1.0 - 1e-12) for a, b in zip(trace, trace[1:]))
        assert np.all(eps > 0.0)
        # returned pair must certify the scaled condition with the budgets in
        diag = N.layout.epsilon_diagonal(eps[: spec.k], eps[spec.k :])
        sorter_o = N.layout.sorter("out")
        Ncal = P.samples.copy()
        eps_unsorted = np.empty_like(diag)
        eps_unsorted[sorter_o] = diag
        Ncal = Ncal * eps_unsorted[None, :, None]
        ok, margin = check_robust_condition(FrequencyResponse(grid, Ncal), D)
        assert ok, f"certificate violated, margin {margin}"

    def test_per_frequency_budgets_dominate(self, rng):
        spec, subs = random_interconnection(rng, k=2)
        N = build_N_env(spec, subs)
        stack = identity_stack(spec, "env", perf_gain=0.05)
        grid = FrequencyGrid.log_spaced(1e-2, 1e2, 20)
        V, W = stack_samples(stack, N.layout, grid)
        P = FrequencyResponse(grid, V @ N.sample_on(grid).samples @ W)
        eps, D = optimize_epsilon(P, DScalePair.identity(N.layout))
        per = per_frequency_diagonal_weights(P, D, base_entries=eps)
        assert np.all(per.feasible)
        assert np.all(per.entries >= eps[None, :] * (1.0 - 1e-9))


class TestSoundness:
    @pytest.mark.parametrize("mode", ["env", "sys"])
    def test_admissible_draws_respect_band(self, rng, mode):
        spec, subs = random_interconnection(rng, k=3)
        N = build_N_env(spec, subs) if mode == "env" else build_N_sys(spec, subs)
        stack = identity_stack(spec, mode, perf_gain=0.2)
        grid = FrequencyGrid.log_spaced(1e-2, 1e2, 25)
        V, W = stack_samples(stack, N.layout, grid)
        P = FrequencyResponse(grid, V @ N.sample_on(grid).samples @ W)
        eps, D = optimize_epsilon(P, DScalePair.identity(N.layout))
        stack = stack.with_epsilon(eps[: spec.k], eps[spec.k :])
        study = sample_coupled_errors(spec, subs, stack, grid, n_samples=40, seed=99)
        assert study.discarded == 0
        assert np.all(study.max_weighted < 1.0), (
            f"weighted coupled error reached {study.max_weighted.max():.4f}"
        )

    def test_draws_deterministic(self, rng):
        spec, subs = random_interconnection(rng, k=2)
        stack = identity_stack(spec, "env", perf_gain=0.2).with_epsilon((0.01, 0.01), (0.01, 0.01))
        grid = FrequencyGrid.log_spaced(0.1, 10.0, 8)
        a = sample_coupled_errors(spec, subs, stack, grid, n_samples=5, seed=3)
        b = sample_coupled_errors(spec, subs, stack, grid, n_samples=5, seed=3)
        assert np.array_equal(a.max_error, b.max_error)
        assert np.array_equal(a.max_weighted, b.max_weighted)


class TestWeightStack:
    def test_rejects_unstable_weight(self, rng):
        spec, _ = random_interconnection(rng, k=1)
        bad = StateSpaceModel([[0.1]], [[1.0]], [[1.0]], [[1.0]])
        with pytest.raises(NotBistable):
            WeightStack(
                "env",
                (bad,),
                (identity(spec.subsystem_io[0][0]),),
                (identity(spec.subsystem_io[0][0]),),
                (identity(spec.subsystem_io[0][1]),),
                identity(spec.p_C),
                identity(spec.m_C),
            )

    def test_rejects_nonminimum_phase_weight(self):
        # stable but with an unstable inverse: zero in the right half plane
        bad = StateSpaceModel([[-1.0]], [[1.0]], [[2.0]], [[-1.0]])
        with pytest.raises(NotBistable):
            WeightStack("env", (bad,), (bad,), (bad,), (bad,), identity(1), identity(1))

    def test_filter_weight_shapes(self):
        w = filter_weight("high-pass", 10.0, 0.01, 1.0, dim=2)
        lo = np.linalg.norm(evaluate_response(w, 1e-4), 2)
        hi = np.linalg.norm(evaluate_response(w, 1e4), 2)
        assert lo == pytest.approx(0.01, rel=1e-3)
        assert hi == pytest.approx(1.0, rel=1e-3)
