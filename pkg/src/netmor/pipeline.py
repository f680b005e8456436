"""Orchestration of the abstracted-reduction workflows.

Two fixed-order pipelines (environment abstraction and subsystem
abstraction) and their budget-driven robust variants, which first translate
a coupled-error specification into per-error budgets and then search for the
lowest abstraction/reduction orders meeting them.  Successful robust runs
end with a direct H-infinity certificate on the coupled error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetInfeasible, Infeasible, OrderExhausted
from .lft import (
    AugmentationWeights,
    InterconnectionSpec,
    PartitionedModel,
    assemble_interconnection,
    augment_environment,
    build_environment,
)
from .reduction import (
    freq_weighted_bt,
    interconnected_bt,
    sp_reduction_error,
    subtract,
)
from .robust import (
    ChannelLayout,
    DScalePair,
    EpsilonOptions,
    NInterconnection,
    SpecCheck,
    WeightStack,
    build_N_env,
    build_N_sys,
    check_assumption,
    check_robust_condition,
    optimize_epsilon,
    optimize_reduction_budgets,
    per_frequency_diagonal_weights,
    spec_membership,
    stack_samples,
)
from .statespace import (
    FrequencyGrid,
    FrequencyResponse,
    StateSpaceModel,
    hinf_norm,
    identity,
    invert,
    is_internally_stable,
    parallel_diag,
    series,
    zero_model,
)

__all__ = [
    "ReductionPlan",
    "RobustOptions",
    "SubsystemVerdict",
    "PipelineReport",
    "minimal_order_search",
    "abstracted_reduce_env",
    "abstracted_reduce_sys",
    "robust_abstracted_reduce_env",
    "robust_abstracted_reduce_sys",
    "render_report",
]


@dataclass(frozen=True)
class ReductionPlan:
    """Orders and weights for one fixed-order abstracted reduction run.

    ``abstraction_orders`` hold r_E per environment (env mode) or r_A per
    subsystem (sys mode); ``reduction_orders`` the target subsystem orders.
    """

    mode: str  # "env_abstraction" | "sys_abstraction"
    abstraction_orders: tuple[int, ...]
    reduction_orders: tuple[int, ...]
    weights: WeightStack
    iterate_sys_abstraction: bool = False

    def __post_init__(self):
        if self.mode not in ("env_abstraction", "sys_abstraction"):
            raise ValueError(f"unknown plan mode {self.mode!r}")


@dataclass(frozen=True)
class RobustOptions:
    """Knobs for the robust (budget-driven) pipelines."""

    opt_points_per_decade: float = 60.0
    cert_points_per_decade: float = 400.0
    verify_points: int = 200
    pad_decades: float = 1.0
    order_step: int = 1
    isbt_residualize: bool = True
    epsilon: EpsilonOptions = field(default_factory=EpsilonOptions)
    max_certificate_retries: int = 1
    reoptimize_after_abstraction: bool = False
    compute_perfreq_budgets: bool = False
    study_grid_points: int = 100


@dataclass
class SubsystemVerdict:
    index: int
    full_order: int
    abstraction_order: int | None = None
    abstraction_norm: float | None = None
    abstraction_budget: float | None = None
    reduction_order: int | None = None
    reduction_norm: float | None = None
    reduction_budget: float | None = None
    closed_loop_stable: bool | None = None

    def passes(self) -> bool:
        ok = True
        if self.abstraction_budget is not None and self.abstraction_norm is not None:
            ok &= self.abstraction_norm <= self.abstraction_budget
        if self.reduction_budget is not None and self.reduction_norm is not None:
            ok &= self.reduction_norm <= self.reduction_budget
        return bool(ok)


@dataclass
class PipelineReport:
    mode: str
    subsystems: list[SubsystemVerdict]
    interconnected_order: int = 0
    interconnected_stable: bool = False
    weighted_final_norm: float = float("inf")
    certificate: str = "not-certified"
    eps_abs: tuple[float, ...] = ()
    eps_red: tuple[float, ...] = ()
    perfreq_budgets: object = None
    notes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def budgets_respected(self) -> bool:
        return all(v.passes() for v in self.subsystems)


def _verification_grid(spec, subsystems, stack, points):
    models = [spec.S.base, *subsystems, stack.v_perf, stack.w_perf]
    base = FrequencyGrid.for_models(models, points_per_decade=40, pad_decades=1.0)
    return FrequencyGrid.log_spaced(base.omegas[0], base.omegas[-1], points)


def _env_fwbt_weights(spec, stack, j):
    """Abstraction weights: identity on the external channel, inverse shape
    weights on the subsystem-facing channel."""
    wi = parallel_diag([identity(spec.m_C), invert(stack.v_abs[j - 1])])
    wo = parallel_diag([identity(spec.p_C), invert(stack.w_abs[j - 1])])
    return wi, wo


def _weighted_perf_error(spec, subsystems, reduced, stack):
    full = assemble_interconnection(spec, subsystems)
    red = assemble_interconnection(spec, reduced)
    err = subtract(red, full)
    return series(stack.v_perf, series(err, stack.w_perf)), err


def _finalize(spec, subsystems, reduced, stack, report, certified: bool):
    closed = assemble_interconnection(spec, reduced)
    report.interconnected_order = closed.n
    report.interconnected_stable = is_internally_stable(closed)
    if report.interconnected_stable:
        weighted, _ = _weighted_perf_error(spec, subsystems, reduced, stack)
        report.weighted_final_norm = hinf_norm(weighted).value
    else:
        report.weighted_final_norm = float("inf")
    if certified:
        ok = report.interconnected_stable and report.weighted_final_norm < 1.0
        report.certificate = "pass" if ok else "fail"
    return report


def abstracted_reduce_env(
    spec: InterconnectionSpec,
    subsystems: Sequence[StateSpaceModel],
    plan: ReductionPlan,
    verify_grid: FrequencyGrid | None = None,
) -> tuple[list[StateSpaceModel], PipelineReport]:
    """Fixed-order abstracted reduction with per-subsystem environment
    abstraction.  No stability or accuracy guarantee; verdicts are reported.
    """
    t0 = time.perf_counter()
    check_assumption(spec, subsystems)
    stack = plan.weights
    grid = verify_grid or _verification_grid(spec, subsystems, stack, 150)
    report = PipelineReport(mode="env_abstraction", subsystems=[])
    reduced = []
    for j in range(1, spec.k + 1):
        verdict = SubsystemVerdict(index=j, full_order=subsystems[j - 1].n)
        env = build_environment(spec, subsystems, j)
        wi, wo = _env_fwbt_weights(spec, stack, j)
        r_env = plan.abstraction_orders[j - 1]
        out = freq_weighted_bt(env.base, wi, wo, r_env)
        env_hat = PartitionedModel(out.reduced, env.row_split, env.col_split)
        verdict.abstraction_order = r_env
        check = spec_membership(
            subtract(env_hat.block(2, 2), env.block(2, 2)),
            stack.w_abs[j - 1],
            stack.v_abs[j - 1],
            stack.eps_abs[j - 1],
            grid,
        )
        verdict.abstraction_norm = check.norm
        verdict.abstraction_budget = stack.eps_abs[j - 1]

        frame = augment_environment(env_hat, stack.g_weights[j - 1])
        r_sig = plan.reduction_orders[j - 1]
        isbt = interconnected_bt(frame, subsystems[j - 1], r_sig)
        verdict.reduction_order = r_sig
        verdict.closed_loop_stable = isbt.stable_closed_loop
        err = sp_reduction_error(frame, subsystems[j - 1], isbt.reduced)
        red_check = spec_membership(
            err.tilde, stack.w_red[j - 1], stack.v_red[j - 1], stack.eps_red[j - 1], grid
        )
        verdict.reduction_norm = red_check.norm
        verdict.reduction_budget = stack.eps_red[j - 1]
        reduced.append(isbt.reduced)
        report.subsystems.append(verdict)
    report.eps_abs = stack.eps_abs
    report.eps_red = stack.eps_red
    report = _finalize(spec, subsystems, reduced, stack, report, certified=False)
    report.timings["total_s"] = time.perf_counter() - t0
    return reduced, report


def abstracted_reduce_sys(
    spec: InterconnectionSpec,
    subsystems: Sequence[StateSpaceModel],
    plan: ReductionPlan,
    verify_grid: FrequencyGrid | None = None,
) -> tuple[list[StateSpaceModel], PipelineReport]:
    """Fixed-order abstracted reduction with abstracted-subsystem
    environments; optionally iterates with the reduced models reused as
    abstractions."""
    t0 = time.perf_counter()
    check_assumption(spec, subsystems)
    stack = plan.weights
    grid = verify_grid or _verification_grid(spec, subsystems, stack, 150)
    report = PipelineReport(mode="sys_abstraction", subsystems=[])

    abstractions = []
    abs_checks = []
    for j in range(1, spec.k + 1):
        out = freq_weighted_bt(
            subsystems[j - 1],
            invert(stack.v_abs[j - 1]),
            invert(stack.w_abs[j - 1]),
            plan.abstraction_orders[j - 1],
        )
        abstractions.append(out.reduced)
        abs_checks.append(
            spec_membership(
                subtract(out.reduced, subsystems[j - 1]),
                stack.w_abs[j - 1],
                stack.v_abs[j - 1],
                stack.eps_abs[j - 1],
                grid,
            )
        )

    sweeps = 2 if plan.iterate_sys_abstraction else 1
    sweep_norms = []
    reduced = list(subsystems)
    for sweep in range(sweeps):
        report.subsystems = []
        reduced = []
        for j in range(1, spec.k + 1):
            verdict = SubsystemVerdict(index=j, full_order=subsystems[j - 1].n)
            verdict.abstraction_order = abstractions[j - 1].n
            verdict.abstraction_norm = abs_checks[j - 1].norm
            verdict.abstraction_budget = stack.eps_abs[j - 1]
            env_hat = build_environment(spec, abstractions, j)
            frame = augment_environment(env_hat, stack.g_weights[j - 1])
            r_sig = plan.reduction_orders[j - 1]
            isbt = interconnected_bt(frame, subsystems[j - 1], r_sig)
            verdict.reduction_order = r_sig
            verdict.closed_loop_stable = isbt.stable_closed_loop
            err = sp_reduction_error(frame, subsystems[j - 1], isbt.reduced)
            check = spec_membership(
                err.tilde, stack.w_red[j - 1], stack.v_red[j - 1], stack.eps_red[j - 1], grid
            )
            verdict.reduction_norm = check.norm
            verdict.reduction_budget = stack.eps_red[j - 1]
            reduced.append(isbt.reduced)
            report.subsystems.append(verdict)
        report = _finalize(spec, subsystems, reduced, stack, report, certified=False)
        sweep_norms.append(report.weighted_final_norm)
        if sweep + 1 < sweeps:
            abstractions = list(reduced)
            abs_checks = [
                spec_membership(
                    subtract(abstractions[j], subsystems[j]),
                    stack.w_abs[j],
                    stack.v_abs[j],
                    stack.eps_abs[j],
                    grid,
                )
                for j in range(spec.k)
            ]
    if len(sweep_norms) > 1:
        report.notes.append(
            "iterated abstraction sweeps weighted norms: "
            + ", ".join(f"{v:.6g}" for v in sweep_norms)
        )
    report.eps_abs = stack.eps_abs
    report.eps_red = stack.eps_red
    report.timings["total_s"] = time.perf_counter() - t0
    return reduced, report


def minimal_order_search(
    reducer: Callable[[int], StateSpaceModel | None],
    budget: tuple[StateSpaceModel, StateSpaceModel, float],
    n_max: int,
    grid: FrequencyGrid,
    step: int = 1,
    lower_bounds: np.ndarray | None = None,
) -> tuple[int, SpecCheck]:
    """Smallest order whose error passes the weighted budget check.

    ``reducer(r)`` returns the error model to test at order r (or ``None``
    when the candidate is invalid, e.g. an unstable closed loop).
    ``lower_bounds[r]``, when provided, is a certified lower bound on the
    achievable norm at order r; orders that provably fail are skipped
    without confirmation.  After the upward scan finds a passing order the
    search walks down in unit steps, so the returned order is minimal in the
    sense that order r-1 was confirmed to fail (or r is zero).
    """
    W, V, eps = budget
    tightest = float("inf")
    checks: dict[int, SpecCheck] = {}

    def confirmed(r) -> SpecCheck:
        if r in checks:
            return checks[r]
        if lower_bounds is not None and r < len(lower_bounds) and lower_bounds[r] > eps:
            checks[r] = SpecCheck(False, eps - lower_bounds[r], lower_bounds[r], "tail bound")
            return checks[r]
        model = reducer(r)
        if model is None:
            checks[r] = SpecCheck(False, -float("inf"), float("inf"), "invalid candidate")
            return checks[r]
        checks[r] = spec_membership(model, W, V, eps, grid)
        return checks[r]

    candidates = list(range(0, n_max + 1, max(step, 1)))
    if candidates[-1] != n_max:
        candidates.append(n_max)
    hit = None
    for r in candidates:
        check = confirmed(r)
        tightest = min(tightest, check.norm)
        if check.passed:
            hit = r
            break
    if hit is None:
        raise OrderExhausted(
            f"no order up to {n_max} meets the budget {eps:.3g} "
            f"(tightest achieved norm {tightest:.3g})",
            tightest_norm=tightest,
        )
    while hit > 0 and confirmed(hit - 1).passed:
        hit -= 1
    return hit, checks[hit]


def _optimization_grid(N: NInterconnection, stack, opts: RobustOptions):
    models = [N.spec.S.base, *N.subsystems]
    models += [g for _, g in stack.named_weights()]
    return FrequencyGrid.for_models(
        models, points_per_decade=opts.opt_points_per_decade, pad_decades=opts.pad_decades
    )


def _scaled_ncal(Pd: FrequencyResponse, layout, eps) -> FrequencyResponse:
    k = layout.k
    diag = layout.epsilon_diagonal(eps[:k], eps[k:])
    unsorted = np.empty_like(diag)
    unsorted[layout.sorter("out")] = diag
    return FrequencyResponse(Pd.grid, Pd.samples * unsorted[None, :, None])


def _budget_stage(N, stack, opts, report):
    """Sample the shape-weighted interconnection and maximize the budgets.

    The optimization runs on a subsample of the dense certification grid and
    grows it cutting-plane style with the worst dense violators, so the
    returned budgets satisfy the scaled inequality on the full dense grid.
    """
    t0 = time.perf_counter()
    dense = FrequencyGrid.for_models(
        [N.spec.S.base, *N.subsystems] + [g for _, g in stack.named_weights()],
        points_per_decade=opts.cert_points_per_decade,
        pad_decades=opts.pad_decades,
    )
    Vd, Wd = stack_samples(stack, N.layout, dense)
    Pd = FrequencyResponse(dense, Vd @ N.sample_on(dense).samples @ Wd)
    stride = max(int(opts.cert_points_per_decade / max(opts.opt_points_per_decade, 1)), 1)
    subset = set(range(0, len(dense), stride))
    subset.add(len(dense) - 1)

    D = DScalePair.identity(N.layout)
    eps = None
    for round_no in range(10):
        idx = np.array(sorted(subset))
        P_sub = FrequencyResponse(FrequencyGrid(dense.omegas[idx]), Pd.samples[idx])
        try:
            eps, D = optimize_epsilon(P_sub, D, opts.epsilon)
        except Infeasible as exc:
            raise BudgetInfeasible(str(exc)) from exc
        Ncal = _scaled_ncal(Pd, N.layout, eps)
        ok, margin = check_robust_condition(Ncal, D)
        if ok:
            break
        lam = _dense_violations(Ncal, D)
        worst_idx = np.argsort(lam)[-16:]
        before = len(subset)
        subset.update(int(i) for i in worst_idx)
        if len(subset) == before:
            raise BudgetInfeasible(
                "budget confirmation stalled: dense-grid violations persist"
            )
    else:
        raise BudgetInfeasible("budget confirmation on the dense grid failed to converge")
    report.timings["budget_stage_s"] = time.perf_counter() - t0
    report.notes.append(
        f"budget certificate margin on dense grid: {margin:.3e} "
        f"({len(subset)} active frequencies after {round_no + 1} rounds)"
    )
    perfreq = None
    if opts.compute_perfreq_budgets:
        study_grid = FrequencyGrid.log_spaced(
            dense.omegas[0], dense.omegas[-1], opts.study_grid_points
        )
        Vs, Ws = stack_samples(stack, N.layout, study_grid)
        Psamp = FrequencyResponse(study_grid, Vs @ N.sample_on(study_grid).samples @ Ws)
        perfreq = per_frequency_diagonal_weights(Psamp, D, base_entries=eps, opts=opts.epsilon)
    return eps, D, perfreq, Pd


def _dense_violations(Ncal: FrequencyResponse, D) -> np.ndarray:
    from netmor.robust import _lambda_max_batch, _sorted_samples

    Ps = _sorted_samples(Ncal, D.layout)
    Ms = Ps @ D.sorted_right() @ np.conj(np.swapaxes(Ps, -1, -2))
    return _lambda_max_batch(Ms, D.sorted_left())


def _robust_reduce(
    spec,
    subsystems,
    stack: WeightStack,
    opts: RobustOptions,
    mode: str,
) -> tuple[list[StateSpaceModel], PipelineReport]:
    t0 = time.perf_counter()
    check_assumption(spec, subsystems)
    stack.validate_for(
        ChannelLayout(
            "env" if mode == "env_abstraction" else "sys",
            tuple(spec.subsystem_io),
            (spec.m_C, spec.p_C),
        )
    )
    report = PipelineReport(mode=mode, subsystems=[])
    N = (
        build_N_env(spec, subsystems)
        if mode == "env_abstraction"
        else build_N_sys(spec, subsystems)
    )
    eps, D, perfreq, Pd = _budget_stage(N, stack, opts, report)
    report.perfreq_budgets = perfreq
    k = spec.k

    grid = _verification_grid(spec, subsystems, stack, opts.verify_points)
    reduced = subsystems
    for attempt in range(opts.max_certificate_retries + 1):
        stack_run = stack.with_epsilon(eps[:k], eps[k:])
        if mode == "env_abstraction":
            abstractions, verdicts = _env_abstraction_phase(
                spec, subsystems, stack_run, opts, grid
            )
        else:
            abstractions, verdicts = _sys_abstraction_phase(
                spec, subsystems, stack_run, opts, grid
            )
        if opts.reoptimize_after_abstraction:
            achieved = np.array(
                [max(v.abstraction_norm, 1e-15) for v in verdicts]
            )
            try:
                new_red = optimize_reduction_budgets(Pd, D, achieved, opts.epsilon)
                report.notes.append(
                    "reduction budgets re-derived after abstraction: "
                    + ", ".join(f"{e:.3g}" for e in new_red)
                )
                eps = np.concatenate([eps[:k], new_red])
                stack_run = stack.with_epsilon(eps[:k], eps[k:])
            except Infeasible:
                report.notes.append("budget re-derivation infeasible; keeping originals")
        report.eps_abs = stack_run.eps_abs
        report.eps_red = stack_run.eps_red
        report.subsystems = []
        reduced = []
        for j in range(1, spec.k + 1):
            sub_hat, verdict = _reduction_sweep(
                spec, subsystems, stack_run, opts, grid, j, abstractions[j - 1], verdicts[j - 1]
            )
            verdict.reduction_budget = stack_run.eps_red[j - 1]
            reduced.append(sub_hat)
            report.subsystems.append(verdict)
        report = _finalize(spec, subsystems, reduced, stack_run, report, certified=True)
        if report.certificate == "pass":
            break
        if attempt < opts.max_certificate_retries:
            shrink = 0.5 / max(report.weighted_final_norm, 1.05)
            report.notes.append(
                f"certificate miss at norm {report.weighted_final_norm:.3g}; "
                f"tightening budgets by {shrink:.3g} and retrying"
            )
            eps = eps * shrink
    report.timings["total_s"] = time.perf_counter() - t0
    return reduced, report


def _env_abstraction_phase(spec, subsystems, stack, opts, grid):
    """Abstract each environment to the lowest order meeting its budget."""
    env_hats, verdicts = [], []
    for j in range(1, spec.k + 1):
        verdict = SubsystemVerdict(index=j, full_order=subsystems[j - 1].n)
        env = build_environment(spec, subsystems, j)
        wi, wo = _env_fwbt_weights(spec, stack, j)

        def env_reducer(r):
            if r == env.base.n:  # full order is an exact similarity
                return zero_model(env.p2, env.m2)
            out = freq_weighted_bt(env.base, wi, wo, r)
            hat = PartitionedModel(out.reduced, env.row_split, env.col_split)
            return subtract(hat.block(2, 2), env.block(2, 2))

        r_env, check = minimal_order_search(
            env_reducer,
            (stack.w_abs[j - 1], stack.v_abs[j - 1], stack.eps_abs[j - 1]),
            env.base.n,
            grid,
            step=opts.order_step,
        )
        verdict.abstraction_order = r_env
        verdict.abstraction_norm = check.norm
        verdict.abstraction_budget = stack.eps_abs[j - 1]
        if r_env == env.base.n:
            env_hats.append(env)
        else:
            env_hats.append(
                PartitionedModel(
                    freq_weighted_bt(env.base, wi, wo, r_env).reduced,
                    env.row_split,
                    env.col_split,
                )
            )
        verdicts.append(verdict)
    return env_hats, verdicts


def _sys_abstraction_phase(spec, subsystems, stack, opts, grid):
    """Abstract each subsystem, then compose the abstracted environments."""
    abstractions, verdicts = [], []
    for j in range(1, spec.k + 1):
        verdict = SubsystemVerdict(index=j, full_order=subsystems[j - 1].n)
        wi = invert(stack.v_abs[j - 1])
        wo = invert(stack.w_abs[j - 1])

        def abs_reducer(r):
            if r == subsystems[j - 1].n:  # full order is an exact similarity
                return zero_model(subsystems[j - 1].p, subsystems[j - 1].m)
            out = freq_weighted_bt(subsystems[j - 1], wi, wo, r)
            return subtract(out.reduced, subsystems[j - 1])

        r_abs, check = minimal_order_search(
            abs_reducer,
            (stack.w_abs[j - 1], stack.v_abs[j - 1], stack.eps_abs[j - 1]),
            subsystems[j - 1].n,
            grid,
            step=opts.order_step,
        )
        verdict.abstraction_order = r_abs
        verdict.abstraction_norm = check.norm
        verdict.abstraction_budget = stack.eps_abs[j - 1]
        if r_abs == subsystems[j - 1].n:
            abstractions.append(subsystems[j - 1])
        else:
            abstractions.append(freq_weighted_bt(subsystems[j - 1], wi, wo, r_abs).reduced)
        verdicts.append(verdict)
    env_hats = [build_environment(spec, abstractions, j) for j in range(1, spec.k + 1)]
    return env_hats, verdicts


def _reduction_sweep(spec, subsystems, stack, opts, grid, j, env_hat, verdict):
    frame = augment_environment(env_hat, stack.g_weights[j - 1])
    sub = subsystems[j - 1]
    cache = {}

    def isbt_reducer(r):
        import warnings

        from .errors import NotWellPosed

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                out = interconnected_bt(
                    frame, sub, r, residualize=opts.isbt_residualize
                )
            except NotWellPosed:
                return None  # marked failed; the sweep continues upward
        cache[r] = out
        if out.stable_closed_loop is False:
            return None
        if r == sub.n:  # full order is an exact similarity
            return zero_model(sub.p, sub.m)
        return sp_reduction_error(frame, sub, out.reduced).tilde

    r_sig, check = minimal_order_search(
        isbt_reducer,
        (stack.w_red[j - 1], stack.v_red[j - 1], stack.eps_red[j - 1]),
        sub.n,
        grid,
        step=opts.order_step,
    )
    verdict.reduction_order = r_sig
    verdict.reduction_norm = check.norm
    verdict.reduction_budget = stack.eps_red[j - 1]
    verdict.closed_loop_stable = cache[r_sig].stable_closed_loop
    return cache[r_sig].reduced, verdict


def robust_abstracted_reduce_env(
    spec: InterconnectionSpec,
    subsystems: Sequence[StateSpaceModel],
    stack: WeightStack,
    opts: RobustOptions | None = None,
) -> tuple[list[StateSpaceModel], PipelineReport]:
    """Budget-driven abstracted reduction via environment abstraction.

    On success the report certifies internal stability of the reduced
    interconnection and a weighted coupled-error norm below one, confirmed
    by a direct H-infinity computation.
    """
    return _robust_reduce(spec, subsystems, stack, opts or RobustOptions(), "env_abstraction")


def robust_abstracted_reduce_sys(
    spec: InterconnectionSpec,
    subsystems: Sequence[StateSpaceModel],
    stack: WeightStack,
    opts: RobustOptions | None = None,
) -> tuple[list[StateSpaceModel], PipelineReport]:
    """Budget-driven abstracted reduction via subsystem abstraction."""
    return _robust_reduce(spec, subsystems, stack, opts or RobustOptions(), "sys_abstraction")


def render_report(report: PipelineReport) -> str:
    """Deterministic text rendering; timings go to a separate trailing section."""
    lines = [
        f"mode: {report.mode}",
        f"certificate: {report.certificate}",
        f"interconnected order: {report.interconnected_order}",
        f"interconnected stable: {report.interconnected_stable}",
        f"weighted coupled-error norm: {report.weighted_final_norm:.6g}",
        f"budgets respected: {report.budgets_respected()}",
    ]
    if report.eps_abs:
        lines.append(
            "abstraction budgets: " + ", ".join(f"{e:.6g}" for e in report.eps_abs)
        )
        lines.append(
            "reduction budgets:   " + ", ".join(f"{e:.6g}" for e in report.eps_red)
        )
    for v in report.subsystems:
        lines.append(
            f"subsystem {v.index}: n={v.full_order}"
            f" r_abs={v.abstraction_order} (norm {f'{v.abstraction_norm:.4g}' if v.abstraction_norm is not None else 'n/a'}"
            f" / budget {f'{v.abstraction_budget:.4g}' if v.abstraction_budget is not None else 'n/a'})"
            f" r_sigma={v.reduction_order} (norm {f'{v.reduction_norm:.4g}' if v.reduction_norm is not None else 'n/a'}"
            f" / budget {f'{v.reduction_budget:.4g}' if v.reduction_budget is not None else 'n/a'})"
            f" loop stable={v.closed_loop_stable}"
        )
    for note in report.notes:
        lines.append(f"note: {note}")
    lines.append("")
    lines.append("[timings]")
    for key, val in sorted(report.timings.items()):
        lines.append(f"{key}: {val:.3f}")
    return "\n".join(lines) + "\n"
