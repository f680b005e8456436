"""Robust-performance machinery for coupled abstraction/reduction errors.

The central objects are the error interconnections that express the
reduction error of the coupled system as an upper LFT of all low-level
error sources.  Two variants exist: one for environment abstraction (each
environment abstracted as a whole, errors appearing twice) and one for
subsystem abstraction (each subsystem abstracted, errors repeated across
every environment that contains them).  On top of these, structured scale
pairs and a scaled small-gain test certify that weighted low-level error
budgets imply a weighted bound on the coupled error, and an alternating
optimizer maximizes those budgets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (
    AssumptionViolated,
    DimensionMismatch,
    Infeasible,
    NotBistable,
    NotPositiveDefinite,
    NotStable,
)
from .lft import (
    AugmentationWeights,
    InterconnectionSpec,
    PartitionedModel,
    assemble_interconnection,
    build_environment,
    lower_lft_samples,
    permutation_maps,
)
from .statespace import (
    FrequencyGrid,
    FrequencyResponse,
    StateSpaceModel,
    evaluate_response,
    hinf_norm,
    identity,
    invert,
    is_internally_stable,
    parallel_diag,
    series,
    static_gain,
    subtract,
    zero_model,
)

__all__ = [
    "ChannelLayout",
    "WeightStack",
    "filter_weight",
    "NInterconnection",
    "build_N_env",
    "build_N_sys",
    "check_assumption",
    "DScalePair",
    "SpecCheck",
    "spec_membership",
    "check_robust_condition",
    "EpsilonOptions",
    "optimize_epsilon",
    "optimize_reduction_budgets",
    "PerFrequencyBudgets",
    "per_frequency_diagonal_weights",
    "stack_samples",
]


def _offsets(sizes):
    out, acc = [], 0
    for s in sizes:
        out.append(acc)
        acc += s
    return out, acc


@dataclass(frozen=True)
class ChannelLayout:
    """Uncertainty-channel bookkeeping for one error interconnection.

    Channels on the N-output (v) side feed the error blocks; channels on the
    N-input (d) side receive them.  Unsorted order is (abstraction groups,
    reduction groups, abstraction repeat, external); the sorted order pulls
    every repetition of one physical error block together so structured
    scales become block-Kronecker diagonals.
    """

    mode: str
    io: tuple[tuple[int, int], ...]  # (m_j, p_j)
    external: tuple[int, int]  # (m_C, p_C)

    def __post_init__(self):
        if self.mode not in ("env", "sys"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def k(self):
        return len(self.io)

    def _abs_chunk(self, side: str, l: int) -> int:
        """Size of one copy of error block l on the given side."""
        m_l, p_l = self.io[l]
        if self.mode == "env":
            # env-abstraction error of subsystem j is m_j x p_j
            return p_l if side == "out" else m_l
        # subsystem-abstraction error of subsystem l is p_l x m_l
        return m_l if side == "out" else p_l

    def group_sizes(self, side: str):
        """(abs group sizes, red group sizes, external size) unsorted."""
        k = self.k
        if self.mode == "env":
            abs_sizes = [self._abs_chunk(side, j) for j in range(k)]
        else:
            abs_sizes = [
                sum(self._abs_chunk(side, l) for l in range(k) if l != j)
                for j in range(k)
            ]
        if side == "out":
            red_sizes = [m for m, _ in self.io]
            ext = self.external[1]
        else:
            red_sizes = [p for _, p in self.io]
            ext = self.external[0]
        return abs_sizes, red_sizes, ext

    def dim(self, side: str) -> int:
        a, r, e = self.group_sizes(side)
        return 2 * sum(a) + sum(r) + e

    def _unsorted_offsets(self, side: str):
        a, r, e = self.group_sizes(side)
        sizes = a + r + a + [e]
        offs, total = _offsets(sizes)
        return sizes, offs, total

    def copies(self, side: str, l: int):
        """Unsorted index chunks of every copy of error block l, in a fixed order.

        For environment abstraction block j appears twice (abstraction and
        connection copies).  For subsystem abstraction block l appears once in
        every other subsystem's abstraction group and once in every repeat
        group: 2(k-1) copies, ordered (abstraction copies by host, then
        connection copies by host).
        """
        k = self.k
        a, r, e = self.group_sizes(side)
        _, offs, _ = self._unsorted_offsets(side)
        abs_off = offs[:k]
        rep_off = offs[2 * k : 3 * k]
        chunk = self._abs_chunk(side, l)
        out = []
        if self.mode == "env":
            out.append(np.arange(abs_off[l], abs_off[l] + chunk))
            out.append(np.arange(rep_off[l], rep_off[l] + chunk))
            return out
        for host_offs in (abs_off, rep_off):
            for j in range(k):
                if j == l:
                    continue
                rel = sum(self._abs_chunk(side, l2) for l2 in range(k) if l2 != j and l2 < l)
                out.append(np.arange(host_offs[j] + rel, host_offs[j] + rel + chunk))
        return out

    def n_copies(self) -> int:
        return 2 if self.mode == "env" else 2 * (self.k - 1)

    def red_chunk(self, side: str, j: int):
        k = self.k
        a, r, e = self.group_sizes(side)
        _, offs, _ = self._unsorted_offsets(side)
        return np.arange(offs[k + j], offs[k + j] + r[j])

    def ext_chunk(self, side: str):
        sizes, offs, total = self._unsorted_offsets(side)
        return np.arange(offs[-1], total)

    def sorter(self, side: str) -> np.ndarray:
        """Index array mapping sorted position -> unsorted index."""
        idx = []
        for l in range(self.k):
            for chunk in self.copies(side, l):
                idx.extend(chunk.tolist())
        for j in range(self.k):
            idx.extend(self.red_chunk(side, j).tolist())
        idx.extend(self.ext_chunk(side).tolist())
        return np.asarray(idx, dtype=int)

    def epsilon_masks(self):
        """Boolean masks over the sorted OUTPUT diagonal, one per budget entry.

        Entries are ordered ("abs", 1..k) then ("red", 1..k); the external
        block is pinned to one and has no mask.
        """
        dim = self.dim("out")
        sorter = self.sorter("out")
        pos_of = np.empty(dim, dtype=int)
        pos_of[sorter] = np.arange(dim)  # unsorted index -> sorted position
        masks = []
        for l in range(self.k):
            mask = np.zeros(dim, dtype=bool)
            for chunk in self.copies("out", l):
                mask[pos_of[chunk]] = True
            masks.append(mask)
        for j in range(self.k):
            mask = np.zeros(dim, dtype=bool)
            mask[pos_of[self.red_chunk("out", j)]] = True
            masks.append(mask)
        return masks

    def epsilon_diagonal(self, eps_abs, eps_red) -> np.ndarray:
        """Sorted output-side diagonal of the budget stack (external pinned to 1)."""
        diag = np.ones(self.dim("out"))
        for mask, e in zip(self.epsilon_masks(), list(eps_abs) + list(eps_red)):
            diag[mask] = e
        return diag


# ---------------------------------------------------------------------------
# weights


def _check_bistable_biproper(g: StateSpaceModel, name: str):
    if g.p != g.m:
        raise NotBistable(f"{name} must be square")
    if not is_internally_stable(g):
        raise NotBistable(f"{name} is unstable")
    try:
        ginv = invert(g)
    except Exception as exc:
        raise NotBistable(f"{name} is not biproper: {exc}") from exc
    if not is_internally_stable(ginv):
        raise NotBistable(f"{name} has an unstable inverse")


def filter_weight(
    kind: str,
    corner: float,
    gain_low: float,
    gain_high: float,
    dim: int = 1,
) -> StateSpaceModel:
    """First-order bistable, biproper diagonal filter weight.

    ``low-pass`` magnitude runs from ``gain_low`` at DC to ``gain_high``
    at high frequency (pick gain_low > gain_high for an actual low-pass
    shape); ``high-pass`` is the same template, named for the usual choice
    gain_high > gain_low.  Both gains must be positive so the inverse stays
    stable.
    """
    if kind not in ("low-pass", "high-pass"):
        raise ValueError(f"unknown filter kind {kind!r}")
    if min(gain_low, gain_high) <= 0.0 or corner <= 0.0:
        raise NotBistable("filter gains and corner must be positive")
    # w(s) = (gain_high * s + gain_low * c) / (s + c)
    scalar = StateSpaceModel(
        [[-corner]], [[corner]], [[gain_low - gain_high]], [[gain_high]]
    )
    if dim == 1:
        return scalar
    return parallel_diag([scalar] * dim)


@dataclass(frozen=True)
class WeightStack:
    """All weighting models of one robust reduction run.

    ``v_abs/w_abs`` are the abstraction-error shape weights (environment
    errors in env mode, subsystem errors in sys mode), ``v_red/w_red`` the
    reduction-error shapes, ``v_perf/w_perf`` the coupled-error weights.
    ``eps_abs/eps_red`` are the scalar budgets produced by the optimizer
    (ones until then).  ``g_weights`` are the augmentation weights used in
    the structure-preserving step.
    """

    mode: str
    v_abs: tuple[StateSpaceModel, ...]
    w_abs: tuple[StateSpaceModel, ...]
    v_red: tuple[StateSpaceModel, ...]
    w_red: tuple[StateSpaceModel, ...]
    v_perf: StateSpaceModel
    w_perf: StateSpaceModel
    eps_abs: tuple[float, ...] = ()
    eps_red: tuple[float, ...] = ()
    g_weights: tuple[AugmentationWeights, ...] = ()

    def __post_init__(self):
        k = len(self.v_abs)
        if not (len(self.w_abs) == len(self.v_red) == len(self.w_red) == k):
            raise DimensionMismatch("weight tuples must share one length")
        object.__setattr__(self, "eps_abs", tuple(self.eps_abs) or (1.0,) * k)
        object.__setattr__(self, "eps_red", tuple(self.eps_red) or (1.0,) * k)
        if len(self.eps_abs) != k or len(self.eps_red) != k:
            raise DimensionMismatch("epsilon vectors must have one entry per subsystem")
        if any(e <= 0.0 for e in self.eps_abs + self.eps_red):
            raise ValueError("epsilon entries must be strictly positive")
        for name, g in self.named_weights():
            _check_bistable_biproper(g, name)
        if not self.g_weights:
            object.__setattr__(
                self,
                "g_weights",
                tuple(
                    AugmentationWeights(invert(v), invert(w))
                    for v, w in zip(self.v_red, self.w_red)
                ),
            )

    @property
    def k(self):
        return len(self.v_abs)

    def named_weights(self):
        for j in range(self.k):
            yield f"v_abs[{j}]", self.v_abs[j]
            yield f"w_abs[{j}]", self.w_abs[j]
            yield f"v_red[{j}]", self.v_red[j]
            yield f"w_red[{j}]", self.w_red[j]
        yield "v_perf", self.v_perf
        yield "w_perf", self.w_perf

    def validate_for(self, layout: ChannelLayout):
        if self.mode != layout.mode or self.k != layout.k:
            raise DimensionMismatch("weight stack does not match the channel layout")
        for j, (m_j, p_j) in enumerate(layout.io):
            va, wa = (p_j, m_j) if layout.mode == "env" else (m_j, p_j)
            if self.v_abs[j].p != va or self.w_abs[j].p != wa:
                raise DimensionMismatch(f"abstraction weights of subsystem {j + 1} mis-sized")
            if self.v_red[j].p != m_j or self.w_red[j].p != p_j:
                raise DimensionMismatch(f"reduction weights of subsystem {j + 1} mis-sized")
        if self.v_perf.p != layout.external[1] or self.w_perf.p != layout.external[0]:
            raise DimensionMismatch("performance weights mis-sized")

    def with_epsilon(self, eps_abs, eps_red) -> "WeightStack":
        return replace(self, eps_abs=tuple(eps_abs), eps_red=tuple(eps_red))


def stack_samples(stack: WeightStack, layout: ChannelLayout, grid: FrequencyGrid):
    """Evaluate the output-side and input-side weight stacks on the grid.

    Returns (V, W) with shapes (n_w, dim_out, dim_out) and
    (n_w, dim_in, dim_in); budgets (epsilon) are NOT included.
    """
    stack.validate_for(layout)
    k = layout.k
    n_w = len(grid)
    do, di = layout.dim("out"), layout.dim("in")
    V = np.zeros((n_w, do, do), dtype=complex)
    W = np.zeros((n_w, di, di), dtype=complex)

    v_samp = [np.array([evaluate_response(g, w) for w in grid.omegas]) for g in stack.v_abs]
    w_samp = [np.array([evaluate_response(g, w) for w in grid.omegas]) for g in stack.w_abs]
    vr_samp = [np.array([evaluate_response(g, w) for w in grid.omegas]) for g in stack.v_red]
    wr_samp = [np.array([evaluate_response(g, w) for w in grid.omegas]) for g in stack.w_red]
    vp = np.array([evaluate_response(stack.v_perf, w) for w in grid.omegas])
    wp = np.array([evaluate_response(stack.w_perf, w) for w in grid.omegas])

    def fill(M, chunk, samples):
        M[:, chunk[:, None], chunk[None, :]] = samples

    for l in range(k):
        for chunk in layout.copies("out", l):
            fill(V, chunk, v_samp[l])
        for chunk in layout.copies("in", l):
            fill(W, chunk, w_samp[l])
    for j in range(k):
        fill(V, layout.red_chunk("out", j), vr_samp[j])
        fill(W, layout.red_chunk("in", j), wr_samp[j])
    fill(V, layout.ext_chunk("out"), vp)
    fill(W, layout.ext_chunk("in"), wp)
    return V, W


# ---------------------------------------------------------------------------
# error interconnections


def check_assumption(spec: InterconnectionSpec, subsystems: Sequence[StateSpaceModel]):
    """Verify the standing assumption: stable parts, environments and loop."""
    spec.check_subsystems(subsystems)
    problems = []
    if not is_internally_stable(spec.S.base):
        problems.append("coupling dynamics unstable")
    for j, g in enumerate(subsystems, start=1):
        if not is_internally_stable(g):
            problems.append(f"subsystem {j} unstable")
    if not problems:
        try:
            closed = assemble_interconnection(spec, subsystems)
            if not is_internally_stable(closed):
                problems.append("interconnected model unstable")
        except Exception as exc:
            problems.append(f"interconnection ill-posed: {exc}")
        for j in range(1, spec.k + 1):
            try:
                env = build_environment(spec, subsystems, j)
                if not is_internally_stable(env.base):
                    problems.append(f"environment {j} unstable")
            except Exception as exc:
                problems.append(f"environment {j} ill-posed: {exc}")
    if problems:
        raise AssumptionViolated("; ".join(problems))


def _sample_S_blocks(spec: InterconnectionSpec, omega: float):
    S = evaluate_response(spec.S.base, omega)
    return spec.S.split_sample(S)


def _extended_env_base(spec: InterconnectionSpec, j: int) -> PartitionedModel:
    """Routing block whose lower LFT with the other subsystems realizes the
    extended environment of subsystem j (outer ports: y_j -> u_j and the
    error-injection channel)."""
    rows, cols = permutation_maps(spec, j)
    S = spec.S.base
    m_j, p_j = spec.subsystem_io[j - 1]
    mbar = spec.m_B - m_j
    pbar = spec.p_B - p_j
    p_C, m_C = spec.p_C, spec.m_C
    # rows of the permuted S: (z, u_j, u_l); cols: (w, y_j, y_l)
    r_uj = rows[p_C : p_C + m_j]
    r_ul = rows[p_C + m_j :]
    c_yj = cols[m_C : m_C + p_j]
    c_yl = cols[m_C :][p_j:]
    # outputs (u_j, u_l, u_l-feed), inputs (y_j, b, y_l)
    C = np.vstack([S.C[r_uj, :], S.C[r_ul, :], S.C[r_ul, :]])
    B = np.hstack([S.B[:, c_yj], S.B[:, c_yl], S.B[:, c_yl]])
    D = np.block(
        [
            [S.D[np.ix_(r_uj, c_yj)], S.D[np.ix_(r_uj, c_yl)], S.D[np.ix_(r_uj, c_yl)]],
            [S.D[np.ix_(r_ul, c_yj)], S.D[np.ix_(r_ul, c_yl)], S.D[np.ix_(r_ul, c_yl)]],
            [S.D[np.ix_(r_ul, c_yj)], S.D[np.ix_(r_ul, c_yl)], S.D[np.ix_(r_ul, c_yl)]],
        ]
    )
    base = StateSpaceModel(S.A, B.reshape(S.n, p_j + 2 * pbar), C.reshape(2 * mbar + m_j, S.n), D)
    return PartitionedModel(base, (m_j + mbar, mbar), (p_j + pbar, pbar))


def extended_environment(
    spec: InterconnectionSpec, subsystems: Sequence[StateSpaceModel], j: int
) -> PartitionedModel:
    """Extended environment of subsystem j: the abstraction errors of all
    other subsystems pulled out as an explicit LFT channel."""
    others = [g for l, g in enumerate(subsystems, start=1) if l != j]
    m_j, p_j = spec.subsystem_io[j - 1]
    mbar = spec.m_B - m_j
    pbar = spec.p_B - p_j
    routing = _extended_env_base(spec, j)
    from .lft import lower_lft

    base = lower_lft(routing, parallel_diag(others)) if others else routing.base
    return PartitionedModel(base, (m_j, mbar), (p_j, pbar))


@dataclass(frozen=True)
class NInterconnection:
    """Error interconnection with stacked uncertainty channels.

    Frequency samples are assembled pointwise from the component responses
    (cheap); :meth:`realize` builds an explicit non-minimal state-space
    realization for cross-checks.
    """

    mode: str
    layout: ChannelLayout
    spec: InterconnectionSpec
    subsystems: tuple[StateSpaceModel, ...]
    environments: tuple[PartitionedModel, ...] = ()
    extended_envs: tuple[PartitionedModel, ...] = ()
    M_model: StateSpaceModel | None = None
    Z_model: StateSpaceModel | None = None
    Y_model: StateSpaceModel | None = None

    def response(self, omega: float) -> np.ndarray:
        S11, S12, S21, S22 = _sample_S_blocks(self.spec, omega)
        sig = [evaluate_response(g, omega) for g in self.subsystems]
        SB = scipy.linalg.block_diag(*sig)
        p_B, m_B = SB.shape
        M = np.linalg.solve(np.eye(p_B) - SB @ S22, SB)
        if self.mode == "env":
            E22 = scipy.linalg.block_diag(
                *[self._env22_sample(j, omega, sig, (S11, S12, S21, S22)) for j in range(1, self.spec.k + 1)]
            )
            Z = S22 - E22
            MZ = M @ Z
            ZM = Z @ M
            MS21 = M @ S21
            Ip, Im = np.eye(p_B), np.eye(m_B)
            return np.block(
                [
                    [-M, Ip + MZ, M, MS21],
                    [-ZM - Im, Z @ (Ip + MZ), ZM, (Im + ZM) @ S21],
                    [-M, MZ, M, MS21],
                    [-S12 @ M, S12 @ (Ip + MZ), S12 @ M, np.zeros((self.spec.p_C, self.spec.m_C))],
                ]
            )
        Eb11, Eb12, Eb21, Eb22 = self._extended_stack_sample(omega, sig, S22)
        Y = S22 - Eb11
        MY = M @ Y
        YM = Y @ M
        Ip = np.eye(p_B)
        return np.block(
            [
                [Eb22 - Eb21 @ M @ Eb12, Eb21 @ (Ip + MY), Eb21 @ M @ Eb12, Eb21 @ M @ S21],
                [-Y @ M @ Eb12 - Eb12, Y @ (Ip + MY), Y @ M @ Eb12, (np.eye(m_B) + YM) @ S21],
                [-Eb21 @ M @ Eb12, Eb21 @ MY, Eb22 + Eb21 @ M @ Eb12, Eb21 @ M @ S21],
                [-S12 @ M @ Eb12, S12 @ (Ip + MY), S12 @ M @ Eb12, np.zeros((self.spec.p_C, self.spec.m_C))],
            ]
        )

    def _env22_sample(self, j, omega, sig, S_blocks):
        spec = self.spec
        rows, cols = permutation_maps(spec, j)
        S = evaluate_response(spec.S.base, omega)[np.ix_(rows, cols)]
        m_j, p_j = spec.subsystem_io[j - 1]
        if spec.k == 1:
            E = S
        else:
            others = scipy.linalg.block_diag(*[s for l, s in enumerate(sig, start=1) if l != j])
            splits = ((spec.p_C + m_j, spec.m_B - m_j), (spec.m_C + p_j, spec.p_B - p_j))
            E = lower_lft_samples(S, splits, others)
        return E[spec.p_C : spec.p_C + m_j, spec.m_C : spec.m_C + p_j]

    def _extended_stack_sample(self, omega, sig, S22):
        spec = self.spec
        k = spec.k
        in_off, _ = _offsets([m for m, _ in spec.subsystem_io])
        out_off, _ = _offsets([p for _, p in spec.subsystem_io])
        blocks = []
        for j in range(1, k + 1):
            m_j, p_j = spec.subsystem_io[j - 1]
            rj = np.arange(in_off[j - 1], in_off[j - 1] + m_j)
            cj = np.arange(out_off[j - 1], out_off[j - 1] + p_j)
            rl = np.array([i for i in range(spec.m_B) if i not in rj], dtype=int)
            cl = np.array([i for i in range(spec.p_B) if i not in cj], dtype=int)
            Sjj = S22[np.ix_(rj, cj)]
            Sjl = S22[np.ix_(rj, cl)]
            Slj = S22[np.ix_(rl, cj)]
            Sll = S22[np.ix_(rl, cl)]
            others = scipy.linalg.block_diag(*[s for l, s in enumerate(sig, start=1) if l != j])
            L = np.linalg.inv(np.eye(rl.size) - Sll @ others)
            e11 = Sjj + Sjl @ others @ L @ Slj
            e12 = Sjl @ (np.eye(cl.size) + others @ L @ Sll)
            e21 = L @ Slj
            e22 = L @ Sll
            blocks.append((e11, e12, e21, e22))
        Eb11 = scipy.linalg.block_diag(*[b[0] for b in blocks])
        Eb12 = scipy.linalg.block_diag(*[b[1] for b in blocks])
        Eb21 = scipy.linalg.block_diag(*[b[2] for b in blocks])
        Eb22 = scipy.linalg.block_diag(*[b[3] for b in blocks])
        return Eb11, Eb12, Eb21, Eb22

    def sample_on(self, grid: FrequencyGrid) -> FrequencyResponse:
        with _single_threaded_blas():
            samples = np.stack([self.response(w) for w in grid.omegas])
        return FrequencyResponse(grid, samples)

    def realize(self) -> PartitionedModel:
        """Explicit (non-minimal) realization; intended for cross-validation."""
        spec = self.spec
        p_B, m_B = spec.p_B, spec.m_B
        p_C, m_C = spec.p_C, spec.m_C
        S = spec.S
        S12 = S.block(1, 2)
        S21 = S.block(2, 1)
        M = self.M_model
        I_p = identity(p_B)
        I_m = identity(m_B)
        zero = zero_model
        if self.mode == "env":
            Z = self.Z_model
            MZ = series(M, Z)
            ZM = series(Z, M)
            I_MZ = _add(I_p, MZ)
            rows = [
                [_neg(M), I_MZ, M, series(M, S21)],
                [_neg(_add(ZM, I_m)), series(Z, I_MZ), ZM, series(_add(I_m, ZM), S21)],
                [_neg(M), MZ, M, series(M, S21)],
                [_neg(series(S12, M)), series(S12, I_MZ), series(S12, M), zero(p_C, m_C)],
            ]
        else:
            Y = self.Y_model
            Eb11, Eb12, Eb21, Eb22 = self._extended_stack_models()
            MY = series(M, Y)
            YM = series(Y, M)
            I_MY = _add(I_p, MY)
            MEb12 = series(M, Eb12)
            rows = [
                [_sub(Eb22, series(Eb21, MEb12)), series(Eb21, I_MY), series(Eb21, MEb12), series(Eb21, series(M, S21))],
                [_neg(_add(series(Y, MEb12), Eb12)), series(Y, I_MY), series(Y, MEb12), series(_add(I_m, YM), S21)],
                [_neg(series(Eb21, MEb12)), series(Eb21, MY), _add(Eb22, series(Eb21, MEb12)), series(Eb21, series(M, S21))],
                [_neg(series(S12, MEb12)), series(S12, I_MY), series(S12, MEb12), zero(p_C, m_C)],
            ]
        base = _block_model(rows)
        do = self.layout.dim("out")
        di = self.layout.dim("in")
        return PartitionedModel(base, (do - p_C, p_C), (di - m_C, m_C))

    def _extended_stack_models(self):
        e11 = parallel_diag([E.block(1, 1) for E in self.extended_envs])
        e12 = parallel_diag([E.block(1, 2) for E in self.extended_envs])
        e21 = parallel_diag([E.block(2, 1) for E in self.extended_envs])
        e22 = parallel_diag([E.block(2, 2) for E in self.extended_envs])
        return e11, e12, e21, e22


def _add(g1, g2):
    from .statespace import add

    return add(g1, g2)


def _sub(g1, g2):
    return subtract(g1, g2)


def _neg(g):
    from .statespace import negate

    return negate(g)


def _block_model(rows):
    """Dense block matrix of systems: out_i = sum_j rows[i][j] * in_j."""
    col_dims = [g.m for g in rows[0]]
    built_rows = []
    for row in rows:
        terms = []
        total_m = sum(col_dims)
        at = 0
        for g, m in zip(row, col_dims):
            sel = np.zeros((m, total_m))
            sel[:, at : at + m] = np.eye(m)
            terms.append(series(g, static_gain(sel)))
            at += m
        acc = terms[0]
        for t in terms[1:]:
            acc = _add(acc, t)
        built_rows.append(acc)
    A = scipy.linalg.block_diag(*[g.A for g in built_rows])
    n = sum(g.n for g in built_rows)
    B = np.vstack([g.B for g in built_rows])
    C = scipy.linalg.block_diag(*[g.C for g in built_rows])
    p = sum(g.p for g in built_rows)
    D = np.vstack([g.D for g in built_rows])
    return StateSpaceModel(A.reshape(n, n), B, C.reshape(p, n), D)


def _feedback_M_model(spec: InterconnectionSpec, subsystems) -> StateSpaceModel:
    """(I - SB*S22)^-1 * SB as one realization."""
    from .reduction import _bare_loop_block

    SB = parallel_diag(list(subsystems))
    S22 = spec.S.block(2, 2)
    from .lft import lower_lft

    return lower_lft(_bare_loop_block(S22), SB)


def build_N_env(
    spec: InterconnectionSpec, subsystems: Sequence[StateSpaceModel]
) -> NInterconnection:
    """Error interconnection for environment abstraction (abstraction errors
    appear twice, reduction errors once)."""
    check_assumption(spec, subsystems)
    layout = ChannelLayout("env", tuple(spec.subsystem_io), (spec.m_C, spec.p_C))
    envs = tuple(build_environment(spec, subsystems, j) for j in range(1, spec.k + 1))
    EB22 = parallel_diag([E.block(2, 2) for E in envs])
    Z = subtract(spec.S.block(2, 2), EB22)
    M = _feedback_M_model(spec, subsystems)
    return NInterconnection(
        "env",
        layout,
        spec,
        tuple(subsystems),
        environments=envs,
        M_model=M,
        Z_model=Z,
    )


def build_N_sys(
    spec: InterconnectionSpec, subsystems: Sequence[StateSpaceModel]
) -> NInterconnection:
    """Error interconnection for subsystem abstraction (each abstraction error
    repeated across all environments that contain it)."""
    check_assumption(spec, subsystems)
    if spec.k < 2:
        raise AssumptionViolated("subsystem abstraction needs at least two subsystems")
    layout = ChannelLayout("sys", tuple(spec.subsystem_io), (spec.m_C, spec.p_C))
    ext = tuple(extended_environment(spec, subsystems, j) for j in range(1, spec.k + 1))
    Eb11 = parallel_diag([E.block(1, 1) for E in ext])
    Y = subtract(spec.S.block(2, 2), Eb11)
    M = _feedback_M_model(spec, subsystems)
    return NInterconnection(
        "sys",
        layout,
        spec,
        tuple(subsystems),
        extended_envs=ext,
        M_model=M,
        Y_model=Y,
    )


# ---------------------------------------------------------------------------
# structured scales


@dataclass(frozen=True)
class DScalePair:
    """Structured scale pair commuting with the repeated error structure.

    ``blocks[l]`` is the Hermitian positive definite scale shared by all
    copies of error block l; ``scalars[j]`` the positive scalar for the
    reduction error of subsystem j.  ``sort_left``/``sort_right`` are the
    permutations from sorted to natural channel order on the interconnection
    output / input side.
    """

    layout: ChannelLayout
    blocks: tuple[np.ndarray, ...]
    scalars: tuple[float, ...]
    structure_mode: str = "diagonal_blocks"

    def __post_init__(self):
        nc = self.layout.n_copies()
        blocks = []
        for l, S in enumerate(self.blocks):
            S = np.asarray(S, dtype=complex)
            if S.shape != (nc, nc):
                raise DimensionMismatch(f"scale block {l} must be {nc}x{nc}")
            if not np.allclose(S, S.conj().T, atol=1e-12 * max(1.0, np.abs(S).max())):
                raise NotPositiveDefinite(f"scale block {l} is not Hermitian")
            if np.linalg.eigvalsh(S)[0] <= 0.0:
                raise NotPositiveDefinite(f"scale block {l} is not positive definite")
            if self.structure_mode == "diagonal_blocks" and not np.allclose(
                S, np.diag(np.diag(S))
            ):
                raise NotPositiveDefinite("diagonal_blocks structure requires diagonal scales")
            S = S.copy()
            S.setflags(write=False)
            blocks.append(S)
        object.__setattr__(self, "blocks", tuple(blocks))
        if any(d <= 0.0 for d in self.scalars):
            raise NotPositiveDefinite("scalar scales must be positive")

    @property
    def mode(self):
        return self.layout.mode

    @property
    def sort_left(self) -> np.ndarray:
        return self.layout.sorter("out")

    @property
    def sort_right(self) -> np.ndarray:
        return self.layout.sorter("in")

    @staticmethod
    def identity(layout: ChannelLayout, structure_mode="diagonal_blocks") -> "DScalePair":
        nc = layout.n_copies()
        return DScalePair(
            layout,
            tuple(np.eye(nc) for _ in range(layout.k)),
            tuple(1.0 for _ in range(layout.k)),
            structure_mode,
        )

    def _sorted(self, side: str) -> np.ndarray:
        lay = self.layout
        parts = []
        for l in range(lay.k):
            parts.append(np.kron(self.blocks[l], np.eye(lay._abs_chunk(side, l))))
        for j in range(lay.k):
            size = lay.red_chunk(side, j).size
            parts.append(self.scalars[j] * np.eye(size))
        parts.append(np.eye(lay.ext_chunk(side).size))
        return scipy.linalg.block_diag(*parts)

    def sorted_left(self) -> np.ndarray:
        return self._sorted("out")

    def sorted_right(self) -> np.ndarray:
        return self._sorted("in")

    def d_left(self) -> np.ndarray:
        s = self.sort_left
        D = np.zeros((s.size, s.size), dtype=complex)
        D[np.ix_(s, s)] = self.sorted_left()
        return D

    def d_right(self) -> np.ndarray:
        s = self.sort_right
        D = np.zeros((s.size, s.size), dtype=complex)
        D[np.ix_(s, s)] = self.sorted_right()
        return D


# ---------------------------------------------------------------------------
# budget checks


@dataclass(frozen=True)
class SpecCheck:
    passed: bool
    margin: float
    norm: float
    reason: str = ""

    def __bool__(self):
        return self.passed


def spec_membership(
    err,
    W: StateSpaceModel,
    V: StateSpaceModel,
    eps: float,
    grid: FrequencyGrid,
) -> SpecCheck:
    """Check ``||W^-1 err V^-1||_inf <= eps``.

    A grid sweep pre-screens (cheap rejection); acceptance is confirmed with
    the Hamiltonian-based norm of the composed realization.  An unstable
    error system fails automatically.
    """
    model = err.model if hasattr(err, "model") else err
    if eps <= 0.0:
        raise ValueError("budget must be positive")
    if not is_internally_stable(model):
        return SpecCheck(False, -math.inf, math.inf, "error system unstable")
    grid_max = 0.0
    for w in grid.omegas:
        Wi = np.linalg.inv(evaluate_response(W, w))
        Vi = np.linalg.inv(evaluate_response(V, w))
        val = float(np.linalg.norm(Wi @ evaluate_response(model, w) @ Vi, 2))
        grid_max = max(grid_max, val)
        if grid_max > eps:
            return SpecCheck(False, eps - grid_max, grid_max, "grid pre-screen")
    weighted = series(invert(W), series(model, invert(V)))
    norm = hinf_norm(weighted).value
    return SpecCheck(norm <= eps, eps - norm, norm)


def _sorted_samples(P: FrequencyResponse, layout: ChannelLayout) -> np.ndarray:
    so, si = layout.sorter("out"), layout.sorter("in")
    return P.samples[:, so[:, None], si[None, :]]


def _lambda_max_batch(Ms: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Per-sample max eigenvalue of L^-1/2 Ms L^-1/2 for Hermitian Ms stack."""
    Lc = np.linalg.cholesky(L)
    Linv = scipy.linalg.solve_triangular(Lc, np.eye(L.shape[0]), lower=True)
    T = Linv @ Ms @ Linv.conj().T
    T = 0.5 * (T + np.conj(np.swapaxes(T, -1, -2)))
    return np.linalg.eigvalsh(T)[..., -1].real


def check_robust_condition(
    Ncal: FrequencyResponse, D: DScalePair
) -> tuple[bool, float]:
    """Scaled small-gain test ``N(iw) D_r N(iw)^H <= D_l`` on every grid point.

    Returns (holds everywhere, worst margin) with margin = 1 - max eigenvalue
    of the scaled quadratic form.
    """
    layout = D.layout
    if Ncal.p != layout.dim("out") or Ncal.m != layout.dim("in"):
        raise DimensionMismatch("samples do not match the scale structure")
    with _single_threaded_blas():
        Ps = _sorted_samples(Ncal, layout)
        Sr = D.sorted_right()
        Sl = D.sorted_left()
        Ms = Ps @ Sr @ np.conj(np.swapaxes(Ps, -1, -2))
        lam = _lambda_max_batch(Ms, Sl)
        worst = float(lam.max())
    return worst <= 1.0, 1.0 - worst


# ---------------------------------------------------------------------------
# budget optimization


@dataclass(frozen=True)
class EpsilonOptions:
    tol: float = 1e-3
    max_iters: int = 30
    eps_cap: float = 1e6
    bisect_rel_tol: float = 1e-3
    descent_steps: int = 8
    active_set: int = 24
    round_robin: bool = True

    def __post_init__(self):
        if self.tol <= 0 or self.eps_cap <= 0:
            raise ValueError("tolerances and caps must be positive")


class _BudgetProblem:
    """Shared state for the epsilon/D alternation on sorted samples."""

    def __init__(self, P: FrequencyResponse, layout: ChannelLayout, opts: EpsilonOptions):
        self.layout = layout
        self.opts = opts
        self.Ps = _sorted_samples(P, layout)
        self.masks = layout.epsilon_masks()
        self.perf_diag = np.ones(layout.dim("out"))
        for m in self.masks:
            self.perf_diag[m] = 0.0
        self.base_diag = 1.0 - self.perf_diag  # ones on budget slots

    def quad(self, D: DScalePair) -> np.ndarray:
        Sr = D.sorted_right()
        return self.Ps @ Sr @ np.conj(np.swapaxes(self.Ps, -1, -2))

    def lam_max(self, eps_diag: np.ndarray, Y: np.ndarray, Sl: np.ndarray) -> float:
        M = Y * eps_diag[:, None] * eps_diag[None, :]
        return float(_lambda_max_batch(M, Sl).max())

    def eps_diag_from(self, entries: np.ndarray) -> np.ndarray:
        diag = self.perf_diag.copy()
        for m, e in zip(self.masks, entries):
            diag[m] = e
        return diag

    def perf_block_norm(self) -> float:
        """Worst spectral norm of the external (z, w) block of the samples."""
        lay = self.layout
        dim_o, dim_i = lay.dim("out"), lay.dim("in")
        rows = np.arange(dim_o - lay.ext_chunk("out").size, dim_o)
        cols = np.arange(dim_i - lay.ext_chunk("in").size, dim_i)
        block = self.Ps[:, rows[:, None], cols[None, :]]
        return float(np.linalg.norm(block, 2, axis=(-2, -1)).max())

    def bisect_uniform(self, Y, Sl, direction: np.ndarray, t_hi_cap: float) -> float:
        """Largest t with eps = t*direction (plus the pinned external block)
        feasible; the feasible set in t is an interval containing zero."""
        base = self.perf_diag
        if self.lam_max(base, Y, Sl) >= 1.0:
            raise Infeasible(
                "zero-budget point infeasible at the current scales"
            )

        def feasible(t):
            return self.lam_max(base + t * direction, Y, Sl) <= 1.0

        t_lo, t_hi = 0.0, 1.0
        while feasible(t_hi) and t_hi < t_hi_cap:
            t_lo = t_hi
            t_hi *= 4.0
        if t_hi >= t_hi_cap:
            t_hi = t_hi_cap
            if feasible(t_hi):
                return t_hi
        while (t_hi - t_lo) > self.opts.bisect_rel_tol * max(t_hi, 1e-12):
            mid = 0.5 * (t_lo + t_hi)
            if feasible(mid):
                t_lo = mid
            else:
                t_hi = mid
        return t_lo


def _d_parameters(D: DScalePair):
    theta = []
    for S in D.blocks:
        if D.structure_mode == "diagonal_blocks":
            theta.extend(np.log(np.real(np.diag(S))))
        else:
            L = np.linalg.cholesky(S)
            nc = L.shape[0]
            theta.extend(np.log(np.real(np.diag(L))))
            for i in range(1, nc):
                for jj in range(i):
                    theta.extend([L[i, jj].real, L[i, jj].imag])
    theta.extend(np.log(D.scalars))
    return np.asarray(theta, dtype=float)


def _d_from_parameters(theta: np.ndarray, template: DScalePair) -> DScalePair:
    lay = template.layout
    nc = lay.n_copies()
    blocks = []
    at = 0
    for _ in range(lay.k):
        if template.structure_mode == "diagonal_blocks":
            S = np.diag(np.exp(theta[at : at + nc]))
            at += nc
        else:
            L = np.zeros((nc, nc), dtype=complex)
            d = np.exp(theta[at : at + nc])
            at += nc
            np.fill_diagonal(L, d)
            for i in range(1, nc):
                for jj in range(i):
                    L[i, jj] = theta[at] + 1j * theta[at + 1]
                    at += 2
            S = L @ L.conj().T
        blocks.append(S)
    scalars = tuple(np.exp(theta[at : at + lay.k]))
    return DScalePair(lay, tuple(blocks), scalars, template.structure_mode)


def _single_threaded_blas():
    """Bound BLAS threads; the optimizer's matrices are far too small for
    multithreaded kernels to pay off (oversubscription costs ~10x here)."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover - threadpoolctl ships with sklearn
        import contextlib

        return contextlib.nullcontext()


def optimize_epsilon(
    P: FrequencyResponse,
    structure: DScalePair,
    opts: EpsilonOptions | None = None,
    trace: list | None = None,
) -> tuple[np.ndarray, DScalePair]:
    """Maximize the error budgets subject to the scaled feasibility condition.

    ``P`` holds grid samples of the shape-weighted interconnection (budgets
    excluded).  Alternates (i) bisection on a uniform budget scale for fixed
    scales with (ii) structured descent on the scales, accepting a scale
    update only when the achievable budget does not decrease, so the budget
    objective is monotone across iterations.  A final round-robin pass grows
    each budget entry individually.

    Returns the per-entry budget vector (abstraction entries then reduction
    entries) and the final scales.

    Raises
    ------
    Infeasible
        If even vanishing budgets violate the condition (the external
        channel alone breaks the bound).
    """
    opts = opts or EpsilonOptions()
    layout = structure.layout
    with _single_threaded_blas():
        prob = _BudgetProblem(P, layout, opts)
        if prob.perf_block_norm() >= 1.0:
            raise Infeasible(
                "the external channel alone violates the bound; "
                "no positive budget exists for this specification"
            )
        D = _precondition_scales(prob, structure)
        Y = prob.quad(D)
        Sl = D.sorted_left()
        t = prob.bisect_uniform(Y, Sl, prob.base_diag, opts.eps_cap)
        if trace is not None:
            trace.append(t)

        for _ in range(opts.max_iters):
            D_new = _descend_scales(prob, D, t)
            Y_new = prob.quad(D_new)
            Sl_new = D_new.sorted_left()
            try:
                t_new = prob.bisect_uniform(Y_new, Sl_new, prob.base_diag, opts.eps_cap)
            except Infeasible:
                break
            if t_new < t:
                break  # monotone guard: keep the previous scales
            improved = (t_new - t) > opts.tol * max(t, 1e-12)
            D, Y, Sl, t = D_new, Y_new, Sl_new, t_new
            if trace is not None:
                trace.append(t)
            if not improved or t >= opts.eps_cap:
                break

        entries = np.full(2 * layout.k, min(t, opts.eps_cap))
        if opts.round_robin:
            entries = _round_robin_refine(prob, Y, Sl, entries)
    return entries, D


def _scaled(D: DScalePair, factor: float) -> DScalePair:
    return DScalePair(
        D.layout,
        tuple(factor * S for S in D.blocks),
        tuple(factor * d for d in D.scalars),
        D.structure_mode,
    )


def _precondition_scales(prob: _BudgetProblem, D: DScalePair) -> DScalePair:
    """Shrink the shared scales until the zero-budget point is feasible.

    With vanishing budgets only the external row of the samples survives, and
    its scaled norm goes to the external block norm (< 1 here) as the shared
    uncertainty scales shrink, so this always terminates.
    """
    for _ in range(200):
        Y = prob.quad(D)
        if prob.lam_max(prob.perf_diag, Y, D.sorted_left()) < 1.0:
            return D
        D = _scaled(D, 0.25)
    raise Infeasible("could not precondition the scales to a feasible start")


def _round_robin_refine(prob: _BudgetProblem, Y, Sl, entries: np.ndarray) -> np.ndarray:
    cap = prob.opts.eps_cap
    entries = entries.copy()
    for i in range(entries.size):
        lo, hi = entries[i], max(entries[i], 1e-12)
        # exponential search upward for this entry alone
        trial = entries.copy()

        def feasible(x):
            trial[i] = x
            return prob.lam_max(prob.eps_diag_from(trial), Y, Sl) <= 1.0

        hi = lo
        while hi < cap and feasible(min(hi * 4.0, cap)):
            hi = min(hi * 4.0, cap)
        if hi <= lo * (1.0 + 1e-12):
            continue
        a, b = lo, hi
        while (b - a) > prob.opts.bisect_rel_tol * max(b, 1e-12):
            mid = 0.5 * (a + b)
            if feasible(mid):
                a = mid
            else:
                b = mid
        entries[i] = a
    return entries


def _descend_scales(prob: _BudgetProblem, D: DScalePair, t: float) -> DScalePair:
    """A few finite-difference descent steps on the worst-frequency objective."""
    opts = prob.opts
    eps_diag = prob.eps_diag_from(np.full(2 * prob.layout.k, t))
    theta = _d_parameters(D)

    def objective(th, active):
        Dx = _d_from_parameters(th, D)
        Sr = Dx.sorted_right()
        Sl = Dx.sorted_left()
        Ps = prob.Ps[active]
        Y = Ps @ Sr @ np.conj(np.swapaxes(Ps, -1, -2))
        M = Y * eps_diag[:, None] * eps_diag[None, :]
        lam = _lambda_max_batch(M, Sl)
        # smooth max keeps the finite-difference gradient informative
        m = lam.max()
        return m + 1e-3 * np.log(np.exp((lam - m) / 1e-3).sum())

    # active set: frequencies nearest the constraint boundary
    Y_full = prob.quad(D)
    lam_full = _lambda_max_batch(
        Y_full * eps_diag[:, None] * eps_diag[None, :], D.sorted_left()
    )
    active = np.argsort(lam_full)[-opts.active_set :]

    step = 0.25
    best = objective(theta, active)
    for _ in range(opts.descent_steps):
        grad = np.zeros_like(theta)
        h = 1e-4
        for i in range(theta.size):
            tp = theta.copy()
            tp[i] += h
            tm = theta.copy()
            tm[i] -= h
            grad[i] = (objective(tp, active) - objective(tm, active)) / (2 * h)
        gn = np.linalg.norm(grad)
        if gn < 1e-12:
            break
        moved = False
        while step > 1e-4:
            cand = theta - step * grad / gn
            val = objective(cand, active)
            if val < best:
                theta, best, moved = cand, val, True
                step *= 1.5
                break
            step *= 0.5
        if not moved:
            break
    return _d_from_parameters(theta, D)


def optimize_reduction_budgets(
    P: FrequencyResponse,
    D: DScalePair,
    fixed_abs: np.ndarray,
    opts: EpsilonOptions | None = None,
) -> np.ndarray:
    """Re-derive the reduction budgets with the abstraction entries pinned.

    Once the abstraction errors are known exactly, their budget slots can be
    fixed at the achieved values, which frees slack for the reduction
    budgets (the conservatism of the original abstraction budgets is
    recovered).  Returns the new reduction entries; the scales are kept.
    """
    opts = opts or EpsilonOptions()
    layout = D.layout
    k = layout.k
    fixed_abs = np.maximum(np.asarray(fixed_abs, dtype=float), 1e-15)
    with _single_threaded_blas():
        prob = _BudgetProblem(P, layout, opts)
        Y = prob.quad(D)
        Sl = D.sorted_left()
        masks = prob.masks
        base = prob.perf_diag.copy()
        for j in range(k):
            base[masks[j]] = fixed_abs[j]
        direction = np.zeros_like(base)
        for j in range(k):
            direction[masks[k + j]] = 1.0
        if prob.lam_max(base, Y, Sl) >= 1.0:
            raise Infeasible("pinned abstraction budgets already violate the bound")

        def feasible(t):
            return prob.lam_max(base + t * direction, Y, Sl) <= 1.0

        t_lo, t_hi = 0.0, 1.0
        while feasible(t_hi) and t_hi < opts.eps_cap:
            t_lo = t_hi
            t_hi *= 4.0
        if t_hi >= opts.eps_cap and feasible(opts.eps_cap):
            t_lo = opts.eps_cap
        else:
            while (t_hi - t_lo) > opts.bisect_rel_tol * max(t_hi, 1e-12):
                mid = 0.5 * (t_lo + t_hi)
                if feasible(mid):
                    t_lo = mid
                else:
                    t_hi = mid
        entries = np.full(k, min(t_lo, opts.eps_cap))
        if opts.round_robin:
            full = np.concatenate([fixed_abs, entries])
            for i in range(k, 2 * k):  # reduction entries only
                trial = full.copy()

                def feasible_entry(x):
                    trial[i] = x
                    return prob.lam_max(prob.eps_diag_from(trial), Y, Sl) <= 1.0

                lo = full[i]
                hi = lo
                while hi < opts.eps_cap and feasible_entry(min(hi * 4.0, opts.eps_cap)):
                    hi = min(hi * 4.0, opts.eps_cap)
                if hi <= lo * (1.0 + 1e-12):
                    continue
                a, b = lo, hi
                while (b - a) > opts.bisect_rel_tol * max(b, 1e-12):
                    mid = 0.5 * (a + b)
                    if feasible_entry(mid):
                        a = mid
                    else:
                        b = mid
                full[i] = a
            entries = np.minimum(full[k:], opts.eps_cap)
    return entries


@dataclass(frozen=True)
class PerFrequencyBudgets:
    """Budgets optimized independently at every grid frequency."""

    grid: FrequencyGrid
    entries: np.ndarray  # (n_w, 2k)
    feasible: np.ndarray  # (n_w,) bool

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float).copy()
        f = np.asarray(self.feasible, dtype=bool).copy()
        e.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "feasible", f)


def per_frequency_diagonal_weights(
    P: FrequencyResponse,
    D: DScalePair,
    base_entries: np.ndarray | None = None,
    opts: EpsilonOptions | None = None,
) -> PerFrequencyBudgets:
    """Per-frequency budget maximization (conservatism analysis only).

    Works one grid point at a time, so the resulting budget curves dominate
    any frequency-constant solution that is used as the starting point; no
    stability guarantee is attached to these budgets.
    """
    opts = opts or EpsilonOptions()
    layout = D.layout
    with _single_threaded_blas():
        prob = _BudgetProblem(P, layout, opts)
        Sr = D.sorted_right()
        Sl = D.sorted_left()
        n_w = len(P.grid)
        k2 = 2 * layout.k
        entries = np.zeros((n_w, k2))
        feasible = np.ones(n_w, dtype=bool)
        start = np.ones(k2) if base_entries is None else np.asarray(base_entries, dtype=float)
        for w in range(n_w):
            Pw = prob.Ps[w : w + 1]
            Yw = Pw @ Sr @ np.conj(np.swapaxes(Pw, -1, -2))
            Sl_w = Sl
            if prob.lam_max(prob.perf_diag, Yw, Sl_w) >= 1.0:
                # try shrinking the shared scales at this frequency alone
                Dw = D
                for _ in range(100):
                    Dw = _scaled(Dw, 0.25)
                    Sr_w = Dw.sorted_right()
                    Yw = Pw @ Sr_w @ np.conj(np.swapaxes(Pw, -1, -2))
                    Sl_w = Dw.sorted_left()
                    if prob.lam_max(prob.perf_diag, Yw, Sl_w) < 1.0:
                        break
                else:
                    feasible[w] = False
                    continue
            view = _BudgetProblemView(prob, Yw, Sl_w)
            direction = view.eps_from_entries(start) - prob.perf_diag
            scale = view.bisect(direction, opts.eps_cap / max(start.max(), 1e-300))
            if base_entries is not None:
                # a globally feasible base stays feasible pointwise: never shrink it
                scale = max(scale, 1.0)
            row = _round_robin_view(view, start * scale, opts)
            entries[w] = np.minimum(
                np.maximum(row, start if base_entries is not None else 0.0), opts.eps_cap
            )
    return PerFrequencyBudgets(P.grid, entries, feasible)


class _BudgetProblemView:
    """Single-frequency view reusing the shared masks."""

    def __init__(self, prob: _BudgetProblem, Yw, Sl):
        self.prob = prob
        self.Yw = Yw
        self.Sl = Sl

    def eps_from_entries(self, entries):
        return self.prob.eps_diag_from(entries)

    def lam(self, entries):
        return self.prob.lam_max(self.eps_from_entries(entries), self.Yw, self.Sl)

    def bisect(self, direction, cap):
        def feasible(t):
            diag = self.prob.perf_diag + t * direction
            return self.prob.lam_max(diag, self.Yw, self.Sl) <= 1.0

        t_lo, t_hi = 0.0, 1.0
        while feasible(t_hi) and t_hi < cap * 4.0:
            t_lo = t_hi
            t_hi *= 4.0
        while (t_hi - t_lo) > 1e-3 * max(t_hi, 1e-12):
            mid = 0.5 * (t_lo + t_hi)
            if feasible(mid):
                t_lo = mid
            else:
                t_hi = mid
        return t_lo


def _round_robin_view(view: _BudgetProblemView, entries, opts: EpsilonOptions):
    entries = np.asarray(entries, dtype=float).copy()
    for i in range(entries.size):
        trial = entries.copy()

        def feasible(x):
            trial[i] = x
            return view.lam(trial) <= 1.0

        lo = entries[i]
        hi = lo
        while hi < opts.eps_cap and feasible(min(hi * 4.0, opts.eps_cap)):
            hi = min(hi * 4.0, opts.eps_cap)
        if hi <= lo * (1.0 + 1e-12):
            continue
        a, b = lo, hi
        while (b - a) > 1e-3 * max(b, 1e-12):
            mid = 0.5 * (a + b)
            if feasible(mid):
                a = mid
            else:
                b = mid
        entries[i] = a
    return entries
