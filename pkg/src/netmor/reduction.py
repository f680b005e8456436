"""Reduction primitives and error-system constructors.

Balanced truncation and its frequency-weighted (Enns) and interconnected
(closed-loop Gramian) variants, Craig-Bampton condensation of second-order
structural models, and the difference systems that quantify abstraction and
reduction quality.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (
    AssumptionViolated,
    ClosedLoopUnstableWarning,
    DimensionMismatch,
    NotPositiveDefinite,
    NotStable,
    OrderOutOfRange,
)
from .lft import InterconnectionSpec, PartitionedModel, lower_lft
from .statespace import (
    FrequencyGrid,
    StateSpaceModel,
    evaluate_response,
    is_internally_stable,
    parallel_diag,
    solve_lyapunov,
    subtract,
)

__all__ = [
    "ReductionOutcome",
    "ErrorKind",
    "ErrorSystem",
    "balanced_truncation",
    "freq_weighted_bt",
    "interconnected_bt",
    "craig_bampton",
    "env_abs_error",
    "sp_reduction_error",
    "interconnected_error",
]


@dataclass(frozen=True)
class ReductionOutcome:
    """Reduced model plus the Hankel values of the balanced pair used.

    ``error_bound`` is the twice-the-tail bound ``2 * sum_{i>r} sigma_i``;
    for the weighted/interconnected variants it refers to the balanced pair
    actually truncated, not to an H-infinity guarantee.
    """

    reduced: StateSpaceModel
    hankel_values: np.ndarray
    order: int
    error_bound: float
    weighted_error: float | None = None
    stable_closed_loop: bool | None = None

    def __post_init__(self):
        hv = np.asarray(self.hankel_values, dtype=float).copy()
        hv.setflags(write=False)
        object.__setattr__(self, "hankel_values", hv)


class ErrorKind(enum.Enum):
    ENV_ABSTRACTION = "env_abstraction"
    SUBSYS_ABSTRACTION = "subsys_abstraction"
    SP_REDUCTION = "sp_reduction"
    INTERCONNECTED = "interconnected"


@dataclass(frozen=True)
class ErrorSystem:
    """Difference system of a reduction/abstraction step.

    ``partition`` (when present) carries the 2x2 split of the operands so
    the 22 sub-block can be extracted; ``tilde`` is the weight-stripped
    reduction error used by the budget checks.
    """

    model: StateSpaceModel
    kind: ErrorKind
    partition: tuple[tuple[int, int], tuple[int, int]] | None = None
    tilde: StateSpaceModel | None = None

    def part22(self) -> StateSpaceModel:
        if self.partition is None:
            raise DimensionMismatch("error system carries no partition")
        (p1, _), (m1, _) = self.partition
        g = self.model
        return StateSpaceModel(g.A, g.B[:, m1:], g.C[p1:, :], g.D[p1:, m1:])


def _psd_sqrt_factor(P: np.ndarray) -> np.ndarray:
    """Factor L with L L^T = P for symmetric PSD P (eig-based, rank-robust)."""
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def _balance_and_truncate(model, P, Q, r, residualize=False):
    """Square-root balancing of the Gramian pair (P, Q), truncated to r states.

    Falls back to the balancing-free square-root projection when the kept
    tail contains numerically vanishing Hankel values (the plain square-root
    transform would be violently ill-conditioned there).  With
    ``residualize`` the discarded balanced states are eliminated statically
    (singular perturbation) instead of dropped, which keeps the
    low-frequency compliance exact at the price of high-frequency error.
    """
    Lp = _psd_sqrt_factor(P)
    Lq = _psd_sqrt_factor(Q)
    U, sv, Wt = np.linalg.svd(Lq.T @ Lp)
    hankel = sv.copy()
    n = model.n
    if r == 0 and not residualize:
        reduced = StateSpaceModel(
            np.zeros((0, 0)), np.zeros((0, model.m)), np.zeros((model.p, 0)), model.D
        )
        return reduced, hankel
    keep = max(r, 1) if residualize else r
    floor_idx = keep - 1
    if not residualize and sv[floor_idx] > 1e-10 * max(sv[0], 1e-300):
        inv_sqrt = 1.0 / np.sqrt(sv[:r])
        T = Lp @ Wt[:r, :].T * inv_sqrt
        Tinv = (U[:, :r] * inv_sqrt).T @ Lq.T
        reduced = StateSpaceModel(Tinv @ model.A @ T, Tinv @ model.B, model.C @ T, model.D)
        return reduced, hankel
    if not residualize:
        Qv, _ = np.linalg.qr(Lp @ Wt[:r, :].T + 1e-300)
        Qw, _ = np.linalg.qr(Lq @ U[:, :r] + 1e-300)
        T = Qv
        Tinv = np.linalg.solve(Qw.T @ Qv, Qw.T)
        reduced = StateSpaceModel(Tinv @ model.A @ T, Tinv @ model.B, model.C @ T, model.D)
        return reduced, hankel
    # full balanced form, then static elimination of the trailing states
    sv_f = np.maximum(sv, max(sv[0], 1e-300) * 1e-14)
    inv_sqrt = 1.0 / np.sqrt(sv_f)
    T = Lp @ Wt.T * inv_sqrt
    Tinv = (U * inv_sqrt).T @ Lq.T
    Ab = Tinv @ model.A @ T
    Bb = Tinv @ model.B
    Cb = model.C @ T
    A11, A12 = Ab[:r, :r], Ab[:r, r:]
    A21, A22 = Ab[r:, :r], Ab[r:, r:]
    X = np.linalg.solve(A22, np.hstack([A21, Bb[r:]]))
    XA, XB = X[:, :r], X[:, r:]
    reduced = StateSpaceModel(
        A11 - A12 @ XA,
        Bb[:r] - A12 @ XB,
        Cb[:, :r] - Cb[:, r:] @ XA,
        model.D - Cb[:, r:] @ XB,
    )
    return reduced, hankel


def balanced_truncation(model: StateSpaceModel, r: int) -> ReductionOutcome:
    """Standard balanced truncation to order ``r``.

    Guarantees stability of the reduced model and the classical bound
    ``||G - G_r||_inf <= 2 sum_{i>r} sigma_i``.
    """
    if not 0 <= r <= model.n:
        raise OrderOutOfRange(f"order {r} outside [0, {model.n}]")
    if not is_internally_stable(model):
        raise NotStable("balanced truncation requires a stable model")
    if model.n == 0:
        return ReductionOutcome(model, np.zeros(0), 0, 0.0)
    P = solve_lyapunov(model.A, model.B @ model.B.T)
    Q = solve_lyapunov(model.A.T, model.C.T @ model.C)
    reduced, hankel = _balance_and_truncate(model, P, Q, r)
    return ReductionOutcome(reduced, hankel, r, 2.0 * float(np.sum(hankel[r:])))


def freq_weighted_bt(
    model: StateSpaceModel,
    Wi: StateSpaceModel,
    Wo: StateSpaceModel,
    r: int,
    grid: FrequencyGrid | None = None,
) -> ReductionOutcome:
    """Frequency-weighted balanced truncation (Enns formulation).

    Gramians are taken from the cascades ``G Wi`` and ``Wo G``; no stability
    modification is applied, so closed-loop behaviour must be re-verified by
    the caller.  When ``grid`` is given the weighted error
    ``max_w sigma(Wo (G - G_r) Wi)`` is evaluated on it and reported.
    """
    if not 0 <= r <= model.n:
        raise OrderOutOfRange(f"order {r} outside [0, {model.n}]")
    if Wi.p != model.m:
        raise DimensionMismatch(f"input weight provides {Wi.p} channels, model wants {model.m}")
    if Wo.m != model.p:
        raise DimensionMismatch(f"output weight consumes {Wo.m} channels, model has {model.p}")
    for name, g in (("model", model), ("Wi", Wi), ("Wo", Wo)):
        if not is_internally_stable(g):
            raise NotStable(f"{name} must be internally stable for weighted balancing")
    if model.n == 0:
        return ReductionOutcome(model, np.zeros(0), 0, 0.0)

    n = model.n
    A, B, C = model.A, model.B, model.C
    # controllability side: G * Wi
    Ai = np.block([[A, B @ Wi.C], [np.zeros((Wi.n, n)), Wi.A]]) if Wi.n else A
    Bi = np.vstack([B @ Wi.D, Wi.B]) if Wi.n else B @ Wi.D
    Pfull = solve_lyapunov(Ai, Bi @ Bi.T)
    P = Pfull[:n, :n]
    # observability side: Wo * G
    Ao = np.block([[A, np.zeros((n, Wo.n))], [Wo.B @ C, Wo.A]]) if Wo.n else A
    Co = np.hstack([Wo.D @ C, Wo.C]) if Wo.n else Wo.D @ C
    Qfull = solve_lyapunov(Ao.T, Co.T @ Co)
    Q = Qfull[:n, :n]

    reduced, hankel = _balance_and_truncate(model, P, Q, r)
    weighted = None
    if grid is not None:
        diff = subtract(model, reduced)
        weighted = 0.0
        for w in grid.omegas:
            sample = (
                evaluate_response(Wo, w)
                @ evaluate_response(diff, w)
                @ evaluate_response(Wi, w)
            )
            weighted = max(weighted, float(np.linalg.norm(sample, 2)))
    return ReductionOutcome(reduced, hankel, r, 2.0 * float(np.sum(hankel[r:])), weighted)


def interconnected_bt(
    F: PartitionedModel, subsystem: StateSpaceModel, r: int, residualize: bool = False
) -> ReductionOutcome:
    """Closed-loop (interconnected systems) balanced truncation.

    Balances the sub-blocks of the closed-loop Gramians of ``F_l(F, sub)``
    associated with the subsystem's states and truncates the subsystem to
    order ``r`` (optionally by static elimination of the discarded balanced
    states, which preserves the coupling-critical static compliance).
    Well-posedness of the new loop follows the (possibly updated) feedthrough;
    closed-loop stability is re-verified and reported, not guaranteed.
    """
    if not 0 <= r <= subsystem.n:
        raise OrderOutOfRange(f"order {r} outside [0, {subsystem.n}]")
    closed = lower_lft(F, subsystem)  # raises NotWellPosed when singular
    if not is_internally_stable(closed):
        raise NotStable("closed loop must be internally stable for ISBT")
    if subsystem.n == 0:
        return ReductionOutcome(subsystem, np.zeros(0), 0, 0.0, stable_closed_loop=True)

    nF = F.base.n
    Pcl = solve_lyapunov(closed.A, closed.B @ closed.B.T)
    Qcl = solve_lyapunov(closed.A.T, closed.C.T @ closed.C)
    P = Pcl[nF:, nF:]
    Q = Qcl[nF:, nF:]
    reduced, hankel = _balance_and_truncate(subsystem, P, Q, r, residualize=residualize)
    new_closed = lower_lft(F, reduced)
    stable = is_internally_stable(new_closed)
    if not stable:
        warnings.warn(
            f"ISBT at order {r} gave an unstable closed loop",
            ClosedLoopUnstableWarning,
            stacklevel=2,
        )
    return ReductionOutcome(
        reduced, hankel, r, 2.0 * float(np.sum(hankel[r:])), stable_closed_loop=stable
    )


def _check_symmetric_definite(M: np.ndarray, name: str, semidefinite=False):
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12 * max(np.abs(M).max(), 1.0)):
        raise NotPositiveDefinite(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    scale = max(abs(w[-1]), 1.0)
    bad = w[0] < -1e-10 * scale if semidefinite else w[0] <= 1e-12 * scale
    if bad:
        raise NotPositiveDefinite(f"{name} fails its definiteness check (min eig {w[0]:.3e})")


def craig_bampton(
    M: np.ndarray,
    K: np.ndarray,
    boundary: Sequence[int],
    n_modes: int,
    damping: float,
) -> StateSpaceModel:
    """Craig-Bampton condensation of ``M qdd + K q = f`` to a damped LTI model.

    Retains the boundary DOFs plus ``n_modes`` fixed-interface normal modes,
    then applies uniform modal damping ``damping`` to the reduced model.  The
    returned model has one force input and one displacement output per
    boundary DOF (in the order given) and 2*(len(boundary) + n_modes) states.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    ndof = M.shape[0]
    if M.shape != (ndof, ndof) or K.shape != (ndof, ndof):
        raise DimensionMismatch("M and K must be square and equal-sized")
    boundary = list(dict.fromkeys(int(b) for b in boundary))
    if any(b < 0 or b >= ndof for b in boundary):
        raise DimensionMismatch("boundary index outside the DOF range")
    if damping <= 0.0:
        raise AssumptionViolated("zero or negative modal damping violates asymptotic stability")
    _check_symmetric_definite(M, "mass matrix")
    _check_symmetric_definite(K, "stiffness matrix", semidefinite=True)

    interior = [i for i in range(ndof) if i not in boundary]
    if n_modes < 0 or n_modes > len(interior):
        raise OrderOutOfRange(f"n_modes {n_modes} outside [0, {len(interior)}]")
    b, i = np.asarray(boundary), np.asarray(interior, dtype=int)
    nb = len(boundary)

    Kbb = K[np.ix_(b, b)]
    Kbi = K[np.ix_(b, i)]
    Kii = K[np.ix_(i, i)]
    Mii = M[np.ix_(i, i)]
    if i.size:
        psi = -np.linalg.solve(Kii, Kbi.T)  # static constraint modes
        lam, phi_full = scipy.linalg.eigh(Kii, Mii)
        phi = phi_full[:, :n_modes]
    else:
        psi = np.zeros((0, nb))
        phi = np.zeros((0, 0))

    nr = nb + phi.shape[1]
    T = np.zeros((ndof, nr))
    T[b, :nb] = np.eye(nb)
    if i.size:
        T[i, :nb] = psi
        T[i, nb:] = phi
    Mr = T.T @ M @ T
    Kr = T.T @ K @ T
    Mr = 0.5 * (Mr + Mr.T)
    Kr = 0.5 * (Kr + Kr.T)

    # modal form of the reduced pair; grounding must have made Kr positive
    lam_r, V = scipy.linalg.eigh(Kr, Mr)
    if lam_r[0] <= 0.0:
        raise NotPositiveDefinite(
            f"reduced stiffness has a nonpositive eigenvalue ({lam_r[0]:.3e}); "
            "ground the structure before condensing"
        )
    omega = np.sqrt(lam_r)
    Bm = V.T @ np.vstack([np.eye(nb), np.zeros((nr - nb, nb))])
    Cm = np.hstack([np.eye(nb), np.zeros((nb, nr - nb))]) @ V

    # frequency-balanced modal state (omega*eta, eta_dot): keeps ||A|| at the
    # highest natural frequency instead of its square
    A = np.block(
        [
            [np.zeros((nr, nr)), np.diag(omega)],
            [-np.diag(omega), -np.diag(2.0 * damping * omega)],
        ]
    )
    B = np.vstack([np.zeros((nr, nb)), Bm])
    C = np.hstack([Cm / omega[None, :], np.zeros((nb, nr))])
    return StateSpaceModel(A, B, C, np.zeros((nb, nb)))


def env_abs_error(E: PartitionedModel, E_abs: PartitionedModel) -> ErrorSystem:
    """Environment abstraction error ``E_abs - E`` with the shared partition."""
    if E.row_split != E_abs.row_split or E.col_split != E_abs.col_split:
        raise DimensionMismatch("environment partitions differ")
    diff = subtract(E_abs.base, E.base)
    return ErrorSystem(diff, ErrorKind.ENV_ABSTRACTION, (E.row_split, E.col_split))


def _bare_loop_block(E22: StateSpaceModel) -> PartitionedModel:
    """Partitioned block [[O, I], [I, E22]] wrapped around a feedback path.

    ``E22`` maps the subsystem outputs y (dimension pj) back to its inputs u
    (dimension mj); closing the returned block with the subsystem realizes
    ``sub (I - E22 sub)^-1``.
    """
    pj, mj = E22.m, E22.p
    n = E22.n
    B = np.hstack([np.zeros((n, mj)), E22.B]).reshape(n, mj + pj)
    C = np.vstack([np.zeros((pj, n)), E22.C]).reshape(pj + mj, n)
    D = np.block(
        [
            [np.zeros((pj, mj)), np.eye(pj)],
            [np.eye(mj), E22.D],
        ]
    )
    base = StateSpaceModel(E22.A, B, C, D)
    return PartitionedModel(base, (pj, mj), (mj, pj))


def _bare_closed_loop(E22: StateSpaceModel, sub: StateSpaceModel) -> StateSpaceModel:
    """``sub (I - E22 sub)^-1``: the reduction error seen at the subsystem ports."""
    return lower_lft(_bare_loop_block(E22), sub)


def sp_reduction_error(
    F: PartitionedModel, sub: StateSpaceModel, sub_r: StateSpaceModel
) -> ErrorSystem:
    """Structure-preserving reduction error ``F_l(F, sub_r) - F_l(F, sub)``.

    Also exposes the weight-stripped form (``tilde``), i.e. the difference of
    the bare loops ``sub (I - F22 sub)^-1``, which equals
    ``Gy^-1 E_F22 Gu^-1`` for any invertible augmentation weights.
    """
    err = subtract(lower_lft(F, sub_r), lower_lft(F, sub))
    part = ((F.p1 - sub.p, sub.p), (F.m1 - sub.m, sub.m))
    F22 = F.block(2, 2)
    tilde = subtract(_bare_closed_loop(F22, sub_r), _bare_closed_loop(F22, sub))
    return ErrorSystem(err, ErrorKind.SP_REDUCTION, part, tilde)


def interconnected_error(
    spec: InterconnectionSpec,
    subsystems: Sequence[StateSpaceModel],
    reduced_subsystems: Sequence[StateSpaceModel],
) -> ErrorSystem:
    """Interconnected reduction error ``F_l(S, red_stack) - F_l(S, full_stack)``."""
    full = lower_lft(spec.S, parallel_diag(list(subsystems)))
    red = lower_lft(spec.S, parallel_diag(list(reduced_subsystems)))
    return ErrorSystem(subtract(red, full), ErrorKind.INTERCONNECTED)
