"""State-space fundamentals.

Continuous-time LTI models G(s) = C (sI - A)^-1 B + D with real matrices,
plus the small algebra needed by the rest of the package: composition,
stability tests, Lyapunov solves, frequency responses and the H-infinity
norm.  All values are immutable after construction and every operation is a
pure function, so everything here is safe to call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    NotHurwitz,
    NotStable,
    NumericalFailure,
    SingularResolvent,
    SingularWeight,
)

__all__ = [
    "StateSpaceModel",
    "FrequencyGrid",
    "FrequencyResponse",
    "HinfResult",
    "evaluate_response",
    "frequency_response",
    "is_internally_stable",
    "stability_margin",
    "solve_lyapunov",
    "hinf_norm",
    "parallel_diag",
    "series",
    "add",
    "subtract",
    "negate",
    "invert",
    "balance_realization",
    "transpose",
    "static_gain",
    "identity",
    "zero_model",
]


def _as_matrix(x, rows=None, cols=None):
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if rows is not None and a.size == 0:
        a = a.reshape(rows, cols)
    return a


@dataclass(frozen=True)
class StateSpaceModel:
    """Real state-space realization (A, B, C, D).

    ``n = 0`` is permitted and represents a static gain ``D``.  Arrays are
    copied and marked read-only, so instances can be shared freely.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p, m = D.shape
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, m)
        C = np.asarray(self.C, dtype=float).reshape(p, n)
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        for name, arr in (("A", A), ("B", B), ("C", C), ("D", D)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.D.shape[1]

    @property
    def p(self) -> int:
        return self.D.shape[0]

    def poles(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0, dtype=complex)
        return np.linalg.eigvals(self.A)

    def __repr__(self):  # compact; the matrices are rarely useful in logs
        return f"StateSpaceModel(n={self.n}, m={self.m}, p={self.p})"


def static_gain(D) -> StateSpaceModel:
    """Static model with ``G(s) = D``."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    p, m = D.shape
    return StateSpaceModel(np.zeros((0, 0)), np.zeros((0, m)), np.zeros((p, 0)), D)


def identity(dim: int) -> StateSpaceModel:
    return static_gain(np.eye(dim))


def zero_model(p: int, m: int) -> StateSpaceModel:
    return static_gain(np.zeros((p, m)))


@dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing positive frequencies in rad/s."""

    omegas: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omegas, dtype=float).ravel()
        if w.size == 0:
            raise ValueError("frequency grid must be nonempty")
        if np.any(w <= 0.0) or np.any(np.diff(w) <= 0.0):
            raise ValueError("frequencies must be positive and strictly increasing")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "omegas", w)

    def __len__(self):
        return self.omegas.size

    @staticmethod
    def log_spaced(w_min: float, w_max: float, count: int) -> "FrequencyGrid":
        if not (0.0 < w_min < w_max):
            raise ValueError("need 0 < w_min < w_max")
        return FrequencyGrid(np.geomspace(w_min, w_max, count))

    @staticmethod
    def for_models(
        models: Iterable[StateSpaceModel],
        points_per_decade: float = 400.0,
        pad_decades: float = 1.0,
        max_points: int = 100_000,
    ) -> "FrequencyGrid":
        """Log grid spanning the nonzero pole magnitudes of ``models``.

        The span is padded by ``pad_decades`` on each side; falls back to
        [1e-2, 1e2] when no dynamic model is present.
        """
        mags = []
        for g in models:
            pk = np.abs(g.poles())
            mags.extend(pk[pk > 0.0])
        if mags:
            lo = min(mags) * 10.0 ** (-pad_decades)
            hi = max(mags) * 10.0 ** (pad_decades)
        else:
            lo, hi = 1e-2, 1e2
        decades = max(np.log10(hi / lo), 0.5)
        count = min(max(int(np.ceil(decades * points_per_decade)) + 1, 16), max_points)
        return FrequencyGrid.log_spaced(lo, hi, count)


@dataclass(frozen=True)
class FrequencyResponse:
    """Complex samples of a p x m response on a frequency grid."""

    grid: FrequencyGrid
    samples: np.ndarray  # (n_omega, p, m) complex

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=complex)
        if s.ndim != 3 or s.shape[0] != len(self.grid):
            raise DimensionMismatch(
                f"samples shape {s.shape} inconsistent with grid of {len(self.grid)}"
            )
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def p(self):
        return self.samples.shape[1]

    @property
    def m(self):
        return self.samples.shape[2]


def evaluate_response(model: StateSpaceModel, omega: float) -> np.ndarray:
    """Frequency-response matrix ``G(i*omega) = C (i*omega*I - A)^-1 B + D``.

    Raises
    ------
    SingularResolvent
        If ``i*omega*I - A`` is numerically singular.
    """
    if model.n == 0:
        return model.D.astype(complex)
    E = 1j * omega * np.eye(model.n) - model.A
    try:
        X = np.linalg.solve(E, model.B.astype(complex))
    except np.linalg.LinAlgError as exc:
        raise SingularResolvent(f"resolvent singular at omega={omega}") from exc
    if not np.all(np.isfinite(X)):
        raise SingularResolvent(f"resolvent singular at omega={omega}")
    # cheap conditioning guard: residual growth flags near-singular solves
    resid = np.linalg.norm(E @ X - model.B)
    scale = np.linalg.norm(model.B) + 1.0
    if resid > 1e-6 * scale:
        raise SingularResolvent(
            f"resolvent ill-conditioned at omega={omega} (residual {resid:.2e})"
        )
    return model.C @ X + model.D


def frequency_response(model: StateSpaceModel, grid: FrequencyGrid) -> FrequencyResponse:
    """Evaluate ``model`` on every grid point."""
    samples = np.empty((len(grid), model.p, model.m), dtype=complex)
    for i, w in enumerate(grid.omegas):
        samples[i] = evaluate_response(model, w)
    return FrequencyResponse(grid, samples)


def stability_margin(model: StateSpaceModel) -> float:
    """Default eigenvalue margin: 1e-9 * max(1, ||A||).

    The norm is taken after diagonal balancing so the margin reflects the
    dynamics rather than the conditioning of one particular realization
    (stiff couplings can inflate an unbalanced closed-loop A by many
    decades).
    """
    if model.n == 0:
        return 1e-9
    balanced, _ = scipy.linalg.matrix_balance(model.A, permute=False)
    return 1e-9 * max(1.0, np.linalg.norm(balanced, 2))


def is_internally_stable(model: StateSpaceModel, margin: float | None = None) -> bool:
    """True iff every eigenvalue of A has real part < -margin (n = 0 is stable)."""
    if model.n == 0:
        return True
    if margin is None:
        margin = stability_margin(model)
    return bool(np.max(np.real(np.linalg.eigvals(model.A))) < -margin)


def solve_lyapunov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``A P + P A^T + Q = 0`` for symmetric P, A Hurwitz.

    Backed by the Bartels-Stewart solver (real Schur form) from scipy.

    Raises
    ------
    NotHurwitz
        If A has an eigenvalue with nonnegative real part.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise DimensionMismatch("A and Q must be square of equal size")
    if n == 0:
        return np.zeros((0, 0))
    # diagonal balancing (exact similarity): stiff interconnections otherwise
    # push slow eigenvalues below the Schur solver's resolution
    Ab, T = scipy.linalg.matrix_balance(A, permute=False, separate=True)
    t = np.asarray(T[0], dtype=float)
    margin = 1e-9 * max(1.0, np.linalg.norm(Ab, 2))
    if np.max(np.real(np.linalg.eigvals(Ab))) >= -margin:
        raise NotHurwitz("A is not Hurwitz; Lyapunov solution undefined")
    Qb = Q / (t[:, None] * t[None, :])
    Pb = scipy.linalg.solve_continuous_lyapunov(Ab, -Qb)
    P = Pb * (t[:, None] * t[None, :])
    return 0.5 * (P + P.T)


class HinfResult(NamedTuple):
    value: float
    peak_omega: float

    def __float__(self):
        return float(self.value)


def _sigma_max(model: StateSpaceModel, omega: float) -> float:
    return float(np.linalg.norm(evaluate_response(model, omega), 2))


def hinf_norm(model: StateSpaceModel, rel_tol: float = 1e-6) -> HinfResult:
    """H-infinity norm by bisection on Hamiltonian imaginary-axis eigenvalues.

    Returns the norm together with the frequency at which the lower bound was
    attained.  The relative gap between the returned value and the true norm
    is at most ``rel_tol``.

    Raises
    ------
    NotStable
        If the model is not internally stable (norm undefined).
    """
    if model.m == 0 or model.p == 0:
        return HinfResult(0.0, 0.0)
    if not is_internally_stable(model):
        raise NotStable("H-infinity norm requested for an unstable model")
    d_norm = float(np.linalg.norm(model.D, 2))
    if model.n == 0:
        return HinfResult(d_norm, 0.0)

    poles = model.poles()
    candidates = {0.0}
    for lam in poles:
        candidates.add(abs(lam))
        if abs(lam.imag) > 0.0:
            candidates.add(abs(lam.imag))
    pole_mags = np.abs(poles)
    lo = max(pole_mags.min() * 1e-2, 1e-12)
    candidates.update(np.geomspace(lo, pole_mags.max() * 1e2, 24))
    gamma_lo = d_norm
    peak = 0.0
    for w in sorted(candidates):
        s = _sigma_max(model, w)
        if s > gamma_lo:
            gamma_lo, peak = s, w
    if gamma_lo == 0.0:
        return HinfResult(0.0, 0.0)

    # work on an output-rescaled copy so the Hamiltonian is well balanced
    scale = gamma_lo
    model = StateSpaceModel(model.A, model.B, model.C / scale, model.D / scale)
    gamma_lo = 1.0

    A, B, C, D = model.A, model.B, model.C, model.D
    eye_m = np.eye(model.m)
    for _ in range(200):
        gamma = gamma_lo * (1.0 + 2.0 * rel_tol) + 1e-300
        R = gamma**2 * eye_m - D.T @ D
        try:
            Ri = np.linalg.inv(R)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("singular R in Hamiltonian assembly") from exc
        Ah = A + B @ Ri @ D.T @ C
        H = np.block(
            [
                [Ah, B @ Ri @ B.T],
                [-C.T @ (np.eye(model.p) + D @ Ri @ D.T) @ C, -Ah.T],
            ]
        )
        eigs = np.linalg.eigvals(H)
        on_axis = eigs[np.abs(eigs.real) <= 1e-8 * np.maximum(1.0, np.abs(eigs))]
        freqs = np.unique(np.abs(on_axis.imag))
        freqs = freqs[freqs > 0.0]
        if freqs.size == 0:
            value = 0.5 * (gamma_lo + gamma)
            return HinfResult(value * scale, peak)
        mids = np.sqrt(freqs[:-1] * freqs[1:]) if freqs.size > 1 else freqs
        improved = False
        for w in np.concatenate([mids, freqs]):
            s = _sigma_max(model, w)
            if s > gamma_lo:
                gamma_lo, peak, improved = s, w, True
        if not improved:
            # stalled within tolerance of the level set
            return HinfResult(gamma_lo * (1.0 + rel_tol) * scale, peak)
    raise NumericalFailure("H-infinity bisection did not converge")


def parallel_diag(models: Sequence[StateSpaceModel]) -> StateSpaceModel:
    """Block-diagonal (parallel) interconnection, IO stacked in list order."""
    models = list(models)
    if not models:
        raise ValueError("parallel_diag needs a nonempty list")
    A = scipy.linalg.block_diag(*[g.A for g in models])
    B = scipy.linalg.block_diag(*[g.B for g in models])
    C = scipy.linalg.block_diag(*[g.C for g in models])
    D = scipy.linalg.block_diag(*[g.D for g in models])
    n = sum(g.n for g in models)
    m = sum(g.m for g in models)
    p = sum(g.p for g in models)
    return StateSpaceModel(A.reshape(n, n), B.reshape(n, m), C.reshape(p, n), D.reshape(p, m))


def series(g2: StateSpaceModel, g1: StateSpaceModel) -> StateSpaceModel:
    """Cascade ``g2 * g1`` (signal passes through g1 first)."""
    if g1.p != g2.m:
        raise DimensionMismatch(f"series: g1 has {g1.p} outputs, g2 expects {g2.m}")
    n1, n2 = g1.n, g2.n
    A = np.block(
        [
            [g1.A, np.zeros((n1, n2))],
            [g2.B @ g1.C, g2.A],
        ]
    )
    B = np.vstack([g1.B, g2.B @ g1.D])
    C = np.hstack([g2.D @ g1.C, g2.C])
    D = g2.D @ g1.D
    return StateSpaceModel(A.reshape(n1 + n2, n1 + n2), B, C, D)


def add(g1: StateSpaceModel, g2: StateSpaceModel) -> StateSpaceModel:
    if (g1.p, g1.m) != (g2.p, g2.m):
        raise DimensionMismatch("add: IO dimensions differ")
    n = g1.n + g2.n
    A = scipy.linalg.block_diag(g1.A, g2.A).reshape(n, n)
    B = np.vstack([g1.B, g2.B])
    C = np.hstack([g1.C, g2.C])
    return StateSpaceModel(A, B, C, g1.D + g2.D)


def negate(g: StateSpaceModel) -> StateSpaceModel:
    return StateSpaceModel(g.A, g.B, -g.C, -g.D)


def subtract(g1: StateSpaceModel, g2: StateSpaceModel) -> StateSpaceModel:
    """Realization of ``g1 - g2`` with state dimension n1 + n2."""
    return add(g1, negate(g2))


def transpose(g: StateSpaceModel) -> StateSpaceModel:
    return StateSpaceModel(g.A.T, g.C.T, g.B.T, g.D.T)


def balance_realization(g: StateSpaceModel) -> StateSpaceModel:
    """Diagonal state rescaling (exact similarity; the transfer is kept).

    Deflates realizations whose A-norm vastly exceeds the spectral radius
    (e.g. inverses of low-gain weights), so the relative eigenvalue margin
    of the stability test stays meaningful.
    """
    if g.n == 0:
        return g
    _, T = scipy.linalg.matrix_balance(g.A, permute=False, separate=True)
    t = T[0] if isinstance(T, tuple) else np.diag(T)
    t = np.asarray(t, dtype=float)
    A = g.A * (t[None, :] / t[:, None])
    B = g.B / t[:, None]
    C = g.C * t[None, :]
    return StateSpaceModel(A, B, C, g.D)


def invert(g: StateSpaceModel, cond_limit: float = 1e12) -> StateSpaceModel:
    """Inverse of a biproper square model (D nonsingular)."""
    if g.p != g.m:
        raise DimensionMismatch("invert requires a square model")
    D = g.D
    if D.size == 0:
        return g
    svals = np.linalg.svd(D, compute_uv=False)
    if svals[-1] <= 0.0 or svals[0] / svals[-1] > cond_limit:
        raise SingularWeight(
            f"D is singular or ill-conditioned (cond ~ {svals[0] / max(svals[-1], 1e-300):.2e})"
        )
    Di = np.linalg.inv(D)
    if g.n == 0:
        return static_gain(Di)
    A = g.A - g.B @ Di @ g.C
    return balance_realization(StateSpaceModel(A, g.B @ Di, -Di @ g.C, Di))
