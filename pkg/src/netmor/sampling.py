"""Pointwise sampling of admissible error draws through the coupled model.

Given weighted budgets for the abstraction and reduction errors, random
norm-bounded complex matrices are pushed through the weights at each grid
frequency, the perturbed subsystem stack is assembled through the closed
feedback expression, and the resulting coupled-error sample is recorded.
Used both by the certificate soundness tests and the conservatism study.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import PointwiseIllPosed
from .lft import InterconnectionSpec, lower_lft_samples, permutation_maps
from .robust import WeightStack
from .statespace import FrequencyGrid, StateSpaceModel, evaluate_response

__all__ = ["ErrorDrawStudy", "sample_coupled_errors"]


def _ginibre_contraction(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Complex Ginibre matrix rescaled to a spectral norm drawn from U[0, 1]."""
    G = rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))
    s = np.linalg.norm(G, 2)
    target = rng.uniform(0.0, 1.0)
    return G * (target / max(s, 1e-300))


@dataclass(frozen=True)
class ErrorDrawStudy:
    """Per-frequency maxima of sampled coupled errors."""

    grid: FrequencyGrid
    max_error: np.ndarray  # (n_w,) max spectral norm of the coupled error
    max_weighted: np.ndarray  # (n_w,) max of ||V_perf E_C W_perf||
    discarded: int  # ill-posed draws


def sample_coupled_errors(
    spec: InterconnectionSpec,
    subsystems: Sequence[StateSpaceModel],
    stack: WeightStack,
    grid: FrequencyGrid,
    n_samples: int,
    seed: int,
    eps_entries: np.ndarray | None = None,
) -> ErrorDrawStudy:
    """Sample admissible error draws pointwise and record the coupled error.

    ``eps_entries`` holds the budget scalars (abstraction entries then
    reduction entries); a 2D array of shape (n_w, 2k) applies per-frequency
    budgets, a 1D array of length 2k applies one budget everywhere, and
    ``None`` uses the budgets stored in the stack.  Draw streams are derived
    from (seed, frequency index, sample index), so parallel and serial runs
    agree and reruns are bit-identical.
    """
    from .robust import _single_threaded_blas

    with _single_threaded_blas():
        return _sample_coupled_errors(
            spec, subsystems, stack, grid, n_samples, seed, eps_entries
        )


def _sample_coupled_errors(spec, subsystems, stack, grid, n_samples, seed, eps_entries):
    k = spec.k
    mode = stack.mode
    n_w = len(grid)
    eps = _expand_entries(stack, eps_entries, n_w, k)

    S_samples = [evaluate_response(spec.S.base, w) for w in grid.omegas]
    sub_samples = [
        [evaluate_response(g, w) for g in subsystems] for w in grid.omegas
    ]
    v_abs = _weight_samples(stack.v_abs, grid)
    w_abs = _weight_samples(stack.w_abs, grid)
    v_red = _weight_samples(stack.v_red, grid)
    w_red = _weight_samples(stack.w_red, grid)
    v_perf = _weight_samples([stack.v_perf], grid)[0]
    w_perf = _weight_samples([stack.w_perf], grid)[0]

    perms = [permutation_maps(spec, j) for j in range(1, k + 1)]
    e22_true = None
    if mode == "env":
        e22_true = [
            [_env22_sample(spec, perms, S_samples[iw], sub_samples[iw], j) for j in range(1, k + 1)]
            for iw in range(n_w)
        ]

    max_error = np.zeros(n_w)
    max_weighted = np.zeros(n_w)
    discarded = 0
    for iw, w in enumerate(grid.omegas):
        Ssamp = S_samples[iw]
        sig = sub_samples[iw]
        SB = scipy.linalg.block_diag(*sig)
        splits = ((spec.p_C, spec.m_B), (spec.m_C, spec.p_B))
        full = lower_lft_samples(Ssamp, splits, SB)
        for s in range(n_samples):
            rng = np.random.default_rng((seed, iw, s))
            try:
                if mode == "env":
                    e22_hat = []
                    for j in range(k):
                        m_j, p_j = spec.subsystem_io[j]
                        R = _ginibre_contraction(rng, m_j, p_j)
                        e22_hat.append(
                            e22_true[iw][j]
                            + w_abs[j][iw] @ R @ (eps[iw, j] * v_abs[j][iw])
                        )
                else:
                    sig_abs = []
                    for j in range(k):
                        m_j, p_j = spec.subsystem_io[j]
                        R = _ginibre_contraction(rng, p_j, m_j)
                        sig_abs.append(
                            sig[j] + w_abs[j][iw] @ R @ (eps[iw, j] * v_abs[j][iw])
                        )
                    e22_hat = [
                        _env22_sample(spec, perms, Ssamp, sig_abs, j)
                        for j in range(1, k + 1)
                    ]
                ef = []
                for j in range(k):
                    m_j, p_j = spec.subsystem_io[j]
                    R = _ginibre_contraction(rng, p_j, m_j)
                    ef.append(w_red[j][iw] @ R @ (eps[iw, k + j] * v_red[j][iw]))

                E22h = scipy.linalg.block_diag(*e22_hat)
                inner = SB @ np.linalg.inv(np.eye(spec.m_B) - E22h @ SB)
                inner = inner + scipy.linalg.block_diag(*ef)
                SBh = inner @ np.linalg.inv(np.eye(spec.m_B) + E22h @ inner)
                red = lower_lft_samples(Ssamp, splits, SBh)
            except (np.linalg.LinAlgError, PointwiseIllPosed):
                discarded += 1
                continue
            if not np.all(np.isfinite(red)):
                discarded += 1
                continue
            err = red - full
            max_error[iw] = max(max_error[iw], float(np.linalg.norm(err, 2)))
            weighted = v_perf[iw] @ err @ w_perf[iw]
            max_weighted[iw] = max(max_weighted[iw], float(np.linalg.norm(weighted, 2)))
    return ErrorDrawStudy(grid, max_error, max_weighted, discarded)


def _expand_entries(stack, eps_entries, n_w, k):
    if eps_entries is None:
        base = np.asarray(list(stack.eps_abs) + list(stack.eps_red), dtype=float)
        return np.tile(base, (n_w, 1))
    eps = np.asarray(eps_entries, dtype=float)
    if eps.ndim == 1:
        return np.tile(eps, (n_w, 1))
    if eps.shape != (n_w, 2 * k):
        raise ValueError(f"budget array must be ({n_w}, {2 * k})")
    return eps


def _weight_samples(weights, grid):
    return [
        np.array([evaluate_response(g, w) for w in grid.omegas]) for g in weights
    ]


def _env22_sample(spec, perms, Ssamp, sig, j):
    rows, cols = perms[j - 1]
    Sp = Ssamp[np.ix_(rows, cols)]
    m_j, p_j = spec.subsystem_io[j - 1]
    if spec.k == 1:
        E = Sp
    else:
        others = scipy.linalg.block_diag(*[s for l, s in enumerate(sig, start=1) if l != j])
        splits = ((spec.p_C + m_j, spec.m_B - m_j), (spec.m_C + p_j, spec.p_B - p_j))
        E = lower_lft_samples(Sp, splits, others)
    return E[spec.p_C : spec.p_C + m_j, spec.m_C : spec.m_C + p_j]
