"""Shared generators for seeded random models and interconnections."""

from __future__ import annotations

import numpy as np
import pytest

from netmor.lft import InterconnectionSpec, PartitionedModel
from netmor.statespace import (
    FrequencyGrid,
    StateSpaceModel,
    evaluate_response,
    static_gain,
)


def random_stable_model(
    rng: np.random.Generator,
    n: int,
    m: int,
    p: int,
    min_damping: float = 0.05,
    freq_span: tuple[float, float] = (0.1, 10.0),
    with_feedthrough: bool = False,
) -> StateSpaceModel:
    """Random internally stable model with bounded-below pole damping.

    Poles are placed directly (real or complex pairs with damping ratio at
    least ``min_damping``) and hidden behind a mild random similarity, so a
    dense frequency grid resolves every resonance peak.
    """
    if n == 0:
        return static_gain(rng.standard_normal((p, m)))
    blocks = []
    remaining = n
    lo, hi = np.log(freq_span[0]), np.log(freq_span[1])
    while remaining > 0:
        wn = float(np.exp(rng.uniform(lo, hi)))
        if remaining >= 2 and rng.uniform() < 0.7:
            zeta = float(rng.uniform(min_damping, 0.9))
            re, im = -zeta * wn, wn * np.sqrt(1.0 - zeta**2)
            blocks.append(np.array([[re, im], [-im, re]]))
            remaining -= 2
        else:
            blocks.append(np.array([[-wn]]))
            remaining -= 1
    A = np.zeros((n, n))
    at = 0
    for blk in blocks:
        s = blk.shape[0]
        A[at : at + s, at : at + s] = blk
        at += s
    T = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
    A = np.linalg.solve(T, A @ T)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = 0.1 * rng.standard_normal((p, m)) if with_feedthrough else np.zeros((p, m))
    return StateSpaceModel(A, B, C, D)


def grid_max_sigma(model: StateSpaceModel, grid: FrequencyGrid) -> float:
    return max(
        float(np.linalg.norm(evaluate_response(model, w), 2)) for w in grid.omegas
    )


def random_interconnection(
    rng: np.random.Generator,
    k: int = 3,
    max_order: int = 6,
    coupling: float = 0.5,
    external_io: tuple[int, int] = (1, 1),
):
    """Random spec + subsystems satisfying the standing stability assumption.

    The static coupling block is scaled so the loop gain stays below
    ``coupling`` < 1, which makes every environment and the interconnection
    well-posed and internally stable by small gain.
    """
    m_C, p_C = external_io
    io = []
    subsystems = []
    for _ in range(k):
        m = int(rng.integers(1, 3))
        p = int(rng.integers(1, 3))
        n = int(rng.integers(2, max_order + 1))
        g = random_stable_model(rng, n, m, p)
        grid = FrequencyGrid.for_models([g], points_per_decade=30)
        peak = grid_max_sigma(g, grid)
        subsystems.append(StateSpaceModel(g.A, g.B / max(peak, 1e-12), g.C, g.D))
        io.append((m, p))
    m_B = sum(m for m, _ in io)
    p_B = sum(p for _, p in io)
    S = rng.standard_normal((p_C + m_B, m_C + p_B))
    S22 = S[p_C:, m_C:]
    S[p_C:, m_C:] = coupling * S22 / max(np.linalg.norm(S22, 2), 1e-12)
    spec = InterconnectionSpec(
        PartitionedModel(static_gain(S), (p_C, m_B), (m_C, p_B)),
        tuple(io),
    )
    return spec, subsystems


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
