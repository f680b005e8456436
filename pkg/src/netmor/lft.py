"""Partitioned systems and linear fractional transformations.

A :class:`PartitionedModel` is a state-space model with a 2x2 IO partition.
The lower LFT closes the 22-channel, the upper LFT the 11-channel; both come
with explicit well-posedness checks on the static feedback term.  On top of
the two LFT forms this module builds interconnections of subsystems through
a coupling block, per-subsystem environments, and the augmentation that adds
weighted access to a subsystem's own inputs and outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NotWellPosed,
    SingularWeight,
)
from .statespace import StateSpaceModel, parallel_diag, static_gain

__all__ = [
    "PartitionedModel",
    "InterconnectionSpec",
    "AugmentationWeights",
    "lower_lft",
    "upper_lft",
    "lower_lft_samples",
    "upper_lft_samples",
    "permutation_maps",
    "permute_interconnection",
    "build_environment",
    "assemble_interconnection",
    "augment_environment",
    "WELL_POSED_RCOND",
]

# reciprocal condition number of I - D22*Dm below this raises NotWellPosed
WELL_POSED_RCOND = 1e-12


@dataclass(frozen=True)
class PartitionedModel:
    """State-space model with output split (p1, p2) and input split (m1, m2)."""

    base: StateSpaceModel
    row_split: tuple[int, int]
    col_split: tuple[int, int]

    def __post_init__(self):
        p1, p2 = self.row_split
        m1, m2 = self.col_split
        if min(p1, p2, m1, m2) < 0:
            raise DimensionMismatch("partition sizes must be nonnegative")
        if p1 + p2 != self.base.p or m1 + m2 != self.base.m:
            raise DimensionMismatch(
                f"partition {self.row_split}x{self.col_split} does not tile a "
                f"{self.base.p}x{self.base.m} model"
            )

    @property
    def p1(self):
        return self.row_split[0]

    @property
    def p2(self):
        return self.row_split[1]

    @property
    def m1(self):
        return self.col_split[0]

    @property
    def m2(self):
        return self.col_split[1]

    def _row_idx(self, i):
        return slice(0, self.p1) if i == 1 else slice(self.p1, self.base.p)

    def _col_idx(self, j):
        return slice(0, self.m1) if j == 1 else slice(self.m1, self.base.m)

    def block(self, i: int, j: int) -> StateSpaceModel:
        """Sub-model P_ij sharing the full (non-minimal) state."""
        r, c = self._row_idx(i), self._col_idx(j)
        return StateSpaceModel(self.base.A, self.base.B[:, c], self.base.C[r, :], self.base.D[r, c])

    def split_sample(self, G: np.ndarray):
        """Partition one complex response sample into its four blocks."""
        p1, m1 = self.p1, self.m1
        return G[:p1, :m1], G[:p1, m1:], G[p1:, :m1], G[p1:, m1:]


@dataclass(frozen=True)
class InterconnectionSpec:
    """Coupling dynamics plus the IO sizes of the subsystems it connects.

    ``S`` maps stacked inputs (w, y_1, ..., y_k) to stacked outputs
    (z, u_1, ..., u_k); the first row/column group is the external channel
    of size (p_C, m_C).
    """

    S: PartitionedModel
    subsystem_io: tuple[tuple[int, int], ...]  # (m_j, p_j) per subsystem

    def __post_init__(self):
        io = tuple((int(m), int(p)) for m, p in self.subsystem_io)
        object.__setattr__(self, "subsystem_io", io)
        if len(io) < 1:
            raise DimensionMismatch("need at least one subsystem")
        m_B = sum(m for m, _ in io)
        p_B = sum(p for _, p in io)
        if self.S.p2 != m_B or self.S.m2 != p_B:
            raise DimensionMismatch(
                f"S internal block is {self.S.p2}x{self.S.m2}, subsystem IO "
                f"table implies {m_B}x{p_B}"
            )

    @property
    def k(self):
        return len(self.subsystem_io)

    @property
    def m_C(self):
        return self.S.m1

    @property
    def p_C(self):
        return self.S.p1

    @property
    def m_B(self):
        return self.S.p2

    @property
    def p_B(self):
        return self.S.m2

    def input_offsets(self):
        """Start offset of each u_j inside the stacked u_B."""
        offs, acc = [], 0
        for m, _ in self.subsystem_io:
            offs.append(acc)
            acc += m
        return offs

    def output_offsets(self):
        offs, acc = [], 0
        for _, p in self.subsystem_io:
            offs.append(acc)
            acc += p
        return offs

    def check_subsystems(self, subsystems: Sequence[StateSpaceModel]):
        if len(subsystems) != self.k:
            raise DimensionMismatch(f"expected {self.k} subsystems, got {len(subsystems)}")
        for j, (g, (m, p)) in enumerate(zip(subsystems, self.subsystem_io), start=1):
            if (g.m, g.p) != (m, p):
                raise DimensionMismatch(
                    f"subsystem {j} is {g.p}x{g.m}, spec expects {p}x{m}"
                )


@dataclass(frozen=True)
class AugmentationWeights:
    """Square nonsingular weights on a subsystem's inputs (Gu) and outputs (Gy).

    Both are biproper models; static matrices are wrapped via :meth:`static`.
    """

    Gu: StateSpaceModel
    Gy: StateSpaceModel

    def __post_init__(self):
        for name, g in (("Gu", self.Gu), ("Gy", self.Gy)):
            if g.p != g.m:
                raise DimensionMismatch(f"{name} must be square")
            _check_nonsingular(g.D, name)

    @staticmethod
    def static(Gu, Gy) -> "AugmentationWeights":
        return AugmentationWeights(static_gain(Gu), static_gain(Gy))

    @staticmethod
    def identity(m: int, p: int) -> "AugmentationWeights":
        return AugmentationWeights.static(np.eye(m), np.eye(p))


def _check_nonsingular(D: np.ndarray, name: str, cond_limit: float = 1e12):
    if D.size == 0:
        return
    s = np.linalg.svd(D, compute_uv=False)
    if s[-1] <= 0.0 or s[0] / s[-1] > cond_limit:
        raise SingularWeight(f"{name} feedthrough is singular or has condition > {cond_limit:g}")


def _well_posed_inverse(D22: np.ndarray, Dm: np.ndarray):
    """Return (I - D22 Dm)^-1 and (I - Dm D22)^-1, or raise NotWellPosed."""
    p2 = D22.shape[0]
    m2 = D22.shape[1]
    E = np.eye(p2) - D22 @ Dm if p2 else np.eye(0)
    F = np.eye(m2) - Dm @ D22 if m2 else np.eye(0)
    for M in (E, F):
        if M.size == 0:
            continue
        s = np.linalg.svd(M, compute_uv=False)
        if s[-1] <= 0.0 or s[-1] / s[0] < WELL_POSED_RCOND:
            raise NotWellPosed(
                f"static feedback term has reciprocal condition {s[-1] / max(s[0], 1e-300):.2e}"
            )
    return np.linalg.inv(E) if E.size else E, np.linalg.inv(F) if F.size else F


def lower_lft(P: PartitionedModel, M: StateSpaceModel) -> StateSpaceModel:
    """Close the 22-channel of P with M.

    ``M`` consumes P's second output group (dimension p2) and drives P's
    second input group (dimension m2).  The result realizes
    ``P11 + P12 M (I - P22 M)^-1 P21`` with state dimension n_P + n_M.
    """
    if (M.m, M.p) != (P.p2, P.m2):
        raise DimensionMismatch(
            f"feedback block must be {P.m2}x{P.p2}, got {M.p}x{M.m}"
        )
    A, Bf, Cf, Df = P.base.A, P.base.B, P.base.C, P.base.D
    r1, r2 = P._row_idx(1), P._row_idx(2)
    c1, c2 = P._col_idx(1), P._col_idx(2)
    B1, B2 = Bf[:, c1], Bf[:, c2]
    C1, C2 = Cf[r1, :], Cf[r2, :]
    D11, D12 = Df[r1, c1], Df[r1, c2]
    D21, D22 = Df[r2, c1], Df[r2, c2]
    Am, Bm, Cm, Dm = M.A, M.B, M.C, M.D

    Einv, Finv = _well_posed_inverse(D22, Dm)
    FDm = Finv @ Dm
    n, nm = P.base.n, M.n
    A_cl = np.block(
        [
            [A + B2 @ FDm @ C2, B2 @ Finv @ Cm],
            [Bm @ Einv @ C2, Am + Bm @ D22 @ Finv @ Cm],
        ]
    ) if n + nm else np.zeros((0, 0))
    B_cl = np.vstack([B1 + B2 @ FDm @ D21, Bm @ Einv @ D21]) if n + nm else np.zeros((0, P.m1))
    C_cl = np.hstack([C1 + D12 @ FDm @ C2, D12 @ Finv @ Cm]) if n + nm else np.zeros((P.p1, 0))
    D_cl = D11 + D12 @ FDm @ D21
    return StateSpaceModel(A_cl, B_cl.reshape(n + nm, P.m1), C_cl.reshape(P.p1, n + nm), D_cl)


def _flip(P: PartitionedModel) -> PartitionedModel:
    """Swap the two input groups and the two output groups."""
    p1, p2 = P.row_split
    m1, m2 = P.col_split
    rows = np.r_[p1 : p1 + p2, 0:p1]
    cols = np.r_[m1 : m1 + m2, 0:m1]
    base = StateSpaceModel(P.base.A, P.base.B[:, cols], P.base.C[rows, :], P.base.D[np.ix_(rows, cols)])
    return PartitionedModel(base, (p2, p1), (m2, m1))


def upper_lft(P: PartitionedModel, M: StateSpaceModel) -> StateSpaceModel:
    """Close the 11-channel of P with M (dual of :func:`lower_lft`).

    Realizes ``P22 + P21 M (I - P11 M)^-1 P12``.
    """
    return lower_lft(_flip(P), M)


def lower_lft_samples(P: np.ndarray, splits: tuple[tuple[int, int], tuple[int, int]], M: np.ndarray) -> np.ndarray:
    """Pointwise lower LFT on complex samples; raises NotWellPosed when singular."""
    (p1, p2), (m1, m2) = splits
    P11, P12, P21, P22 = P[:p1, :m1], P[:p1, m1:], P[p1:, :m1], P[p1:, m1:]
    if M.shape != (m2, p2):
        raise DimensionMismatch(f"sample feedback must be {m2}x{p2}, got {M.shape}")
    E = np.eye(p2) - P22 @ M
    try:
        X = np.linalg.solve(E, P21)
    except np.linalg.LinAlgError as exc:
        raise NotWellPosed("sample LFT singular") from exc
    return P11 + P12 @ M @ X


def upper_lft_samples(P: np.ndarray, splits, M: np.ndarray) -> np.ndarray:
    (p1, p2), (m1, m2) = splits
    rows = np.r_[p1 : p1 + p2, 0:p1]
    cols = np.r_[m1 : m1 + m2, 0:m1]
    return lower_lft_samples(P[np.ix_(rows, cols)], ((p2, p1), (m2, m1)), M)


def permutation_maps(spec: InterconnectionSpec, j: int):
    """Row/column index maps pulling subsystem ``j`` next to the external block.

    Returns integer arrays (rows, cols) such that ``S_perm = S[rows][:, cols]``
    has row order (z, u_j, u_l for l != j) and column order (w, y_j, y_l).
    Pure integer permutations; applying argsort recovers S exactly.
    """
    if not 1 <= j <= spec.k:
        raise IndexOutOfRange(f"subsystem index {j} outside 1..{spec.k}")
    jj = j - 1
    in_off = spec.input_offsets()
    out_off = spec.output_offsets()
    m_C, p_C = spec.m_C, spec.p_C

    rows = list(range(p_C))
    rows += [p_C + in_off[jj] + i for i in range(spec.subsystem_io[jj][0])]
    for l in range(spec.k):
        if l == jj:
            continue
        rows += [p_C + in_off[l] + i for i in range(spec.subsystem_io[l][0])]

    cols = list(range(m_C))
    cols += [m_C + out_off[jj] + i for i in range(spec.subsystem_io[jj][1])]
    for l in range(spec.k):
        if l == jj:
            continue
        cols += [m_C + out_off[l] + i for i in range(spec.subsystem_io[l][1])]
    return np.asarray(rows), np.asarray(cols)


def permute_interconnection(spec: InterconnectionSpec, j: int) -> PartitionedModel:
    """Permuted coupling block with subsystem ``j`` pulled into the outer group."""
    rows, cols = permutation_maps(spec, j)
    S = spec.S.base
    base = StateSpaceModel(S.A, S.B[:, cols], S.C[rows, :], S.D[np.ix_(rows, cols)])
    m_j, p_j = spec.subsystem_io[j - 1]
    return PartitionedModel(
        base,
        (spec.p_C + m_j, spec.m_B - m_j),
        (spec.m_C + p_j, spec.p_B - p_j),
    )


def build_environment(
    spec: InterconnectionSpec, subsystems: Sequence[StateSpaceModel], j: int
) -> PartitionedModel:
    """Environment of subsystem ``j``: the coupling closed over all others.

    The result maps inputs (w, y_j) to outputs (z, u_j); closing it with
    subsystem ``j`` reproduces the full interconnection exactly.
    """
    spec.check_subsystems(subsystems)
    if not 1 <= j <= spec.k:
        raise IndexOutOfRange(f"subsystem index {j} outside 1..{spec.k}")
    m_j, p_j = spec.subsystem_io[j - 1]
    S_perm = permute_interconnection(spec, j)
    if spec.k == 1:
        base = S_perm.base
    else:
        others = [g for l, g in enumerate(subsystems, start=1) if l != j]
        base = lower_lft(S_perm, parallel_diag(others))
    return PartitionedModel(base, (spec.p_C, m_j), (spec.m_C, p_j))


def assemble_interconnection(
    spec: InterconnectionSpec, subsystems: Sequence[StateSpaceModel]
) -> StateSpaceModel:
    """Close the coupling block over the parallel stack of all subsystems."""
    spec.check_subsystems(subsystems)
    return lower_lft(spec.S, parallel_diag(subsystems))


def augment_environment(
    E_abs: PartitionedModel, weights: AugmentationWeights
) -> PartitionedModel:
    """Add weighted direct access to the closing subsystem's own channels.

    Given an (abstracted) environment with inputs (w, y) and outputs (z, u),
    returns the augmented block

        [[E11,  O,  E12],
         [ O,   O,  Gy ],
         [E21, Gu,  E22]]

    with inputs (w, u_aug, y) and outputs (z, y_aug, u); its 22-feedback
    block equals E22, so closing with the same subsystem stays well-posed.
    """
    m_j = E_abs.p2
    p_j = E_abs.m2
    if weights.Gu.m != m_j or weights.Gy.m != p_j:
        raise DimensionMismatch(
            f"weights sized {weights.Gu.m}/{weights.Gy.m}, expected {m_j}/{p_j}"
        )
    E = E_abs.base
    gu, gy = weights.Gu, weights.Gy
    nE, nu, ny = E.n, gu.n, gy.n
    p_C, m_C = E_abs.p1, E_abs.m1

    r1, r2 = E_abs._row_idx(1), E_abs._row_idx(2)
    c1, c2 = E_abs._col_idx(1), E_abs._col_idx(2)

    n = nE + ny + nu
    A = np.zeros((n, n))
    A[:nE, :nE] = E.A
    A[nE : nE + ny, nE : nE + ny] = gy.A
    A[nE + ny :, nE + ny :] = gu.A

    # inputs: (w, u_aug, y)
    B = np.zeros((n, m_C + m_j + p_j))
    B[:nE, :m_C] = E.B[:, c1]
    B[:nE, m_C + m_j :] = E.B[:, c2]
    B[nE : nE + ny, m_C + m_j :] = gy.B
    B[nE + ny :, m_C : m_C + m_j] = gu.B

    # outputs: (z, y_aug, u)
    C = np.zeros((p_C + p_j + m_j, n))
    C[:p_C, :nE] = E.C[r1, :]
    C[p_C : p_C + p_j, nE : nE + ny] = gy.C
    C[p_C + p_j :, :nE] = E.C[r2, :]
    C[p_C + p_j :, nE + ny :] = gu.C

    D = np.zeros((p_C + p_j + m_j, m_C + m_j + p_j))
    D[:p_C, :m_C] = E.D[r1, c1]
    D[:p_C, m_C + m_j :] = E.D[r1, c2]
    D[p_C : p_C + p_j, m_C + m_j :] = gy.D
    D[p_C + p_j :, :m_C] = E.D[r2, c1]
    D[p_C + p_j :, m_C : m_C + m_j] = gu.D
    D[p_C + p_j :, m_C + m_j :] = E.D[r2, c2]

    base = StateSpaceModel(A, B, C, D)
    return PartitionedModel(base, (p_C + p_j, m_j), (m_C + m_j, p_j))
