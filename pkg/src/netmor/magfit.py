"""Stable minimum-phase rational fits of magnitude curves.

Used to turn a sampled magnitude band into a bistable, biproper scalar
weight: the minimum-phase frequency response is reconstructed from the
log-magnitude by a discrete cepstrum (on a bilinearly warped frequency
axis), then fitted with a low-order rational function by vector fitting
with stable pole relocation.  Any right-half-plane zeros left by the fit
are reflected, which preserves the magnitude on the imaginary axis.
"""

from __future__ import annotations

import numpy as np

from .errors import NotBistable, NumericalFailure
from .statespace import (
    StateSpaceModel,
    balance_realization,
    evaluate_response,
    is_internally_stable,
    series,
)

__all__ = ["fit_min_phase", "min_phase_samples", "vector_fit"]


def min_phase_samples(omegas, mags, n_fft: int = 4096):
    """Minimum-phase complex samples with the given magnitude.

    The magnitude curve is interpolated in log-log space, warped to the unit
    circle with a bilinear map centered at the geometric mean frequency, and
    completed with its cepstral (Hilbert-consistent) phase.
    """
    omegas = np.asarray(omegas, dtype=float)
    mags = np.asarray(mags, dtype=float)
    if np.any(mags <= 0.0):
        raise ValueError("magnitude samples must be positive")
    w0 = float(np.exp(np.mean(np.log(omegas))))
    theta = np.pi * (np.arange(n_fft // 2 + 1)) / (n_fft // 2)
    # theta = 0 maps to w = 0, theta = pi to w = inf; clamp the ends
    wt = w0 * np.tan(np.clip(theta / 2.0, 1e-9, np.pi / 2 - 1e-9))
    logm = np.interp(np.log(wt), np.log(omegas), np.log(mags))
    # even extension around the circle and real cepstrum of log |H|^2
    full = np.concatenate([logm, logm[-2:0:-1]])
    cep = np.fft.ifft(2.0 * full).real
    n2 = n_fft // 2
    folded = np.zeros_like(cep)
    folded[0] = cep[0]
    folded[1:n2] = 2.0 * cep[1:n2]
    folded[n2] = cep[n2]
    log_h = np.fft.fft(folded)[: n2 + 1] / 2.0
    h = np.exp(log_h)
    return wt[1:-1], h[1:-1]  # drop the clamped endpoints


def _peak_frequencies(omegas, mags, max_peaks):
    """Frequencies of the most prominent local maxima of a magnitude curve."""
    import scipy.signal

    logm = np.log(np.maximum(mags, 1e-300))
    idx, props = scipy.signal.find_peaks(logm, prominence=0.3)
    if idx.size == 0:
        return []
    order = np.argsort(props["prominences"])[::-1]
    return [float(omegas[i]) for i in idx[order[:max_peaks]]]


def _pole_structure(poles):
    """Group a conjugate-symmetric pole set into real poles and pair heads."""
    struct = []
    for p in _symmetrize(poles):
        if p.imag > 0:
            struct.append(("c", p))
        elif p.imag == 0:
            struct.append(("r", p.real))
    return struct


def _real_basis(s, struct):
    cols = []
    for kind, p in struct:
        if kind == "r":
            cols.append(1.0 / (s - p))
        else:
            a = 1.0 / (s - p)
            b = 1.0 / (s - np.conj(p))
            cols.append(a + b)
            cols.append(1j * (a - b))
    return np.column_stack(cols)


def _relocation_matrix(struct, sigma):
    n = len(sigma)
    lam = np.zeros((n, n))
    bvec = np.zeros(n)
    at = 0
    for kind, p in struct:
        if kind == "r":
            lam[at, at] = p
            bvec[at] = 1.0
            at += 1
        else:
            lam[at : at + 2, at : at + 2] = [[p.real, p.imag], [-p.imag, p.real]]
            bvec[at] = 2.0
            at += 2
    return lam - np.outer(bvec, sigma)


def vector_fit(omegas, samples, order: int, iters: int = 25):
    """SISO vector fit with stable poles: returns (poles, residues, d).

    Uses the real-coefficient pair basis for conjugate pole pairs; unstable
    pole updates are reflected into the left half plane each sweep.
    """
    omegas = np.asarray(omegas, dtype=float)
    h = np.asarray(samples, dtype=complex)
    s = 1j * omegas
    lo, hi = omegas.min(), omegas.max()
    n_pairs = order // 2
    # seed pole pairs at the strongest magnitude peaks, the rest log-spaced
    seeds = _peak_frequencies(omegas, np.abs(h), n_pairs)
    beta = list(seeds) + list(
        np.geomspace(lo * 10.0, hi / 10.0, max(n_pairs - len(seeds), 0) + 2)
    )[: n_pairs - len(seeds)]
    poles = []
    for b in beta[:n_pairs]:
        poles.extend([complex(-0.02 * b, b), complex(-0.02 * b, -b)])
    if order % 2:
        poles.append(complex(-np.sqrt(lo * hi), 0.0))
    poles = np.asarray(poles, dtype=complex)

    wgt = 1.0 / np.abs(h)  # relative-error weighting tracks the quiet regions
    for _ in range(iters):
        struct = _pole_structure(poles)
        Phi = _real_basis(s, struct)
        A = np.hstack([Phi, np.ones((s.size, 1)), -h[:, None] * Phi]) * wgt[:, None]
        Ar = np.vstack([A.real, A.imag])
        hw = h * wgt
        br = np.concatenate([hw.real, hw.imag])
        sol, *_ = np.linalg.lstsq(Ar, br, rcond=None)
        sigma = sol[order + 1 :]
        new_poles = np.linalg.eigvals(_relocation_matrix(struct, sigma))
        new_poles = np.where(new_poles.real > 0, -new_poles.conj(), new_poles)
        # damping floor: keeps slow fit poles clear of the stability margin of
        # realizations whose fastest poles sit several decades higher
        new_poles = np.array(
            [complex(min(p.real, -5e-3 * abs(p)), p.imag) for p in new_poles]
        )
        new_poles = _symmetrize(new_poles)
        if np.allclose(np.sort_complex(new_poles), np.sort_complex(poles), rtol=1e-9):
            poles = new_poles
            break
        poles = new_poles

    struct = _pole_structure(poles)
    Phi = _real_basis(s, struct)
    A = np.hstack([Phi, np.ones((s.size, 1))]) * wgt[:, None]
    Ar = np.vstack([A.real, A.imag])
    hw = h * wgt
    br = np.concatenate([hw.real, hw.imag])
    sol, *_ = np.linalg.lstsq(Ar, br, rcond=None)
    d = float(sol[order])
    # map real-basis coefficients back to complex residues
    residues = []
    out_poles = []
    at = 0
    for kind, p in struct:
        if kind == "r":
            residues.append(complex(sol[at], 0.0))
            out_poles.append(complex(p, 0.0))
            at += 1
        else:
            residues.extend(
                [complex(sol[at], sol[at + 1]), complex(sol[at], -sol[at + 1])]
            )
            out_poles.extend([p, np.conj(p)])
            at += 2
    return np.asarray(out_poles), np.asarray(residues), d


def _symmetrize(values):
    """Snap a spectrum to exact conjugate symmetry without changing its size."""
    reals, pos, neg = [], [], []
    for p in values:
        if abs(p.imag) <= 1e-9 * max(1.0, abs(p)):
            reals.append(p.real)
        elif p.imag > 0:
            pos.append(p)
        else:
            neg.append(p)
    pairs = []
    for p in sorted(pos, key=abs):
        if neg:
            j = min(range(len(neg)), key=lambda i: abs(neg[i].conjugate() - p))
            q = neg.pop(j)
            pairs.append(0.5 * (p + q.conjugate()))
        else:
            reals.append(p.real)
    reals.extend(q.real for q in neg)
    out = []
    for pm in pairs:
        out.extend([pm, pm.conjugate()])
    out.extend(complex(r, 0.0) for r in reals)
    return np.asarray(out, dtype=complex)


def pf_to_statespace(poles, residues, d: float) -> StateSpaceModel:
    """Real state-space realization of a partial-fraction SISO expansion."""
    blocks, Bs, Cs = [], [], []
    used = np.zeros(len(poles), dtype=bool)
    for i, p in enumerate(poles):
        if used[i]:
            continue
        r = residues[i]
        if abs(p.imag) < 1e-10 * max(abs(p), 1e-30):
            blocks.append(np.array([[p.real]]))
            Bs.append([1.0])
            Cs.append([r.real])
            used[i] = True
        else:
            jj = int(np.argmin(np.abs(poles - p.conj()) + used * 1e30))
            used[i] = used[jj] = True
            sigma, om = p.real, abs(p.imag)
            blocks.append(np.array([[sigma, om], [-om, sigma]]))
            Bs.append([1.0, 0.0])
            Cs.append([2.0 * r.real, 2.0 * r.imag * np.sign(p.imag)])
    n = sum(b.shape[0] for b in blocks)
    A = np.zeros((n, n))
    at = 0
    for b in blocks:
        k = b.shape[0]
        A[at : at + k, at : at + k] = b
        at += k
    B = np.concatenate(Bs).reshape(n, 1)
    C = np.concatenate(Cs).reshape(1, n)
    return StateSpaceModel(A, B, C, [[d]])


def _zeros_of(model: StateSpaceModel):
    d = model.D.item()
    return np.linalg.eigvals(model.A - model.B @ model.C / d)


def flip_rhp_zeros(model: StateSpaceModel) -> StateSpaceModel:
    """Reflect right-half-plane zeros; magnitude on the axis is unchanged.

    Rebuilds the model as a cascade of first/second-order sections (pairing
    zeros and poles by magnitude), which stays well conditioned across many
    decades.
    """
    d = model.D.item()
    if d == 0.0:
        raise NotBistable("weight fit must be biproper")
    zeros = _zeros_of(model)
    if np.all(zeros.real <= -5e-3 * np.abs(zeros)):
        return model
    zeros = np.where(zeros.real > 0, -zeros.conj(), zeros)
    # same damping floor as for the poles, so the inverse realization
    # clears the relative stability margin as well
    zeros = np.array([complex(min(z.real, -5e-3 * abs(z)), z.imag) for z in zeros])
    zeros = _symmetrize(zeros)
    poles = _symmetrize(np.linalg.eigvals(model.A))
    zs = sorted(zeros, key=lambda z: (abs(z), z.imag))
    ps = sorted(poles, key=lambda z: (abs(z), z.imag))
    out = None
    i = j = 0
    while i < len(zs) and j < len(ps):
        if abs(zs[i].imag) > 0 and abs(ps[j].imag) > 0:
            sec = _biquad(zs[i], ps[j])
            i += 2
            j += 2
        elif abs(zs[i].imag) == 0 and abs(ps[j].imag) == 0:
            sec = _bilinear_section(zs[i].real, ps[j].real)
            i += 1
            j += 1
        elif abs(zs[i].imag) > 0:
            sec = _mixed_section(zs[i], [ps[j].real, ps[j + 1].real])
            i += 2
            j += 2
        else:
            sec = _mixed_section(ps[j], [zs[i].real, zs[i + 1].real], invertd=True)
            i += 2
            j += 2
        out = sec if out is None else series(sec, out)
    result = StateSpaceModel(out.A, out.B, out.C * d, out.D * d)
    return result


def _bilinear_section(z: float, p: float) -> StateSpaceModel:
    # (s - z)/(s - p) = 1 + (p - z)/(s - p)
    return StateSpaceModel([[p]], [[1.0]], [[p - z]], [[1.0]])


def _second_order_section(bz1, bz0, bp1, bp0) -> StateSpaceModel:
    """(s^2 + bz1 s + bz0)/(s^2 + bp1 s + bp0), frequency-balanced."""
    w0 = max(np.sqrt(abs(bp0)), 1e-300)
    A = np.array([[0.0, w0], [-bp0 / w0, -bp1]])
    B = np.array([[0.0], [1.0 / w0]])
    C = np.array([[bz0 - bp0, (bz1 - bp1) * w0]])
    return StateSpaceModel(A, B, C, [[1.0]])


def _biquad(z: complex, p: complex) -> StateSpaceModel:
    return _second_order_section(-2.0 * z.real, abs(z) ** 2, -2.0 * p.real, abs(p) ** 2)


def _mixed_section(pair: complex, reals, invertd: bool = False) -> StateSpaceModel:
    if invertd:
        # real zeros over a complex pole pair
        return _second_order_section(
            -(reals[0] + reals[1]), reals[0] * reals[1], -2.0 * pair.real, abs(pair) ** 2
        )
    return _second_order_section(
        -2.0 * pair.real, abs(pair) ** 2, -(reals[0] + reals[1]), reals[0] * reals[1]
    )


def fit_min_phase(omegas, mags, order: int = 8, n_fft: int = 4096) -> StateSpaceModel:
    """Bistable, biproper SISO model whose magnitude tracks ``mags``.

    Raises
    ------
    NumericalFailure
        If the fit produces an unstable or non-biproper model.
    """
    wt, h = min_phase_samples(omegas, mags, n_fft)
    # subsample for the least-squares fit
    take = np.unique(np.geomspace(1, wt.size - 1, min(600, wt.size)).astype(int))
    poles, residues, d = vector_fit(wt[take], h[take], order)
    if d <= 0.0:
        # pin the feedthrough at the high-frequency asymptote and refit residues
        d = float(np.abs(h[-1]))
        s = 1j * wt[take]
        Phi = 1.0 / (s[:, None] - poles[None, :])
        rhs = h[take] - d
        Ar = np.vstack([Phi.real, Phi.imag])
        br = np.concatenate([rhs.real, rhs.imag])
        sol, *_ = np.linalg.lstsq(Ar, br, rcond=None)
        residues = sol.astype(complex)
    model = pf_to_statespace(poles, residues, d)
    model = balance_realization(flip_rhp_zeros(model))
    if not is_internally_stable(model):
        raise NumericalFailure("magnitude fit produced an unstable model")
    zeros = _zeros_of(model)
    if np.any(zeros.real >= 0):
        raise NumericalFailure("magnitude fit left a right-half-plane zero")
    return model
