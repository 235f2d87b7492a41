"""Hitting probabilities, the single-exit h-transform, and the moment bound."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import BoundaryShift, DegenerateH
from .model import GeneratorModel, build_model

log = logging.getLogger(__name__)

QSD_TRUE = "true"
QSD_FALSE = "false"
QSD_UNDETERMINED = "undetermined"


@dataclass
class HittingVector:
    target: int
    values: np.ndarray
    inf_h: float
    converged: bool
    iterations: int
    return_prob: float


@dataclass
class TransformedModel:
    model: GeneratorModel
    base: GeneratorModel
    k: int
    h: np.ndarray
    # sum_j s_ij - q_i before snapping; zero off k for a harmonic h
    raw_row_sums: np.ndarray


@dataclass
class MomentBound:
    bound_value: float
    q_k: float
    return_prob: float
    inf_h: float
    lam: float
    qsd_exists: str
    attained_estimate: float | None = None


def jump_chain(model: GeneratorModel) -> sp.csr_matrix:
    """``P_bar_ij = q_ij / q_i`` on E (the mass ``q_i0 / q_i`` goes to state 0)."""
    return sp.csr_matrix(sp.diags(1.0 / model.total_rate) @ model.rates)


def hitting_prob(model: GeneratorModel, k: int, tol: float = 1e-13, max_iter: int = 1_000_000) -> HittingVector:
    """``h_i = P_i[tau_k^+ < inf]`` for ``i != k`` and ``h_k = 1``.

    Monotone iteration ``h <- P_bar h`` from zero with ``h_k`` pinned, which
    converges up to the minimal nonnegative solution, then one sparse solve of
    the same system for relative accuracy far from ``k``. A run that hits
    ``max_iter`` returns its last iterate (a lower bound) flagged unconverged.
    """
    P = jump_chain(model)
    h = np.zeros(model.n)
    h[k - 1] = 1.0
    converged = False
    it = 0
    support = 1
    for it in range(1, max_iter + 1):
        new = P @ h
        new[k - 1] = 1.0
        change = np.abs(new - h).max()
        h = new
        # keep sweeping while the positive set still grows, so that small
        # hitting probabilities far from k are resolved rather than left at 0
        grown, support = np.count_nonzero(h) > support, np.count_nonzero(h)
        if change < tol and not grown:
            converged = True
            break
    if not converged:
        warnings.warn(f"hitting probabilities not converged after {max_iter} sweeps; returning a lower bound", stacklevel=2)
    else:
        h = _polish(P, k, h, tol)
    ret = float((P.getrow(k - 1) @ h)[0])
    return HittingVector(k, h, float(h.min()), converged, it, ret)


def _polish(P: sp.csr_matrix, k: int, h: np.ndarray, tol: float) -> np.ndarray:
    """Solve the off-``k`` system exactly; keeps the iterate if the solve disagrees.

    On a finite irreducible model the off-``k`` block of ``P_bar`` is strictly
    substochastic, so the solution is unique and equals the minimal one. The
    solve makes small ``h_i`` accurate in relative terms, which the ratios
    ``h_j / h_i`` of the transform need.
    """
    n = P.shape[0]
    if n == 1:
        return h
    keep = np.flatnonzero(np.arange(n) != k - 1)
    A = sp.csc_matrix(sp.identity(len(keep)) - P[keep][:, keep])
    b = np.asarray(P[keep][:, [k - 1]].todense()).ravel()
    try:
        sol = spsolve(A, b)
    except RuntimeError:
        return h
    if not np.all(np.isfinite(sol)) or sol.min() < 0 or np.abs(sol - h[keep]).max() > 10 * tol:
        return h
    out = h.copy()
    out[keep] = np.minimum(sol, 1.0)
    return out


def h_transform(model: GeneratorModel, k: int, h: HittingVector, snap_tol: float = 1e-8) -> TransformedModel:
    """Rates ``s_ij = q_ij h_j / h_i``; all killing ends up at ``k``.

    The new killing rate is ``q_i0 + sum_j q_ij (1 - h_j / h_i)``, which is
    zero off ``k`` for harmonic ``h`` (values within ``snap_tol * q_i`` are
    set to exactly zero) and ``q_k (1 - P_k[tau_k^+ < inf])`` at ``k``.
    """
    hv = np.asarray(h.values, dtype=float)
    if np.any(hv <= 0):
        raise DegenerateH(f"h has nonpositive entries (min {hv.min():.3e})")
    coo = model.rates.tocoo()
    s = coo.data * hv[coo.col] / hv[coo.row]
    S = sp.csr_matrix((s, (coo.row, coo.col)), shape=coo.shape)
    loss = sp.csr_matrix((coo.data * (1.0 - hv[coo.col] / hv[coo.row]), (coo.row, coo.col)), shape=coo.shape)
    kill = model.kill + np.asarray(loss.sum(axis=1)).ravel()
    raw = np.asarray(S.sum(axis=1)).ravel() - model.total_rate
    for i in range(model.n):
        if i == k - 1:
            continue
        if abs(kill[i]) <= snap_tol * model.total_rate[i]:
            kill[i] = 0.0
        elif kill[i] < 0:
            raise DegenerateH(f"h is not harmonic at state {i + 1}: transformed kill rate {kill[i]:.3e}")
    if kill[k - 1] < 0:
        raise DegenerateH(f"negative transformed kill rate at k={k}")
    S = S.tocoo()
    entries = [(int(i) + 1, int(j) + 1, float(v)) for i, j, v in zip(S.row, S.col, S.data)]
    entries += [(i + 1, 0, float(b)) for i, b in enumerate(kill) if b > 0]
    tm = build_model(entries, n_states=model.n, labels=model.labels, truncation_meta=model.truncation_meta)
    return TransformedModel(tm, model, k, hv, raw)


def _existence_flag(model: GeneratorModel, hv: np.ndarray) -> str:
    if not model.boundary:
        return QSD_TRUE if hv.min() > 0 else QSD_UNDETERMINED
    # countable model seen through a window: inf over the window is only
    # trusted when h is not decaying away from the anchor
    n = model.n
    quarter = hv[: max(1, n // 4)].min()
    half = hv[: max(1, n // 2)].min()
    if half <= 0 or half < 0.5 * quarter:
        return QSD_UNDETERMINED
    return QSD_TRUE


def moment_bound(
    model: GeneratorModel, k: int, lam: float, h: HittingVector, attained: bool = True
) -> MomentBound:
    """Upper bound on ``E_k exp(lam tau_0) ; tau_k^+ = inf``.

    ``q_k (1 - P_k[tau_k^+ < inf]) / (inf_i h_i (q_k - lam))``; a positive
    infimum of ``h`` guarantees a lambda-QSD. With ``attained=True`` the
    exact value ``lam * sum_i x_i`` is computed for comparison.
    """
    q_k = float(model.total_rate[k - 1])
    if lam >= q_k:
        raise BoundaryShift(f"lambda = {lam!r} is not below q_k = {q_k!r}")
    inf_h = float(np.min(h.values))
    bound = q_k * (1.0 - h.return_prob) / (inf_h * (q_k - lam)) if inf_h > 0 else float("inf")
    flag = _existence_flag(model, np.asarray(h.values))
    est = None
    if attained:
        from .qsd import invariant_measure

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            x = invariant_measure(model, lam, k)
        est = float(lam * x.values.sum())
    return MomentBound(bound, q_k, h.return_prob, inf_h, lam, flag, est)
