"""Taboo powers of the embedded chain, their sums, and the exit kernel T^H.

All series here are partial sums of nonnegative terms started from zero, so
they increase to the minimal nonnegative solution of the corresponding
linear system. When plain term-by-term summation stalls on a small enough
kernel, the sum is continued by doubling: ``S_2K = S_K + S_K P^K``, which
yields the same partial sums at ``n = 2^m`` with far fewer operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import KernelNotStochasticEnough, NoConvergence
from .spectral import EmbeddedChain

PLAIN_STEPS = 2048
DENSE_LIMIT = 3000
NMAX_BANDED = 10**6
NMAX_DENSE = 10**4
# doubling reaches 2^m terms in m squarings, so small kernels can afford this
NMAX_DOUBLING = 2**48


@dataclass
class TabooSeries:
    origin: int
    taboo_set: tuple
    partial: np.ndarray
    n_used: int
    converged: bool
    tail_estimate: float


@dataclass
class ExitStationary:
    members: tuple
    kernel: np.ndarray
    mu: np.ndarray
    v: np.ndarray
    perron_root: float
    perron_gap: float
    # full-length taboo series rows, one per origin in ``members``
    rows: np.ndarray = field(repr=False)
    converged: bool = True

    @property
    def weighted_mass(self) -> float:
        """``sum_ij mu_i T^H_ij``; equals 1 on recurrent models."""
        return float(self.mu @ self.kernel.sum(axis=1))


def _default_nmax(T: sp.csr_matrix) -> int:
    if T.shape[0] == 0:
        return 1
    if T.shape[0] <= DENSE_LIMIT:
        return NMAX_DOUBLING
    per_row = np.diff(T.indptr).max()
    return NMAX_BANDED if per_row <= 8 else NMAX_DENSE


def _split(n: int, H) -> tuple[np.ndarray, np.ndarray]:
    h_idx = np.asarray(sorted(set(int(i) - 1 for i in H)), dtype=int)
    mask = np.ones(n, dtype=bool)
    mask[h_idx] = False
    return h_idx, np.flatnonzero(mask)


def neumann_rows(P: sp.csr_matrix, A: np.ndarray, tol: float, nmax: int, accelerate: bool = True):
    """Partial sums ``A (I + P + P^2 + ...)`` for nonnegative ``P``.

    Returns ``(S, n_terms, converged, tail_estimate)``; stops once the added
    block has sup-norm below ``tol`` and reaches no new entries (so tiny but
    positive values are not cut to zero), or once ``nmax`` terms are summed.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = A.copy()
    if P.shape[0] == 0:
        return S, 1, True, 0.0
    PT = sp.csr_matrix(P.T)
    term = A.T.copy()
    prev_norm = np.abs(A).max()
    n = 1
    ratio = 0.0
    last_norm = prev_norm
    support = np.count_nonzero(S)
    while n < min(nmax, PLAIN_STEPS):
        term = PT @ term
        norm = np.abs(term).max() if term.size else 0.0
        S += term.T
        n += 1
        if prev_norm > 0:
            ratio = norm / prev_norm
        prev_norm = last_norm = norm
        grown, support = np.count_nonzero(S) > support, np.count_nonzero(S)
        if norm < tol and not grown:
            return S, n, True, _tail(norm, ratio)
    if n >= nmax:
        return S, n, False, _tail(last_norm, ratio)
    if not accelerate or P.shape[0] > DENSE_LIMIT:
        while n < nmax:
            term = PT @ term
            norm = np.abs(term).max()
            S += term.T
            n += 1
            if prev_norm > 0:
                ratio = norm / prev_norm
            prev_norm = last_norm = norm
            grown, support = np.count_nonzero(S) > support, np.count_nonzero(S)
            if norm < tol and not grown:
                return S, n, True, _tail(norm, ratio)
        return S, n, False, _tail(last_norm, ratio)

    # doubling from K = n terms: needs P^K with K a power of two
    K = n
    Pk = P.toarray()
    m = 1
    while m < K:
        Pk = Pk @ Pk
        m *= 2
    prev_inc = None
    while n < nmax:
        inc = S @ Pk
        norm = np.abs(inc).max()
        S = S + inc
        n *= 2
        if prev_inc is not None and prev_inc > 0:
            ratio = norm / prev_inc
        prev_inc = last_norm = norm
        if norm < tol:
            return S, n, True, _tail(norm, ratio)
        if n < nmax:
            Pk = Pk @ Pk
    return S, n, False, _tail(last_norm, ratio)


def _tail(norm, ratio):
    if norm == 0.0:
        return 0.0
    if ratio >= 1.0:
        return float("inf")
    return float(norm * ratio / (1.0 - ratio))


def taboo_power(T: EmbeddedChain, H, j: int, n: int) -> np.ndarray:
    """Row ``({}_H T^{(n)}_{j i})_i``: n-step mass along paths avoiding H in between."""
    size = T.n
    h_idx, off = _split(size, H)
    row = np.zeros(size)
    if n == 0:
        if j - 1 not in set(h_idx.tolist()):
            row[j - 1] = 1.0
        return row
    row = T.matrix.getrow(j - 1).toarray().ravel()
    MT = sp.csr_matrix(T.matrix.T)
    for _ in range(n - 1):
        row[h_idx] = 0.0
        row = MT @ row
    return row


def _series_rows(T: EmbeddedChain, H, origins, tol, nmax, accelerate):
    size = T.n
    h_idx, off = _split(size, H)
    M = T.matrix
    nmax = _default_nmax(M) if nmax is None else nmax
    first = M[[j - 1 for j in origins], :].toarray()
    P = M[off][:, off]
    S_off, n_used, conv, tail = neumann_rows(P, first[:, off], tol, nmax, accelerate)
    out = np.zeros((len(origins), size))
    out[:, off] = S_off
    out[:, h_idx] = first[:, h_idx] + (M[off][:, h_idx].T @ S_off.T).T
    return out, n_used, conv, tail


def taboo_series(
    T: EmbeddedChain, H, j: int, tol: float = 1e-12, nmax: int | None = None, accelerate: bool = True
) -> TabooSeries:
    """``sum_{n>=1} {}_H T^{(n)}_{j i}`` for every ``i``, as a minimal nonnegative solution."""
    rows, n_used, conv, tail = _series_rows(T, H, [j], tol, nmax, accelerate)
    return TabooSeries(j, tuple(sorted(H)), rows[0], n_used, conv, tail)


def return_series(T: EmbeddedChain, k: int, tol: float = 1e-12, nmax: int | None = None) -> TabooSeries:
    return taboo_series(T, (k,), k, tol=tol, nmax=nmax)


def return_transform(T: EmbeddedChain, j: int, tol: float = 1e-12, nmax: int | None = None) -> float:
    """``F_jj(x)`` at the chain's shift: the singleton taboo series at ``j`` itself."""
    return float(return_series(T, j, tol, nmax).partial[j - 1])


def column_series(T: EmbeddedChain, H, v, tol: float = 1e-12, nmax: int | None = None) -> np.ndarray:
    """``y_i = v_i`` on H and ``sum_{j in H} sum_n {}_H T^{(n)}_{ij} v_j`` off H."""
    size = T.n
    h_idx, off = _split(size, H)
    M = T.matrix
    nmax = _default_nmax(M) if nmax is None else nmax
    b = M[off][:, h_idx] @ np.asarray(v, dtype=float)
    # column sums of the Neumann series are row sums of its transpose
    P = sp.csr_matrix(M[off][:, off].T)
    S, _, _, _ = neumann_rows(P, b[None, :], tol, nmax)
    y = np.zeros(size)
    y[h_idx] = v
    y[off] = S[0]
    return y


def _perron_left(K: np.ndarray, tol: float = 1e-14, max_iter: int = 1_000_000):
    m = K.shape[0]
    L = 0.5 * (K + np.eye(m))
    z = np.full(m, 1.0 / m)
    for it in range(max_iter):
        w = z @ L
        w /= w.sum()
        if np.abs(w - z).sum() <= tol:
            z = w
            break
        z = w
    else:
        raise NoConvergence(f"Perron vector of the exit kernel did not settle in {max_iter} iterations")
    root = float((z @ K).sum())
    return z, root


def exit_kernel(
    T: EmbeddedChain,
    H,
    tol: float = 1e-12,
    nmax: int | None = None,
    check: bool = True,
    mass_tol: float = 1e-6,
) -> ExitStationary:
    """Exit kernel ``T^H_ij = sum_n {}_H T^{(n)}_{ij}`` on ``H`` and its Perron vectors.

    ``mu`` (left, sums to 1) and ``v`` (right, first entry 1) come from power
    iteration on the finite kernel.
    """
    members = tuple(sorted(int(i) for i in H))
    if not members:
        raise ValueError("exit kernel needs a nonempty set")
    rows, _, conv, _ = _series_rows(T, members, members, tol, nmax, True)
    h_idx = np.asarray(members) - 1
    K = rows[:, h_idx]
    mu, root = _perron_left(K)
    v, _ = _perron_left(K.T.copy())
    v = v / v[0]
    out = ExitStationary(members, K, mu, v, root, root - 1.0, rows, conv)
    if check and abs(out.weighted_mass - 1.0) > mass_tol:
        raise KernelNotStochasticEnough(
            f"mu-weighted mass of T^H is {out.weighted_mass!r}, expected 1", row_sums=K.sum(axis=1)
        )
    return out
