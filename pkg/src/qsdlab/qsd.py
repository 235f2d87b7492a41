"""lambda-invariant measures and vectors, and the lambda-QSD.

Two routes to the QSD are provided. :func:`assemble_qsd` builds it from the
exit kernel's Perron vector (requires lambda-recurrence and a nonempty exit
set); :func:`solve_qsd_direct` takes the positive left eigenvector of the
sub-generator by inverse iteration and also covers lambda-transient chains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import EmptyExitSet, NoConvergence, NonPositiveEigenvector, NotRecurrent
from .model import GeneratorModel
from .spectral import TRANSIENT, ClassificationVerdict, embedded_chain
from .taboo import ExitStationary, column_series, exit_kernel, return_series


@dataclass
class InvariantMeasure:
    values: np.ndarray
    anchor: int
    convention: str = "singleton-taboo"
    f_kk: float = 1.0
    recurrent: bool = True
    converged: bool = True


@dataclass
class InvariantVector:
    values: np.ndarray
    members: tuple
    normalization: str = "v-anchored"


@dataclass
class ResidualReport:
    residual: float
    sum_error: float
    min_u: float
    interior_only: bool
    n_checked: int

    def as_dict(self) -> dict:
        return {
            "residual_inf": self.residual,
            "sum_error": self.sum_error,
            "min_u": self.min_u,
            "interior_only": self.interior_only,
            "n_checked": self.n_checked,
        }


@dataclass
class QsdResult:
    lam: float
    u: np.ndarray
    method: str
    residual_report: ResidualReport
    mu: ExitStationary | None = None
    m_h: float | None = None
    classification: ClassificationVerdict | None = None
    x: np.ndarray | None = field(default=None, repr=False)
    # |lam * sum(x) / M_H - 1| before u is renormalized
    mass_identity_error: float | None = None


def invariant_measure(
    model: GeneratorModel,
    lam: float,
    k: int | None = None,
    tol: float = 1e-12,
    nmax: int | None = None,
    recurrence_tol: float = 1e-6,
) -> InvariantMeasure:
    """``x_i = sum_n {}_k T^{(n)}_{k i} / (q_i - lam)`` anchored at state ``k``.

    Defaults to the smallest exit state. A return transform visibly below 1
    means the chain is not lambda-recurrent at ``lam``; the measure is still
    returned, flagged and with a warning.
    """
    if k is None:
        k = model.exit_set.members[0] if model.exit_set.members else 1
    T = embedded_chain(model, lam)
    series = return_series(T, k, tol=tol, nmax=nmax)
    f_kk = float(series.partial[k - 1])
    recurrent = f_kk >= 1.0 - recurrence_tol
    if not recurrent:
        warnings.warn(f"F_kk = {f_kk:.6g} < 1: not lambda-recurrent at this lambda", stacklevel=2)
    x = series.partial / (model.total_rate - lam)
    return InvariantMeasure(x, k, f_kk=f_kk, recurrent=recurrent, converged=series.converged)


def invariant_vector(
    model: GeneratorModel, lam: float, H, v, tol: float = 1e-12, nmax: int | None = None
) -> InvariantVector:
    T = embedded_chain(model, lam)
    members = tuple(sorted(int(i) for i in H))
    y = column_series(T, members, np.asarray(v, dtype=float), tol=tol, nmax=nmax)
    return InvariantVector(y, members)


def moment_mh(model: GeneratorModel, lam: float, exit: ExitStationary) -> float:
    """``M_H = sum_{j in H} mu_j q_j0 / (q_j - lam)``."""
    idx = np.asarray(exit.members) - 1
    return float(np.sum(exit.mu * model.kill[idx] / (model.total_rate[idx] - lam)))


def verify_qsd(model: GeneratorModel, u, lam: float, interior_only: bool | None = None) -> ResidualReport:
    """Residual ``||u Q + lam u||_inf`` together with ``|sum u - 1|`` and ``min u``.

    On truncated models the boundary states (those with redirected rate mass)
    are left out of the sup-norm unless ``interior_only=False``.
    """
    u = np.asarray(u, dtype=float)
    r = np.asarray(model.sub_generator().T @ u).ravel() + lam * u
    if interior_only is None:
        interior_only = bool(model.boundary)
    if interior_only and model.boundary:
        keep = np.ones(model.n, dtype=bool)
        keep[np.asarray(model.boundary) - 1] = False
        r = r[keep]
    return ResidualReport(
        residual=float(np.abs(r).max()) if r.size else 0.0,
        sum_error=float(abs(u.sum() - 1.0)),
        min_u=float(u.min()),
        interior_only=bool(interior_only),
        n_checked=int(r.size),
    )


def assemble_qsd(
    model: GeneratorModel,
    lam: float,
    exit: ExitStationary | None = None,
    tol: float = 1e-12,
    nmax: int | None = None,
    classification: ClassificationVerdict | None = None,
) -> QsdResult:
    """The lambda-QSD from the exit kernel: ``u = lam x / M_H``.

    ``lam * sum(x) = M_H`` holds exactly in theory; the numerical gap is
    kept in ``mass_identity_error`` and ``u`` is rescaled to sum to 1.

    On ``H`` the measure is ``x_i = mu_i / (q_i - lam)``; off ``H`` it is
    ``sum_j mu_j sum_n {}_H T^{(n)}_{j i} / (q_i - lam)``.
    """
    if classification is not None and classification.recurrence == TRANSIENT:
        raise NotRecurrent("chain is lambda-transient; use solve_qsd_direct")
    H = model.exit_set.members
    if not H:
        raise EmptyExitSet("no state has a positive killing rate")
    if exit is None:
        exit = exit_kernel(embedded_chain(model, lam), H, tol=tol, nmax=nmax)
    h_idx = np.asarray(exit.members) - 1
    xbar = exit.mu @ exit.rows
    xbar[h_idx] = exit.mu
    x = xbar / (model.total_rate - lam)
    m_h = moment_mh(model, lam, exit)
    u = lam * x / m_h
    mass = float(u.sum())
    u = u / mass
    report = verify_qsd(model, u, lam, interior_only=False)
    return QsdResult(lam, u, "exit_kernel", report, exit, m_h, classification, x, abs(mass - 1.0))


def solve_qsd_direct(
    model: GeneratorModel, lam: float, tol: float = 1e-12, max_iter: int = 500
) -> QsdResult:
    """Positive left eigenvector of the sub-generator at ``-lam`` by inverse iteration.

    The shift sits slightly to the right of ``-lam`` so that, for an accurate
    ``lam``, the shifted operator is an M-matrix and iterates stay positive.
    """
    A = model.sub_generator()
    n = model.n
    eta = 1e-7 * model.max_rate
    op = sp.csc_matrix(A.T + (lam - eta) * sp.identity(n))
    lu = splu(op)
    z = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        w = lu.solve(z)
        w /= w.sum()
        if np.abs(w - z).sum() <= tol:
            z = w
            break
        z = w
    else:
        raise NoConvergence(f"inverse iteration did not settle in {max_iter} steps")
    if z.min() < -1e-10 * z.max():
        raise NonPositiveEigenvector(f"eigenvector has a negative component {z.min():.3e}")
    u = np.clip(z, 0.0, None)
    u /= u.sum()
    report = verify_qsd(model, u, lam, interior_only=False)
    return QsdResult(lam, u, "direct", report)
