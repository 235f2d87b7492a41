"""Decay parameter, embedded chain T(x), Perron roots and lambda-classification."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import BoundaryDecay, NoConvergence, SeriesNotResolved, ShiftAtOrAboveMinRate
from .model import GeneratorModel, make_family

log = logging.getLogger(__name__)

TRANSIENT = "lambda_transient"
NULL_RECURRENT = "lambda_null_recurrent"
POSITIVE_RECURRENT = "lambda_positive_recurrent"
UNDETERMINED = "undetermined"

BISECTION_EPS = 1e-9
# relative growth of sum(x*y) between the last two windows above which the
# invariant pair is declared non-summable
XY_TAIL_THRESHOLD = 1e-3


@dataclass(frozen=True, eq=False)
class EmbeddedChain:
    """``T(x)_ij = q_ij / (q_i - x)`` for ``i != j``, zero diagonal."""

    base: GeneratorModel
    shift: float
    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.base.n


@dataclass
class DecayResult:
    lam: float
    method: str
    bracket: float
    iterations: int = 0
    truncation_curve: list = field(default_factory=list)
    # positive right eigenvector of the sub-generator (finite_eigen only)
    vector: np.ndarray | None = field(default=None, repr=False)


@dataclass
class ClassificationVerdict:
    recurrence: str
    f_kk_at_lambda: float
    xy_partial_sums: list
    lam: float
    anchor: int
    tol: float
    f_kk_sequence: list = field(default_factory=list)
    xy_tail_ratio: float | None = None
    note: str = ""

    @property
    def recurrent(self) -> bool:
        return self.recurrence in (NULL_RECURRENT, POSITIVE_RECURRENT)


def embedded_chain(model: GeneratorModel, x: float) -> EmbeddedChain:
    if not 0.0 <= x < model.min_rate:
        raise ShiftAtOrAboveMinRate(f"shift {x!r} is outside [0, min q_i = {model.min_rate!r})")
    scale = 1.0 / (model.total_rate - x)
    T = sp.diags(scale) @ model.rates
    return EmbeddedChain(model, float(x), sp.csr_matrix(T))


def spectral_radius(
    T: EmbeddedChain, tol: float = 1e-12, max_iter: int = 100_000, power_steps: int = 5_000
) -> tuple[float, int]:
    """Perron root of the (finite) embedded chain.

    Power iteration on ``T + I`` (so periodic kernels still converge) from the
    uniform vector, stopping when the Rayleigh-type estimate changes by less
    than ``tol``. Large birth-death windows have a spectral gap of order
    ``1/N**2``; if ``power_steps`` iterations do not settle, the root is
    finished by Noda iteration. Returns ``(rho, iterations)``.
    """
    M = T.matrix + sp.identity(T.n, format="csr")
    z = np.full(T.n, 1.0 / T.n)
    est = np.inf
    for it in range(1, min(max_iter, power_steps) + 1):
        w = M @ z
        new = w.sum() / z.sum()
        z = w / w.sum()
        if abs(new - est) < tol * max(1.0, new):
            return float(new - 1.0), it
        est = new
    if max_iter <= power_steps:
        raise NoConvergence(f"power iteration did not settle in {max_iter} iterations")
    rho, _, _, extra = perron_sub_generator(T.matrix, tol=tol, max_iter=max_iter - power_steps)
    return float(rho), power_steps + extra


def _collatz_wielandt(M, z, mask=None):
    w = M @ z
    if mask is None:
        mask = z > 0
    ratio = w[mask] / z[mask]
    return w, float(ratio.min()), float(ratio.max())


def _rho_side(M: sp.csr_matrix, z: np.ndarray, level: float, max_iter: int = 20_000):
    """Decide whether the Perron root of the nonnegative ``M`` is below ``level``.

    Uses Collatz-Wielandt bounds along a power iteration; returns
    ``(below, z)`` with the last iterate for warm starts.
    """
    est = level
    for _ in range(max_iter):
        w, lo, hi = _collatz_wielandt(M, z)
        if hi < level:
            return True, w / w.sum()
        if lo >= level:
            return False, w / w.sum()
        est = w.sum() / z.sum()
        z = w / w.sum()
    return est < level, z


def perron_sub_generator(A: sp.spmatrix, tol: float = 1e-12, max_iter: int = 200):
    """Spectral abscissa of an irreducible Metzler matrix by Noda iteration.

    Each step shifts by the Collatz-Wielandt upper bound ``s`` and solves
    ``(sI - A) y = z``; ``s`` stays to the right of the spectrum, so iterates
    remain positive and the bounds bracket the abscissa. Iterates down to
    the round-off floor; ``tol`` is the widest bracket accepted if that floor
    is out of reach. Returns ``(abscissa, right_vector, bracket_width, iterations)``.
    """
    A = sp.csc_matrix(A)
    n = A.shape[0]
    if n == 1:
        return float(A[0, 0]), np.ones(1), 0.0, 0
    eye = sp.identity(n, format="csc")
    z = np.ones(n)
    scale = max(1.0, float(abs(A.diagonal()).max()))
    floor = 64 * np.finfo(float).eps * scale
    best = None
    for it in range(1, max_iter + 1):
        mask = z > 1e-280
        w = A @ z
        ratio = w[mask] / z[mask]
        lo, hi = float(ratio.min()), float(ratio.max())
        width = hi - lo
        if best is None or width < best[2]:
            best = (0.5 * (lo + hi), z.copy(), width)
        # convergence is quadratic, so refining to the round-off floor is cheap
        # and keeps small lambda accurate in relative terms
        if width <= floor:
            return 0.5 * (lo + hi), z, width, it
        if best[2] < width and it > 5 and best[2] <= 1e3 * max(tol, floor):
            # round-off floor reached; the best bracket is the answer
            return best[0], best[1], best[2], it
        try:
            y = splu(hi * eye - A).solve(z)
        except RuntimeError:
            return best[0], best[1], best[2], it
        if not np.all(np.isfinite(y)) or y.max() <= 0:
            return best[0], best[1], best[2], it
        z = np.abs(y) / np.abs(y).max()
    if best[2] <= tol:
        return best[0], best[1], best[2], max_iter
    raise NoConvergence(f"Noda iteration: bracket {best[2]:.3e} after {max_iter} iterations")


def _finite_eigen(model: GeneratorModel, tol: float) -> DecayResult:
    alpha, vec, width, it = perron_sub_generator(model.sub_generator(), tol=tol)
    lam = min(max(-alpha, 0.0), model.min_rate)
    return DecayResult(lam, "finite_eigen", width, it, vector=vec)


def _bisection(model: GeneratorModel, tol: float) -> DecayResult:
    lo, hi = 0.0, (1.0 - BISECTION_EPS) * model.min_rate
    z = np.full(model.n, 1.0 / model.n)

    def below_one(x, z):
        T = embedded_chain(model, x).matrix
        return _rho_side(T + sp.identity(model.n, format="csr"), z, 2.0)

    below, z = below_one(lo, z)
    if not below:
        return DecayResult(0.0, "bisection_on_R", 0.0, 1)
    below, z_hi = below_one(hi, z)
    if below:
        raise BoundaryDecay(f"rho(T(x)) < 1 up to x = {hi!r}; decay parameter sits at min q_i")
    it = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        below, z = below_one(mid, z)
        if below:
            lo = mid
        else:
            hi = mid
        it += 1
    return DecayResult(0.5 * (lo + hi), "bisection_on_R", hi - lo, it)


def closed_form_lambda(model: GeneratorModel) -> float:
    """Decay parameter of the untruncated builtin family the model came from."""
    fam = model.family
    if fam is None:
        raise ValueError("closed_form needs a builtin family model")
    p = fam.p
    if fam.family == "feedback_chain":
        w = fam.w
        return 2 * (1 - p) * w / (1 + w + np.sqrt((1 - w) ** 2 + 4 * p * w))
    return (1 - 2 * np.sqrt(p * (1 - p))) * fam.c


def decay_parameter(
    model: GeneratorModel,
    method: str = "finite_eigen",
    tol: float = 1e-10,
    truncation_schedule=None,
) -> DecayResult:
    """Decay parameter ``lambda`` of the (finite) model.

    ``finite_eigen`` is minus the spectral abscissa of the sub-generator;
    ``bisection_on_R`` locates the shift where the Perron root of ``T(x)``
    crosses 1; ``closed_form`` evaluates the family formula. With a
    ``truncation_schedule`` (levels below the model's own), the curve
    ``(N, lambda_N)`` for the family windows is attached.
    """
    if method == "finite_eigen":
        res = _finite_eigen(model, tol)
    elif method == "bisection_on_R":
        try:
            res = _bisection(model, tol)
        except BoundaryDecay as exc:
            warnings.warn(f"{exc}; falling back to finite_eigen", stacklevel=2)
            res = _finite_eigen(model, tol)
    elif method == "closed_form":
        res = DecayResult(float(closed_form_lambda(model)), "closed_form", 0.0)
    else:
        raise ValueError(f"unknown method {method!r}")

    if truncation_schedule and model.family is not None:
        level = model.truncation_meta.level
        curve = []
        for m in sorted(set(int(m) for m in truncation_schedule)):
            if 2 <= m < level:
                curve.append((m, _finite_eigen(make_family(model.family.with_level(m)), tol).lam))
        own = res.lam if method == "finite_eigen" else _finite_eigen(model, tol).lam
        curve.append((level, own))
        res.truncation_curve = curve
    return res


def extrapolate_lambda(curve) -> float:
    """Limit of ``lambda_N`` assuming ``lambda_N - lambda ~ A / N**2``.

    Uses the last two points of the curve; the result is clamped to
    ``[0, lambda_Nmax]`` since truncated values bound the limit from above.
    """
    if len(curve) < 2:
        return float(curve[-1][1])
    (n1, l1), (n2, l2) = curve[-2], curve[-1]
    est = (n2 * n2 * l2 - n1 * n1 * l1) / (n2 * n2 - n1 * n1)
    return float(min(max(est, 0.0), l2))


def _default_anchor(model: GeneratorModel) -> int:
    fam = model.family
    if fam is not None:
        return model.index_of(fam.anchor_label())
    exits = model.exit_set.members
    return exits[0] if exits else 1


def _verdict_from_f(f, tol):
    if f < 1.0 - tol:
        return TRANSIENT
    if abs(f - 1.0) <= tol:
        return "recurrent"
    return UNDETERMINED


def _xy_sum(model, lam, k, tol, nmax):
    from .taboo import column_series, return_series

    T = embedded_chain(model, lam)
    x = return_series(T, k, tol=tol, nmax=nmax).partial / (model.total_rate - lam)
    y = column_series(T, (k,), np.ones(1), tol=tol, nmax=nmax)
    return float(np.dot(x, y))


def classify(
    model: GeneratorModel,
    lam: float | None = None,
    k: int | None = None,
    tol: float = 1e-3,
    nmax: int | None = None,
    schedule=None,
    series_tol: float = 1e-12,
    strict: bool = False,
) -> ClassificationVerdict:
    """lambda-recurrence classification through the return transform ``F_kk(lambda)``.

    For a plain finite model ``F_kk`` is evaluated at ``lam`` directly. For a
    truncated builtin family the windows in ``schedule`` (default ``N/2, N``)
    are swept: ``lambda`` is extrapolated from the truncation curve, ``F_kk``
    is evaluated on every window and extrapolated in ``1/N``, and
    positive/null recurrence is judged by whether ``sum_i x_i y_i`` keeps
    growing between the last two windows.
    """
    from .taboo import return_transform

    k = _default_anchor(model) if k is None else k
    fam = model.family
    if fam is None or model.truncation_meta.level < 4:
        lam = decay_parameter(model).lam if lam is None else lam
        f = return_transform(embedded_chain(model, lam), k, tol=series_tol, nmax=nmax)
        verdict = _verdict_from_f(f, tol)
        sums = []
        if verdict == "recurrent":
            verdict = POSITIVE_RECURRENT
            sums = [(model.n, _xy_sum(model, lam, k, series_tol, nmax))]
        out = ClassificationVerdict(verdict, f, sums, lam, k, tol, [(model.n, f)], note="finite state space")
    else:
        level = model.truncation_meta.level
        levels = sorted(set(schedule or (level // 2, level)) | {level})
        windows = [(m, model if m == level else make_family(fam.with_level(m))) for m in levels]
        label = model.label_of(k)
        curve = [(m, decay_parameter(w).lam) for m, w in windows]
        lam_used = extrapolate_lambda(curve) if lam is None else lam
        f_seq = []
        for m, w in windows:
            f_seq.append((m, return_transform(embedded_chain(w, lam_used), w.index_of(label), tol=series_tol, nmax=nmax)))
        if len(f_seq) >= 2:
            (n1, f1), (n2, f2) = f_seq[-2], f_seq[-1]
            f = (n2 * f2 - n1 * f1) / (n2 - n1)
        else:
            f = f_seq[-1][1]
        verdict = _verdict_from_f(f, tol)
        sums, tail = [], None
        if verdict == "recurrent":
            for m, w in windows[-2:]:
                sums.append((m, _xy_sum(w, lam_used, w.index_of(label), series_tol, nmax)))
            tail = (sums[-1][1] - sums[0][1]) / sums[-1][1] if len(sums) > 1 else 0.0
            verdict = POSITIVE_RECURRENT if abs(tail) < XY_TAIL_THRESHOLD else NULL_RECURRENT
        out = ClassificationVerdict(verdict, f, sums, lam_used, k, tol, f_seq, tail, note="truncation sweep")
    if out.recurrence == UNDETERMINED and strict:
        raise SeriesNotResolved(f"F_kk = {out.f_kk_at_lambda!r} is neither below 1 - tol nor within tol of 1")
    log.debug("classify: %s F_kk=%r", out.recurrence, out.f_kk_at_lambda)
    return out
