"""End-to-end runs behind the command line: config in, result document out."""

from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import __version__
from .errors import BadParameters, QsdError, SeriesNotResolved, TooFewSurvivors
from .htransform import h_transform, hitting_prob, moment_bound
from .io import load_model, load_vector
from .model import GeneratorModel, ModelFamilySpec, make_family, truncate
from .qsd import assemble_qsd, invariant_measure, solve_qsd_direct, verify_qsd
from .simulate import SimConfig, estimate_lambda0, holding_times, qsd_invariance_check, yaglom_estimate
from .spectral import (
    NULL_RECURRENT,
    TRANSIENT,
    UNDETERMINED,
    XY_TAIL_THRESHOLD,
    _default_anchor,
    classify,
    decay_parameter,
    extrapolate_lambda,
)

SCHEMA_ID = "qsdlab-result-v1"
COMMANDS = ("compute", "classify", "bound", "simulate", "verify")
NO_QSD_VERDICT = "no QSD: invariant measure non-summable (partial sums diverge)"

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_UNDETERMINED = 3
EXIT_GATE = 4


@dataclass(frozen=True)
class RunConfig:
    command: str
    model_path: str | None = None
    family: str | None = None
    p: float | None = None
    r: float | None = None
    w: float | None = None
    c: float = 1.0
    trunc: int | None = None
    tol: float = 1e-10
    series_tol: float = 1e-12
    classify_tol: float = 1e-3
    residual_gate: float = 1e-8
    seed: int = 0
    paths: int = 100_000
    t: float = 20.0
    yaglom_t: float | None = None
    start: str = "state"
    k: int | None = None
    u_path: str | None = None
    lam: float | None = None
    out: str | None = None
    fmt: str = "json"
    workers: int = 1
    timing: bool = False

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise BadParameters(f"unknown command {self.command!r}")
        if (self.model_path is None) == (self.family is None):
            raise BadParameters("give exactly one model source: a model file or a builtin family")
        for name in ("tol", "series_tol", "classify_tol", "residual_gate"):
            if not getattr(self, name) > 0:
                raise BadParameters(f"{name} must be > 0")
        if self.family is not None and self.p is None:
            raise BadParameters("builtin families need --p")
        if self.trunc is not None and self.trunc < 2:
            raise BadParameters("truncation level must be >= 2")
        if self.command == "verify" and self.u_path is None:
            raise BadParameters("verify needs --u")
        if self.start not in ("state", "qsd"):
            raise BadParameters("start must be 'state' or 'qsd'")
        if self.fmt not in ("json", "csv"):
            raise BadParameters("format must be json or csv")
        if self.paths < 1 or self.workers < 1 or not self.t > 0:
            raise BadParameters("paths, workers and t must be positive")

    def echo(self) -> dict:
        """Fields that determine the outputs (output location and worker count do not)."""
        d = dataclasses.asdict(self)
        for key in ("out", "fmt", "workers", "timing"):
            d.pop(key)
        return d


def family_spec(cfg: RunConfig) -> ModelFamilySpec:
    name = cfg.family.replace("-", "_")
    n = cfg.trunc if cfg.trunc is not None else 100
    if name == "feedback_chain":
        w = cfg.w if cfg.w is not None else 0.0
        r = cfg.r if cfg.r is not None else 1.0 - cfg.p - w
        return ModelFamilySpec(name, cfg.p, r=r, w=w, n=n)
    return ModelFamilySpec(name, cfg.p, c=cfg.c, n=n)


def resolve_model(cfg: RunConfig) -> GeneratorModel:
    if cfg.family is not None:
        return make_family(family_spec(cfg))
    model = load_model(cfg.model_path)
    return truncate(model, cfg.trunc) if cfg.trunc is not None else model


def hyphenate(verdict: str) -> str:
    return verdict.replace("_", "-")


def _window(model: GeneratorModel) -> dict:
    meta = model.truncation_meta
    return {
        "states": model.n,
        "first_label": model.label_of(1),
        "last_label": model.label_of(model.n),
        "boundary": list(model.boundary),
        "policy": meta.policy if meta is not None else None,
    }


def _gate(model, report, cfg) -> dict:
    threshold = cfg.residual_gate * model.max_rate
    return {"threshold": threshold, "passed": bool(report.residual <= threshold)}


def _verdict_dict(v) -> dict:
    return {
        "classification": hyphenate(v.recurrence),
        "f_kk": v.f_kk_at_lambda,
        "f_kk_sequence": [list(x) for x in v.f_kk_sequence],
        "xy_partial_sums": [list(x) for x in v.xy_partial_sums],
        "xy_tail_ratio": v.xy_tail_ratio,
        "lambda_classified": v.lam,
        "anchor": v.anchor,
        "anchor_label": None,
        "tol": v.tol,
        "note": v.note,
    }


def _decay(model, cfg):
    schedule = (model.truncation_meta.level // 2,) if model.family is not None else None
    dec = decay_parameter(model, tol=cfg.tol, truncation_schedule=schedule)
    out = {"lambda": dec.lam, "lambda_method": dec.method, "lambda_bracket": dec.bracket}
    if dec.truncation_curve:
        out["truncation_curve"] = [list(x) for x in dec.truncation_curve]
        out["lambda_extrapolated"] = extrapolate_lambda(dec.truncation_curve)
    return dec, out


def _measure_partial_sums(model, lam_of, k_label, cfg):
    """``sum_i x_i`` on the window and its half, each at its own lambda."""
    fam = model.family
    levels = [model.truncation_meta.level // 2, model.truncation_meta.level] if fam is not None else [None]
    sums, last = [], None
    for m in levels:
        w = model if m is None or m == model.truncation_meta.level else make_family(fam.with_level(m))
        lam = lam_of(w)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            x = invariant_measure(w, lam, w.index_of(k_label), tol=cfg.series_tol)
        sums.append([w.n if m is None else m, float(x.values.sum())])
        last = x
    return sums, last


def _compute(model, cfg):
    dec, out = _decay(model, cfg)
    lam = dec.lam
    verdict = classify(model, tol=cfg.classify_tol, series_tol=cfg.series_tol)
    vd = _verdict_dict(verdict)
    vd["anchor_label"] = model.label_of(verdict.anchor)
    out.update(vd)
    out["window"] = _window(model)
    out["exit_set"] = list(model.exit_set.members)
    status = EXIT_OK
    if verdict.recurrence == UNDETERMINED:
        out.update(verdict="undetermined: return transform not resolved", qsd_route=None, u=None)
        return out, EXIT_UNDETERMINED
    if verdict.recurrence == TRANSIENT:
        res = solve_qsd_direct(model, lam)
    elif verdict.recurrence == NULL_RECURRENT:
        label = model.label_of(verdict.anchor)
        sums, x = _measure_partial_sums(model, lambda w: decay_parameter(w, tol=cfg.tol).lam, label, cfg)
        growth = (sums[-1][1] - sums[0][1]) / sums[-1][1] if len(sums) > 1 else 0.0
        out["invariant_measure_partial_sums"] = sums
        out["invariant_measure_growth"] = growth
        out["x"] = x.values
        i = verdict.anchor - 1
        out["x_ratio_at_anchor"] = float(x.values[i + 1] / x.values[i]) if i + 1 < model.n else None
        if growth > XY_TAIL_THRESHOLD:
            out.update(verdict=NO_QSD_VERDICT, qsd_route=None, u=None)
            return out, status
        res = assemble_qsd(model, lam) if model.exit_set.members else solve_qsd_direct(model, lam)
    else:
        res = assemble_qsd(model, lam, classification=verdict) if model.exit_set.members else solve_qsd_direct(model, lam)
    report = verify_qsd(model, res.u, lam)
    gate = _gate(model, report, cfg)
    out.update(
        verdict="QSD computed",
        qsd_route=res.method,
        u=res.u,
        m_h=res.m_h,
        mass_identity_error=res.mass_identity_error,
        mu=res.mu.mu if res.mu is not None else None,
        residuals=report.as_dict(),
        residual_gate=gate,
    )
    if res.x is not None:
        out["x"] = res.x
    return out, status if gate["passed"] else EXIT_GATE


def _classify(model, cfg):
    verdict = classify(model, tol=cfg.classify_tol, series_tol=cfg.series_tol)
    out = _verdict_dict(verdict)
    out["anchor_label"] = model.label_of(verdict.anchor)
    out["window"] = _window(model)
    return out, EXIT_UNDETERMINED if verdict.recurrence == UNDETERMINED else EXIT_OK


def _anchor(model, cfg) -> int:
    if cfg.k is None:
        return _default_anchor(model)
    if not 1 <= cfg.k <= model.n:
        raise BadParameters(f"k={cfg.k} is not a state of the model")
    return cfg.k


def _bound(model, cfg):
    dec, out = _decay(model, cfg)
    k = _anchor(model, cfg)
    hv = hitting_prob(model, k)
    tm = h_transform(model, k, hv)
    mb = moment_bound(model, k, dec.lam, hv)
    out.update(
        k=k,
        q_k=mb.q_k,
        return_prob=mb.return_prob,
        inf_h=mb.inf_h,
        bound=mb.bound_value,
        attained=mb.attained_estimate,
        qsd_exists=mb.qsd_exists,
        transformed_kill_k=float(tm.model.kill[k - 1]),
        transformed_exit_set=list(tm.model.exit_set.members),
        hitting_converged=hv.converged,
        h=hv.values,
        window=_window(model),
    )
    return out, EXIT_OK if hv.converged else EXIT_UNDETERMINED


def _simulate(model, cfg):
    dec, out = _decay(model, cfg)
    lam = dec.lam
    k = _anchor(model, cfg)
    sim = SimConfig(paths=cfg.paths, horizon=cfg.t, seed=cfg.seed, workers=cfg.workers)
    status = EXIT_OK
    u = None
    if cfg.start == "qsd" or model.exit_set.members:
        try:
            u = solve_qsd_direct(model, lam).u
        except QsdError:
            u = None
    start = u if cfg.start == "qsd" else k
    if cfg.start == "qsd" and u is None:
        raise BadParameters("no QSD available to start from")
    out.update(k=k, start=cfg.start, paths=cfg.paths, horizon=cfg.t)

    def attempt(name, fn):
        nonlocal status
        try:
            out[name] = fn()
        except TooFewSurvivors as exc:
            out[name] = {"error": {"code": exc.code, "message": str(exc)}}
            status = EXIT_UNDETERMINED

    def lam0():
        est = estimate_lambda0(model, start, sim)
        return {
            "rate": est.rate,
            "se": est.se,
            "z_vs_lambda": (est.rate - lam) / est.se if est.se > 0 else None,
            "times": est.times,
            "survival": est.survival,
            "censored_fraction": est.censored_fraction,
        }

    yt = cfg.yaglom_t if cfg.yaglom_t is not None else cfg.t / 2

    def yaglom():
        emp = yaglom_estimate(model, k, yt, sim)
        d = {"t": emp.t, "freq": emp.freq, "survivors": emp.survivors}
        if u is not None:
            d["tv_to_qsd"] = 0.5 * float(np.abs(emp.freq - u).sum())
        return d

    def invariance():
        chk = qsd_invariance_check(model, u, yt, sim)
        return {"t": yt, "tv": chk.tv, "ci_low": chk.ci_low, "ci_high": chk.ci_high, "survivors": chk.survivors}

    def holding():
        draws = holding_times(model, k, dataclasses.replace(sim, paths=min(cfg.paths, 20_000)))[:5000]
        ks = stats.kstest(draws, "expon", args=(0, 1.0 / model.total_rate[k - 1]))
        return {"state": k, "draws": int(draws.size), "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue)}

    attempt("lambda0", lam0)
    attempt("yaglom", yaglom)
    if u is not None:
        attempt("qsd_invariance", invariance)
    attempt("holding_time_ks", holding)
    return out, status


def _verify(model, cfg):
    u = load_vector(cfg.u_path)
    if u.shape != (model.n,):
        raise BadParameters(f"u has {u.size} entries; the model has {model.n} states")
    lam = cfg.lam if cfg.lam is not None else decay_parameter(model, tol=cfg.tol).lam
    report = verify_qsd(model, u, lam)
    gate = _gate(model, report, cfg)
    out = {"lambda": lam, "residuals": report.as_dict(), "residual_gate": gate, "window": _window(model)}
    return out, EXIT_OK if gate["passed"] else EXIT_GATE


_HANDLERS = {"compute": _compute, "classify": _classify, "bound": _bound, "simulate": _simulate, "verify": _verify}


def run(cfg: RunConfig) -> tuple[dict, int]:
    """Execute one command; returns the result document and the process exit status."""
    start = time.perf_counter()
    doc = {"schema": SCHEMA_ID, "tool_version": __version__, "command": cfg.command, "config": cfg.echo()}
    try:
        cfg.validate()
        model = resolve_model(cfg)
        doc["input_digest"] = model.digest()
        if model.family is not None:
            doc["family"] = model.family.as_dict()
        outputs, status = _HANDLERS[cfg.command](model, cfg)
        doc["outputs"] = outputs
    except SeriesNotResolved as exc:
        doc["error"] = {"code": exc.code, "message": str(exc)}
        status = EXIT_UNDETERMINED
    except QsdError as exc:
        doc["error"] = {"code": exc.code, "message": str(exc)}
        status = EXIT_ERROR
    doc["status"] = "ok" if status == EXIT_OK else ("error" if "error" in doc else "incomplete")
    if cfg.timing:
        doc["timing"] = {"seconds": time.perf_counter() - start}
    return doc, status
