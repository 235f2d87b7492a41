"""Monte Carlo for killed jump processes.

Paths are simulated exactly (exponential holding times, categorical jumps
including the jump to 0). Ensembles are split into fixed-size blocks of
paths; block ``b`` draws from its own counter-based Philox stream keyed by
``(seed, b)``, so the output depends only on ``(model, seed, paths)`` and not
on how many workers process the blocks.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewSurvivors
from .model import GeneratorModel

BLOCK_SIZE = 4096
_TRACE_KEY = 1 << 20


@dataclass(frozen=True)
class SimConfig:
    paths: int = 100_000
    horizon: float = 20.0
    seed: int = 0
    workers: int = 1
    time_grid: tuple = ()

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def grid(self) -> np.ndarray:
        if self.time_grid:
            g = np.asarray(sorted(self.time_grid), dtype=float)
            if g[0] < 0 or g[-1] > self.horizon:
                raise ValueError("time grid must lie in [0, horizon]")
            return g
        return np.linspace(self.horizon / 40, self.horizon, 40)


@dataclass
class PathSample:
    initial: int
    jump_times: np.ndarray
    states: np.ndarray
    absorption_time: float
    censored: bool


@dataclass
class Ensemble:
    grid: np.ndarray
    # state at each grid time, 0 once absorbed; shape (paths, len(grid))
    grid_states: np.ndarray
    absorption_time: np.ndarray
    censored: np.ndarray
    holding: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def paths(self) -> int:
        return self.grid_states.shape[0]

    def survival(self) -> np.ndarray:
        return (self.grid_states > 0).mean(axis=0)


@dataclass
class Lambda0Estimate:
    rate: float
    se: float
    times: np.ndarray
    survival: np.ndarray
    batch_rates: np.ndarray
    censored_fraction: float


@dataclass
class EmpiricalDistribution:
    t: float
    freq: np.ndarray
    survivors: int
    paths: int
    se: np.ndarray


@dataclass
class InvarianceCheck:
    tv: float
    ci_low: float
    ci_high: float
    survivors: int
    empirical: EmpiricalDistribution


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def path_rng(seed: int, path_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(_TRACE_KEY, path_id))))


class _JumpTable:
    """Per-state cumulative jump probabilities laid out for vectorized search.

    Row ``s`` (0-based) occupies keys ``s + c`` with ``c`` the cumulative
    probabilities over its targets; target ``-1`` is the cemetery.
    """

    def __init__(self, model: GeneratorModel):
        keys, targets = [], []
        R = model.rates
        for s in range(model.n):
            lo, hi = R.indptr[s], R.indptr[s + 1]
            rates = list(R.data[lo:hi])
            dest = list(R.indices[lo:hi])
            if model.kill[s] > 0:
                rates.append(model.kill[s])
                dest.append(-1)
            cum = np.cumsum(rates) / model.total_rate[s]
            cum[-1] = 1.0
            keys.extend(s + cum)
            targets.extend(dest)
        self.keys = np.asarray(keys)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.q = np.asarray(model.total_rate)

    def jump(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.keys, s + u, side="right")
        return self.targets[np.minimum(pos, len(self.targets) - 1)]


def sample_path(model: GeneratorModel, i0: int, rng: np.random.Generator, horizon: float) -> PathSample:
    """One exact trajectory from ``i0`` until absorption or ``horizon``."""
    table = _JumpTable(model)
    s = i0 - 1
    t = 0.0
    times, states = [], [i0]
    while True:
        t_next = t + rng.standard_exponential() / table.q[s]
        if t_next > horizon:
            return PathSample(i0, np.asarray(times), np.asarray(states), horizon, True)
        s = int(table.jump(np.asarray([s]), np.asarray([rng.random()]))[0])
        t = t_next
        times.append(t)
        states.append(s + 1)
        if s < 0:
            return PathSample(i0, np.asarray(times), np.asarray(states), t, False)


def _initial_states(model, initial, m, rng):
    if np.isscalar(initial):
        return np.full(m, int(initial) - 1, dtype=np.int64)
    p = np.asarray(initial, dtype=float)
    if p.shape != (model.n,):
        raise ValueError(f"initial law must have length {model.n}")
    return rng.choice(model.n, size=m, p=p / p.sum())


def _run_block(model, table, initial, m, rng, horizon, grid, record_state):
    state = _initial_states(model, initial, m, rng)
    t = np.zeros(m)
    G = len(grid)
    grid_states = np.zeros((m, G), dtype=np.int32)
    gi = np.zeros(m, dtype=np.int64)
    absorb = np.full(m, np.inf)
    censored = np.zeros(m, dtype=bool)
    alive = np.arange(m)
    held = []
    while alive.size:
        s = state[alive]
        hold = rng.standard_exponential(alive.size) / table.q[s]
        u = rng.random(alive.size)
        t_next = t[alive] + hold
        if record_state is not None:
            held.append(hold[s == record_state - 1])
        # grid times covered by the current holding interval
        active = np.arange(alive.size)
        while active.size:
            g = gi[alive[active]]
            ok = g < G
            active = active[ok]
            g = g[ok]
            ok = grid[g] < t_next[active]
            active = active[ok]
            rows = alive[active]
            grid_states[rows, gi[rows]] = state[rows] + 1
            gi[rows] += 1
        over = t_next > horizon
        censored[alive[over]] = True
        go = ~over
        movers = alive[go]
        dest = table.jump(s[go], u[go])
        state[movers] = dest
        t[movers] = t_next[go]
        dead = dest < 0
        absorb[movers[dead]] = t_next[go][dead]
        alive = movers[~dead]
    holding = np.concatenate(held) if held else np.empty(0)
    return grid_states, absorb, censored, holding


def simulate_ensemble(
    model: GeneratorModel, initial, cfg: SimConfig, grid=None, record_state: int | None = None
) -> Ensemble:
    """Simulate ``cfg.paths`` paths from a state (int) or an initial law (vector).

    ``record_state`` collects every holding time drawn at that state.
    """
    table = _JumpTable(model)
    grid = cfg.grid() if grid is None else np.asarray(grid, dtype=float)
    sizes = [min(BLOCK_SIZE, cfg.paths - b) for b in range(0, cfg.paths, BLOCK_SIZE)]

    def work(b):
        return _run_block(model, table, initial, sizes[b], block_rng(cfg.seed, b), cfg.horizon, grid, record_state)

    if cfg.workers == 1:
        parts = [work(b) for b in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    return Ensemble(
        grid,
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
    )


def _slope(t, logs):
    tc = t - t.mean()
    return float(np.dot(tc, logs - logs.mean()) / np.dot(tc, tc))


def estimate_lambda0(
    model: GeneratorModel, i0, cfg: SimConfig, n_batches: int = 20, min_survivors: int = 100
) -> Lambda0Estimate:
    """Decay rate of the survival curve ``P[tau_0 > t]``.

    Least-squares slope of ``log`` survival over the latter half of the time
    grid; the standard error comes from the spread of the same fit over
    ``n_batches`` contiguous batches of paths. ``i0`` may be a state or an
    initial law.
    """
    ens = simulate_ensemble(model, i0, cfg)
    grid = ens.grid
    alive = ens.grid_states > 0
    late = grid >= grid[0] + 0.5 * (grid[-1] - grid[0])
    batches = np.array_split(np.arange(ens.paths), n_batches)
    per_batch = np.array([alive[b].sum(axis=0) for b in batches])
    pooled = alive.sum(axis=0)
    usable = late & (pooled >= min_survivors) & (per_batch.min(axis=0) > 0)
    if usable.sum() < 3:
        raise TooFewSurvivors(f"only {int(usable.sum())} usable grid points in the tail half")
    t = grid[usable]
    rate = -_slope(t, np.log(pooled[usable] / ens.paths))
    sizes = np.array([len(b) for b in batches])
    rates = np.array([-_slope(t, np.log(per_batch[i, usable] / sizes[i])) for i in range(n_batches)])
    se = float(rates.std(ddof=1) / np.sqrt(n_batches))
    return Lambda0Estimate(rate, se, t, pooled[usable] / ens.paths, rates, float(ens.censored.mean()))


def _empirical(model, ens, col, t, min_survivors):
    states = ens.grid_states[:, col]
    surv = states[states > 0]
    if surv.size < min_survivors:
        raise TooFewSurvivors(f"{surv.size} survivors at t={t}")
    freq = np.bincount(surv - 1, minlength=model.n) / surv.size
    se = np.sqrt(freq * (1 - freq) / surv.size)
    return EmpiricalDistribution(float(t), freq, int(surv.size), ens.paths, se)


def yaglom_estimate(model: GeneratorModel, i0, t: float, cfg: SimConfig, min_survivors: int = 30) -> EmpiricalDistribution:
    """Empirical law of ``X_t`` among paths still alive at ``t``."""
    if not 0 < t <= cfg.horizon:
        raise ValueError("t must lie in (0, horizon]")
    ens = simulate_ensemble(model, i0, cfg, grid=[t])
    return _empirical(model, ens, 0, t, min_survivors)


def qsd_invariance_check(
    model: GeneratorModel, u, t: float, cfg: SimConfig, z: float = 3.0, min_survivors: int = 30
) -> InvarianceCheck:
    """Start from ``u``; total-variation distance between the survivor law at ``t`` and ``u``.

    The interval is ``tv +/- z * 0.5 * sum_j se_j`` with binomial standard
    errors per state (clipped at 0).
    """
    u = np.asarray(u, dtype=float)
    if abs(u.sum() - 1.0) > 1e-6:
        raise ValueError(f"u sums to {u.sum()!r}, not 1")
    if not 0 < t <= cfg.horizon:
        raise ValueError("t must lie in (0, horizon]")
    ens = simulate_ensemble(model, u, cfg, grid=[t])
    emp = _empirical(model, ens, 0, t, min_survivors)
    tv = 0.5 * float(np.abs(emp.freq - u).sum())
    half = z * 0.5 * float(emp.se.sum())
    return InvarianceCheck(tv, max(0.0, tv - half), tv + half, emp.survivors, emp)


def holding_times(model: GeneratorModel, state: int, cfg: SimConfig, size: int | None = None) -> np.ndarray:
    """Holding times drawn at ``state`` along simulated paths started there."""
    ens = simulate_ensemble(model, state, cfg, grid=[cfg.horizon], record_state=state)
    return ens.holding if size is None else ens.holding[:size]


def write_trace(model: GeneratorModel, i0: int, cfg: SimConfig, path, n_paths: int = 10) -> None:
    """CSV rows ``path_id,time,state`` (state 0 marks absorption)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "time", "state"])
        for pid in range(n_paths):
            ps = sample_path(model, i0, path_rng(cfg.seed, pid), cfg.horizon)
            w.writerow([pid, repr(0.0), ps.initial])
            for tt, s in zip(ps.jump_times, ps.states[1:]):
                w.writerow([pid, repr(float(tt)), int(s)])
