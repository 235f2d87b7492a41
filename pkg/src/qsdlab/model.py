"""Killed jump-process models: conservative Q-matrices with an absorbing state 0.

States of ``E`` are addressed by 1-based indices ``1..n`` in every public
function; arrays returned by the library are 0-based, so state ``i`` lives at
position ``i - 1``. State 0 is implicit: the rate ``q_i0`` is stored as
``kill[i - 1]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import (
    BadParameters,
    DuplicateEntry,
    NegativeRate,
    NotIrreducible,
    ParseError,
    SelfLoop,
    TruncationBreaksIrreducibility,
)

FAMILIES = ("feedback_chain", "bd_line", "bd_halfline")
REDIRECT_POLICY = "redirect-to-kill"


@dataclass(frozen=True)
class ModelFamilySpec:
    """A countable model family together with a truncation level ``n``.

    ``feedback_chain`` uses ``p, r, w`` (``p + r + w = 1``); the birth-death
    families use ``p`` and the clock rate ``c``.
    """

    family: str
    p: float
    r: float = 0.0
    w: float = 0.0
    c: float = 1.0
    n: int = 100

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise BadParameters(f"unknown family {self.family!r}")
        if not isinstance(self.n, (int, np.integer)) or self.n < 2:
            raise BadParameters(f"truncation level must be an integer >= 2, got {self.n!r}")
        if not 0.0 < self.p < 1.0:
            raise BadParameters(f"need 0 < p < 1, got p={self.p}")
        if self.family == "feedback_chain":
            if self.w <= 0.0 or self.r < 0.0:
                raise BadParameters(f"need w > 0 and r >= 0, got r={self.r}, w={self.w}")
            if abs(self.p + self.r + self.w - 1.0) > 1e-12:
                raise BadParameters(f"need p + r + w = 1, got {self.p + self.r + self.w!r}")
        elif self.c <= 0.0:
            raise BadParameters(f"need c > 0, got c={self.c}")

    def with_level(self, n: int) -> "ModelFamilySpec":
        return dataclasses.replace(self, n=int(n))

    def anchor_label(self) -> int:
        """Label of the default anchor state (smallest exit, or the origin of Z)."""
        return 0 if self.family == "bd_line" else 1

    def as_dict(self) -> dict:
        d = {"family": self.family, "p": self.p, "n": self.n}
        if self.family == "feedback_chain":
            d.update(r=self.r, w=self.w)
        else:
            d["c"] = self.c
        return d


@dataclass(frozen=True)
class TruncationMeta:
    family: ModelFamilySpec | None
    level: int
    policy: str = REDIRECT_POLICY
    # states whose kill rate contains redirected mass, with that mass
    boundary: tuple[int, ...] = ()
    redirected: tuple[float, ...] = ()
    # exit states of the untruncated model that lie in the window
    intrinsic_exits: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExitSet:
    """Exit states ``H = {i : q_i0 > 0}`` in ascending order."""

    members: tuple[int, ...]
    boundary: tuple[int, ...] = ()
    intrinsic: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.intrinsic is None:
            object.__setattr__(self, "intrinsic", self.members)

    @property
    def at_boundary(self) -> bool:
        """True when some exit state only exists because of truncation."""
        return bool(set(self.boundary) & set(self.members))

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, i):
        return i in self.members


@dataclass(frozen=True, eq=False)
class GeneratorModel:
    """Immutable sparse conservative Q-matrix over ``E = {1..n}``.

    Build instances through :func:`build_model` or :func:`make_family`, which
    validate the invariants (nonnegative rates, irreducibility).
    """

    n: int
    rates: sp.csr_matrix
    kill: np.ndarray
    total_rate: np.ndarray
    labels: tuple = ()
    truncation_meta: TruncationMeta | None = None
    _exit_set: ExitSet = field(default=None, repr=False)

    def __post_init__(self):
        for arr in (self.kill, self.total_rate, self.rates.data, self.rates.indices, self.rates.indptr):
            arr.flags.writeable = False
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(1, self.n + 1)))
        object.__setattr__(self, "_exit_set", _compute_exit_set(self))

    @property
    def states(self) -> range:
        return range(1, self.n + 1)

    @property
    def exit_set(self) -> ExitSet:
        return self._exit_set

    @property
    def min_rate(self) -> float:
        return float(self.total_rate.min())

    @property
    def max_rate(self) -> float:
        return float(self.total_rate.max())

    @property
    def family(self) -> ModelFamilySpec | None:
        meta = self.truncation_meta
        return meta.family if meta is not None else None

    @property
    def boundary(self) -> tuple[int, ...]:
        meta = self.truncation_meta
        return meta.boundary if meta is not None else ()

    def sub_generator(self) -> sp.csr_matrix:
        """The generator restricted to ``E`` (rows sum to ``-kill``)."""
        return (self.rates - sp.diags(self.total_rate)).tocsr()

    def dense(self) -> np.ndarray:
        return self.sub_generator().toarray()

    def index_of(self, label) -> int:
        try:
            return self.labels.index(label) + 1
        except ValueError:
            raise KeyError(f"no state with label {label!r}") from None

    def label_of(self, i: int):
        return self.labels[i - 1]

    def entries(self) -> list[tuple[int, int, float]]:
        """All positive rates as sorted ``(i, j, rate)`` triplets, ``j = 0`` for killing."""
        out = []
        coo = self.rates.tocoo()
        for i, j, v in zip(coo.row, coo.col, coo.data):
            if v > 0:
                out.append((int(i) + 1, int(j) + 1, float(v)))
        for i, b in enumerate(self.kill):
            if b > 0:
                out.append((i + 1, 0, float(b)))
        out.sort(key=lambda e: (e[0], e[1]))
        return out

    def to_text(self) -> str:
        """Canonical triplet text; rates are written as shortest round-trip decimals."""
        lines = ["# qmatrix-triplets-v1", f"# states {self.n}"]
        lines += [f"{i} {j} {rate!r}" for i, j, rate in self.entries()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return "sha256:" + hashlib.sha256(self.to_text().encode("ascii")).hexdigest()

    def scaled(self, factor: float) -> "GeneratorModel":
        """All rates multiplied by ``factor`` (time rescaling)."""
        return build_model([(i, j, factor * v) for i, j, v in self.entries()], n_states=self.n, labels=self.labels)


def _compute_exit_set(model: GeneratorModel) -> ExitSet:
    members = tuple(int(i) + 1 for i in np.flatnonzero(model.kill > 0))
    meta = model.truncation_meta
    if meta is None:
        return ExitSet(members)
    boundary = tuple(i for i in meta.boundary if i in members)
    return ExitSet(members, boundary, tuple(i for i in meta.intrinsic_exits if i in members))


def exit_states(model: GeneratorModel) -> ExitSet:
    """Recompute the exit set from the kill rates."""
    return _compute_exit_set(model)


def _check_irreducible(rates: sp.csr_matrix, exc=NotIrreducible) -> None:
    n = rates.shape[0]
    if n == 1:
        return
    ncomp, _ = connected_components(rates > 0, directed=True, connection="strong")
    if ncomp != 1:
        raise exc(f"E splits into {ncomp} strongly connected components")


def build_model(
    entries: Iterable[Sequence],
    n_states: int | None = None,
    labels: Sequence | None = None,
    truncation_meta: TruncationMeta | None = None,
) -> GeneratorModel:
    """Build a validated model from ``(i, j, rate)`` triplets (``j = 0`` is killing)."""
    seen = set()
    rows, cols, vals = [], [], []
    kill_entries = {}
    max_index = 0
    for entry in entries:
        try:
            i, j, rate = entry
        except (TypeError, ValueError):
            raise ParseError(f"expected an (i, j, rate) triplet, got {entry!r}") from None
        i, j, rate = int(i), int(j), float(rate)
        if i <= 0 or j < 0:
            raise BadParameters(f"bad state index in entry ({i}, {j}); sources must be >= 1, targets >= 0")
        if i == j:
            raise SelfLoop(f"self loop at state {i}")
        if not rate >= 0.0 or math.isinf(rate):
            raise NegativeRate(f"rate {rate} for ({i}, {j}) is not a finite nonnegative number")
        if (i, j) in seen:
            raise DuplicateEntry(f"duplicate entry ({i}, {j})")
        seen.add((i, j))
        max_index = max(max_index, i, j)
        if j == 0:
            kill_entries[i] = rate
        else:
            rows.append(i - 1)
            cols.append(j - 1)
            vals.append(rate)
    n = max_index if n_states is None else int(n_states)
    if n < 1 or max_index > n:
        raise BadParameters(f"state count {n} does not cover index {max_index}")
    rates = sp.csr_matrix((np.asarray(vals, dtype=float), (rows, cols)), shape=(n, n))
    rates.eliminate_zeros()
    rates.sort_indices()
    kill = np.zeros(n)
    for i, b in kill_entries.items():
        kill[i - 1] = b
    _check_irreducible(rates)
    total = np.asarray(rates.sum(axis=1)).ravel() + kill
    if np.any(total <= 0):
        raise NotIrreducible("a state has no outgoing rate")
    return GeneratorModel(n, rates, kill, total, tuple(labels) if labels is not None else (), truncation_meta)


def make_family(spec: ModelFamilySpec) -> GeneratorModel:
    """Truncated model for one of the builtin families.

    Rate mass leaving the window is redirected to killing. ``bd_line`` maps
    the labels ``-n..n`` of Z to indices ``1..2n+1``.
    """
    spec.validate()
    n, p = spec.n, spec.p
    entries = []
    boundary: dict[int, float] = {}

    if spec.family == "feedback_chain":
        q = 1.0 - p
        labels = list(range(1, n + 1))
        entries.append((1, 2, p))
        entries.append((1, 0, spec.w))
        for i in range(2, n + 1):
            entries.append((i, 1, q))
            if i < n:
                entries.append((i, i + 1, p))
        boundary[n] = p
        intrinsic = (1,)
    elif spec.family == "bd_halfline":
        up, down = p * spec.c, (1.0 - p) * spec.c
        labels = list(range(1, n + 1))
        for i in range(1, n + 1):
            if i < n:
                entries.append((i, i + 1, up))
            if i > 1:
                entries.append((i, i - 1, down))
        entries.append((1, 0, down))
        boundary[n] = up
        intrinsic = (1,)
    else:
        up, down = p * spec.c, (1.0 - p) * spec.c
        labels = list(range(-n, n + 1))
        m = 2 * n + 1
        for i in range(1, m + 1):
            if i < m:
                entries.append((i, i + 1, up))
            if i > 1:
                entries.append((i, i - 1, down))
        boundary[1] = down
        boundary[m] = up
        intrinsic = ()

    kills = {}
    for i, b in boundary.items():
        kills[i] = kills.get(i, 0.0) + b
    merged = []
    for i, j, v in entries:
        if j == 0:
            kills[i] = kills.get(i, 0.0) + v
        else:
            merged.append((i, j, v))
    merged += [(i, 0, b) for i, b in sorted(kills.items())]
    meta = TruncationMeta(
        family=spec,
        level=n,
        boundary=tuple(sorted(boundary)),
        redirected=tuple(boundary[i] for i in sorted(boundary)),
        intrinsic_exits=intrinsic,
    )
    return build_model(merged, n_states=len(labels), labels=labels, truncation_meta=meta)


def truncate(model: GeneratorModel, n: int) -> GeneratorModel:
    """Keep states ``1..n``; rates into removed states are redirected to killing."""
    if n < 2:
        raise BadParameters(f"truncation level must be >= 2, got {n}")
    if n >= model.n:
        return model
    coo = model.rates.tocoo()
    kill = model.kill[:n].copy()
    entries = []
    redirected: dict[int, float] = {}
    for i, j, v in zip(coo.row, coo.col, coo.data):
        if i >= n:
            continue
        if j >= n:
            redirected[int(i) + 1] = redirected.get(int(i) + 1, 0.0) + float(v)
        else:
            entries.append((int(i) + 1, int(j) + 1, float(v)))
    for i, v in redirected.items():
        kill[i - 1] += v
    entries += [(i + 1, 0, float(b)) for i, b in enumerate(kill) if b > 0]

    old = model.truncation_meta
    family = None
    if old is not None and old.family is not None and old.family.family != "bd_line":
        family = old.family.with_level(n)
    old_boundary = dict(zip(old.boundary, old.redirected)) if old is not None else {}
    for i, v in old_boundary.items():
        if i <= n:
            redirected[i] = redirected.get(i, 0.0) + v
    intrinsic = old.intrinsic_exits if old is not None else model.exit_set.members
    meta = TruncationMeta(
        family=family,
        level=n,
        boundary=tuple(sorted(redirected)),
        redirected=tuple(redirected[i] for i in sorted(redirected)),
        intrinsic_exits=tuple(i for i in intrinsic if i <= n),
    )
    rates = sp.csr_matrix(
        ([e[2] for e in entries if e[1]], ([e[0] - 1 for e in entries if e[1]], [e[1] - 1 for e in entries if e[1]])),
        shape=(n, n),
    )
    _check_irreducible(rates, TruncationBreaksIrreducibility)
    return build_model(entries, n_states=n, labels=model.labels[:n], truncation_meta=meta)
