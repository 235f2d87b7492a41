import itertools

import numpy as np
import pytest

from qsdlab.model import ModelFamilySpec, build_model, make_family

G2_LAMBDA = (3 - np.sqrt(5)) / 2


def random_model(rng: np.random.Generator, n: int, density: float | None = None, n_exits: int | None = None):
    """Irreducible random model: a random cycle plus extra edges, kill on a random nonempty subset."""
    density = rng.uniform(0.02, 0.4) if density is None else density
    perm = rng.permutation(n) + 1
    edges = {(int(perm[i]), int(perm[(i + 1) % n])) for i in range(n)}
    extra = rng.random((n, n)) < density
    for i, j in zip(*np.nonzero(extra)):
        if i != j:
            edges.add((int(i) + 1, int(j) + 1))
    entries = [(i, j, float(rng.uniform(0.1, 2.0))) for i, j in sorted(edges)]
    k = n_exits if n_exits is not None else int(rng.integers(1, max(2, n // 3) + 1))
    for i in sorted(rng.choice(n, size=k, replace=False) + 1):
        entries.append((int(i), 0, float(rng.uniform(0.05, 1.5))))
    return build_model(entries)


def dense_left_oracle(model):
    """Decay parameter and normalized left Perron vector from a dense eigensolver."""
    A = model.dense()
    w, V = np.linalg.eig(A.T)
    i = int(np.argmax(w.real))
    lam = -w[i].real
    u = np.abs(V[:, i].real)
    return lam, u / u.sum()


def brute_taboo(T: np.ndarray, H, j: int, n: int) -> np.ndarray:
    """Sum of path weights j -> ... -> i over n steps, intermediate states outside H."""
    size = T.shape[0]
    Hs = {h - 1 for h in H}
    out = np.zeros(size)
    if n == 0:
        if j - 1 not in Hs:
            out[j - 1] = 1.0
        return out
    free = [s for s in range(size) if s not in Hs]
    for mids in itertools.product(free, repeat=n - 1):
        path = (j - 1,) + mids
        w = 1.0
        for a, b in zip(path, path[1:]):
            w *= T[a, b]
            if w == 0.0:
                break
        if w:
            out += w * T[path[-1]]
    return out


def small_fixtures():
    rng = np.random.default_rng(3)
    g2 = build_model([(1, 2, 1.0), (1, 0, 1.0), (2, 1, 1.0)])
    m3 = build_model([(1, 2, 1.0), (2, 1, 1.0), (1, 0, 1.0), (2, 0, 1.0)])
    fixtures = [
        ("g2", g2),
        ("m3", m3),
        ("feedback8", make_family(ModelFamilySpec("feedback_chain", 0.3, r=0.2, w=0.5, n=8))),
        ("halfline8", make_family(ModelFamilySpec("bd_halfline", 0.25, n=8))),
        ("line4", make_family(ModelFamilySpec("bd_line", 0.4, c=2.0, n=4))),
    ]
    for i in range(4):
        fixtures.append((f"random{i}", random_model(rng, int(rng.integers(4, 9)), n_exits=int(rng.integers(2, 4)))))
    return fixtures


@pytest.fixture
def g2():
    return build_model([(1, 2, 1.0), (1, 0, 1.0), (2, 1, 1.0)])


@pytest.fixture
def m3():
    return build_model([(1, 2, 1.0), (2, 1, 1.0), (1, 0, 1.0), (2, 0, 1.0)])


@pytest.fixture
def single():
    return build_model([(1, 0, 2.0)])


@pytest.fixture(scope="session")
def feedback2000():
    return make_family(ModelFamilySpec("feedback_chain", 0.3, r=0.2, w=0.5, n=2000))


@pytest.fixture(scope="session")
def halfline400():
    return make_family(ModelFamilySpec("bd_halfline", 0.25, c=1.0, n=400))


@pytest.fixture(scope="session")
def line300():
    return make_family(ModelFamilySpec("bd_line", 0.4, c=2.0, n=300))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
