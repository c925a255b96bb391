import itertools

import numpy as np
import pytest

from matchlab.graphs import Graph


def brute_force_contains(q: Graph, c: Graph) -> bool:
    """Try every injective map of query nodes into corpus nodes."""
    if q.node_count > c.node_count:
        return False
    cedges = {frozenset(e) for e in c.edges}
    for image in itertools.permutations(range(c.node_count), q.node_count):
        if all(frozenset((image[u], image[v])) in cedges for u, v in q.edges):
            return True
    return False


def random_graph(rng: np.random.Generator, n: int, p: float | None = None) -> Graph:
    p = rng.uniform(0.2, 0.8) if p is None else p
    upper = np.triu(rng.random((n, n)) < p, 1)
    return Graph.from_edges(n, zip(*np.nonzero(upper)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TRIANGLE = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
PATH3 = Graph.from_edges(3, [(0, 1), (1, 2)])
EDGE = Graph.from_edges(2, [(0, 1)])


# acceptance summary ---------------------------------------------------------

ACCEPTANCE_RESULTS: dict[str, str] = {}
ACCEPTANCE_DETAILS: dict[str, str] = {}


@pytest.fixture
def detail(request):
    """Tests write a one-line measurement here for the summary table."""
    out = {}
    yield out
    if "text" in out:
        ACCEPTANCE_DETAILS[request.node.name] = out["text"]


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        if hasattr(report, "wasxfail"):
            ACCEPTANCE_RESULTS[name] = "FAIL (known; analysis in the decisions ledger)"
        else:
            ACCEPTANCE_RESULTS[name] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.skipped:
        ACCEPTANCE_RESULTS[name] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        extra = ACCEPTANCE_DETAILS.get(name, "")
        terminalreporter.write_line(f"{ACCEPTANCE_RESULTS[name]:<5} {name}  {extra}".rstrip())


# finite differences --------------------------------------------------------------

def fd_check(store, fn, eps=1e-5, coords=10, seed=0):
    """Worst relative error between backward() and central differences.

    ``fn(params)`` builds a 1x1 tensor from bound parameters.  ``coords`` random
    coordinates are drawn across all parameters.
    """
    from matchlab import autodiff as ad

    tape = ad.Tape()
    out = fn(store.bind(tape))
    grads = ad.backward(tape, out)
    rng = np.random.default_rng(seed)
    names = store.names()
    sizes = np.array([store[n].size for n in names], dtype=float)
    worst = 0.0
    for _ in range(coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = store.values[name].reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + eps
        up = fn(store.bind(None)).item()
        flat[i] = old - eps
        down = fn(store.bind(None)).item()
        flat[i] = old
        num = (up - down) / (2 * eps)
        ana = grads[name].reshape(-1)[i] if name in grads else 0.0
        err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
        worst = max(worst, err)
    return worst


# datasets ------------------------------------------------------------------------

K4 = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
STAR = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
SPARSE = Graph.from_edges(4, [(0, 1)])
TAILED = Graph.from_edges(5, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)])


def toy_dataset():
    """Two training queries against four corpus graphs, relevance by containment."""
    from matchlab.graphs import RetrievalDataset, relevance_matrix

    queries, corpus = (TRIANGLE, PATH3), (K4, STAR, SPARSE, TAILED)
    return RetrievalDataset(queries, corpus, relevance_matrix(queries, corpus),
                            {"train": (0, 1), "val": (), "test": ()})


def small_dataset(seed=0, n_queries=10, n_corpus=16):
    from matchlab.graphs import sample_query_corpus, synthetic_source

    src = synthetic_source("er:12:0.3", 10, seed=seed)
    return sample_query_corpus(src, n_queries, n_corpus, 5, 8, seed=seed)
