"""Graphs, query/corpus datasets and exact subgraph-isomorphism ground truth."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_TAG = "matchlab-dataset"


class IngestError(OSError):
    """A dataset file is missing or unreadable."""


class MalformedDatasetError(ValueError):
    """A dataset file is readable but inconsistent."""


class SamplingError(RuntimeError):
    """BFS sampling could not produce enough graphs."""


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph with scalar node features.

    Edges are stored canonically as sorted ``(u, v)`` pairs with ``u < v``.
    Use :meth:`from_edges` to build from arbitrary edge lists.
    """

    node_count: int
    edges: tuple[tuple[int, int], ...] = ()
    node_features: tuple[float, ...] | None = None

    def __post_init__(self):
        n = self.node_count
        if n < 0:
            raise ValueError(f"negative node count {n}")
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < v < n):
                raise ValueError(f"edge ({u}, {v}) not canonical for {n} nodes")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
        if list(self.edges) != sorted(self.edges):
            raise ValueError("edges must be sorted")
        if self.node_features is None:
            object.__setattr__(self, "node_features", (1.0,) * n)
        elif len(self.node_features) != n:
            raise ValueError(f"{len(self.node_features)} features for {n} nodes")

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[Sequence[int]]) -> "Graph":
        """Canonicalize, dropping self-loops and duplicates."""
        canon = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                continue
            canon.add((min(u, v), max(u, v)))
        return cls(node_count, tuple(sorted(canon)))

    @classmethod
    def from_adjacency(cls, adj) -> "Graph":
        adj = np.asarray(adj)
        us, vs = np.nonzero(np.triu(adj, 1))
        return cls(adj.shape[0], tuple(zip(us.tolist(), vs.tolist())))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=np.int8)
        if self.edges:
            e = np.array(self.edges)
            a[e[:, 0], e[:, 1]] = 1
            a[e[:, 1], e[:, 0]] = 1
        a.flags.writeable = False
        return a

    @cached_property
    def neighbors(self) -> tuple[frozenset[int], ...]:
        nbr = [set() for _ in range(self.node_count)]
        for u, v in self.edges:
            nbr[u].add(v)
            nbr[v].add(u)
        return tuple(frozenset(s) for s in nbr)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(s) for s in self.neighbors], dtype=np.int64)

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Node ``i`` becomes ``perm[i]``."""
        return Graph.from_edges(self.node_count, ((perm[u], perm[v]) for u, v in self.edges))

    def induced(self, nodes: Sequence[int]) -> "Graph":
        """Induced subgraph; ``nodes[i]`` becomes node ``i``."""
        pos = {v: i for i, v in enumerate(nodes)}
        return Graph.from_edges(len(nodes), ((pos[u], pos[v]) for u, v in self.edges
                                             if u in pos and v in pos))

    def to_json(self) -> dict:
        return {"n": self.node_count, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, doc: dict) -> "Graph":
        return cls(int(doc["n"]), tuple(tuple(e) for e in doc["edges"]))


# ---------------------------------------------------------------------------
# TUDataset ingestion

def parse_tudataset(directory, name: str | None = None) -> list[Graph]:
    """Read ``<DS>_A.txt`` and ``<DS>_graph_indicator.txt`` from ``directory``.

    ``name`` defaults to the prefix of the single ``*_A.txt`` file present.
    """
    directory = Path(directory)
    if name is None:
        hits = sorted(directory.glob("*_A.txt")) if directory.is_dir() else []
        if len(hits) != 1:
            raise IngestError(f"expected exactly one *_A.txt in {directory}, found {len(hits)}")
        name = hits[0].name[: -len("_A.txt")]
    edge_path = directory / f"{name}_A.txt"
    ind_path = directory / f"{name}_graph_indicator.txt"
    for p in (edge_path, ind_path):
        if not p.is_file():
            raise IngestError(f"missing dataset file {p}")

    indicator = []
    for lineno, line in enumerate(ind_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            indicator.append(int(line))
        except ValueError:
            raise MalformedDatasetError(f"{ind_path.name}:{lineno}: bad graph id {line!r}") from None

    # graph ids are renumbered in order of first appearance
    graph_ids: dict[int, int] = {}
    local = []
    sizes: list[int] = []
    for gid in indicator:
        if gid not in graph_ids:
            graph_ids[gid] = len(sizes)
            sizes.append(0)
        g = graph_ids[gid]
        local.append((g, sizes[g]))
        sizes[g] += 1

    edges: list[list[tuple[int, int]]] = [[] for _ in sizes]
    for lineno, line in enumerate(edge_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            a, b = (int(x) for x in line.split(","))
        except ValueError:
            raise MalformedDatasetError(f"{edge_path.name}:{lineno}: bad edge {line!r}") from None
        if not (1 <= a <= len(local) and 1 <= b <= len(local)):
            raise MalformedDatasetError(
                f"{edge_path.name}:{lineno}: edge ({a}, {b}) references unknown node")
        (ga, ua), (gb, ub) = local[a - 1], local[b - 1]
        if ga != gb:
            raise MalformedDatasetError(
                f"{edge_path.name}:{lineno}: edge ({a}, {b}) crosses graphs")
        edges[ga].append((ua, ub))
    return [Graph.from_edges(n, e) for n, e in zip(sizes, edges)]


def erdos_renyi(n: int, p: float, rng: np.random.Generator) -> Graph:
    upper = np.triu(rng.random((n, n)) < p, 1)
    us, vs = np.nonzero(upper)
    return Graph(n, tuple(zip(us.tolist(), vs.tolist())))


def synthetic_source(spec: str, count: int = 50, seed: int = 0) -> list[Graph]:
    """Source graphs from a generator string such as ``er:30:0.2``."""
    kind, *args = spec.split(":")
    if kind != "er" or len(args) != 2:
        raise ValueError(f"unsupported synthetic source {spec!r}; expected er:<n>:<p>")
    n, p = int(args[0]), float(args[1])
    if n < 1 or not 0 <= p <= 1:
        raise ValueError(f"bad ER parameters n={n}, p={p}")
    rng = np.random.default_rng(seed)
    return [erdos_renyi(n, p, rng) for _ in range(count)]


# ---------------------------------------------------------------------------
# subgraph isomorphism

def _match_order(q: Graph) -> list[int]:
    """Connected, high-degree-first ordering so candidates come from mapped neighbours."""
    deg = q.degrees
    order: list[int] = []
    placed = np.zeros(q.node_count, dtype=bool)
    conn = np.zeros(q.node_count, dtype=np.int64)
    for _ in range(q.node_count):
        best, key = -1, None
        for u in range(q.node_count):
            if placed[u]:
                continue
            k = (conn[u], deg[u], -u)
            if key is None or k > key:
                best, key = u, k
        order.append(best)
        placed[best] = True
        for v in q.neighbors[best]:
            conn[v] += 1
    return order


def is_subgraph(query: Graph, corpus: Graph, induced: bool = False) -> bool:
    """Whether ``query`` embeds into ``corpus`` by an injective edge-preserving node map.

    With ``induced=True`` non-edges must map to non-edges as well.  Backtracking
    in the VF2 style: query nodes are matched in a connectivity order, candidates
    are drawn from the images of matched neighbours, and degree bounds prune early.
    """
    nq, nc = query.node_count, corpus.node_count
    if nq > nc or query.edge_count > corpus.edge_count:
        return False
    if nq == 0:
        return True
    dq = np.sort(query.degrees)[::-1]
    dc = np.sort(corpus.degrees)[::-1]
    if np.any(dq > dc[:nq]):
        return False

    order = _match_order(query)
    qn, cn = query.neighbors, corpus.neighbors
    qdeg, cdeg = query.degrees, corpus.degrees
    # for each position, the already-matched neighbours (and non-neighbours) of order[i]
    prior_nbrs = []
    prior_non = []
    for i, u in enumerate(order):
        before = order[:i]
        prior_nbrs.append([w for w in before if w in qn[u]])
        prior_non.append([w for w in before if w not in qn[u]])
    mapping = [-1] * nq
    used = [False] * nc

    def extend(i: int) -> bool:
        if i == nq:
            return True
        u = order[i]
        anchors = prior_nbrs[i]
        if anchors:
            cands = cn[mapping[anchors[0]]]
        else:
            cands = range(nc)
        for c in cands:
            if used[c] or cdeg[c] < qdeg[u]:
                continue
            nbrs_c = cn[c]
            if any(mapping[w] not in nbrs_c for w in anchors):
                continue
            if induced and any(mapping[w] in nbrs_c for w in prior_non[i]):
                continue
            mapping[u] = c
            used[c] = True
            if extend(i + 1):
                return True
            used[c] = False
            mapping[u] = -1
        return False

    return extend(0)


# ---------------------------------------------------------------------------
# padding

@dataclass(frozen=True, eq=False)
class PaddedPair:
    """A query/corpus pair padded with isolated nodes and empty edge slots."""

    query: Graph
    corpus: Graph
    n_nodes: int
    n_edges: int
    query_node_mask: np.ndarray  # True for real nodes
    corpus_node_mask: np.ndarray
    query_edge_mask: np.ndarray  # True for real edge slots
    corpus_edge_mask: np.ndarray
    original_query: Graph = field(repr=False, default=None)
    original_corpus: Graph = field(repr=False, default=None)


def pad_pair(query: Graph, corpus: Graph) -> PaddedPair:
    n = max(query.node_count, corpus.node_count)
    m = max(query.edge_count, corpus.edge_count)

    def grow(g: Graph) -> Graph:
        if g.node_count == n:
            return g
        return Graph(n, g.edges)

    def mask(k: int, total: int) -> np.ndarray:
        out = np.zeros(total, dtype=bool)
        out[:k] = True
        out.flags.writeable = False
        return out

    return PaddedPair(grow(query), grow(corpus), n, m,
                      mask(query.node_count, n), mask(corpus.node_count, n),
                      mask(query.edge_count, m), mask(corpus.edge_count, m),
                      query, corpus)


# ---------------------------------------------------------------------------
# retrieval datasets

@dataclass(frozen=True, eq=False)
class RetrievalDataset:
    queries: tuple[Graph, ...]
    corpus: tuple[Graph, ...]
    relevance: np.ndarray  # uint8, queries x corpus
    splits: dict[str, tuple[int, ...]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rel = np.asarray(self.relevance, dtype=np.uint8)
        if rel.shape != (len(self.queries), len(self.corpus)):
            raise MalformedDatasetError(
                f"relevance shape {rel.shape} != ({len(self.queries)}, {len(self.corpus)})")
        rel.flags.writeable = False
        object.__setattr__(self, "relevance", rel)
        seen = sorted(i for key in ("train", "val", "test") for i in self.splits.get(key, ()))
        if seen != list(range(len(self.queries))):
            raise MalformedDatasetError("splits must partition the query indices")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RetrievalDataset):
            return NotImplemented
        return (self.queries == other.queries and self.corpus == other.corpus
                and np.array_equal(self.relevance, other.relevance)
                and {k: tuple(v) for k, v in self.splits.items()}
                == {k: tuple(v) for k, v in other.splits.items()})

    @property
    def positive_fraction(self) -> float:
        return float(self.relevance.mean()) if self.relevance.size else 0.0

    def to_json(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "version": 1,
            "meta": self.meta,
            "queries": [g.to_json() for g in self.queries],
            "corpus": [g.to_json() for g in self.corpus],
            "relevance": self.relevance.tolist(),
            "splits": {k: list(self.splits[k]) for k in ("train", "val", "test")},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RetrievalDataset":
        if doc.get("format") != FORMAT_TAG:
            raise MalformedDatasetError(f"not a {FORMAT_TAG} document")
        return cls(tuple(Graph.from_json(g) for g in doc["queries"]),
                   tuple(Graph.from_json(g) for g in doc["corpus"]),
                   np.array(doc["relevance"], dtype=np.uint8).reshape(
                       len(doc["queries"]), len(doc["corpus"])),
                   {k: tuple(doc["splits"][k]) for k in ("train", "val", "test")},
                   dict(doc.get("meta", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RetrievalDataset":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IngestError(f"cannot read dataset {path}: {exc}") from exc
        return cls.from_json(json.loads(text))


def split_counts(n: int) -> tuple[int, int, int]:
    """60:15:25 split sizes; val and test round down so the remainder goes to train."""
    n_val = int(n * 15 // 100)
    n_test = int(n * 25 // 100)
    return n - n_val - n_test, n_val, n_test


def relevance_matrix(queries: Sequence[Graph], corpus: Sequence[Graph],
                     induced: bool = False) -> np.ndarray:
    rel = np.zeros((len(queries), len(corpus)), dtype=np.uint8)
    for i, q in enumerate(queries):
        for j, c in enumerate(corpus):
            rel[i, j] = is_subgraph(q, c, induced=induced)
    return rel


def bfs_sample(source: Sequence[Graph], cap: int, rng: np.random.Generator,
               max_attempts: int = 1000) -> Graph:
    """One BFS-grown induced subgraph of a uniformly chosen source graph."""
    smallest = min(3, cap)
    for _ in range(max_attempts):
        target = int(rng.integers(smallest, cap + 1))
        g = source[int(rng.integers(len(source)))]
        if g.node_count < smallest:
            continue
        start = int(rng.integers(g.node_count))
        seen = {start}
        order = [start]
        frontier = deque([start])
        while frontier and len(order) < target:
            u = frontier.popleft()
            nbrs = sorted(g.neighbors[u] - seen)
            rng.shuffle(nbrs)
            for v in nbrs:
                if len(order) >= target:
                    break
                seen.add(v)
                order.append(v)
                frontier.append(v)
        if len(order) < smallest:
            continue
        return g.induced(order)
    raise SamplingError(f"no graph with >= {smallest} nodes after {max_attempts} attempts")


def sample_query_corpus(source: Sequence[Graph], n_queries: int = 300, n_corpus: int = 800,
                        max_query_nodes: int = 15, max_corpus_nodes: int = 20,
                        seed: int = 0, induced: bool = False,
                        max_attempts: int = 1000) -> RetrievalDataset:
    if not source:
        raise SamplingError("empty source collection")
    if max_query_nodes < 1 or max_corpus_nodes < 1:
        raise ValueError("size caps must be >= 1")
    rng = np.random.default_rng(seed)
    queries = tuple(bfs_sample(source, max_query_nodes, rng, max_attempts) for _ in range(n_queries))
    corpus = tuple(bfs_sample(source, max_corpus_nodes, rng, max_attempts) for _ in range(n_corpus))
    rel = relevance_matrix(queries, corpus, induced=induced)
    perm = rng.permutation(n_queries).tolist()
    n_train, n_val, _ = split_counts(n_queries)
    splits = {"train": tuple(sorted(perm[:n_train])),
              "val": tuple(sorted(perm[n_train:n_train + n_val])),
              "test": tuple(sorted(perm[n_train + n_val:]))}
    meta = {"seed": seed, "max_query_nodes": max_query_nodes,
            "max_corpus_nodes": max_corpus_nodes, "induced": induced}
    return RetrievalDataset(queries, corpus, rel, splits, meta)
