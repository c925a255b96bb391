"""Parameter initialization and end-to-end pair distances for any configuration."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import distances as D
from .autodiff import ParameterStore, Tensor, init_linear
from .config import ModelConfig
from .encoders import GRU_KEYS, EmbeddingState, encode, encode_graph, encode_late, pair_alignment
from .graphs import Graph, pad_pair


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Exactly the parameters ``config`` uses, drawn from a seeded generator."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    dh, dm, dim = config.dim_h, config.dim_m, config.width
    init_linear(store, "init", 1, dh, rng)
    if config.granularity == "node":
        init_linear(store, "msg", 2 * dh + 1, dm, rng)
    else:
        init_linear(store, "msg", 2 * dh + dm, dm, rng)

    gru_in = dm + dh if (config.stage == "early" and config.granularity == "node") else dm
    bound = 1.0 / math.sqrt(dh)
    for key in GRU_KEYS:
        rows = gru_in if key.startswith("w_x") else dh if key.startswith("w_h") else 1
        store.add(f"gru.{key}", rng.uniform(-bound, bound, size=(rows, dh)))

    if config.stage == "early" and config.granularity == "edge":
        _init_mlp(store, "join", [2 * dm, 2 * dm, dm], rng)
    if config.uses_alignment and config.nonlinearity == "neural":
        _init_mlp(store, "lrl", [dim, dim, config.lrl_out], rng)

    # output biases that shift d_pos and d_neg alike are invisible to the ranking
    # loss, so they are left out
    if config.distance != "set_align":
        _init_mlp(store, "readout", [dim, 2 * dim], rng, names=("1",))
        _init_mlp(store, "readout", [dim, dim], rng, names=("2",),
                  last_bias=config.distance != "agg_hinge")
    if config.distance == "agg_mlp":
        _init_mlp(store, "aggmlp", [2 * dim, dim, 1], rng, last_bias=False)
    elif config.distance == "agg_ntn":
        L = config.ntn_latent
        b = 1.0 / math.sqrt(dim)
        for l in range(L):
            store.add(f"ntn.w.{l}", rng.uniform(-b, b, size=(dim, dim)))
        b2 = 1.0 / math.sqrt(2 * dim)
        store.add("ntn.v", rng.uniform(-b2, b2, size=(2 * dim, L)))
        store.add("ntn.b", rng.uniform(-b2, b2, size=(1, L)))
        _init_mlp(store, "ntn.mlp", [L, 8, 4, 1], rng, last_bias=False)
    return store


def _init_mlp(store: ParameterStore, prefix: str, sizes: list[int], rng: np.random.Generator,
              names=None, last_bias: bool = True) -> None:
    names = names or [str(i + 1) for i in range(len(sizes) - 1)]
    for i, (name, n_in, n_out) in enumerate(zip(names, sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(n_in)
        store.add(f"{prefix}.w{name}", rng.uniform(-bound, bound, size=(n_in, n_out)))
        if last_bias or i < len(names) - 1:
            store.add(f"{prefix}.b{name}", rng.uniform(-bound, bound, size=(1, n_out)))


def _real_rows(x: Tensor, count: int) -> Tensor:
    if count == x.shape[0]:
        return x
    return ad.gather_rows(x, np.arange(count))


def distance_from_state(config: ModelConfig, state: EmbeddingState, params,
                        rng: np.random.Generator | None = None) -> Tensor:
    if config.granularity == "node":
        xq, xc, nq, nc = state.hq, state.hc, state.n_query, state.n_corpus
    else:
        xq, xc, nq, nc = state.mq, state.mc, state.e_query, state.e_corpus
    if config.distance == "set_align":
        al = pair_alignment(config, xq, xc, params, rng)
        state.alignments.append(al)
        return D.set_align_distance(xq, xc, al.qc)
    # graph vectors come from real rows only, so padding never leaks into them
    gq = D.readout(_real_rows(xq, nq), params)
    gc = D.readout(_real_rows(xc, nc), params)
    if config.distance == "agg_hinge":
        return D.agg_hinge(gq, gc)
    if config.distance == "agg_mlp":
        return D.agg_mlp(gq, gc, params)
    return D.agg_ntn(gq, gc, params, config.ntn_latent)


def pair_distance(config: ModelConfig, params, query: Graph, corpus: Graph,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Distance for one pair; ``params`` is a store bound to a tape (or not)."""
    pair = pad_pair(query, corpus)
    state = encode(config, pair, params, rng)
    return distance_from_state(config, state, params, rng)


class Scorer:
    """Tape-free distances with frozen parameters.

    Late models cache per-graph embeddings, so each corpus graph is encoded once.
    """

    def __init__(self, config: ModelConfig, store: ParameterStore):
        self.config = config
        self.params = store.bind(None)
        self._cache: dict[Graph, object] = {}

    def _embedding(self, g: Graph):
        emb = self._cache.get(g)
        if emb is None:
            emb = self._cache[g] = encode_graph(self.config, g, self.params)
        return emb

    def __call__(self, query: Graph, corpus: Graph) -> float:
        if self.config.stage == "late":
            pair = pad_pair(query, corpus)
            state = encode_late(self.config, pair, self.params,
                                self._embedding(query), self._embedding(corpus))
            return distance_from_state(self.config, state, self.params).item()
        return pair_distance(self.config, self.params, query, corpus).item()
