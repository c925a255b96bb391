"""Message-passing encoders for the four stage x granularity combinations.

Late encoders run each graph on its own, at its own size, and pad afterwards, so
a graph's embeddings never depend on its partner.  Early encoders run the two
padded graphs in lockstep and exchange signal through an alignment before every
layer.

Parameter names used here::

    init.{w,b}      Linear(1, dim_h) embedding of the constant node feature
    msg.{w,b}       Linear(2 dim_h + 1, dim_m) for nodes, Linear(2 dim_h + dim_m, dim_m) for edges
    gru.*           GRU cell, hidden dim_h
    join.{w1,b1,w2,b2}  MLP(2 dim_m, 2 dim_m, dim_m), early edge models only
    lrl.{w1,b1,w2,b2}   MLP(dim, dim, lrl_out), neural non-linearity only
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import interaction
from .autodiff import Tensor
from .config import ModelConfig
from .graphs import Graph, PaddedPair

GRU_KEYS = ("w_xz", "w_xr", "w_xn", "w_hz", "w_hr", "w_hn", "b_z", "b_r", "b_xn", "b_hn")


@dataclass(frozen=True)
class GraphIndex:
    src: np.ndarray
    dst: np.ndarray
    incidence: np.ndarray  # nodes x edges, 1 where the node is an endpoint
    edge_pad: np.ndarray  # edge slots x edges, identity on the real slots
    node_pad: np.ndarray  # padded nodes x nodes
    pad_column: np.ndarray  # padded nodes x 1, 1 on padding rows


@lru_cache(maxsize=4096)
def graph_index(g: Graph, n_nodes: int, n_edge_slots: int) -> GraphIndex:
    e = np.array(g.edges, dtype=np.intp).reshape(-1, 2)
    n, m = g.node_count, len(e)
    inc = np.zeros((n, m))
    inc[e[:, 0], np.arange(m)] = 1.0
    inc[e[:, 1], np.arange(m)] = 1.0
    edge_pad = np.zeros((n_edge_slots, m))
    edge_pad[np.arange(m), np.arange(m)] = 1.0
    node_pad = np.zeros((n_nodes, n))
    node_pad[np.arange(n), np.arange(n)] = 1.0
    pad_col = np.zeros((n_nodes, 1))
    pad_col[n:] = 1.0
    for arr in (inc, edge_pad, node_pad, pad_col):
        arr.flags.writeable = False
    return GraphIndex(e[:, 0].copy(), e[:, 1].copy(), inc, edge_pad, node_pad, pad_col)


@dataclass
class EmbeddingState:
    """Final (padded) embeddings of both graphs plus per-layer alignments.

    ``hq``/``hc`` are ``N x dim_h``; ``mq``/``mc`` are ``N_edges x dim_m`` with zero
    padding rows (edge granularity only).  ``alignments[k]`` is the alignment fed
    into layer ``k`` (early stage only).
    """

    hq: Tensor
    hc: Tensor
    mq: Tensor | None = None
    mc: Tensor | None = None
    alignments: list = field(default_factory=list)
    n_query: int = 0
    n_corpus: int = 0
    e_query: int = 0
    e_corpus: int = 0


def _ones(rows: int) -> Tensor:
    return ad.constant(np.ones((rows, 1)))


def initial_embedding(n: int, params) -> Tensor:
    return ad.linear(_ones(n), params["init.w"], params["init.b"])


def symmetric_message(hu: Tensor, hv: Tensor, extra: Tensor, params) -> Tensor:
    """msg(h_u, h_v, e) + msg(h_v, h_u, e), one row per edge."""
    w, b = params["msg.w"], params["msg.b"]
    fwd = ad.linear(ad.concat_cols([hu, hv, extra]), w, b)
    bwd = ad.linear(ad.concat_cols([hv, hu, extra]), w, b)
    return fwd + bwd


def node_messages(h: Tensor, idx: GraphIndex, params, edge_state: Tensor | None = None) -> Tensor:
    """Sum of symmetric messages arriving at each node."""
    hu, hv = ad.gather_rows(h, idx.src), ad.gather_rows(h, idx.dst)
    extra = _ones(len(idx.src)) if edge_state is None else edge_state
    return ad.constant(idx.incidence) @ symmetric_message(hu, hv, extra, params)


def edge_messages(h: Tensor, m: Tensor, idx: GraphIndex, params) -> Tensor:
    return symmetric_message(ad.gather_rows(h, idx.src), ad.gather_rows(h, idx.dst), m, params)


def gru(x: Tensor, h: Tensor, params) -> Tensor:
    return ad.gru_cell(x, h, params.group("gru", GRU_KEYS))


def join(own: Tensor, other: Tensor, params) -> Tensor:
    return ad.mlp(ad.concat_cols([own, other]),
                  [(params["join.w1"], params["join.b1"]), (params["join.w2"], params["join.b2"])])


def pair_alignment(config: ModelConfig, xq: Tensor, xc: Tensor, params,
                   rng: np.random.Generator | None = None) -> interaction.Alignment:
    sim = interaction.similarity(config.nonlinearity, xq, xc, params)
    if config.structure_kind == "sinkhorn":
        return interaction.sinkhorn_align(sim, config.tau, config.sinkhorn_steps,
                                          gumbel_rng=rng if config.gumbel else None)
    return interaction.attention_align(sim, config.tau)


# ---------------------------------------------------------------------------
# late stage: one graph at a time

@dataclass
class GraphEmbedding:
    h: Tensor  # n x dim_h, real nodes only
    m: Tensor | None  # E x dim_m, real edges only
    pad_row: Tensor | None  # embedding of an isolated padding node


def encode_graph(config: ModelConfig, g: Graph, params) -> GraphEmbedding:
    """Late-stage encoding of a single unpadded graph."""
    if config.layers < 1:
        raise interaction.ConfigurationError("layers must be >= 1")
    idx = graph_index(g, g.node_count, g.edge_count)
    h = initial_embedding(g.node_count, params)
    msg_width = config.dim_m
    if config.granularity == "node":
        pad = initial_embedding(1, params)
        zero_msg = ad.constant(np.zeros((1, msg_width)))
        for _ in range(config.layers):
            h = gru(node_messages(h, idx, params), h, params)
            pad = gru(zero_msg, pad, params)
        return GraphEmbedding(h, None, pad)
    m = edge_messages(h, ad.constant(np.zeros((g.edge_count, config.dim_m))), idx, params)
    for _ in range(config.layers):
        h = gru(node_messages(h, idx, params, m), h, params)
        m = edge_messages(h, m, idx, params)
    return GraphEmbedding(h, m, None)


def pad_nodes(emb: GraphEmbedding, g: Graph, n_nodes: int) -> Tensor:
    if n_nodes == g.node_count:
        return emb.h
    idx = graph_index(g, n_nodes, g.edge_count)
    return ad.constant(idx.node_pad) @ emb.h + ad.constant(idx.pad_column) @ emb.pad_row


def pad_edges(m: Tensor, g: Graph, n_slots: int) -> Tensor:
    if n_slots == g.edge_count:
        return m
    return ad.constant(graph_index(g, g.node_count, n_slots).edge_pad) @ m


def encode_late(config: ModelConfig, pair: PaddedPair, params,
                query_emb: GraphEmbedding | None = None,
                corpus_emb: GraphEmbedding | None = None) -> EmbeddingState:
    q, c = pair.original_query, pair.original_corpus
    eq = query_emb if query_emb is not None else encode_graph(config, q, params)
    ec = corpus_emb if corpus_emb is not None else encode_graph(config, c, params)
    state = EmbeddingState(eq.h, ec.h, n_query=q.node_count, n_corpus=c.node_count,
                           e_query=q.edge_count, e_corpus=c.edge_count)
    if config.granularity == "node":
        state.hq = pad_nodes(eq, q, pair.n_nodes)
        state.hc = pad_nodes(ec, c, pair.n_nodes)
    else:
        state.mq = pad_edges(eq.m, q, pair.n_edges)
        state.mc = pad_edges(ec.m, c, pair.n_edges)
    return state


# ---------------------------------------------------------------------------
# early stage: both graphs together

def encode_early(config: ModelConfig, pair: PaddedPair, params,
                 rng: np.random.Generator | None = None,
                 zero_alignment: bool = False) -> EmbeddingState:
    """Joint encoding.  ``zero_alignment`` replaces every alignment by zeros."""
    n, slots = pair.n_nodes, pair.n_edges
    qi = graph_index(pair.query, n, slots)
    ci = graph_index(pair.corpus, n, slots)
    hq = initial_embedding(n, params)
    hc = initial_embedding(n, params)
    state = EmbeddingState(hq, hc, n_query=pair.original_query.node_count,
                           n_corpus=pair.original_corpus.node_count,
                           e_query=pair.query.edge_count, e_corpus=pair.corpus.edge_count)

    if config.granularity == "node":
        for _ in range(config.layers):
            if zero_alignment:
                zero = ad.constant(np.zeros((n, n)))
                al = interaction.Alignment(zero, zero, "zero", config.tau)
            else:
                al = pair_alignment(config, hq, hc, params, rng)
            state.alignments.append(al)
            xq = ad.concat_cols([node_messages(hq, qi, params), hq - al.qc @ hc])
            xc = ad.concat_cols([node_messages(hc, ci, params), hc - al.cq @ hq])
            hq, hc = gru(xq, hq, params), gru(xc, hc, params)
        state.hq, state.hc = hq, hc
        return state

    zq = ad.constant(np.zeros((pair.query.edge_count, config.dim_m)))
    zc = ad.constant(np.zeros((pair.corpus.edge_count, config.dim_m)))
    mq = edge_messages(hq, zq, qi, params)
    mc = edge_messages(hc, zc, ci, params)
    pq, pc = ad.constant(qi.edge_pad), ad.constant(ci.edge_pad)
    mq_pad, mc_pad = pq @ mq, pc @ mc
    for _ in range(config.layers):
        if zero_alignment:
            zero = ad.constant(np.zeros((slots, slots)))
            al = interaction.Alignment(zero, zero, "zero", config.tau)
        else:
            al = pair_alignment(config, mq_pad, mc_pad, params, rng)
        state.alignments.append(al)
        hq_next = gru(node_messages(hq, qi, params, mq), hq, params)
        hc_next = gru(node_messages(hc, ci, params, mc), hc, params)
        cross_q = ad.gather_rows(al.qc @ mc_pad, np.arange(pair.query.edge_count))
        cross_c = ad.gather_rows(al.cq @ mq_pad, np.arange(pair.corpus.edge_count))
        mq_next = join(edge_messages(hq_next, mq, qi, params), cross_q, params)
        mc_next = join(edge_messages(hc_next, mc, ci, params), cross_c, params)
        hq, hc, mq, mc = hq_next, hc_next, mq_next, mc_next
        mq_pad, mc_pad = pq @ mq, pc @ mc
    state.hq, state.hc, state.mq, state.mc = hq, hc, mq_pad, mc_pad
    return state


def encode(config: ModelConfig, pair: PaddedPair, params,
           rng: np.random.Generator | None = None) -> EmbeddingState:
    if config.stage == "late":
        return encode_late(config, pair, params)
    return encode_early(config, pair, params, rng)
