"""Relevance distances (lower means the corpus graph more plausibly contains the query).

Neural heads work on tensors and are differentiable; the exact oracles
(:func:`exact_qap_distance`, :func:`exact_lap_distance`) work on plain arrays.

Parameter names::

    readout.{w1,b1}       Linear(dim, 2 dim), first half gates the second
    readout.{w2,b2}       Linear(dim, dim); no b2 under agg_hinge
    aggmlp.{w1,b1,w2}     MLP(2 dim, dim, 1)
    ntn.w.<l>             dim x dim bilinear slice, l < L
    ntn.{v,b}             (2 dim) x L and 1 x L
    ntn.mlp.{w1..w3,b1,b2}   MLP(L, 8, 4, 1)

Optional biases are looked up by name and skipped when absent.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .graphs import Graph

QAP_MAX_NODES = 9


class SizeGuardError(ValueError):
    """Brute force requested on a problem too large to enumerate."""


def set_align_distance(xq: Tensor, xc: Tensor, omega_qc: Tensor) -> Tensor:
    """``sum [xq - omega_qc @ xc]_+``: query rows stay fixed, corpus rows are aligned."""
    if xq.shape != xc.shape:
        raise DimensionError(f"set_align_distance: shapes differ {xq.shape} and {xc.shape}")
    if omega_qc.shape != (xq.shape[0], xc.shape[0]):
        raise DimensionError(f"set_align_distance: alignment {omega_qc.shape} does not fit "
                             f"{xq.shape[0]} rows")
    return ad.sum_all(ad.relu(xq - omega_qc @ xc))


def _optional(params, name: str):
    return params[name] if name in params else None


def readout(x: Tensor, params, prefix: str = "readout") -> Tensor:
    """Gated sum of rows followed by a linear layer; returns a ``1 x dim`` vector."""
    dim = x.shape[1]
    proj = ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    gated = ad.sigmoid(ad.slice_cols(proj, 0, dim)) * ad.slice_cols(proj, dim, 2 * dim)
    return ad.linear(ad.sum_cols(gated), params[f"{prefix}.w2"], _optional(params, f"{prefix}.b2"))


def agg_hinge(gq: Tensor, gc: Tensor) -> Tensor:
    if gq.shape != gc.shape:
        raise DimensionError(f"agg_hinge: shapes differ {gq.shape} and {gc.shape}")
    return ad.sum_all(ad.relu(gq - gc))


def agg_mlp(gq: Tensor, gc: Tensor, params, prefix: str = "aggmlp") -> Tensor:
    if gq.shape != gc.shape:
        raise DimensionError(f"agg_mlp: shapes differ {gq.shape} and {gc.shape}")
    return ad.mlp(ad.concat_cols([gq, gc]),
                  [(params[f"{prefix}.w1"], params[f"{prefix}.b1"]),
                   (params[f"{prefix}.w2"], _optional(params, f"{prefix}.b2"))])


def ntn_features(gq: Tensor, gc: Tensor, params, latent: int, prefix: str = "ntn") -> Tensor:
    """The length-L vector fed to the NTN scorer."""
    if gq.shape != gc.shape:
        raise DimensionError(f"agg_ntn: shapes differ {gq.shape} and {gc.shape}")
    bilinear = ad.concat_cols([gq @ params[f"{prefix}.w.{l}"] @ gc.T for l in range(latent)])
    return bilinear + ad.concat_cols([gq, gc]) @ params[f"{prefix}.v"] + params[f"{prefix}.b"]


def agg_ntn(gq: Tensor, gc: Tensor, params, latent: int = 16, prefix: str = "ntn") -> Tensor:
    feats = ntn_features(gq, gc, params, latent, prefix)
    return ad.mlp(feats, [(params[f"{prefix}.mlp.w{i}"], _optional(params, f"{prefix}.mlp.b{i}"))
                          for i in (1, 2, 3)])


# ---------------------------------------------------------------------------
# exact oracles

def _permutations(n: int, chunk: int = 40320):
    it = itertools.permutations(range(n))
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.intp)


def exact_qap_distance(query: Graph, corpus: Graph) -> int:
    """``min_P sum [A_q - P A_c P^T]_+`` by enumerating every permutation.

    Both graphs are padded to the larger node count first.  Each uncovered
    undirected query edge contributes 2 (both symmetric adjacency entries).
    """
    n = max(query.node_count, corpus.node_count)
    if n > QAP_MAX_NODES:
        raise SizeGuardError(f"exact_qap_distance enumerates {n}! permutations; "
                             f"N must be <= {QAP_MAX_NODES} (use is_subgraph for larger graphs)")
    if not query.edges:
        return 0
    ac = np.zeros((n, n), dtype=np.int8)
    ac[: corpus.node_count, : corpus.node_count] = corpus.adjacency
    e = np.array(query.edges, dtype=np.intp)
    best = len(e)
    for perms in _permutations(n):
        covered = ac[perms[:, e[:, 0]], perms[:, e[:, 1]]].sum(axis=1)
        best = min(best, len(e) - int(covered.max()))
        if best == 0:
            break
    return 2 * best


def hinge_cost(xq: np.ndarray, xc: np.ndarray) -> np.ndarray:
    """``C[u, v] = sum_i [xq[u, i] - xc[v, i]]_+``."""
    return np.maximum(xq[:, None, :] - xc[None, :, :], 0.0).sum(axis=2)


def exact_lap_distance(xq, xc) -> float:
    """``min_P sum [xq - P xc]_+`` over hard permutations, via the Hungarian method."""
    xq, xc = np.asarray(xq, dtype=np.float64), np.asarray(xc, dtype=np.float64)
    if xq.shape != xc.shape:
        raise DimensionError(f"exact_lap_distance: shapes differ {xq.shape} and {xc.shape}")
    cost = hinge_cost(xq, xc)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def brute_force_lap_distance(xq, xc) -> float:
    """Reference for :func:`exact_lap_distance`; factorial time."""
    xq, xc = np.asarray(xq, dtype=np.float64), np.asarray(xc, dtype=np.float64)
    n = xq.shape[0]
    if n > QAP_MAX_NODES:
        raise SizeGuardError(f"brute force over {n}! permutations refused")
    best = math.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, float(np.maximum(xq - xc[list(perm)], 0.0).sum()))
    return best
