"""Cross-graph similarity and alignment.

A similarity ``S[u, v]`` between rows of two embedding matrices is turned into an
alignment either by row softmax (attention, non-injective) or by Sinkhorn
normalization (approximately a permutation, injective).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

NONLINEARITIES = ("neural", "dot", "hinge")
STRUCTURES = ("attention", "sinkhorn")


class ConfigurationError(ValueError):
    """Invalid interaction settings."""


@dataclass
class Alignment:
    """``qc`` maps corpus rows onto query rows; ``cq`` is its partner in the other direction."""

    qc: Tensor
    cq: Tensor
    structure: str
    tau: float
    steps: int | None = None


def lrl(x: Tensor, params, prefix: str = "lrl") -> Tensor:
    """Linear-ReLU-Linear."""
    return ad.mlp(x, [(params[f"{prefix}.w1"], params[f"{prefix}.b1"]),
                      (params[f"{prefix}.w2"], params[f"{prefix}.b2"])])


def similarity(kind: str, hq: Tensor, hc: Tensor, params=None, prefix: str = "lrl") -> Tensor:
    if hq.shape[1] != hc.shape[1]:
        raise DimensionError(f"similarity: embedding widths differ {hq.shape} and {hc.shape}")
    if kind == "dot":
        return hq @ hc.T
    if kind == "hinge":
        return ad.hinge_similarity(hq, hc)
    if kind == "neural":
        if params is None:
            raise ConfigurationError("neural similarity needs parameters")
        return lrl(hq, params, prefix) @ lrl(hc, params, prefix).T
    raise ConfigurationError(f"unknown non-linearity {kind!r}; expected one of {NONLINEARITIES}")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")


def attention_align(sim: Tensor, tau: float = 0.1) -> Alignment:
    """Row softmax for ``qc``; softmax down each column of ``sim`` for ``cq``.

    Padding rows and columns take part in both normalizations.
    """
    _check_tau(tau)
    logits = ad.scale(sim, 1.0 / tau)
    return Alignment(ad.softmax_rows(logits), ad.softmax_rows(logits.T), "attention", tau)


def sinkhorn_align(sim: Tensor, tau: float = 0.1, steps: int = 20,
                   gumbel_rng: np.random.Generator | None = None,
                   gumbel_scale: float = 1.0) -> Alignment:
    """``steps`` rounds of column-then-row normalization starting from ``exp(sim / tau)``.

    Passing ``gumbel_rng`` perturbs the logits with Gumbel noise first.
    """
    _check_tau(tau)
    if steps < 1:
        raise ConfigurationError(f"sinkhorn steps must be >= 1, got {steps}")
    if sim.shape[0] != sim.shape[1]:
        raise DimensionError(f"sinkhorn_align: expected square similarity, got {sim.shape}")
    logits = ad.scale(sim, 1.0 / tau)
    if gumbel_rng is not None:
        u = gumbel_rng.uniform(1e-12, 1.0, size=sim.shape)
        logits = logits + gumbel_scale * -np.log(-np.log(u))
    z = ad.log_sinkhorn(logits, steps)
    return Alignment(z, z.T, "sinkhorn", tau, steps)


def align(structure: str, sim: Tensor, tau: float = 0.1, steps: int = 20, **kw) -> Alignment:
    if structure == "attention":
        return attention_align(sim, tau)
    if structure == "sinkhorn":
        return sinkhorn_align(sim, tau, steps, **kw)
    raise ConfigurationError(f"unknown structure {structure!r}; expected one of {STRUCTURES}")
