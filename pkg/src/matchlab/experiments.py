"""Desk-scale experiment: does early interaction beat a late baseline and chance?

Both models are trained on one synthetic dataset under each seed of the fixed
seed set, and the median test MAP across seeds is compared.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ModelConfig, best_config
from .graphs import RetrievalDataset, sample_query_corpus, synthetic_source
from .trainer import SEED_SET, TrainConfig, evaluate_split, map_from_distances, train

log = logging.getLogger(__name__)

EARLY_BEST = best_config()
LATE_BASELINE = ModelConfig(distance="agg_hinge", stage="late", granularity="node")


@dataclass(frozen=True)
class DeskSettings:
    source: str = "er:20:0.3"
    source_count: int = 30
    source_seed: int = 0
    n_queries: int = 50
    n_corpus: int = 150
    max_query_nodes: int = 10
    max_corpus_nodes: int = 12
    dataset_seed: int = 1704
    max_epochs: int = 10
    patience: int = 4
    batch_size: int = 128
    seeds: tuple[int, ...] = SEED_SET
    random_draws: int = 1000


def desk_dataset(s: DeskSettings) -> RetrievalDataset:
    src = synthetic_source(s.source, s.source_count, s.source_seed)
    return sample_query_corpus(src, s.n_queries, s.n_corpus, s.max_query_nodes,
                               s.max_corpus_nodes, seed=s.dataset_seed)


def random_baseline(data: RetrievalDataset, split: str, draws: int, seed: int = 0) -> float:
    """Expected test MAP of a uniformly random ranking, by Monte Carlo."""
    ids = list(data.splits[split])
    rel = data.relevance[ids]
    rng = np.random.default_rng(seed)
    return float(np.mean([map_from_distances(rng.random(rel.shape), rel, ids)[0]
                          for _ in range(draws)]))


@dataclass
class DeskResult:
    settings: dict
    positive_fraction: float
    test_prevalence: float
    early_test_map: list[float] = field(default_factory=list)
    late_test_map: list[float] = field(default_factory=list)
    random_map: float = float("nan")
    seconds: float = 0.0

    @property
    def early_median(self) -> float:
        return float(np.median(self.early_test_map))

    @property
    def late_median(self) -> float:
        return float(np.median(self.late_test_map))

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(early_median=self.early_median, late_median=self.late_median,
                 early_minus_late=self.early_median - self.late_median,
                 early_minus_random=self.early_median - self.random_map)
        return d


def run_desk_ordering(s: DeskSettings = DeskSettings()) -> DeskResult:
    start = time.perf_counter()
    data = desk_dataset(s)
    test_rel = data.relevance[list(data.splits["test"])]
    res = DeskResult(asdict(s), data.positive_fraction, float(test_rel.mean()))
    res.random_map = random_baseline(data, "test", s.random_draws)
    for seed in s.seeds:
        tc = TrainConfig(batch_size=s.batch_size, max_epochs=s.max_epochs,
                         patience=s.patience, seed=seed)
        for cfg, out in ((EARLY_BEST, res.early_test_map), (LATE_BASELINE, res.late_test_map)):
            store, _ = train(cfg, data, tc)
            out.append(evaluate_split(store, cfg, data, "test").map)
            log.info("%s seed %d test MAP %.4f", cfg.label(), seed, out[-1])
    res.seconds = time.perf_counter() - start
    return res
