import itertools
import logging
import math
from collections import Counter

import numpy as np
import pytest

from conftest import small_dataset, toy_dataset
from matchlab.autodiff import constant
from matchlab.config import ModelConfig
from matchlab.graphs import RetrievalDataset
from matchlab.trainer import (DatasetError, TrainConfig, TripleSampler, UndefinedAPError,
                              average_precision, evaluate_split, loss_and_grads,
                              map_from_distances, rank_corpus, ranking_loss, train)

FAST = ModelConfig(distance="agg_hinge", stage="late", granularity="node", layers=2)


def test_ranking_loss_examples():
    assert ranking_loss(constant(0.2), constant(1.0), 0.5).item() == 0.0
    assert ranking_loss(constant(1.0), constant(0.2), 0.5).item() == pytest.approx(1.3)
    assert ranking_loss(constant(0.4), constant(0.4), 0.5).item() == 0.5


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(margin=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# average precision ---------------------------------------------------------------------

def test_ap_examples():
    assert average_precision([1, 0]) == 1.0
    assert average_precision([0, 1]) == 0.5
    assert average_precision([1, 0, 1]) == pytest.approx(5 / 6)
    with pytest.raises(UndefinedAPError):
        average_precision([0, 0])
    with pytest.raises(UndefinedAPError):
        average_precision([])


def test_ap_bounds_exhaustive():
    for n in range(1, 8):
        for rel in itertools.product((0, 1), repeat=n):
            if any(rel):
                assert 0 < average_precision(rel) <= 1
                assert (average_precision(rel) == 1) == (list(rel) == sorted(rel, reverse=True))


def test_rank_ties_by_index():
    assert rank_corpus([0.5, 0.1, 0.5, 0.1]) == [1, 3, 0, 2]


def _worst_ap(n_pos, n):
    return sum(k / (n - n_pos + k) for k in range(1, n_pos + 1)) / n_pos


def test_map_oracle_and_reversed():
    rng = np.random.default_rng(0)
    rel = (rng.random((6, 30)) < 0.3).astype(np.uint8)
    rel[:, 0] = 1
    assert map_from_distances(1.0 - rel, rel)[0] == 1.0
    worst = np.mean([_worst_ap(int(r.sum()), 30) for r in rel])
    assert map_from_distances(rel.astype(float), rel)[0] == pytest.approx(worst, abs=1e-12)


def test_map_random_scores_near_prevalence():
    maps = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        rel = (rng.random((5, 800)) < 0.21).astype(np.uint8)
        maps.append(map_from_distances(rng.random((5, 800)), rel)[0])
    assert abs(np.mean(maps) - 0.21) < 0.05


def test_map_monotone_and_shuffle_invariant():
    rng = np.random.default_rng(1)
    dist = rng.random((4, 25))
    rel = (rng.random((4, 25)) < 0.4).astype(np.uint8)
    rel[:, 3] = 1
    base = map_from_distances(dist, rel)[0]
    assert map_from_distances(3 * np.exp(dist) + 1, rel)[0] == base
    perm = rng.permutation(25)
    assert map_from_distances(dist[:, perm], rel[:, perm])[0] == pytest.approx(base, abs=1e-15)


def test_map_skips_queries_without_positives(caplog):
    rel = np.array([[1, 0, 0], [0, 0, 0]], dtype=np.uint8)
    with caplog.at_level(logging.WARNING):
        value, aps, _ = map_from_distances(np.array([[0.1, 0.2, 0.3]] * 2), rel, [7, 9])
    assert value == 1.0 and list(aps) == [7]
    assert "9" in caplog.text


def test_evaluate_split_report():
    data = small_dataset()
    from matchlab.model import init_params
    store = init_params(FAST, 0)
    rep = evaluate_split(store, FAST, data, "test", timed=True)
    assert set(rep.rankings) == set(data.splits["test"])
    assert len(rep.pair_latencies) == len(data.splits["test"]) * len(data.corpus)
    assert rep.map == pytest.approx(np.mean(list(rep.ap.values())))
    assert all(0 <= v <= 1 for v in rep.ap.values())


# sampling and training -------------------------------------------------------------------

def test_triples_uniform_over_product():
    data = toy_dataset()
    sampler = TripleSampler(data, (0, 1))
    # triple product: q0 has 2 pos x 2 neg, q1 has 3 pos x 1 neg
    product = {(0, 0, 1), (0, 0, 2), (0, 3, 1), (0, 3, 2), (1, 0, 2), (1, 1, 2), (1, 3, 2)}
    ids = {id(g): i for i, g in enumerate(data.queries)}
    cid = {id(g): i for i, g in enumerate(data.corpus)}
    counts = Counter()
    rng = np.random.default_rng(0)
    for q, p, n in sampler.sample(14000, rng):
        counts[(ids[id(q)], cid[id(p)], cid[id(n)])] += 1
    assert set(counts) == product
    for c in counts.values():
        assert abs(c / 14000 - 1 / 7) < 0.01


def test_loss_nonnegative_and_zero_when_separated():
    data = toy_dataset()
    from matchlab.model import init_params
    store = init_params(FAST, 0)
    triples = TripleSampler(data, (0, 1)).sample(8, np.random.default_rng(1))
    loss, grads = loss_and_grads(FAST, store, triples, 0.5)
    assert loss >= 0
    loss, grads = loss_and_grads(FAST, store, triples, 1e-9)
    if loss == 0:
        assert all((g == 0).all() for g in grads.values())


def test_dataset_error_without_triples():
    data = toy_dataset()
    rel = np.ones_like(data.relevance)
    bad = RetrievalDataset(data.queries, data.corpus, rel, data.splits)
    with pytest.raises(DatasetError):
        train(FAST, bad, TrainConfig(max_epochs=1))


def test_history_contract_and_determinism():
    data = small_dataset()
    tc = TrainConfig(max_epochs=4, patience=2, batch_size=8, seed=3)
    s1, h1 = train(FAST, data, tc)
    s2, h2 = train(FAST, data, tc)
    assert h1.train_loss == h2.train_loss and h1.val_map == h2.val_map
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1.names())
    assert 1 <= len(h1.train_loss) <= 4
    assert 0 <= h1.best_epoch < len(h1.train_loss)
    assert h1.best_val_map >= h1.val_map[0]
    assert h1.best_val_map == max(h1.val_map) or h1.best_val_map >= max(h1.val_map) - tc.min_delta


def test_best_epoch_parameters_returned():
    data = small_dataset()
    tc = TrainConfig(max_epochs=5, patience=5, batch_size=8, seed=4)
    store, hist = train(FAST, data, tc)
    assert evaluate_split(store, FAST, data, "val").map == pytest.approx(hist.best_val_map)


def test_early_stopping_patience():
    data = small_dataset()
    tc = TrainConfig(max_epochs=50, patience=1, min_delta=10.0, batch_size=4, seed=0)
    _, hist = train(FAST, data, tc)
    assert hist.stopped_early and len(hist.train_loss) == 2 and hist.best_epoch == 0


def test_val_fallback_to_train(caplog):
    data = toy_dataset()
    with caplog.at_level(logging.WARNING):
        _, hist = train(FAST, data, TrainConfig(max_epochs=1, batch_size=4))
    assert "validation split" in caplog.text
    assert not math.isnan(hist.val_map[0])


def test_epoch_length_and_mean_loss(monkeypatch):
    import matchlab.trainer as T

    batches = []
    real = T.loss_and_grads

    def counting(config, store, triples, margin, rng=None):
        loss, grads = real(config, store, triples, margin, rng)
        batches.append((len(triples), loss))
        return loss, grads

    monkeypatch.setattr(T, "loss_and_grads", counting)
    _, hist = train(FAST, toy_dataset(), TrainConfig(max_epochs=1, batch_size=2))
    # 5 positive pairs at batch size 2 -> 3 batches; history holds the per-triple mean
    assert [n for n, _ in batches] == [2, 2, 2]
    assert hist.train_loss[0] == pytest.approx(sum(l for _, l in batches) / 6)
