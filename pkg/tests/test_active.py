"""Query strategies and the label-query loop."""

import itertools
import json
import math

import numpy as np
import pytest

from sslface import active, classify
from sslface.errors import DataError, OracleUnavailable


class TestEntropyScores:
    def test_uniform_is_ln2(self):
        assert active.entropy_scores(np.array([[0.5, 0.5]]))[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_certain_is_zero(self):
        assert active.entropy_scores(np.array([[1.0, 0.0]]))[0] == 0.0

    def test_direct_evaluation(self):
        # -0.9 ln 0.9 - 0.1 ln 0.1
        assert active.entropy_scores(np.array([[0.9, 0.1]]))[0] == pytest.approx(0.325083, abs=1e-6)

    def test_uniform_maximizes(self):
        ps = np.linspace(0.01, 0.99, 99)
        scores = active.entropy_scores(np.column_stack([ps, 1 - ps]))
        assert np.argmax(scores) == 49  # p = 0.5

    def test_invalid_distribution_rejected(self):
        with pytest.raises(DataError):
            active.entropy_scores(np.array([[0.7, 0.7]]))
        with pytest.raises(DataError):
            active.entropy_scores(np.array([[1.2, -0.2]]))


class TestVoteEntropy:
    def test_unanimous_zero(self):
        assert active.vote_entropy_scores([[1, 1]], 2)[0] == 0.0

    def test_even_split_ln2(self):
        assert active.vote_entropy_scores([[0, 1]], 2)[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_two_one_split(self):
        # -(2/3) ln(2/3) - (1/3) ln(1/3)
        assert active.vote_entropy_scores([[1, 1, 0]], 3)[0] == pytest.approx(0.636514, abs=1e-6)

    def test_ragged_votes_rejected(self):
        with pytest.raises(DataError):
            active.vote_entropy_scores([[1, 0], [1]], 2)


class TestKCenterGreedy:
    def test_hand_simulated_selection(self):
        candidates = np.array([[1.0], [2.0], [10.0]])
        labeled = np.array([[0.0]])
        assert active.k_center_greedy(candidates, labeled, 2) == [2, 1]

    def test_select_all(self):
        rng = np.random.default_rng(0)
        cand = rng.normal(size=(6, 3))
        picked = active.k_center_greedy(cand, np.empty((0, 3)), 6)
        assert sorted(picked) == list(range(6))

    def test_too_many_requested(self):
        with pytest.raises(DataError):
            active.k_center_greedy(np.ones((3, 2)), np.empty((0, 2)), 4)

    def test_deterministic_tie_breaks_lowest_index(self):
        cand = np.array([[1.0], [1.0], [-1.0], [-1.0]])
        labeled = np.array([[0.0]])
        assert active.k_center_greedy(cand, labeled, 1) == [0]

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_greedy_within_2x_of_optimal_cover(self, seed):
        rng = np.random.default_rng(seed)
        points = rng.uniform(size=(10, 2))
        b = 3

        def cover_radius(center_idx):
            centers = points[list(center_idx)]
            d = np.linalg.norm(points[:, None, :] - centers[None], axis=2)
            return d.min(axis=1).max()

        greedy = active.k_center_greedy(points, np.empty((0, 2)), b)
        optimal = min(cover_radius(c) for c in itertools.combinations(range(len(points)), b))
        assert cover_radius(greedy) <= 2.0 * optimal + 1e-12

    def test_order_invariance_without_ties(self):
        rng = np.random.default_rng(5)
        cand = rng.normal(size=(12, 4))
        labeled = rng.normal(size=(2, 4))
        picked = active.k_center_greedy(cand, labeled, 4)
        perm = rng.permutation(12)
        picked_perm = active.k_center_greedy(cand[perm], labeled, 4)
        assert sorted(perm[picked_perm]) == sorted(picked)


def separable_pool(n=400, d=6, seed=0, flip=0.0):
    """Linearly separable features with optional label noise."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    w = np.arange(1, d + 1, dtype=float)
    y = (x @ w > 0).astype(int)
    if flip:
        noise = rng.uniform(size=n) < flip
        y = np.where(noise, 1 - y, y)
    return x, y


class TestActiveLoop:
    def make_loop(self, strategy, seed=3, budget=120, batch=30, n=300):
        x, y = separable_pool(n=n + 100, seed=7)
        pool_x, pool_y = x[:n], y[:n]
        test_x, test_y = x[n:], y[n:]
        config = active.ActiveConfig(strategy=strategy, budget=budget, batch_size=batch, seed=seed)
        oracle = active.GroundTruthOracle(pool_y)
        engine = active.run_active_loop(pool_x, test_x, test_y, config, oracle)
        return engine, pool_x, pool_y, test_x, test_y

    @pytest.mark.parametrize("strategy", active.STRATEGIES)
    def test_loop_runs_to_budget(self, strategy):
        engine, *_ = self.make_loop(strategy)
        assert engine.state == active.DONE
        assert len(engine.labels) == 120
        counts = [c for _, c, _ in engine.trace]
        assert counts == sorted(counts)
        assert all(b - a <= 30 for a, b in zip(counts, counts[1:]))

    def test_budget_equals_seed_gives_single_trace_point(self):
        x, y = separable_pool(n=100, seed=1)
        # 5% of 80 = 4 seed labels, so budget 4 means zero query rounds
        config = active.ActiveConfig(strategy="entropy", budget=4, batch_size=4, seed=0)
        engine = active.run_active_loop(x[:80], x[80:], y[80:], config, active.GroundTruthOracle(y[:80]))
        assert len(engine.trace) == 1
        assert engine.state == active.DONE
        assert len(engine.labels) == 4

    def test_fixed_seed_identical_traces(self):
        a, *_ = self.make_loop("qbc", seed=9)
        b, *_ = self.make_loop("qbc", seed=9)
        assert a.trace == b.trace
        assert sorted(a.labels.items()) == sorted(b.labels.items())

    def test_different_seed_changes_seed_set(self):
        a, *_ = self.make_loop("entropy", seed=1)
        b, *_ = self.make_loop("entropy", seed=2)
        assert sorted(a.labels) != sorted(b.labels)

    def test_no_requery(self):
        engine, *_ = self.make_loop("coreset")
        seen = set()
        # reconstruct query batches from the engine's label set growth is not
        # possible post hoc; instead drive a fresh engine manually
        x, y = separable_pool(n=200, seed=3)
        config = active.ActiveConfig(strategy="coreset", budget=60, batch_size=20, seed=5)
        fresh = active.ActiveLearner(x[:150], x[150:], y[150:], config)
        while fresh.state != active.DONE:
            batch = fresh.pending_queries()
            assert not (set(batch) & seen)
            seen.update(batch)
            fresh.provide_labels({i: int(y[i]) for i in batch})
        assert len(seen) == 60

    def test_full_budget_equals_passive_accuracy(self):
        x, y = separable_pool(n=160, seed=11, flip=0.05)
        pool_x, pool_y = x[:120], y[:120]
        test_x, test_y = x[120:], y[120:]
        config = active.ActiveConfig(strategy="entropy", budget=120, batch_size=40, seed=2)
        engine = active.run_active_loop(pool_x, test_x, test_y, config, active.GroundTruthOracle(pool_y))
        passive = classify.train_logistic(pool_x, pool_y)
        passive_acc = float(np.mean(classify.predict_label(passive, test_x) == test_y))
        assert engine.trace[-1][1] == 120
        assert engine.trace[-1][2] == pytest.approx(passive_acc, abs=1e-12)

    def test_partial_labels_accumulate(self):
        x, y = separable_pool(n=100, seed=13)
        config = active.ActiveConfig(strategy="entropy", budget=20, batch_size=10, seed=4)
        engine = active.ActiveLearner(x[:80], x[80:], y[80:], config)
        batch = engine.pending_queries()
        engine.provide_labels({batch[0]: int(y[batch[0]])})
        assert engine.state == active.AWAITING_LABELS
        assert len(engine.pending_queries()) == len(batch) - 1
        engine.provide_labels({i: int(y[i]) for i in engine.pending_queries()})
        assert engine.round == 1

    def test_label_for_unqueried_pair_rejected(self):
        x, y = separable_pool(n=60, seed=14)
        config = active.ActiveConfig(strategy="entropy", budget=10, batch_size=5, seed=0)
        engine = active.ActiveLearner(x[:50], x[50:], y[50:], config)
        outside = [i for i in range(50) if i not in engine.pending_queries()][0]
        with pytest.raises(DataError):
            engine.provide_labels({outside: 1})

    def test_suspend_and_resume(self, tmp_path):
        x, y = separable_pool(n=200, seed=15)
        pool_x, pool_y = x[:150], y[:150]
        test_x, test_y = x[150:], y[150:]
        config = active.ActiveConfig(strategy="entropy", budget=45, batch_size=15, seed=6)
        state_path = tmp_path / "loop-state.json"

        class FlakyOracle:
            def __init__(self):
                self.calls = 0

            def __call__(self, indices):
                self.calls += 1
                if self.calls == 3:
                    raise OracleUnavailable("annotator went home")
                return {int(i): int(pool_y[i]) for i in indices}

        with pytest.raises(OracleUnavailable):
            active.run_active_loop(pool_x, test_x, test_y, config, FlakyOracle(), state_path=state_path)
        assert state_path.exists()
        resumed = active.run_active_loop(
            pool_x, test_x, test_y, config, active.GroundTruthOracle(pool_y),
            state_path=state_path, resume=True,
        )
        straight = active.run_active_loop(
            pool_x, test_x, test_y, config, active.GroundTruthOracle(pool_y)
        )
        assert resumed.trace == straight.trace

    def test_state_round_trip(self):
        x, y = separable_pool(n=120, seed=16)
        config = active.ActiveConfig(strategy="qbc", budget=30, batch_size=10, seed=7)
        engine = active.ActiveLearner(x[:100], x[100:], y[100:], config)
        engine.provide_labels({i: int(y[i]) for i in engine.pending_queries()})
        blob = json.dumps(engine.to_state())
        clone = active.ActiveLearner.from_state(json.loads(blob), x[:100], x[100:], y[100:])
        assert clone.pending == engine.pending
        assert clone.trace == engine.trace
        # both continue identically
        engine.provide_labels({i: int(y[i]) for i in engine.pending_queries()})
        clone.provide_labels({i: int(y[i]) for i in clone.pending_queries()})
        assert clone.trace == engine.trace

    def test_trace_csv_format(self):
        csv = active.trace_to_csv([(0, 10, 0.5), (1, 20, 0.9375)])
        assert csv == "round,labeled_count,test_accuracy\n0,10,0.5\n1,20,0.9375\n"

    def test_budget_larger_than_pool_rejected(self):
        x, y = separable_pool(n=30, seed=17)
        config = active.ActiveConfig(strategy="entropy", budget=100, batch_size=10, seed=0)
        with pytest.raises(DataError):
            active.ActiveLearner(x[:20], x[20:], y[20:], config)

    def test_batch_size_validation(self):
        with pytest.raises(DataError):
            active.ActiveConfig(strategy="entropy", budget=10, batch_size=0)
        with pytest.raises(DataError):
            active.ActiveConfig(strategy="entropy", budget=10, batch_size=20)
        with pytest.raises(DataError):
            active.ActiveConfig(strategy="nope", budget=10, batch_size=5)
