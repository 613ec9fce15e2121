"""Pool-based active learning over precomputed pair features.

Feature generation is unsupervised, so the query loop only ever retrains the
classifiers. Three query strategies are provided: predictive entropy,
query-by-committee vote entropy with a {logistic, linear SVM} committee, and
the k-Center-Greedy core-set rule. The engine is drivable both in-process
(simulated oracle) and through the annotation service; identical seeds give
identical query sequences and traces either way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import classify
from .errors import DataError, OracleUnavailable

ENTROPY = "entropy"
QBC = "qbc"
CORESET = "coreset"
STRATEGIES = (ENTROPY, QBC, CORESET)

AWAITING_LABELS = "awaiting_labels"
DONE = "done"


@dataclass(frozen=True)
class ActiveConfig:
    strategy: str
    budget: int
    batch_size: int = 100
    seed: int = 0
    seed_fraction: float = 0.05

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DataError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.batch_size > self.budget:
            raise DataError("batch_size cannot exceed the label budget")
        if not (0.0 < self.seed_fraction <= 1.0):
            raise DataError("seed_fraction must be in (0, 1]")


def entropy_scores(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (natural log) of each row of class probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise DataError("probs must be (n_samples, n_classes)")
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise DataError("each probability row must sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def vote_entropy_scores(votes: Sequence[Sequence[int]], committee_size: int) -> np.ndarray:
    """Disagreement of committee hard votes: -sum (V/C) ln (V/C) per sample."""
    out = np.empty(len(votes))
    for i, row in enumerate(votes):
        if len(row) != committee_size:
            raise DataError(f"sample {i}: expected {committee_size} votes, got {len(row)}")
        _, counts = np.unique(np.asarray(row), return_counts=True)
        frac = counts / committee_size
        out[i] = float(-(frac * np.log(frac)).sum())
    return out


def k_center_greedy(candidates: np.ndarray, labeled_set: np.ndarray, b: int) -> list[int]:
    """Greedy core-set selection: repeatedly take the candidate farthest from
    everything already chosen or labeled.

    With an empty labeled set the first pick is the candidate farthest from
    the candidate centroid. Ties always resolve to the lowest index.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if b > cand.shape[0]:
        raise DataError(f"cannot select {b} from {cand.shape[0]} candidates")
    labeled = np.asarray(labeled_set, dtype=np.float64).reshape(-1, cand.shape[1])

    selected: list[int] = []
    if labeled.shape[0] > 0:
        diffs = cand[:, None, :] - labeled[None, :, :]
        min_dist = np.sqrt((diffs**2).sum(axis=2)).min(axis=1)
    else:
        if b == 0:
            return selected
        centroid = cand.mean(axis=0)
        first = int(np.argmax(np.linalg.norm(cand - centroid, axis=1)))
        selected.append(first)
        min_dist = np.linalg.norm(cand - cand[first], axis=1)
        min_dist[first] = -np.inf
    while len(selected) < b:
        pick = int(np.argmax(min_dist))
        selected.append(pick)
        dist_new = np.linalg.norm(cand - cand[pick], axis=1)
        min_dist = np.minimum(min_dist, dist_new)
        min_dist[pick] = -np.inf
    return selected


def _top_b(scores: np.ndarray, indices: np.ndarray, b: int) -> list[int]:
    """Indices of the b highest scores; exact ties go to the lower pool index."""
    order = np.lexsort((indices, -scores))
    return [int(indices[i]) for i in order[:b]]


class ActiveLearner:
    """Stateful query loop over a fixed feature pool.

    The caller feeds labels for the pending batch (all at once or in parts);
    once the batch completes the engine retrains, appends a trace point, and
    either exposes the next query batch or finishes at the budget. State is
    JSON round-trippable so a suspended session can resume elsewhere.
    """

    def __init__(
        self,
        pool_features: np.ndarray,
        test_features: np.ndarray,
        test_labels: np.ndarray,
        config: ActiveConfig,
    ):
        self.pool = np.asarray(pool_features, dtype=np.float64)
        self.test_x = np.asarray(test_features, dtype=np.float64)
        self.test_y = np.asarray(test_labels, dtype=int).ravel()
        self.config = config
        n = self.pool.shape[0]
        if config.budget > n:
            raise DataError(f"budget {config.budget} exceeds pool size {n}")
        seed_size = min(max(1, int(round(config.seed_fraction * n))), config.budget)
        rng = np.random.default_rng(config.seed)
        self.pending: list[int] = sorted(int(i) for i in rng.choice(n, size=seed_size, replace=False))
        self.labels: dict[int, int] = {}
        self.round = 0
        self.trace: list[tuple[int, int, float]] = []
        self.state = AWAITING_LABELS
        self.classifier: classify.LinearModel | None = None

    # -- querying ----------------------------------------------------------

    def pending_queries(self) -> list[int]:
        return list(self.pending)

    def unlabeled_indices(self) -> np.ndarray:
        mask = np.ones(self.pool.shape[0], dtype=bool)
        mask[list(self.labels.keys())] = False
        return np.flatnonzero(mask)

    def provide_labels(self, labels: Mapping[int, int]) -> None:
        """Accept labels for pending pairs; retrain when the batch completes."""
        if self.state == DONE:
            raise DataError("the loop already reached its budget")
        pending = set(self.pending)
        for idx, lab in labels.items():
            idx = int(idx)
            if idx not in pending:
                raise DataError(f"index {idx} is not awaiting a label")
            if lab not in (0, 1):
                raise DataError(f"label for {idx} must be 0 or 1, got {lab!r}")
            self.labels[idx] = int(lab)
            pending.discard(idx)
        self.pending = sorted(pending)
        if not self.pending:
            self._retrain_and_advance()

    def _retrain_and_advance(self) -> None:
        idx = sorted(self.labels)
        y = np.array([self.labels[i] for i in idx])
        x = self.pool[idx]
        self.classifier = classify.train_logistic(x, y)
        committee = None
        if self.config.strategy == QBC:
            committee = [self.classifier, classify.train_linear_svm(x, y)]
        acc = float(np.mean(classify.predict_label(self.classifier, self.test_x) == self.test_y))
        self.trace.append((self.round, len(idx), acc))
        self.round += 1

        remaining = self.config.budget - len(self.labels)
        unlabeled = self.unlabeled_indices()
        if remaining <= 0 or unlabeled.size == 0:
            self.state = DONE
            return
        b = min(self.config.batch_size, remaining, unlabeled.size)
        self.pending = self._select(unlabeled, b, committee)

    def _select(self, unlabeled: np.ndarray, b: int, committee) -> list[int]:
        feats = self.pool[unlabeled]
        if self.config.strategy == ENTROPY:
            p = classify.predict_proba(self.classifier, feats)
            scores = entropy_scores(np.column_stack([1.0 - p, p]))
            return sorted(_top_b(scores, unlabeled, b))
        if self.config.strategy == QBC:
            votes = np.column_stack([classify.predict_label(m, feats) for m in committee])
            scores = vote_entropy_scores(votes, len(committee))
            return sorted(_top_b(scores, unlabeled, b))
        labeled_feats = self.pool[sorted(self.labels)]
        picked = k_center_greedy(feats, labeled_feats, b)
        return sorted(int(unlabeled[i]) for i in picked)

    # -- persistence ---------------------------------------------------------

    def to_state(self) -> dict:
        return {
            "config": {
                "strategy": self.config.strategy,
                "budget": self.config.budget,
                "batch_size": self.config.batch_size,
                "seed": self.config.seed,
                "seed_fraction": self.config.seed_fraction,
            },
            "labeled": [[i, self.labels[i]] for i in sorted(self.labels)],
            "pending": list(self.pending),
            "round": self.round,
            "trace": [[r, c, a] for r, c, a in self.trace],
            "state": self.state,
        }

    @classmethod
    def from_state(
        cls,
        state: dict,
        pool_features: np.ndarray,
        test_features: np.ndarray,
        test_labels: np.ndarray,
    ) -> "ActiveLearner":
        engine = cls.__new__(cls)
        engine.pool = np.asarray(pool_features, dtype=np.float64)
        engine.test_x = np.asarray(test_features, dtype=np.float64)
        engine.test_y = np.asarray(test_labels, dtype=int).ravel()
        engine.config = ActiveConfig(**state["config"])
        engine.labels = {int(i): int(l) for i, l in state["labeled"]}
        engine.pending = [int(i) for i in state["pending"]]
        engine.round = int(state["round"])
        engine.trace = [(int(r), int(c), float(a)) for r, c, a in state["trace"]]
        engine.state = state["state"]
        engine.classifier = None
        if engine.labels and engine.state != DONE:
            idx = sorted(engine.labels)
            y = np.array([engine.labels[i] for i in idx])
            engine.classifier = classify.train_logistic(engine.pool[idx], y)
        return engine


class GroundTruthOracle:
    """Simulated annotator answering from known labels."""

    def __init__(self, labels: Sequence[int]):
        self.labels = np.asarray(labels, dtype=int)

    def __call__(self, indices: Sequence[int]) -> dict[int, int]:
        return {int(i): int(self.labels[i]) for i in indices}


def run_active_loop(
    pool_features: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    config: ActiveConfig,
    oracle: Callable[[Sequence[int]], Mapping[int, int]],
    state_path: str | Path | None = None,
    resume: bool = False,
) -> ActiveLearner:
    """Drive the query loop to completion with the given oracle.

    If the oracle raises OracleUnavailable the current state is persisted to
    ``state_path`` (when given) and the exception propagates; a later call
    with ``resume=True`` picks up from that file.
    """
    if resume:
        if state_path is None or not Path(state_path).exists():
            raise DataError("resume requested but no state file found")
        state = json.loads(Path(state_path).read_text(encoding="utf-8"))
        engine = ActiveLearner.from_state(state, pool_features, test_features, test_labels)
    else:
        engine = ActiveLearner(pool_features, test_features, test_labels, config)
    while engine.state != DONE:
        batch = engine.pending_queries()
        try:
            answers = oracle(batch)
        except OracleUnavailable:
            if state_path is not None:
                Path(state_path).write_text(json.dumps(engine.to_state()), encoding="utf-8")
            raise
        engine.provide_labels({int(i): int(answers[i]) for i in batch})
    if state_path is not None:
        Path(state_path).write_text(json.dumps(engine.to_state()), encoding="utf-8")
    return engine


def trace_to_csv(trace: Sequence[tuple[int, int, float]]) -> str:
    """Render a query-loop trace as the canonical CSV (exact float repr)."""
    lines = ["round,labeled_count,test_accuracy"]
    for rnd, count, acc in trace:
        lines.append(f"{rnd},{count},{acc!r}")
    return "\n".join(lines) + "\n"
