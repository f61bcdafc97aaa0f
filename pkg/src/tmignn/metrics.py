"""Hit ratio and NDCG at k, plus the popularity yardstick."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

DEFAULT_KS = (10, 20)


class EvaluationError(ValueError):
    pass


def rank_items(scores) -> np.ndarray:
    """Item indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores)
    return np.argsort(-scores, axis=-1, kind="stable")


def target_ranks(scores, targets) -> np.ndarray:
    """1-based rank of each target under :func:`rank_items` ordering."""
    scores = np.atleast_2d(np.asarray(scores))
    targets = np.asarray(targets)
    own = scores[np.arange(len(targets)), targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (idx < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def _ranks_from_lists(rank_lists: Sequence, targets: Sequence) -> list:
    ranks = []
    for ranked, target in zip(rank_lists, targets):
        ranked = list(ranked)
        ranks.append(ranked.index(target) + 1 if target in ranked else math.inf)
    return ranks


def _check(rank_lists, targets, k):
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if len(targets) == 0:
        raise EvaluationError("empty test set")
    if len(rank_lists) != len(targets):
        raise EvaluationError("rank lists and targets differ in length")


def hit_at_k(rank_lists, targets, k: int) -> float:
    """Fraction of examples whose target is among the first ``k`` ranked items."""
    _check(rank_lists, targets, k)
    ranks = _ranks_from_lists(rank_lists, targets)
    return sum(r <= k for r in ranks) / len(ranks)


def ndcg_at_k(rank_lists, targets, k: int) -> float:
    """Mean of ``1 / log2(rank + 1)`` for targets ranked within ``k``, else 0."""
    _check(rank_lists, targets, k)
    ranks = _ranks_from_lists(rank_lists, targets)
    return sum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)


def hit_from_ranks(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EvaluationError("empty test set")
    return float(np.mean(ranks <= k))


def ndcg_from_ranks(ranks, k: int) -> float:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise EvaluationError("empty test set")
    return float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0)))


def metrics_from_ranks(ranks, ks=DEFAULT_KS) -> dict:
    out = {}
    for k in ks:
        out[f"H@{k}"] = hit_from_ranks(ranks, k)
        out[f"N@{k}"] = ndcg_from_ranks(ranks, k)
    return out


class PopularityRanker:
    """Scores every item by its training frequency."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=float)

    def scores(self, n_examples: int) -> np.ndarray:
        return np.broadcast_to(self.counts, (n_examples, len(self.counts)))

    def ranking(self) -> list:
        return [int(i) for i in rank_items(self.counts)]


def popularity_baseline(train, item_count: int, count: str = "items") -> PopularityRanker:
    """Rank items by frequency in the training split.

    ``train`` holds prefix-augmented ``(prefix, target)`` pairs. With
    ``count="items"`` every training click is counted once: each target plus
    the opening item of each session (its single-item prefix).
    ``count="targets"`` counts targets only.
    """
    if not train:
        raise EvaluationError("popularity baseline needs a non-empty train split")
    freq: Counter = Counter()
    if count == "targets":
        freq.update(t for _, t in train)
    elif count == "items":
        freq.update(t for _, t in train)
        freq.update(p.items[0] for p, _ in train if len(p) == 1)
    else:
        raise ValueError(f"unknown count mode {count!r}")
    counts = np.zeros(item_count)
    for item, c in freq.items():
        counts[item] = c
    return PopularityRanker(counts)


def format_report(rows: dict, ks=DEFAULT_KS) -> str:
    """Tab-separated table; one row per model, columns H@k then N@k."""
    cols = [f"H@{k}" for k in ks] + [f"N@{k}" for k in ks]
    lines = ["model\t" + "\t".join(cols)]
    for name, m in rows.items():
        lines.append(name + "\t" + "\t".join(f"{100 * m[c]:.4f}" for c in cols))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    lines = [l for l in text.splitlines() if l.strip()]
    cols = lines[0].split("\t")[1:]
    out = {}
    for line in lines[1:]:
        parts = line.split("\t")
        out[parts[0]] = {c: float(v) / 100 for c, v in zip(cols, parts[1:])}
    return out
