"""Sessions with planted interests laid out on a timeline.

Each session mixes two disjoint item pools. In chunked mode the first
pool's clicks come in one tight block, then a long pause, then the second
pool's block; the target follows the last block. Item draws inside a pool
are skewed by a power law, so within-pool popularity is learnable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetSplit, SessionRecord, make_split
from .graph import ConfigError

TARGET_RULES = ("latest-interest", "uniform")


@dataclass
class SynthConfig:
    n_pools: int = 5
    pool_size: int = 20
    interest_pools: Optional[list] = None
    sessions: int = 2000
    items_per_interest: tuple = (3, 3)
    intra_gap: tuple = (5, 60)
    inter_gap: tuple = (1800, 7200)
    chunked: bool = True
    target_rule: str = "latest-interest"
    skew: float = 2.0
    session_spacing: int = 86400
    seed: int = 7

    def __post_init__(self):
        if self.interest_pools is None:
            self.interest_pools = [
                list(range(p * self.pool_size, (p + 1) * self.pool_size)) for p in range(self.n_pools)
            ]
        pools = [list(p) for p in self.interest_pools]
        self.interest_pools = pools
        if len(pools) < 2 or any(not p for p in pools):
            raise ConfigError("need at least two non-empty pools")
        flat = [i for p in pools for i in p]
        if len(flat) != len(set(flat)):
            raise ConfigError("pools must be disjoint")
        lo, hi = self.items_per_interest
        if lo < 1 or hi < lo:
            raise ConfigError("items_per_interest must be a range with 1 <= lo <= hi")
        for name in ("intra_gap", "inter_gap"):
            a, b = getattr(self, name)
            if a <= 0 or b < a:
                raise ConfigError(f"{name} must be a positive range")
        if self.intra_gap[1] >= self.inter_gap[0]:
            raise ConfigError("intra_gap max must be below inter_gap min")
        if self.target_rule not in TARGET_RULES:
            raise ConfigError(f"target_rule must be one of {TARGET_RULES}")
        if hi >= min(len(p) for p in pools):
            raise ConfigError("a pool is too small to draw the clicks plus an unseen target")

    @property
    def n_items(self) -> int:
        return sum(len(p) for p in self.interest_pools)


@dataclass
class SynthCorpus:
    """Sessions whose last click is the target, with each click's pool label."""

    sessions: list
    labels: list
    config: SynthConfig = field(repr=False, default=None)

    def target_pools(self) -> list:
        return [lab[-1] for lab in self.labels]


def _weights(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def _draw(rng, pool, k, skew, exclude=()):
    w = _weights(len(pool), skew)
    keep = [j for j, i in enumerate(pool) if i not in exclude]
    p = w[keep]
    picks = rng.choice(len(keep), size=k, replace=False, p=p / p.sum())
    return [pool[keep[j]] for j in picks]


def _gap(rng, bounds) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def generate(config: SynthConfig) -> SynthCorpus:
    sessions, labels = [], []
    pools = config.interest_pools
    for idx in range(config.sessions):
        rng = np.random.default_rng([config.seed, idx])
        first, second = (int(p) for p in rng.choice(len(pools), size=2, replace=False))
        lo, hi = config.items_per_interest
        n1, n2 = (int(rng.integers(lo, hi + 1)) for _ in range(2))
        a = _draw(rng, pools[first], n1, config.skew)
        b = _draw(rng, pools[second], n2, config.skew)

        if config.chunked:
            order = [(i, first) for i in a] + [(i, second) for i in b]
            long_after = len(a) - 1
        else:
            order = []
            for k in range(max(n1, n2)):
                if k < n1:
                    order.append((a[k], first))
                if k < n2:
                    order.append((b[k], second))
            long_after = None

        if config.target_rule == "latest-interest":
            tpool = order[-1][1]
        else:
            tpool = (first, second)[int(rng.integers(2))]
        seen = {i for i, _ in order}
        target = _draw(rng, pools[tpool], 1, config.skew, exclude=seen)[0]
        order.append((target, tpool))

        t = idx * config.session_spacing
        stamps = []
        for k in range(len(order)):
            if k:
                t += _gap(rng, config.inter_gap if k - 1 == long_after else config.intra_gap)
            stamps.append(t)
        sessions.append(SessionRecord(f"s{idx}", [i for i, _ in order], stamps))
        labels.append([p for _, p in order])
    return SynthCorpus(sessions, labels, config)


def to_split(corpus: SynthCorpus, test_frac: float = 0.1) -> DatasetSplit:
    """Prefix-augmented train part; the test part keeps only the final target."""
    vocab = {str(i): i for p in corpus.config.interest_pools for i in p}
    as_str = [SessionRecord(s.session_id, [str(i) for i in s.items], s.timestamps) for s in corpus.sessions]
    return make_split(as_str, test_frac, vocabulary=vocab, augment_test=False)


def oracle_scores(corpus: SynthCorpus, sessions_idx, n_items: int) -> np.ndarray:
    """Scores that put the target pool's unseen items first, by pool popularity."""
    cfg = corpus.config
    out = np.zeros((len(sessions_idx), n_items))
    for row, k in enumerate(sessions_idx):
        s = corpus.sessions[k]
        pool = cfg.interest_pools[corpus.labels[k][-1]]
        seen = set(s.items[:-1])
        w = _weights(len(pool), cfg.skew)
        for j, item in enumerate(pool):
            if item not in seen:
                out[row, item] = 1.0 + w[j]
    return out


def write_labels(corpus: SynthCorpus, path) -> None:
    lines = [f"{s.session_id}\t{' '.join(map(str, lab))}" for s, lab in zip(corpus.sessions, corpus.labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            sid, labs = line.split("\t")
            out[sid] = [int(x) for x in labs.split()]
    return out
