"""Restart selection, the ablation matrix and the timestamp-sensitivity probe."""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .data import SessionRecord
from .graph import GraphBatch
from .metrics import DEFAULT_KS, format_report, metrics_from_ranks, popularity_baseline, target_ranks
from .model import ABLATION_LABELS, Ablations, ModelConfig, ModelParams, forward, session_graphs
from .train import TrainConfig, TrainResult, evaluate, train_epochs

ABLATION_ROWS = ("full", "-V2V", "-U2V", "-Last", "First", "-Interest", "-Loss")


def best_of_restarts(
    train, model_config: ModelConfig, train_config: TrainConfig, restarts: int = 3
) -> TrainResult:
    """Train ``restarts`` times with seeds ``seed, seed+1, ...``; keep the lowest final training loss."""
    best = None
    for r in range(restarts):
        cfg = dataclasses.replace(train_config, seed=train_config.seed + r)
        result = train_epochs(train, model_config, cfg)
        if best is None or result.history[-1]["loss"] < best.history[-1]["loss"]:
            best = result
    return best


def popularity_metrics(split, ks=DEFAULT_KS) -> dict:
    ranker = popularity_baseline(split.train, split.item_count)
    targets = np.array([t for _, t in split.test])
    return metrics_from_ranks(target_ranks(ranker.scores(len(targets)), targets), ks)


def ablation_config(base: ModelConfig, row: str) -> ModelConfig:
    if row == "full":
        return dataclasses.replace(base, ablations=Ablations())
    if row not in ABLATION_LABELS:
        raise ValueError(f"unknown ablation row {row!r}")
    return dataclasses.replace(base, ablations=Ablations.from_names([row]))


def run_ablations(
    split,
    base: ModelConfig,
    train_config: TrainConfig,
    rows: Sequence[str] = ABLATION_ROWS,
    ks=DEFAULT_KS,
    progress=None,
) -> dict:
    """Train one model per ablation row and evaluate each on the test part."""
    out = {}
    for row in rows:
        cfg = ablation_config(base, row)
        tc = train_config
        if row == "-Loss":
            tc = dataclasses.replace(train_config, lam=0.0)
        result = train_epochs(split.train, cfg, tc)
        out[row] = evaluate(result.params, split.test, ks)
        if progress:
            progress(row, out[row])
    return out


def ablation_table(results: dict, ks=DEFAULT_KS) -> str:
    return format_report(results, ks)


def with_ablations(params: ModelParams, names: Sequence[str], seed=0) -> ModelParams:
    """The same weights under an ablated config; parameters only the ablation has are freshly drawn."""
    cfg = dataclasses.replace(params.config, ablations=Ablations.from_names(names))
    fresh = ModelParams.initialize(cfg, seed)
    tensors = {}
    for name, t in fresh.items():
        src = params.tensors.get(name)
        tensors[name] = ag.Tensor(src.data.copy(), requires_grad=True, name=name) if src is not None else t
    return ModelParams(cfg, tensors)


def temporal_sensitivity(
    params: ModelParams,
    items: Sequence[int],
    stamps_a: Sequence[float],
    stamps_b: Sequence[float],
) -> float:
    """Max-abs difference between scores of one item sequence under two timelines."""
    a = SessionRecord("a", list(items), list(stamps_a))
    b = SessionRecord("b", list(items), list(stamps_b))
    batch = GraphBatch.collate(session_graphs([a, b], params.config))
    scores = forward(batch, params).scores.data
    return float(np.max(np.abs(scores[0] - scores[1])))


def recoverability(
    split,
    dim: int = 32,
    layers: int = 2,
    train_config: Optional[TrainConfig] = None,
    restarts: int = 3,
    interest_counts: Sequence[int] = (2, 1),
    ks=(10, 20),
) -> dict:
    """Popularity vs. best-of-restarts models with each interest count."""
    tc = train_config or TrainConfig()
    out = {"popularity": popularity_metrics(split, ks)}
    for H in interest_counts:
        cfg = ModelConfig(n_items=split.item_count, dim=dim, n_interests=H, n_layers=layers)
        best = best_of_restarts(split.train, cfg, tc, restarts)
        out[f"H={H}"] = evaluate(best.params, split.test, ks)
    return out
