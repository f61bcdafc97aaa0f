"""Losses, Adam and the epoch loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .graph import ConfigError, GraphBatch
from .metrics import DEFAULT_KS, metrics_from_ranks, target_ranks
from .model import ModelConfig, ModelParams, forward, session_graphs

log = logging.getLogger(__name__)

LOG_EPS = 1e-8
NORM_EPS = 1e-12

TUNING_GRID = {
    "learning_rate": (0.001, 0.01, 0.1),
    "lr_decay": (0.01, 0.05, 0.1, 0.5),
    "decay_step": (2, 3, 4),
    "lam": (1, 3, 10, 30),
}


class NumericError(FloatingPointError):
    pass


class TrainingDiverged(NumericError):
    """Loss became non-finite; ``params`` holds the last good epoch's weights."""

    def __init__(self, message, params: Optional[ModelParams], history: list):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    lr_decay: float = 0.1
    decay_step: int = 3
    batch_size: int = 64
    epochs: int = 30
    lam: float = 1.0
    seed: int = 7
    patience: Optional[int] = None
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_decay <= 0:
            raise ConfigError("learning_rate and lr_decay must be positive")
        if self.decay_step < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("decay_step and batch_size must be >= 1, epochs >= 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        for key, values in self.grid.items():
            if key not in TUNING_GRID:
                raise ConfigError(f"no grid defined for {key!r}")
            bad = [v for v in values if v not in TUNING_GRID[key]]
            if bad:
                raise ConfigError(f"grid values {bad} for {key} outside {TUNING_GRID[key]}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.decay_step)

    def grid_configs(self) -> list:
        if not self.grid:
            return [self]
        keys = sorted(self.grid)
        out = []
        for combo in product(*(self.grid[k] for k in keys)):
            d = {f.name: getattr(self, f.name) for f in fields(self)}
            d.update(dict(zip(keys, combo)), grid={})
            out.append(TrainConfig(**d))
        return out


# ------------------------------------------------------------------ losses


def interest_pairs(num_graphs: int, H: int):
    """Global row indices ``(i, j, graph)`` of every interest pair ``i < j``."""
    a, b = np.triu_indices(H, k=1)
    base = np.arange(num_graphs)[:, None] * H
    return (base + a).ravel(), (base + b).ravel(), np.repeat(np.arange(num_graphs), len(a))


def corr_loss(interests, num_graphs: int = 1) -> Tensor:
    """Sum of pairwise cosine similarities between a session's interests.

    ``interests`` is an :class:`InterestState` or a ``(num_graphs * H, d)``
    embedding tensor; the result has one entry per graph.
    """
    emb = getattr(interests, "embedding", interests)
    emb = ag.as_tensor(emb)
    H = emb.shape[0] // num_graphs
    if H < 1:
        raise ConfigError("need at least one interest")
    if H == 1:
        return ag.Tensor(np.zeros(num_graphs))
    i, j, g = interest_pairs(num_graphs, H)
    unit = ag.l2_normalize_rows(emb, NORM_EPS)
    cos = ag.tsum(ag.mul(ag.gather(unit, i), ag.gather(unit, j)), axis=1)
    return ag.segment_sum(cos, g, num_graphs)


def total_loss(scores, targets, corr=None, lam: float = 0.0) -> Tensor:
    """Binary cross-entropy over the full vocabulary plus ``lam * corr``, per example.

    Returns a vector with one loss per row of ``scores``.
    """
    scores = ag.as_tensor(scores)
    if not np.all(np.isfinite(scores.data)):
        raise NumericError("non-finite scores")
    targets = np.atleast_1d(np.asarray(targets))
    if scores.ndim == 1:
        scores = ag.reshape(scores, (1, -1))
    onehot = np.zeros(scores.shape)
    onehot[np.arange(len(targets)), targets] = 1.0
    y = ag.clip(scores, LOG_EPS, 1.0 - LOG_EPS)
    pos = ag.mul(ag.log(y), onehot)
    negs = ag.mul(ag.log(ag.sub(1.0, y)), 1.0 - onehot)
    ce = ag.neg(ag.tsum(ag.add(pos, negs), axis=1))
    if corr is not None and lam:
        ce = ag.add(ce, ag.scale(corr, lam))
    return ce


def batch_loss(params: ModelParams, batch: GraphBatch, targets, lam: float):
    """Mean total loss over the batch, plus the forward result."""
    result = forward(batch, params)
    use_corr = lam > 0 and not params.config.ablations.disable_corr_loss
    corr = corr_loss(result.interests, batch.num_graphs) if use_corr else None
    per = total_loss(result.scores, targets, corr, lam if use_corr else 0.0)
    return ag.mean(per), result


# --------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: ModelParams, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -------------------------------------------------------------- evaluation


def score_sessions(params: ModelParams, sessions, batch_size: int = 256, graphs=None) -> np.ndarray:
    """Score matrix ``(len(sessions), n_items)``; no tape is recorded."""
    graphs = session_graphs(sessions, params.config) if graphs is None else graphs
    out = []
    for lo in range(0, len(graphs), batch_size):
        batch = GraphBatch.collate(graphs[lo : lo + batch_size])
        out.append(forward(batch, params).scores.data)
    if not out:
        return np.zeros((0, params.config.n_items))
    return np.concatenate(out)


def evaluate(params: ModelParams, examples, ks=DEFAULT_KS, batch_size: int = 256, graphs=None) -> dict:
    prefixes = [p for p, _ in examples]
    targets = np.array([t for _, t in examples])
    scores = score_sessions(params, prefixes, batch_size, graphs)
    return metrics_from_ranks(target_ranks(scores, targets), ks)


# -------------------------------------------------------------- the loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: Optional[int] = None


def train_epochs(
    examples,
    model_config: ModelConfig,
    config: TrainConfig,
    validation=None,
    params: Optional[ModelParams] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> TrainResult:
    """Train on ``(prefix, target)`` pairs with shuffled mini-batches.

    Each history record holds ``epoch``, ``loss`` (mean over the epoch),
    ``lr``, ``wall_time`` and, with a validation split, ``H@k``/``N@k``.
    ``epoch`` 0 is the loss of the initial weights before any update.
    """
    if not examples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = ModelParams.initialize(model_config, rng)
    graphs = session_graphs([p for p, _ in examples], model_config)
    targets = np.array([t for _, t in examples])
    val_graphs = session_graphs([p for p, _ in validation], model_config) if validation else None
    opt = Adam(params, config.learning_rate)
    history: list = []
    good = params.copy()
    best_score, best_epoch, stale = -1.0, None, 0
    n = len(graphs)

    def run_epoch(epoch: int, update: bool) -> dict:
        start = time.perf_counter()
        order = rng.permutation(n) if update else np.arange(n)
        total = 0.0
        lr = config.lr_at(epoch - 1) if update else config.learning_rate
        opt.lr = lr
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = GraphBatch.collate([graphs[i] for i in idx])
            try:
                if update:
                    params.zero_grad()
                    with Tape() as tape:
                        loss, _ = batch_loss(params, batch, targets[idx], config.lam)
                    tape.backward(loss)
                    opt.step()
                else:
                    loss, _ = batch_loss(params, batch, targets[idx], config.lam)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", good, history) from None
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}", good, history)
            total += value * len(idx)
        rec = {"epoch": epoch, "loss": total / n, "lr": lr}
        if validation:
            rec.update(evaluate(params, validation, ks, graphs=val_graphs))
        rec["wall_time"] = time.perf_counter() - start
        return rec

    history.append(run_epoch(0, update=False))
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, config.epochs + 1):
        rec = run_epoch(epoch, update=True)
        history.append(rec)
        good = params.copy()
        log.info("epoch %d loss %.6f", epoch, rec["loss"])
        if on_epoch:
            on_epoch(rec)
        if validation and config.patience is not None:
            key = f"H@{max(ks)}"
            if rec[key] > best_score:
                best_score, best_epoch, stale = rec[key], epoch, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return TrainResult(params, history, best_epoch)


def write_history(history: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path) -> list:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


# -------------------------------------------------------------- config file


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
