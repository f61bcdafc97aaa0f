"""scikit-learn style front end.

``X`` is a sequence of session prefixes (``SessionRecord`` or
``(items, timestamps)`` pairs with dense integer item ids) and ``y`` the
next-item targets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .graph import GraphBatch
from .metrics import DEFAULT_KS, metrics_from_ranks, popularity_baseline, rank_items, target_ranks
from .model import (
    ABLATION_LABELS,
    Ablations,
    ModelConfig,
    ModelParams,
    forward,
    load_checkpoint,
    save_checkpoint,
    session_graphs,
)
from .train import TrainConfig, score_sessions, train_epochs
from .validation import check_is_fitted, check_sessions, check_targets


class TMIGNNRecommender(BaseEstimator):
    """Next-item recommender over timestamped sessions.

    Parameters mirror :class:`~tmignn.model.ModelConfig` and
    :class:`~tmignn.train.TrainConfig`; ``ablations`` takes table labels
    such as ``("-V2V", "-Loss")``.
    """

    def __init__(
        self,
        n_items=None,
        dim=128,
        n_interests=2,
        n_layers=3,
        bucket_width=8,
        max_step=300,
        bidirectional=True,
        learning_rate=0.001,
        lr_decay=0.1,
        decay_step=3,
        batch_size=64,
        epochs=30,
        lam=1.0,
        random_state=7,
        ablations=(),
        patience=None,
    ):
        self.n_items = n_items
        self.dim = dim
        self.n_interests = n_interests
        self.n_layers = n_layers
        self.bucket_width = bucket_width
        self.max_step = max_step
        self.bidirectional = bidirectional
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.decay_step = decay_step
        self.batch_size = batch_size
        self.epochs = epochs
        self.lam = lam
        self.random_state = random_state
        self.ablations = ablations
        self.patience = patience

    def _model_config(self, n_items: int) -> ModelConfig:
        return ModelConfig(
            n_items=n_items,
            dim=self.dim,
            n_interests=self.n_interests,
            n_layers=self.n_layers,
            max_step=self.max_step,
            bucket_width=self.bucket_width,
            bidirectional=self.bidirectional,
            ablations=Ablations.from_names(self.ablations),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            decay_step=self.decay_step,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lam=self.lam,
            seed=self.random_state,
            patience=self.patience,
        )

    def fit(self, X, y, validation=None, on_epoch=None):
        sessions = check_sessions(X)
        n_items = self.n_items
        if n_items is None:
            n_items = 1 + max(max(max(s.items) for s in sessions), int(np.max(y)))
        check_sessions(sessions, n_items)
        y = check_targets(y, len(sessions), n_items)
        val = None
        if validation is not None:
            vX, vy = validation
            vs = check_sessions(vX, n_items)
            val = list(zip(vs, check_targets(vy, len(vs), n_items)))
        result = train_epochs(
            list(zip(sessions, y)),
            self._model_config(n_items),
            self._train_config(),
            validation=val,
            on_epoch=on_epoch,
        )
        self.params_ = result.params
        self.history_ = result.history
        self.n_items_ = n_items
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-item scores; rows need not sum to one when ``n_interests > 1``."""
        check_is_fitted(self)
        return score_sessions(self.params_, check_sessions(X, self.n_items_))

    def predict(self, X, k: int = 20) -> np.ndarray:
        return rank_items(self.predict_proba(X))[:, :k]

    def evaluate(self, X, y, ks=DEFAULT_KS) -> dict:
        scores = self.predict_proba(X)
        y = check_targets(y, len(scores), self.n_items_)
        return metrics_from_ranks(target_ranks(scores, y), ks)

    def score(self, X, y, k: int = 20) -> float:
        return self.evaluate(X, y, ks=(k,))[f"H@{k}"]

    def explain(self, session):
        """Scores plus the last layer's item-to-interest weights, shaped ``(H, N)``.

        Columns follow the session's distinct items in first-click order.
        """
        check_is_fitted(self)
        s = check_sessions([session], self.n_items_)[0]
        graphs = session_graphs([s], self.params_.config)
        result = forward(GraphBatch.collate(graphs), self.params_)
        g = graphs[0]
        H = g.interest_count
        if result.alphas:
            alpha = result.alphas[-1].reshape(g.num_items, H).T
        else:
            alpha = np.ones((H, g.num_items)) / g.num_items
        return result.scores.data[0], g.item_nodes, alpha

    def save(self, path, extra=None):
        check_is_fitted(self)
        save_checkpoint(path, self.params_, extra)

    @classmethod
    def load(cls, path) -> "TMIGNNRecommender":
        params, _ = load_checkpoint(path)
        cfg = params.config
        abl = [label for label, flag in ABLATION_LABELS.items() if getattr(cfg.ablations, flag)]
        est = cls(
            n_items=cfg.n_items,
            dim=cfg.dim,
            n_interests=cfg.n_interests,
            n_layers=cfg.n_layers,
            bucket_width=cfg.bucket_width,
            max_step=cfg.max_step,
            bidirectional=cfg.bidirectional,
            ablations=tuple(abl),
        )
        est.params_ = params
        est.n_items_ = cfg.n_items
        return est

    @classmethod
    def from_params(cls, params: ModelParams) -> "TMIGNNRecommender":
        est = cls(n_items=params.config.n_items)
        est.params_ = params
        est.n_items_ = params.config.n_items
        return est


class PopularityRecommender(BaseEstimator):
    """Ranks every item by how often it was clicked in training."""

    def __init__(self, n_items=None):
        self.n_items = n_items

    def fit(self, X, y):
        sessions = check_sessions(X)
        y = np.asarray(y)
        n_items = self.n_items or 1 + max(max(max(s.items) for s in sessions), int(y.max()))
        y = check_targets(y, len(sessions), n_items)
        self.ranker_ = popularity_baseline(list(zip(sessions, y)), n_items)
        self.n_items_ = n_items
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "ranker_")
        sessions = check_sessions(X, self.n_items_)
        counts = self.ranker_.counts
        return np.tile(counts / max(counts.sum(), 1.0), (len(sessions), 1))

    def predict(self, X, k: int = 20) -> np.ndarray:
        return rank_items(self.predict_proba(X))[:, :k]

    def evaluate(self, X, y, ks=DEFAULT_KS) -> dict:
        scores = self.predict_proba(X)
        y = check_targets(y, len(scores), self.n_items_)
        return metrics_from_ranks(target_ranks(scores, y), ks)

    def score(self, X, y, k: int = 20) -> float:
        return self.evaluate(X, y, ks=(k,))[f"H@{k}"]
