"""Temporal multi-interest GNN forward pass.

All functions operate on a :class:`~tmignn.graph.GraphBatch`, so one call
handles a whole mini-batch of sessions. Item states are ``(num_nodes, d)``
tensors and interest states ``(num_graphs * H, d)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import MAX_STEP
from .graph import ConfigError, GraphBatch, build_graph

CHECKPOINT_FORMAT = "tmignn-checkpoint"
CHECKPOINT_VERSION = 1


class VocabularyError(IndexError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Ablations:
    disable_vv_time: bool = False
    disable_uv_time: bool = False
    disable_last_time: bool = False
    use_first_time: bool = False
    single_interest: bool = False
    disable_corr_loss: bool = False

    def __post_init__(self):
        if self.disable_last_time and self.use_first_time:
            raise ConfigError("disable_last_time and use_first_time contradict each other")
        if self.single_interest and self.disable_uv_time:
            raise ConfigError("disable_uv_time has nothing to act on with single_interest")

    @classmethod
    def from_names(cls, names) -> "Ablations":
        """Build from table labels such as ``"-V2V"`` or ``"First"``."""
        flags = {}
        for name in names:
            if name not in ABLATION_LABELS:
                raise ConfigError(f"unknown ablation {name!r}")
            flags[ABLATION_LABELS[name]] = True
        return cls(**flags)


ABLATION_LABELS = {
    "-V2V": "disable_vv_time",
    "-U2V": "disable_uv_time",
    "-Last": "disable_last_time",
    "First": "use_first_time",
    "-Interest": "single_interest",
    "-Loss": "disable_corr_loss",
}


@dataclass(frozen=True)
class ModelConfig:
    n_items: int
    dim: int = 128
    n_interests: int = 2
    n_layers: int = 3
    max_step: int = MAX_STEP
    bucket_width: float = 8
    bidirectional: bool = True
    leaky_slope: float = 0.01
    compactness_eps: float = 1e-3
    init_std: float = 0.1
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if self.n_interests < 1:
            raise ConfigError("n_interests must be >= 1")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.dim < 1 or self.n_items < 1:
            raise ConfigError("dim and n_items must be positive")
        if self.bucket_width <= 0:
            raise ConfigError("bucket_width must be positive")

    @property
    def graph_interests(self) -> int:
        """Interest nodes actually placed in each graph."""
        return 1 if self.ablations.single_interest else self.n_interests

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablations"] = asdict(self.ablations)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        abl = Ablations(**d.pop("ablations", {}))
        known = {f.name for f in fields(cls)}
        return cls(ablations=abl, **{k: v for k, v in d.items() if k in known})


def parameter_shapes(cfg: ModelConfig) -> dict:
    d, abl = cfg.dim, cfg.ablations
    shapes = {
        "item_embeddings": (cfg.n_items, d),
        "temporal_table": (cfg.max_step + 1, d),
        "interval_mlp.w1": (d, d),
        "interval_mlp.b1": (d,),
        "interval_mlp.w2": (1, d),
        "interval_mlp.b2": (1,),
    }
    if abl.disable_vv_time:
        shapes["vv_constant"] = (1,)
    for k in range(cfg.n_layers):
        for name in ag.GRU_PARAM_NAMES:
            shapes[f"layer{k}.gru.{name}"] = (d,) if name.startswith("b_") else (d, d)
        if abl.single_interest:
            continue
        shapes[f"layer{k}.vu.w_u"] = (1, d)
        shapes[f"layer{k}.vu.w_v"] = (1, d)
        shapes[f"layer{k}.vu.w_trans"] = (d, d)
        shapes[f"layer{k}.uv.w_v"] = (d, d)
        shapes[f"layer{k}.uv.w_u"] = (d, d)
        if not abl.disable_uv_time:
            shapes[f"layer{k}.uv.w_t"] = (1, d)
            shapes[f"layer{k}.uv.b_t"] = (1,)
        shapes[f"layer{k}.uv.w_trans"] = (d, d)
    shapes.update(
        {
            "readout.w_gated": (1, 2 * d),
            "readout.w_0": (d, 2 * d),
            "readout.b_0": (d,),
            "readout.w_1": (d, d),
            "readout.w_2": (d, d),
            "readout.q": (1, d),
            "readout.b": (d,),
            "readout.w_3": (d, 2 * d),
        }
    )
    if abl.single_interest:
        shapes["readout.query"] = (1, d)
    return shapes


class ModelParams:
    """Named learnable tensors for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: dict):
        expected = parameter_shapes(config)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise CheckpointError(
                    f"parameter {name} has shape {tuple(tensors[name].shape)}, expected {shape}"
                )
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    @classmethod
    def initialize(cls, config: ModelConfig, seed=None) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {
            name: Tensor(rng.normal(0.0, config.init_std, size=shape), requires_grad=True, name=name)
            for name, shape in parameter_shapes(config).items()
        }
        return cls(config, tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def layer(self, k: int, group: str) -> dict:
        prefix = f"layer{k}.{group}."
        return {n[len(prefix):]: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
        )


@dataclass
class InterestState:
    """Interest embeddings with their timeline center and compactness (bucket units)."""

    embedding: Tensor
    center: np.ndarray
    compactness: np.ndarray


@dataclass
class ForwardResult:
    scores: Tensor
    session_vectors: Tensor
    interests: InterestState
    items: Tensor
    alphas: list = field(default_factory=list)
    interest_trace: list = field(default_factory=list)
    betas: list = field(default_factory=list)


def session_graphs(sessions, cfg: ModelConfig) -> list:
    return [
        build_graph(s, cfg.graph_interests, cfg.bucket_width, cfg.bidirectional, cfg.max_step)
        for s in sessions
    ]


# ----------------------------------------------------------------- layers


def init_nodes(batch: GraphBatch, params: ModelParams):
    """Embedding lookup for item nodes; interests start at the per-session mean."""
    cfg = params.config
    if batch.items.size and (batch.items.min() < 0 or batch.items.max() >= cfg.n_items):
        raise VocabularyError(f"item index outside vocabulary of {cfg.n_items}")
    v0 = ag.gather(params["item_embeddings"], batch.items)
    counts = np.bincount(batch.node_graph, minlength=batch.num_graphs).astype(float)
    per_graph = ag.mul(ag.segment_sum(v0, batch.by_graph, batch.num_graphs), (1.0 / counts)[:, None])
    owner = np.repeat(np.arange(batch.num_graphs), batch.H)
    u0 = ag.gather(per_graph, owner)

    rel = batch.relative_steps.astype(float)
    center_g = np.bincount(batch.node_graph, weights=rel, minlength=batch.num_graphs) / counts
    spread = np.abs(rel - center_g[batch.node_graph])
    comp_g = np.bincount(batch.node_graph, weights=spread, minlength=batch.num_graphs) / counts
    return v0, InterestState(u0, center_g[owner], comp_g[owner])


def item_attention(batch: GraphBatch, params: ModelParams) -> Tensor:
    """Interval-based attention ``e`` over each node's incoming item edges."""
    cfg = params.config
    if cfg.ablations.disable_vv_time:
        logits = ag.add(np.zeros(len(batch.vv_src)), params["vv_constant"])
    else:
        # score every bucket once, then look edges up
        table = params["temporal_table"]
        hidden = ag.leaky_relu(
            ag.linear(table, params["interval_mlp.w1"], params["interval_mlp.b1"]), cfg.leaky_slope
        )
        per_bucket = ag.linear(hidden, params["interval_mlp.w2"], params["interval_mlp.b2"])
        logits = ag.reshape(ag.gather(per_bucket, batch.vv_interval), (-1,))
    groups = batch.vv_groups
    return ag.segment_softmax(logits, groups, groups.n)


def item_propagation_layer(batch: GraphBatch, v: Tensor, params: ModelParams, k: int) -> Tensor:
    """Interval-attended neighbor aggregation followed by a GRU update.

    Nodes without item neighbors keep their state.
    """
    if len(batch.vv_src) == 0:
        return v
    e = item_attention(batch, params)
    msg = ag.mul(ag.reshape(e, (-1, 1)), ag.gather(v, batch.vv_by_src))
    m = ag.segment_sum(msg, batch.vv_by_dst, batch.num_nodes)
    h = ag.gru_cell(v, m, params.layer(k, "gru"))
    mask = batch.has_neighbors.astype(float)[:, None]
    return ag.add(v, ag.mul(ag.sub(h, v), mask))


def interest_extraction_layer(
    batch: GraphBatch, v: Tensor, interests: InterestState, params: ModelParams, k: int
):
    """Soft-assign items to each interest; returns ``(new state, alpha)``.

    ``alpha`` is ordered like ``batch.pair_item`` / ``batch.pair_interest``.
    Center and compactness are weighted by ``alpha``; compactness measures
    spread around the previous center.
    """
    p = params.layer(k, "vu")
    su = ag.linear(interests.embedding, p["w_u"])
    sv = ag.linear(v, p["w_v"])
    logits = ag.leaky_relu(
        ag.add(ag.gather(su, batch.by_interest), ag.gather(sv, batch.by_item)),
        params.config.leaky_slope,
    )
    alpha = ag.segment_softmax(ag.reshape(logits, (-1,)), batch.by_interest, batch.num_interests)
    tv = ag.gather(ag.linear(v, p["w_trans"]), batch.by_item)
    u_new = ag.segment_sum(ag.mul(ag.reshape(alpha, (-1, 1)), tv), batch.by_interest, batch.num_interests)

    a = alpha.data
    rel = batch.relative_steps[batch.pair_item].astype(float)
    center = batch.by_interest.sum(a * rel)
    comp = batch.by_interest.sum(a * np.abs(rel - interests.center[batch.pair_interest]))
    return InterestState(u_new, center, comp), a


def interest_distance_steps(batch: GraphBatch, interests: InterestState, cfg: ModelConfig) -> np.ndarray:
    """Bucketed timeline distance between each item and each interest of its session."""
    rel = batch.relative_steps[batch.pair_item].astype(float)
    center = interests.center[batch.pair_interest]
    comp = np.maximum(interests.compactness[batch.pair_interest], cfg.compactness_eps)
    return np.clip(np.floor(np.abs(center - rel) / comp), 0, cfg.max_step).astype(np.int64)


def interest_attaching_layer(
    batch: GraphBatch, v: Tensor, interests: InterestState, params: ModelParams, k: int
):
    """Scatter interests back to items; returns ``(item states, beta)``."""
    cfg = params.config
    p = params.layer(k, "uv")
    u = interests.embedding
    left = ag.gather(ag.linear(v, p["w_v"]), batch.by_item)
    right = ag.gather(ag.linear(u, p["w_u"]), batch.by_interest)
    score = ag.tsum(ag.mul(left, right), axis=1)
    if not cfg.ablations.disable_uv_time:
        steps = interest_distance_steps(batch, interests, cfg)
        per_bucket = ag.linear(params["temporal_table"], p["w_t"], p["b_t"])
        score = ag.add(score, ag.reshape(ag.gather(per_bucket, steps), (-1,)))
    beta = ag.segment_softmax(ag.leaky_relu(score, cfg.leaky_slope), batch.by_item, batch.num_nodes)
    tu = ag.gather(ag.linear(u, p["w_trans"]), batch.by_interest)
    out = ag.segment_sum(ag.mul(ag.reshape(beta, (-1, 1)), tu), batch.by_item, batch.num_nodes)
    return out, beta.data


def combine_and_stack(batch: GraphBatch, params: ModelParams, n_layers: Optional[int] = None):
    """Run the synchronous three-relation layers and the initial/final gate.

    Returns ``(gated item states, final InterestState, alphas, interest trace, betas)``.
    """
    cfg = params.config
    K = cfg.n_layers if n_layers is None else n_layers
    if K < 1:
        raise ConfigError("need at least one layer")
    slope = cfg.leaky_slope
    v0, interests = init_nodes(batch, params)
    v = v0
    alphas, betas, trace = [], [], [interests]
    for k in range(K):
        v_vv = item_propagation_layer(batch, v, params, k)
        if cfg.ablations.single_interest:
            v = ag.leaky_relu(v_vv, slope)
            continue
        new_interests, alpha = interest_extraction_layer(batch, v, interests, params, k)
        v_uv, beta = interest_attaching_layer(batch, v, interests, params, k)
        v = ag.scale(ag.leaky_relu(ag.add(v_uv, v_vv), slope), 0.5)
        interests = InterestState(
            ag.leaky_relu(new_interests.embedding, slope),
            new_interests.center,
            new_interests.compactness,
        )
        alphas.append(alpha)
        betas.append(beta)
        trace.append(interests)
    g = ag.sigmoid(ag.linear(ag.concat([v0, v], axis=1), params["readout.w_gated"]))
    gated = ag.add(v, ag.mul(g, ag.sub(v0, v)))
    return gated, interests, alphas, trace, betas


def session_readout(batch: GraphBatch, v: Tensor, interests: InterestState, params: ModelParams) -> Tensor:
    """One ``d``-wide session vector per interest, rows ordered like interests."""
    cfg = params.config
    abl = cfg.ablations
    d = cfg.dim
    if abl.disable_last_time:
        tz = np.zeros((batch.num_nodes, d))
    else:
        steps = batch.relative_steps if abl.use_first_time else batch.last_steps
        tz = ag.gather(params["temporal_table"], steps)
    z = ag.tanh(ag.linear(ag.concat([v, tz], axis=1), params["readout.w_0"], params["readout.b_0"]))
    if abl.single_interest:
        uh = ag.gather(params["readout.query"], np.zeros(batch.num_interests, dtype=np.int64))
    else:
        uh = interests.embedding
    pre = ag.add(
        ag.add(
            ag.gather(ag.linear(z, params["readout.w_1"]), batch.by_item),
            ag.gather(ag.linear(uh, params["readout.w_2"]), batch.by_interest),
        ),
        params["readout.b"],
    )
    gamma = ag.linear(ag.sigmoid(pre), params["readout.q"])
    s_g = ag.segment_sum(ag.mul(gamma, ag.gather(v, batch.by_item)), batch.by_interest, batch.num_interests)
    return ag.linear(ag.concat([s_g, uh], axis=1), params["readout.w_3"])


def predict_scores(session_vectors: Tensor, params: ModelParams, H: int) -> Tensor:
    """Per-interest softmax over normalized item embeddings, max over interests."""
    if H < 1:
        raise ConfigError("H must be >= 1")
    table = ag.l2_normalize_rows(params["item_embeddings"], 1e-12)
    probs = ag.softmax(ag.matmul(session_vectors, ag.transpose(table)), axis=1)
    n = session_vectors.shape[0] // H
    return ag.max_axis(ag.reshape(probs, (n, H, -1)), axis=1)


def forward(batch: GraphBatch, params: ModelParams) -> ForwardResult:
    items, interests, alphas, trace, betas = combine_and_stack(batch, params)
    sessions = session_readout(batch, items, interests, params)
    scores = predict_scores(sessions, params, batch.H)
    return ForwardResult(scores, sessions, interests, items, alphas, trace, betas)


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, params: ModelParams, extra: Optional[dict] = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "shapes": {n: list(t.shape) for n, t in params.items()},
        "extra": extra or {},
    }
    arrays = {f"param/{n}": t.data for n, t in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Returns ``(ModelParams, extra metadata)``; rejects version or shape mismatches."""
    try:
        with np.load(Path(path), allow_pickle=False) as npz:
            meta = json.loads(str(npz["__meta__"]))
            arrays = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint {meta.get('format')!r} version {meta.get('version')!r}"
        )
    config = ModelConfig.from_dict(meta["config"])
    for name, shape in meta["shapes"].items():
        if name in arrays and list(arrays[name].shape) != shape:
            raise CheckpointError(f"stored array {name} does not match recorded shape {shape}")
    tensors = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}
    return ModelParams(config, tensors), meta.get("extra", {})
