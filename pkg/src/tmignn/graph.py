"""Per-session multi-interest graphs and their batched disjoint union."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .autograd import Segments
from .data import MAX_STEP, SessionRecord, bucket_interval


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MultiInterestGraph:
    """Item nodes, ``interest_count`` interest nodes and three typed edge lists.

    ``edges_vv`` rows are ``(src, dst, interval bucket)``; ``edges_vu`` rows are
    ``(item, interest)`` and ``edges_uv`` rows ``(interest, item)``.
    """

    item_nodes: np.ndarray
    interest_count: int
    relative_steps: np.ndarray
    last_steps: np.ndarray
    edges_vv: np.ndarray
    edges_vu: np.ndarray
    edges_uv: np.ndarray

    @property
    def num_items(self) -> int:
        return len(self.item_nodes)


def build_graph(
    session: SessionRecord,
    H: int,
    bucket_width: float = 8,
    bidirectional: bool = True,
    max_step: int = MAX_STEP,
) -> MultiInterestGraph:
    if H < 1:
        raise ConfigError(f"interest count must be >= 1, got {H}")
    if len(session) < 1:
        raise ConfigError("cannot build a graph from an empty session")

    node_of: dict = {}
    for item in session.items:
        node_of.setdefault(item, len(node_of))
    positions = [node_of[i] for i in session.items]
    n = len(node_of)

    # latest occurrence wins for per-node timing
    latest = [0] * n
    for pos, node in enumerate(positions):
        latest[node] = pos
    t = session.timestamps
    rel = np.array([bucket_interval(t[p], t[0], bucket_width, max_step) for p in latest], dtype=np.int64)
    last = np.array([bucket_interval(t[-1], t[p], bucket_width, max_step) for p in latest], dtype=np.int64)

    edges: dict = {}
    for k in range(len(positions) - 1):
        src, dst = positions[k], positions[k + 1]
        if src != dst and (src, dst) not in edges:
            edges[(src, dst)] = bucket_interval(t[k], t[k + 1], bucket_width, max_step)
    if bidirectional:
        for (src, dst), step in list(edges.items()):
            edges.setdefault((dst, src), step)
    vv = sorted((d, s, step) for (s, d), step in edges.items())
    edges_vv = np.array([(s, d, step) for d, s, step in vv], dtype=np.int64).reshape(-1, 3)

    items = np.repeat(np.arange(n), H)
    interests = np.tile(np.arange(H), n)
    return MultiInterestGraph(
        item_nodes=np.array(list(node_of), dtype=np.int64),
        interest_count=H,
        relative_steps=rel,
        last_steps=last,
        edges_vv=edges_vv,
        edges_vu=np.stack([items, interests], axis=1),
        edges_uv=np.stack([interests, items], axis=1),
    )


def dump_graph(graph: MultiInterestGraph) -> str:
    """Plain-text edge lists, one block per relation."""
    out = [f"items {' '.join(map(str, graph.item_nodes))}", f"interests {graph.interest_count}"]
    out.append(f"relative_steps {' '.join(map(str, graph.relative_steps))}")
    out.append(f"last_steps {' '.join(map(str, graph.last_steps))}")
    out.append("[v->v] src dst interval")
    out += [f"{s} {d} {t}" for s, d, t in graph.edges_vv]
    out.append("[v->u] item interest")
    out += [f"{i} {h}" for i, h in graph.edges_vu]
    out.append("[u->v] interest item")
    out += [f"{h} {i}" for h, i in graph.edges_uv]
    return "\n".join(out) + "\n"


@dataclass
class GraphBatch:
    """Disjoint union of graphs sharing one interest count.

    Node indices are global over the batch; interest ``h`` of graph ``g`` is
    row ``g * H + h``. Pair arrays enumerate every (item node, interest)
    combination within a graph, item-major.
    """

    num_graphs: int
    H: int
    items: np.ndarray
    node_graph: np.ndarray
    relative_steps: np.ndarray
    last_steps: np.ndarray
    vv_src: np.ndarray
    vv_dst: np.ndarray
    vv_interval: np.ndarray
    pair_item: np.ndarray
    pair_interest: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.items)

    @property
    def num_interests(self) -> int:
        return self.num_graphs * self.H

    @cached_property
    def has_neighbors(self) -> np.ndarray:
        mask = np.zeros(self.num_nodes, dtype=bool)
        mask[self.vv_dst] = True
        return mask

    # cached index structures reused by every layer of a forward/backward pass

    @cached_property
    def by_item(self) -> Segments:
        """Pairs grouped by item node."""
        return Segments(self.pair_item, self.num_nodes)

    @cached_property
    def by_interest(self) -> Segments:
        """Pairs grouped by interest node."""
        return Segments(self.pair_interest, self.num_interests)

    @cached_property
    def vv_by_dst(self) -> Segments:
        return Segments(self.vv_dst, self.num_nodes)

    @cached_property
    def vv_by_src(self) -> Segments:
        return Segments(self.vv_src, self.num_nodes)

    @cached_property
    def vv_groups(self) -> Segments:
        """Item edges grouped by destination, over destinations that have edges."""
        uniq, compact = np.unique(self.vv_dst, return_inverse=True)
        return Segments(compact, len(uniq))

    @cached_property
    def by_graph(self) -> Segments:
        return Segments(self.node_graph, self.num_graphs)

    @classmethod
    def collate(cls, graphs: Sequence[MultiInterestGraph]) -> "GraphBatch":
        H = graphs[0].interest_count
        if any(g.interest_count != H for g in graphs):
            raise ConfigError("all graphs in a batch need the same interest count")
        sizes = np.array([g.num_items for g in graphs])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        vv = [g.edges_vv + np.array([off, off, 0]) for g, off in zip(graphs, offsets)]
        vv = np.concatenate(vv) if vv else np.zeros((0, 3), dtype=np.int64)
        pairs_i = [g.edges_vu[:, 0] + off for g, off in zip(graphs, offsets)]
        pairs_h = [g.edges_vu[:, 1] + k * H for k, g in enumerate(graphs)]
        return cls(
            num_graphs=len(graphs),
            H=H,
            items=np.concatenate([g.item_nodes for g in graphs]),
            node_graph=np.repeat(np.arange(len(graphs)), sizes),
            relative_steps=np.concatenate([g.relative_steps for g in graphs]),
            last_steps=np.concatenate([g.last_steps for g in graphs]),
            vv_src=vv[:, 0],
            vv_dst=vv[:, 1],
            vv_interval=vv[:, 2],
            pair_item=np.concatenate(pairs_i),
            pair_interest=np.concatenate(pairs_h),
        )
