"""Online topological map built by the agent while it navigates.

Node representations are kept as tensors so that gradients flow from the
action scores back into the panorama encoder during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Tensor, as_tensor, ops

VISITED = "visited"
NAVIGABLE = "navigable"
CURRENT = "current"

D_MAX = 50.0


@dataclass
class EncodedPanorama:
    """Encoder output at one node plus the geometry the map needs."""

    node_id: int
    views: Tensor                   # (n, d)
    objects: Tensor                 # (m, d)
    navigable_views: dict           # neighbour id -> view index
    position: np.ndarray            # (3,)
    neighbor_positions: dict        # neighbour id -> (3,)
    rows: tuple = None              # (view rows, object rows) in a packed token table


@dataclass
class NodeRecord:
    status: str
    coordinates: np.ndarray
    pooled_rep: Tensor = None
    partial_sum: Tensor = None
    partial_count: int = 0
    last_visit_step: int = 0
    own_rows: tuple = ()            # token-table rows pooled once visited
    partial_rows: list = field(default_factory=list)

    def pool_rows(self):
        """Token-table rows whose mean is this node's representation."""
        return list(self.own_rows) if self.status != NAVIGABLE else list(self.partial_rows)


def floyd_warshall(nodes, edges):
    """All-pairs shortest paths over ``nodes`` (ids) and undirected ``edges``.

    Returns ``(dist, nxt)`` indexed by position in ``nodes``; ``nxt[i, j]`` is
    the position of the first hop from i towards j (-1 if unreachable).
    Intermediate nodes are tried in increasing id order and only strict
    improvements replace a route, so equal-length ties keep the earliest
    (smallest-id) intermediate.
    """
    n = len(nodes)
    pos = {u: i for i, u in enumerate(nodes)}
    dist = np.full((n, n), np.inf)
    nxt = np.full((n, n), -1, dtype=np.int64)
    np.fill_diagonal(dist, 0.0)
    np.fill_diagonal(nxt, np.arange(n))
    for (u, v), w in edges.items():
        i, j = pos[u], pos[v]
        if w < dist[i, j]:
            dist[i, j] = dist[j, i] = w
            nxt[i, j], nxt[j, i] = j, i
    for k in sorted(range(n), key=lambda p: nodes[p]):
        alt = dist[:, k:k + 1] + dist[k:k + 1, :]
        better = alt < dist
        if better.any():
            dist = np.where(better, alt, dist)
            nxt = np.where(better, nxt[:, k:k + 1], nxt)
    return dist, nxt


class TopoMap:
    def __init__(self, d_max=D_MAX, distance_mode="metric"):
        if distance_mode not in ("metric", "hops"):
            raise ValueError(f"unknown distance mode {distance_mode!r}")
        self.records: dict[int, NodeRecord] = {}
        self.order: list[int] = []
        self.edges: dict[tuple, float] = {}
        self.adj: dict[int, set] = {}
        self.current = None
        self.start = None
        self.step = 0
        self.heading = 0.0
        self.d_max = d_max
        self.distance_mode = distance_mode
        self.fine_cache: EncodedPanorama = None
        self._floyd = None
        self._floyd_hops = None

    # -- bookkeeping ---------------------------------------------------------
    def __len__(self):
        return len(self.order)

    def __contains__(self, node):
        return node in self.records

    def status(self, node):
        return self.records[node].status

    def visited_nodes(self):
        return [u for u in self.order if self.records[u].status != NAVIGABLE]

    def navigable_nodes(self):
        return [u for u in self.order if self.records[u].status == NAVIGABLE]

    def neighbors(self, node):
        return sorted(self.adj.get(node, ()))

    def position_index(self):
        """Score position -> node id; position 0 is the stop action."""
        return [None] + list(self.order)

    def node_position(self, node):
        return self.order.index(node) + 1

    def _add_node(self, node, coords):
        if node not in self.records:
            self.records[node] = NodeRecord(status=NAVIGABLE, coordinates=np.asarray(coords, dtype=np.float64))
            self.order.append(node)
            self.adj[node] = set()

    def _add_edge(self, u, v, length):
        key = (min(u, v), max(u, v))
        if key not in self.edges:
            self.edges[key] = float(length)
            self.adj[u].add(v)
            self.adj[v].add(u)

    # -- update ----------------------------------------------------------------
    def update(self, t, enc: EncodedPanorama):
        """Make ``enc.node_id`` current at step ``t`` and absorb its observation."""
        node = enc.node_id
        if self.current is not None and node != self.current and node not in self.adj.get(self.current, ()):
            raise ValueError(f"node {node} is not adjacent to the current node {self.current}")
        if self.current is None and self.records and node not in self.records:
            raise ValueError("update on a node outside the map")
        # index-only encodings carry token-table rows instead of tensors
        index_only = enc.views is None
        if index_only:
            if enc.rows is None:
                raise ValueError("encoded panorama has neither tensors nor token rows")
            n_views = len(enc.rows[0])
        else:
            views, objects = as_tensor(enc.views), as_tensor(enc.objects)
            if views.ndim != 2 or (objects.shape[0] and objects.shape[1] != views.shape[1]):
                raise ValueError(f"encoded panorama shape mismatch: views {views.shape}, objects {objects.shape}")
            n_views = views.shape[0]
        for v, k in enc.navigable_views.items():
            if not 0 <= k < n_views:
                raise ValueError(f"navigable view index {k} out of range for {n_views} views")

        if self.start is None:
            self.start = node
        prev = self.current
        if prev is not None and prev != node:
            self.records[prev].status = VISITED
            a, b = self.records[prev].coordinates, np.asarray(enc.position)
            if math.hypot(b[0] - a[0], b[1] - a[1]) > 0:
                self.heading = math.atan2(b[1] - a[1], b[0] - a[0]) % (2 * math.pi)

        self._add_node(node, enc.position)
        rec = self.records[node]
        rec.status = CURRENT
        rec.last_visit_step = t
        if enc.rows is not None:
            rec.own_rows = tuple(int(r) for r in enc.rows[0]) + tuple(int(r) for r in enc.rows[1])
        if not index_only:
            tokens = ops.concat([views, objects], axis=0) if objects.shape[0] else views
            rec.pooled_rep = ops.mean(tokens, axis=0)

        for nbr in sorted(enc.navigable_views):
            k = enc.navigable_views[nbr]
            npos = enc.neighbor_positions[nbr]
            self._add_node(nbr, npos)
            self._add_edge(node, nbr, np.linalg.norm(np.asarray(npos) - np.asarray(enc.position)))
            nrec = self.records[nbr]
            if nrec.status != NAVIGABLE:
                continue
            nrec.partial_count += 1
            if enc.rows is not None:
                nrec.partial_rows.append(int(enc.rows[0][k]))
            if not index_only:
                part = views[k]
                nrec.partial_sum = part if nrec.partial_sum is None else ops.add(nrec.partial_sum, part)
                nrec.pooled_rep = ops.mul(nrec.partial_sum, 1.0 / nrec.partial_count)

        self.current = node
        self.step = t
        self.fine_cache = enc
        self._floyd = None
        self._floyd_hops = None
        return self

    # -- distances ---------------------------------------------------------------
    def floyd(self):
        if self._floyd is None:
            self._floyd = floyd_warshall(self.order, self.edges)
        return self._floyd

    def floyd_hops(self):
        if self._floyd_hops is None:
            self._floyd_hops = floyd_warshall(self.order, {e: 1.0 for e in self.edges})
        return self._floyd_hops

    def hops_from(self, src):
        """Edge counts from ``src`` to every map node, in map order (BFS)."""
        depth = {src: 0}
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for v in self.adj[u]:
                    if v not in depth:
                        depth[v] = depth[u] + 1
                        nxt.append(v)
            frontier = nxt
        return np.asarray([depth.get(u, np.inf) for u in self.order], dtype=np.float64)

    def distance_matrix(self, mode=None):
        """(K+1)^2 pairwise distances with the stop node at index 0 (all zeros)."""
        mode = mode or self.distance_mode
        dist = (self.floyd() if mode == "metric" else self.floyd_hops())[0]
        k = len(self.order)
        out = np.zeros((k + 1, k + 1))
        out[1:, 1:] = np.minimum(dist, self.d_max)
        return out

    def route(self, src, dst):
        dist, nxt = self.floyd()
        i, j = self.order.index(src), self.order.index(dst)
        if not np.isfinite(dist[i, j]):
            raise ValueError(f"no route from {src} to {dst}")
        path = [src]
        while i != j:
            i = int(nxt[i, j])
            path.append(self.order[i])
        return path


def update_map(tmap, t, node_id, encoded_panorama):
    if encoded_panorama.node_id != node_id:
        raise ValueError("encoded panorama belongs to a different node")
    return tmap.update(t, encoded_panorama)


def distance_matrix(tmap):
    return tmap.distance_matrix()


def floyd_all_pairs(tmap):
    if not tmap.order:
        raise ValueError("empty map")
    return tmap.floyd()


def plan_route(tmap, src, dst):
    return tmap.route(src, dst)


def encoded_from_arrays(env, node_id, views, objects):
    """Wrap encoder outputs for ``node_id`` with the env geometry the map needs."""
    pano = env.panoramas[node_id]
    return EncodedPanorama(
        node_id=node_id,
        views=as_tensor(views),
        objects=as_tensor(objects),
        navigable_views=dict(pano.navigable_views),
        position=pano.position,
        neighbor_positions={v: env.coords[v] for v in pano.navigable_views},
    )
