"""Synthetic house graphs, panoramas and rule-based instructions.

Houses are random geometric graphs on two floors. Each node carries a room
label and a panorama of view and object features. Room and object class
appearance vectors are shared by every house, so what an agent learns about
"a kitchen view" transfers to houses it has never seen.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

SCHEMA_VERSION = 1
APPEARANCE_SEED = 20220401


# -- vocabulary -------------------------------------------------------------

CONTROL_TOKENS = ["<pad>", "<mask>", "GO", "FIND", "EOS", "FORWARD", "LEFT", "RIGHT", "BACK"]
DIRECTIONS = ("FORWARD", "LEFT", "RIGHT", "BACK")


class Vocab:
    """Fixed token table: control words, ROOM_k, OBJ_c."""

    def __init__(self, n_room_types, n_object_classes):
        self.n_room_types = n_room_types
        self.n_object_classes = n_object_classes
        self.tokens = (
            list(CONTROL_TOKENS)
            + [f"ROOM_{k}" for k in range(n_room_types)]
            + [f"OBJ_{c}" for c in range(n_object_classes)]
        )
        if len(self.tokens) > 256:
            raise ValueError("vocabulary larger than 256 entries")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token):
        return self.index[token]

    def room(self, k):
        return self.index[f"ROOM_{k}"]

    def obj(self, c):
        return self.index[f"OBJ_{c}"]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def parse_goal(self, ids):
        """Recover (room type, object class) from instruction tokens."""
        room = obj = None
        for tok in self.decode(ids):
            if tok.startswith("ROOM_"):
                room = int(tok[5:])
            elif tok.startswith("OBJ_"):
                obj = int(tok[4:])
        return room, obj

    def to_list(self):
        return list(self.tokens)


# -- data types ---------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    node_count: int = 20
    mean_degree: float = 3.0
    n_views: int = 8
    m_objects: int = 4
    room_count: int = 5
    feature_dim: int = 64
    n_room_types: int = 12
    n_object_classes: int = 16
    extent: float = 20.0
    floors: int = 2
    floor_height: float = 3.0
    alpha: float = 0.5
    beta: float = 0.5

    def vocab(self):
        return Vocab(self.n_room_types, self.n_object_classes)


@dataclass
class Panorama:
    position: np.ndarray            # (3,)
    view_feats: np.ndarray          # (n, F)
    view_orient: np.ndarray         # (n, 2) heading, elevation
    view_classes: np.ndarray        # (n,) room type seen in the view
    obj_feats: np.ndarray           # (m, F)
    obj_orient: np.ndarray          # (m, 2)
    obj_classes: np.ndarray         # (m,)
    obj_view: np.ndarray            # (m,) owning view index
    navigable_views: dict           # neighbour id -> view index

    @property
    def n_views(self):
        return len(self.view_feats)

    @property
    def m_objects(self):
        return len(self.obj_feats)


@dataclass
class EnvGraph:
    house_id: str
    seed: int
    config: EnvConfig
    coords: np.ndarray              # (N, 3) metres
    room_labels: np.ndarray         # (N,) room type per node
    room_regions: np.ndarray        # (N,) region index per node
    edges: list                     # [(u, v, length)] with u < v
    panoramas: list
    _adj: dict = field(default=None, repr=False)
    _dist: np.ndarray = field(default=None, repr=False)

    @property
    def node_count(self):
        return len(self.coords)

    @property
    def adjacency(self):
        if self._adj is None:
            adj = {i: [] for i in range(self.node_count)}
            for u, v, _ in self.edges:
                adj[u].append(v)
                adj[v].append(u)
            self._adj = {i: sorted(n) for i, n in adj.items()}
        return self._adj

    def neighbors(self, node):
        return self.adjacency[node]

    def edge_length(self, u, v):
        return float(np.linalg.norm(self.coords[u] - self.coords[v]))

    def has_edge(self, u, v):
        return v in self.adjacency[u]

    @property
    def distances(self):
        """All-pairs geodesic distances over the true graph (metres)."""
        if self._dist is None:
            n = self.node_count
            if not self.edges:
                self._dist = np.zeros((n, n)) if n == 1 else np.full((n, n), np.inf)
                np.fill_diagonal(self._dist, 0.0)
            else:
                u, v, w = zip(*self.edges)
                m = csr_matrix((w + w, (u + v, v + u)), shape=(n, n))
                self._dist = dijkstra(m, directed=False)
        return self._dist

    def shortest_path(self, src, dst):
        """Metric shortest path; equal-length ties go to the lexicographically smallest node sequence."""
        best = {src: (0.0, (src,))}
        heap = [(0.0, (src,))]
        while heap:
            d, path = heapq.heappop(heap)
            u = path[-1]
            if best.get(u) != (d, path):
                continue
            if u == dst:
                return list(path)
            for v in self.adjacency[u]:
                nd = d + self.edge_length(u, v)
                cand = (nd, path + (v,))
                old = best.get(v)
                if old is None or nd < old[0] - 1e-12 or (abs(nd - old[0]) <= 1e-12 and cand[1] < old[1]):
                    best[v] = cand
                    heapq.heappush(heap, cand)
        raise ValueError(f"no path from {src} to {dst}")

    def path_length(self, path):
        return float(sum(self.edge_length(a, b) for a, b in zip(path[:-1], path[1:])))


@dataclass
class Episode:
    episode_id: str
    house_id: str
    instruction: tuple
    start_node: int
    goal_nodes: tuple
    target_object: tuple            # (node id, object index)
    target_class: int
    goal_room: int
    expert_path: tuple
    split_tag: str = "train"
    style: str = "goal_oriented"


# -- generation -------------------------------------------------------------


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _noise(seed, *key, dim):
    rng = np.random.default_rng([seed, *key])
    return _unit(rng.standard_normal(dim))


def appearance_tables(config):
    """Room-type and object-class signature vectors shared across all houses."""
    rng = np.random.default_rng([APPEARANCE_SEED, config.feature_dim])
    rooms = np.stack([_unit(v) for v in rng.standard_normal((config.n_room_types, config.feature_dim))])
    objs = np.stack([_unit(v) for v in rng.standard_normal((config.n_object_classes, config.feature_dim))])
    return rooms, objs


def orientation_signature(heading, elevation, dim):
    out = np.zeros(dim)
    out[-4:] = (math.sin(heading), math.cos(heading), math.sin(elevation), math.cos(elevation))
    return out


def heading_between(a, b):
    """World-frame heading of the horizontal displacement a -> b, in [0, 2 pi)."""
    dx, dy = b[0] - a[0], b[1] - a[1]
    return math.atan2(dy, dx) % (2 * math.pi)


def elevation_between(a, b):
    dz = b[2] - a[2]
    horiz = math.hypot(b[0] - a[0], b[1] - a[1])
    return math.atan2(dz, horiz)


def _angle_gap(a, b):
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def _build_edges(coords, config, rng):
    n = len(coords)
    if n == 1:
        return []
    pairs = sorted(
        (float(np.linalg.norm(coords[i] - coords[j])), i, j) for i in range(n) for j in range(i + 1, n)
    )
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    degree = [0] * n
    chosen = set()
    for d, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            chosen.add((i, j))
            degree[i] += 1
            degree[j] += 1
    target = int(round(n * config.mean_degree / 2))
    for d, i, j in pairs:
        if len(chosen) >= target:
            break
        if (i, j) in chosen or degree[i] >= config.n_views or degree[j] >= config.n_views:
            continue
        chosen.add((i, j))
        degree[i] += 1
        degree[j] += 1
    if max(degree) > config.n_views:
        raise ValueError("node degree exceeds the number of panorama views")
    return sorted((i, j, float(np.linalg.norm(coords[i] - coords[j]))) for i, j in chosen)


def _assign_views(node, nbrs, coords, view_headings):
    cands = sorted(
        (_angle_gap(heading_between(coords[node], coords[v]), h), v, k)
        for v in nbrs
        for k, h in enumerate(view_headings)
    )
    taken, out = set(), {}
    for _, v, k in cands:
        if v in out or k in taken:
            continue
        out[v] = k
        taken.add(k)
    return {v: out[v] for v in sorted(out)}


def generate_environment(seed, config=None, house_id=None):
    """Build a connected house graph with panoramas, deterministic in (seed, config)."""
    config = config or EnvConfig()
    n = config.node_count
    if n < 1:
        raise ValueError("node_count must be >= 1")
    if config.mean_degree < 0 or config.mean_degree >= n:
        raise ValueError(f"infeasible config: mean_degree {config.mean_degree} >= node_count {n}")
    if config.room_count < 1 or config.room_count > config.n_room_types:
        raise ValueError("room_count must be in [1, n_room_types]")
    if config.m_objects > config.n_object_classes:
        raise ValueError("m_objects exceeds the number of object classes")
    if config.n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng([seed, 1])

    floors = rng.integers(0, config.floors, size=n)
    xy = rng.uniform(0.0, config.extent, size=(n, 2))
    coords = np.column_stack([xy, floors * config.floor_height]).astype(np.float64)

    regions_n = min(config.room_count, n)
    centers = rng.choice(n, size=regions_n, replace=False)
    d_center = np.linalg.norm(coords[:, None, :] - coords[centers][None, :, :], axis=-1)
    regions = np.argmin(d_center, axis=1)
    region_types = rng.choice(config.n_room_types, size=regions_n, replace=False)
    room_labels = region_types[regions]

    edges = _build_edges(coords, config, rng)
    adj = {i: [] for i in range(n)}
    for u, v, _ in edges:
        adj[u].append(v)
        adj[v].append(u)

    room_sig, obj_sig = appearance_tables(config)
    F = config.feature_dim
    view_headings = [2 * math.pi * k / config.n_views for k in range(config.n_views)]
    panoramas = []
    for u in range(n):
        nav = _assign_views(u, sorted(adj[u]), coords, view_headings)
        view_nbr = {k: v for v, k in nav.items()}
        v_feats, v_orient, v_cls = [], [], []
        for k, h in enumerate(view_headings):
            seen_room = int(room_labels[view_nbr[k]]) if k in view_nbr else int(room_labels[u])
            f = _noise(seed, u, 0, k, dim=F) + config.alpha * room_sig[seen_room] + config.beta * orientation_signature(h, 0.0, F)
            v_feats.append(f)
            v_orient.append((h, 0.0))
            v_cls.append(seen_room)
        classes = rng.choice(config.n_object_classes, size=config.m_objects, replace=False)
        o_feats, o_orient, o_view = [], [], []
        for j, c in enumerate(classes):
            h = float(rng.uniform(0.0, 2 * math.pi))
            e = float(rng.uniform(-0.5, 0.5))
            f = _noise(seed, u, 1, j, dim=F) + config.alpha * obj_sig[c] + config.beta * orientation_signature(h, e, F)
            o_feats.append(f)
            o_orient.append((h, e))
            o_view.append(int(np.argmin([_angle_gap(h, vh) for vh in view_headings])))
        panoramas.append(
            Panorama(
                position=coords[u].copy(),
                view_feats=np.asarray(v_feats),
                view_orient=np.asarray(v_orient, dtype=np.float64).reshape(-1, 2),
                view_classes=np.asarray(v_cls, dtype=np.int64),
                obj_feats=np.asarray(o_feats, dtype=np.float64).reshape(-1, F),
                obj_orient=np.asarray(o_orient, dtype=np.float64).reshape(-1, 2),
                obj_classes=np.asarray(classes, dtype=np.int64),
                obj_view=np.asarray(o_view, dtype=np.int64),
                navigable_views=nav,
            )
        )
    return EnvGraph(
        house_id=house_id if house_id is not None else f"house_{seed}",
        seed=int(seed),
        config=config,
        coords=coords,
        room_labels=np.asarray(room_labels, dtype=np.int64),
        room_regions=np.asarray(regions, dtype=np.int64),
        edges=edges,
        panoramas=panoramas,
    )


def observation(env, node_id):
    """Panorama (with position) observed at ``node_id``."""
    if not 0 <= node_id < env.node_count:
        raise KeyError(f"unknown node {node_id}")
    return env.panoramas[node_id]


def relative_direction(rel_heading):
    """Quantise a relative heading (radians, CCW positive) into 90-degree bins."""
    r = (rel_heading + math.pi) % (2 * math.pi) - math.pi
    if abs(r) < math.pi / 4:
        return "FORWARD"
    if math.pi / 4 <= r < 3 * math.pi / 4:
        return "LEFT"
    if -3 * math.pi / 4 < r <= -math.pi / 4:
        return "RIGHT"
    return "BACK"


def path_directions(env, path, initial_heading=0.0):
    out, heading = [], initial_heading
    for a, b in zip(path[:-1], path[1:]):
        h = heading_between(env.coords[a], env.coords[b])
        out.append(relative_direction(h - heading))
        heading = h
    return out


def synthesize_instruction(env, episode, style="goal_oriented"):
    vocab = env.config.vocab()
    clause = [vocab["GO"], vocab.room(episode.goal_room)]
    if episode.target_class >= 0:
        clause += [vocab["FIND"], vocab.obj(episode.target_class)]
    clause.append(vocab["EOS"])
    if style == "goal_oriented":
        return tuple(clause)
    if style == "step_by_step":
        return tuple(vocab[d] for d in path_directions(env, episode.expert_path)) + tuple(clause)
    raise ValueError(f"unknown instruction style {style!r}")


def make_episode(env, seed, style="goal_oriented", split_tag="train", episode_id=None):
    """Draw start, goal and target object; the expert path goes to the nearest goal node."""
    rng = np.random.default_rng([seed, 2])
    n = env.node_count
    for _ in range(100):
        start = int(rng.integers(n))
        goal = int(rng.integers(n))
        if n > 1 and goal == start:
            continue
        pano = env.panoramas[goal]
        k = int(rng.integers(pano.m_objects)) if pano.m_objects else -1
        cls = int(pano.obj_classes[k]) if k >= 0 else -1
        room = int(env.room_labels[goal])
        goals = tuple(
            int(u) for u in range(n)
            if env.room_labels[u] == room and (cls < 0 or cls in env.panoramas[u].obj_classes)
        )
        if n > 1 and start in goals:
            continue
        break
    else:
        raise ValueError("could not draw a non-trivial episode")
    dist = env.distances[start]
    end = min(goals, key=lambda g: (dist[g], g))
    path = tuple(env.shortest_path(start, end))
    obj_idx = int(np.flatnonzero(env.panoramas[end].obj_classes == cls)[0]) if cls >= 0 else -1
    ep = Episode(
        episode_id=episode_id or f"{env.house_id}_ep{seed}",
        house_id=env.house_id,
        instruction=(),
        start_node=start,
        goal_nodes=goals,
        target_object=(end, obj_idx),
        target_class=cls,
        goal_room=room,
        expert_path=path,
        split_tag=split_tag,
        style=style,
    )
    ep.instruction = synthesize_instruction(env, ep, style)
    return ep


# -- datasets ---------------------------------------------------------------


@dataclass
class House:
    env: EnvGraph
    episodes: dict                  # split tag -> [Episode]


def derive_seed(seed, *key):
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint64)[0] >> 1)


def generate_dataset(seed, houses=50, config=None, unseen_fraction=0.2, train_episodes=20,
                     seen_episodes=2, unseen_episodes=5, style="goal_oriented"):
    """Houses split into training houses (train + val-seen episodes) and unseen houses."""
    if houses < 1:
        raise ValueError("need at least one house")
    config = config or EnvConfig()
    n_unseen = int(round(houses * unseen_fraction))
    out = []
    for h in range(houses):
        hid = f"house_{h:03d}"
        env = generate_environment(derive_seed(seed, 0, h), config, house_id=hid)
        eps = {}
        if h < houses - n_unseen:
            eps["train"] = [
                make_episode(env, derive_seed(seed, 1, h, i), style, "train", f"{hid}_train{i:03d}")
                for i in range(train_episodes)
            ]
            eps["seen"] = [
                make_episode(env, derive_seed(seed, 2, h, i), style, "seen", f"{hid}_seen{i:03d}")
                for i in range(seen_episodes)
            ]
        else:
            eps["unseen"] = [
                make_episode(env, derive_seed(seed, 3, h, i), style, "unseen", f"{hid}_unseen{i:03d}")
                for i in range(unseen_episodes)
            ]
        out.append(House(env, eps))
    return out


def split_episodes(houses, split):
    return [(h.env, ep) for h in houses for ep in h.episodes.get(split, [])]


# -- JSON ---------------------------------------------------------------------


def env_to_dict(env):
    return {
        "house_id": env.house_id,
        "seed": env.seed,
        "config": asdict(env.config),
        "vocab": env.config.vocab().to_list(),
        "coords": env.coords.tolist(),
        "room_labels": env.room_labels.tolist(),
        "room_regions": env.room_regions.tolist(),
        "edges": [[u, v, w] for u, v, w in env.edges],
        "panoramas": [
            {
                "view_feats": p.view_feats.ravel().tolist(),
                "view_orient": p.view_orient.ravel().tolist(),
                "view_classes": p.view_classes.tolist(),
                "obj_feats": p.obj_feats.ravel().tolist(),
                "obj_orient": p.obj_orient.ravel().tolist(),
                "obj_classes": p.obj_classes.tolist(),
                "obj_view": p.obj_view.tolist(),
                "navigable_views": [[v, k] for v, k in sorted(p.navigable_views.items())],
            }
            for p in env.panoramas
        ],
    }


def env_from_dict(doc):
    config = EnvConfig(**doc["config"])
    coords = np.asarray(doc["coords"], dtype=np.float64).reshape(-1, 3)
    F = config.feature_dim
    panos = []
    for u, p in enumerate(doc["panoramas"]):
        panos.append(
            Panorama(
                position=coords[u].copy(),
                view_feats=np.asarray(p["view_feats"], dtype=np.float64).reshape(-1, F),
                view_orient=np.asarray(p["view_orient"], dtype=np.float64).reshape(-1, 2),
                view_classes=np.asarray(p["view_classes"], dtype=np.int64),
                obj_feats=np.asarray(p["obj_feats"], dtype=np.float64).reshape(-1, F),
                obj_orient=np.asarray(p["obj_orient"], dtype=np.float64).reshape(-1, 2),
                obj_classes=np.asarray(p["obj_classes"], dtype=np.int64),
                obj_view=np.asarray(p["obj_view"], dtype=np.int64),
                navigable_views={int(v): int(k) for v, k in p["navigable_views"]},
            )
        )
    return EnvGraph(
        house_id=doc["house_id"],
        seed=int(doc["seed"]),
        config=config,
        coords=coords,
        room_labels=np.asarray(doc["room_labels"], dtype=np.int64),
        room_regions=np.asarray(doc["room_regions"], dtype=np.int64),
        edges=[(int(u), int(v), float(w)) for u, v, w in doc["edges"]],
        panoramas=panos,
    )


def episode_to_dict(ep):
    d = asdict(ep)
    for k in ("instruction", "goal_nodes", "target_object", "expert_path"):
        d[k] = list(d[k])
    return d


def episode_from_dict(d):
    d = dict(d)
    for k in ("instruction", "goal_nodes", "target_object", "expert_path"):
        d[k] = tuple(int(x) for x in d[k])
    return Episode(**d)


def house_to_dict(house):
    return {
        "schema_version": SCHEMA_VERSION,
        "env": env_to_dict(house.env),
        "episodes": {split: [episode_to_dict(e) for e in eps] for split, eps in sorted(house.episodes.items())},
    }


def house_from_dict(doc):
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported env schema version {doc.get('schema_version')}")
    return House(
        env_from_dict(doc["env"]),
        {split: [episode_from_dict(e) for e in eps] for split, eps in doc["episodes"].items()},
    )


def write_dataset(houses, out_dir, seed=None):
    """One JSON file per house plus ``manifest.json`` listing house ids per split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "seed": seed, "houses": {}, "splits": {}}
    for house in houses:
        fname = f"{house.env.house_id}.json"
        (out / fname).write_text(json.dumps(house_to_dict(house), separators=(",", ":")))
        manifest["houses"][house.env.house_id] = fname
        for split in sorted(house.episodes):
            manifest["splits"].setdefault(split, []).append(house.env.house_id)
    manifest["splits"] = {k: sorted(v) for k, v in sorted(manifest["splits"].items())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def read_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("unsupported manifest schema version")
    root = manifest_path.parent
    return [
        house_from_dict(json.loads((root / fname).read_text()))
        for _, fname in sorted(manifest["houses"].items())
    ]
