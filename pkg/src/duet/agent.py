"""Inference-time episode execution and navigation metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .rollout import Rollout
from .tensorcore import no_grad
from .tensorcore import functional as F
from .training import pid_expert

SUCCESS_RADIUS = 3.0
METRIC_COLUMNS = ("TL", "NE", "SR", "OSR", "SPL", "RGS", "RGSPL")


@dataclass
class Decision:
    node: int
    chosen: object                  # node id, or None for stop
    stop_prob: float
    scores: list = None
    index: list = None
    sigma: float = None
    route: list = None
    snapshot: dict = None


@dataclass
class Trajectory:
    episode_id: str
    nodes: list                     # every node physically visited, in order
    decisions: list
    final_node: int
    selected_object: int
    length: float
    forced_stop: bool = False

    @property
    def step_count(self):
        return len(self.decisions)


# -- policies -------------------------------------------------------------------
# A policy maps (rollout, ActionScores | None, rng) to (node id | None, stop probability).


def argmax_policy(ro, scores, rng=None):
    probs = F.softmax(scores.fused.data)
    return scores.index[int(np.argmax(scores.fused.data))], float(probs[0])


def expert_policy(ro, scores, rng=None):
    target = pid_expert(ro.env, ro.tmap, ro.episode.goal_nodes)
    return target, 1.0 if target is None else 0.0


def random_walk_policy(ro, scores, rng):
    """Stop with probability 1 / (degree + 1), else step to a uniform random neighbour."""
    nbrs = ro.env.neighbors(ro.current)
    k = int(rng.integers(len(nbrs) + 1))
    p_stop = 1.0 / (len(nbrs) + 1)
    return (None if k == len(nbrs) else nbrs[k]), p_stop


def scripted_policy(actions):
    """Replay a fixed list of decisions (node ids or None for stop)."""
    it = iter(actions)

    def policy(ro, scores, rng=None):
        a = next(it, None)
        return a, 1.0 if a is None else 0.0

    return policy


POLICIES = {"model": argmax_policy, "expert": expert_policy, "random": random_walk_policy}


def map_snapshot(tmap):
    return {
        "current": tmap.current,
        "step": tmap.step,
        "nodes": [
            {
                "id": u,
                "status": tmap.records[u].status,
                "pos": [float(c) for c in tmap.records[u].coordinates],
                "last_visit_step": tmap.records[u].last_visit_step,
            }
            for u in tmap.order
        ],
        "edges": [[u, v, w] for (u, v), w in sorted(tmap.edges.items())],
    }


def _select_object(model, ro, last_scores, episode, policy):
    pano = ro.env.panoramas[ro.current]
    if pano.m_objects == 0:
        return -1
    if model is None or policy is expert_policy:
        hits = np.flatnonzero(pano.obj_classes == episode.target_class)
        return int(hits[0]) if len(hits) else 0
    if last_scores is None or last_scores.index[1:] != ro.tmap.order or ro.tmap.fine_cache.node_id != ro.current:
        logits = model.fine_forward(ro.text, ro.tmap).object_logits
    else:
        logits = last_scores.object_logits
    return int(np.argmax(logits.data))


def run_episode(env, episode, model, t_max=15, fusion=None, use_gasa=None, policy=None, rng=None, trace=False):
    """Execute one episode: decide, route through the map, force a stop when out of budget."""
    policy = policy or (argmax_policy if model is not None else expert_policy)
    rng = rng if rng is not None else np.random.default_rng(0)
    with no_grad():
        ro = Rollout(model, env, episode)
        decisions = []
        best_stop = {}
        stopped = False
        sc = None
        while len(decisions) < t_max:
            sc = ro.scores(fusion=fusion, use_gasa=use_gasa) if model is not None else None
            choice, p_stop = policy(ro, sc, rng)
            cur = ro.current
            if cur not in best_stop or p_stop > best_stop[cur]:
                best_stop[cur] = p_stop
            d = Decision(node=cur, chosen=choice, stop_prob=p_stop)
            if trace:
                d.snapshot = map_snapshot(ro.tmap)
                if sc is not None:
                    d.scores = [float(x) for x in sc.fused.data]
                    d.index = list(sc.index)
                    d.sigma = None if sc.sigma is None else float(sc.sigma.data)
            decisions.append(d)
            if choice is None:
                stopped = True
                break
            d.route = ro.move_to(choice)
        forced = not stopped
        if forced:
            # earliest-recorded node wins ties
            target = max(best_stop, key=lambda u: best_stop[u])
            if target != ro.current:
                ro.move_to(target)
            sc = None
        obj = _select_object(model, ro, sc, episode, policy)
    return Trajectory(
        episode_id=episode.episode_id,
        nodes=list(ro.path),
        decisions=decisions,
        final_node=ro.current,
        selected_object=obj,
        length=env.path_length(ro.path),
        forced_stop=forced,
    )


# -- metrics ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    TL: float
    NE: float
    SR: float
    OSR: float
    SPL: float
    RGS: float
    RGSPL: float
    episodes: int
    rows: list = field(default_factory=list)

    def summary(self):
        return {k: getattr(self, k) for k in METRIC_COLUMNS}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows + [self.summary()]:
            w.writerow([repr(float(row[k])) for k in METRIC_COLUMNS])
        return buf.getvalue()


def episode_metrics(traj, episode, env):
    dist = env.distances
    goals = list(episode.goal_nodes)
    to_goal = dist[:, goals].min(axis=1)
    ne = float(to_goal[traj.final_node])
    sr = float(ne < SUCCESS_RADIUS)
    osr = float(any(to_goal[u] < SUCCESS_RADIUS for u in traj.nodes))
    shortest = float(to_goal[episode.start_node])
    p = float(traj.length)
    ratio = 1.0 if max(p, shortest) == 0 else shortest / max(p, shortest)
    pano = env.panoramas[traj.final_node]
    correct = (
        traj.final_node in goals
        and 0 <= traj.selected_object < pano.m_objects
        and int(pano.obj_classes[traj.selected_object]) == episode.target_class
    )
    rgs = float(sr == 1.0 and correct)
    return {"TL": p, "NE": ne, "SR": sr, "OSR": osr, "SPL": sr * ratio, "RGS": rgs, "RGSPL": rgs * ratio}


def compute_metrics(trajectories, episodes, envs):
    """Average TL, NE, SR, OSR, SPL, RGS, RGSPL over aligned trajectories/episodes.

    ``envs`` is a list aligned with the episodes or a dict keyed by house id.
    """
    if len(trajectories) != len(episodes):
        raise ValueError("trajectory and episode lists differ in length")
    if not episodes:
        raise ValueError("no episodes to score")
    if isinstance(envs, dict):
        envs = [envs[ep.house_id] for ep in episodes]
    elif len(envs) != len(episodes):
        raise ValueError("env list is not aligned with episodes")
    rows = [episode_metrics(t, e, env) for t, e, env in zip(trajectories, episodes, envs)]
    means = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_COLUMNS}
    return MetricsReport(episodes=len(rows), rows=rows, **means)


@dataclass
class EvalConfig:
    t_max: int = 15
    fusion: str = None
    use_gasa: bool = None
    policy: str = "model"
    seed: int = 0
    trace: bool = False


def evaluate_split(pairs, model, cfg=EvalConfig()):
    """Run every (env, episode) pair; returns (MetricsReport, trajectories)."""
    if not pairs:
        raise ValueError("empty split")
    policy = POLICIES[cfg.policy]
    trajs = []
    for i, (env, ep) in enumerate(pairs):
        rng = np.random.default_rng([cfg.seed, i])
        trajs.append(
            run_episode(env, ep, model if cfg.policy == "model" else None, cfg.t_max, cfg.fusion,
                        cfg.use_gasa, policy, rng, cfg.trace)
        )
    report = compute_metrics(trajs, [ep for _, ep in pairs], [env for env, _ in pairs])
    return report, trajs
