import numpy as np

from duet.agent import Trajectory
from duet.envsim import EnvConfig, EnvGraph, Episode, Panorama


def line_house(n=6, spacing=2.0, classes=None):
    """Nodes 0..n-1 on a straight corridor, ``spacing`` metres apart.

    Every node has one object; ``classes[u]`` is its class (default u).
    """
    cfg = EnvConfig(node_count=n, mean_degree=2, n_views=2, m_objects=1, feature_dim=8)
    coords = np.array([[u * spacing, 0.0, 0.0] for u in range(n)])
    classes = list(range(n)) if classes is None else classes
    panos = []
    for u in range(n):
        nav = {}
        if u > 0:
            nav[u - 1] = 1
        if u < n - 1:
            nav[u + 1] = 0
        panos.append(
            Panorama(
                position=coords[u],
                view_feats=np.zeros((2, 8)),
                view_orient=np.array([[0.0, 0.0], [np.pi, 0.0]]),
                view_classes=np.zeros(2, dtype=np.int64),
                obj_feats=np.zeros((1, 8)),
                obj_orient=np.zeros((1, 2)),
                obj_classes=np.array([classes[u]]),
                obj_view=np.zeros(1, dtype=np.int64),
                navigable_views=nav,
            )
        )
    return EnvGraph(
        house_id="line",
        seed=0,
        config=cfg,
        coords=coords,
        room_labels=np.zeros(n, dtype=np.int64),
        room_regions=np.zeros(n, dtype=np.int64),
        edges=[(u, u + 1, spacing) for u in range(n - 1)],
        panoramas=panos,
    )


def line_episode(env, start, goals, target_class, eid="e"):
    return Episode(
        episode_id=eid,
        house_id=env.house_id,
        instruction=(2, 9, 3, 21, 4),
        start_node=start,
        goal_nodes=tuple(goals),
        target_object=(goals[0], 0),
        target_class=target_class,
        goal_room=0,
        expert_path=tuple(env.shortest_path(start, min(goals, key=lambda g: env.distances[start, g]))),
    )


def traj(env, nodes, obj=0, eid="e"):
    return Trajectory(
        episode_id=eid, nodes=list(nodes), decisions=[], final_node=nodes[-1],
        selected_object=obj, length=env.path_length(nodes),
    )


# acceptance results, printed by the terminal-summary hook in conftest.py
ACCEPTANCE = {}


def report(criterion, ok, detail=""):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE[criterion] = line
    print(line)
    return ok
