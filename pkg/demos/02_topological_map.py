"""Watch the topological map grow while an agent explores a house.

Each node is visited, current, or navigable (seen from a visited node but
not yet entered). Long jumps between map nodes are routed over the map with
Floyd-Warshall shortest paths.

    python demos/02_topological_map.py
"""

import numpy as np

from duet.envsim import generate_environment, make_episode
from duet.rollout import Rollout

env = generate_environment(seed=11)
episode = make_episode(env, seed=0)
ro = Rollout(None, env, episode)          # no model: the map stores raw features
rng = np.random.default_rng(0)


def show(tmap):
    counts = {}
    for u in tmap.order:
        counts[tmap.records[u].status] = counts.get(tmap.records[u].status, 0) + 1
    print(f"  at node {tmap.current}: {len(tmap)} map nodes {counts}, {len(tmap.edges)} edges")


show(ro.tmap)
for _ in range(5):
    frontier = ro.tmap.navigable_nodes()
    if not frontier:
        break
    target = int(rng.choice(frontier))
    route = ro.move_to(target)
    print(f"jump to {target} via {route}")
    show(ro.tmap)

dist = ro.tmap.distance_matrix()
print("GASA distance matrix (row/col 0 is the stop token):")
print(np.array2string(dist, precision=1, suppress_small=True, max_line_width=120))
