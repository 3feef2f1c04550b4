"""Generate one house, read an instruction back into words, and let the expert walk it.

    python demos/01_house_and_expert.py
"""

from duet.agent import compute_metrics, run_episode
from duet.envsim import generate_environment, make_episode

env = generate_environment(seed=7)
vocab = env.config.vocab()
print(f"house {env.house_id}: {env.node_count} nodes, {len(env.edges)} edges")

episode = make_episode(env, seed=3)
print("instruction:", " ".join(vocab.decode(episode.instruction)))
print("start", episode.start_node, "goals", episode.goal_nodes, "expert path", episode.expert_path)

# with no model, run_episode drives the agent with the interactive expert
trajectory = run_episode(env, episode, model=None)
print("walked", trajectory.nodes, f"({trajectory.length:.1f} m)")

metrics = compute_metrics([trajectory], [episode], [env])
print({k: round(v, 3) for k, v in metrics.summary().items()})
