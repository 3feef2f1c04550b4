"""Train a navigator with the desk recipe and compare it with a random walk.

Uses 40 training houses and 10 held-out houses; takes about three minutes on
one core.

    python demos/03_train_and_evaluate.py
"""

import time

from duet import DuetConfig, DuetModel, generate_dataset
from duet.agent import EvalConfig, evaluate_split
from duet.envsim import split_episodes
from duet.training import DESK_FINETUNE, DESK_MODEL, DESK_PRETRAIN, finetune, pretrain

houses = generate_dataset(0, houses=50, unseen_fraction=0.2, train_episodes=100)
train = split_episodes(houses, "train")
seen, unseen = split_episodes(houses, "seen"), split_episodes(houses, "unseen")
print(f"{len(train)} training episodes; {len(seen)} seen and {len(unseen)} unseen test episodes")

model = DuetModel(DuetConfig.for_env(houses[0].env.config, **DESK_MODEL), seed=0)
t0 = time.time()
pretrain(model, train, DESK_PRETRAIN)
print(f"pretrained (behaviour cloning) in {time.time() - t0:.0f}s")
t0 = time.time()
finetune(model, train, DESK_FINETUNE)
print(f"fine-tuned (expert-guided rollouts) in {time.time() - t0:.0f}s")

rows = [("model, seen", seen, model, EvalConfig()),
        ("model, unseen", unseen, model, EvalConfig()),
        ("random, unseen", unseen, None, EvalConfig(policy="random"))]
for name, pairs, m, cfg in rows:
    s = evaluate_split(pairs, m, cfg)[0].summary()
    print(f"{name:>15}: SR {s['SR']:.2f}  OSR {s['OSR']:.2f}  SPL {s['SPL']:.2f}  NE {s['NE']:.2f}")
