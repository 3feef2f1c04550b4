"""Learning objectives, the pseudo interactive demonstrator, and training loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .batch import (
    IndexRollout,
    PanoIndex,
    _Blocks,
    _pad_groups,
    coarse_forward,
    encode_panoramas,
    encode_texts,
    fine_forward,
    packed_step,
)
from .envsim import observation
from .rollout import Rollout
from .tensorcore import AdamW, MASK_THRESHOLD, Tensor, ops
from .tensorcore import functional as F
from .topomap import NAVIGABLE, encoded_from_arrays

log = logging.getLogger(__name__)

STOP = None
MASK_PROB = 0.15


class ConsistencyError(RuntimeError):
    pass


@dataclass
class LossReport:
    sap: float = 0.0
    og: float = 0.0
    pid: float = 0.0
    mlm: float = 0.0
    mrc: float = 0.0
    total: float = 0.0
    lam: float = None
    samples: dict = field(default_factory=dict)
    step: int = 0
    task: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StepRecord:
    node: int
    scores: np.ndarray
    chosen: object                   # node id or None for stop
    sigma: float
    stop_prob: float


@dataclass
class RolloutRecord:
    episode_id: str
    mode: str
    steps: list = field(default_factory=list)
    path: list = field(default_factory=list)


def _zero(model):
    return Tensor(np.zeros((), dtype=model.dtype))


def _target_position(scores, node):
    return 0 if node is STOP else scores.index.index(node)


# -- expert ------------------------------------------------------------------


TIE_TOL = 1e-9


def pid_expert(env, tmap, goal_nodes):
    """Unvisited map node minimising d(current, u) + d(u, nearest goal) on the true graph.

    Returns ``None`` (stop) when already at a goal; ties go to the smaller id.
    """
    cur = tmap.current
    goals = list(goal_nodes)
    if cur in goals:
        return STOP
    dist = env.distances
    cands = [u for u in tmap.order if tmap.records[u].status == NAVIGABLE]
    if not cands:
        raise ConsistencyError("no navigable candidates and not at a goal")
    to_goal = dist[:, goals].min(axis=1)
    cost = {u: dist[cur, u] + to_goal[u] for u in cands}
    # equal routes summed in a different order can differ in the last bits
    best = min(cost.values())
    return min(u for u in cands if cost[u] <= best + TIE_TOL * max(best, 1.0))


# -- teacher forcing -----------------------------------------------------------


def teacher_forced(model, env, episode, tokens=None, score=True, fusion=None):
    """Replay the expert path; returns (rollout, [(ActionScores, target node)])."""
    ro = Rollout(model, env, episode, tokens)
    path = list(episode.expert_path)
    steps = []
    for i, node in enumerate(path):
        if ro.current != node:
            raise ConsistencyError("expert path is not a walk from the start node")
        target = path[i + 1] if i + 1 < len(path) else STOP
        if score:
            steps.append((ro.scores(fusion=fusion), target))
        if target is not STOP:
            ro.observe(target)
    return ro, steps


def loss_sap(model, env, episode, fusion=None, _forced=None):
    """Sum over expert steps of -log p(expert action)."""
    ro, steps = _forced or teacher_forced(model, env, episode, fusion=fusion)
    total = _zero(model)
    for sc, target in steps:
        pos = _target_position(sc, target)
        if sc.fused.data[pos] <= MASK_THRESHOLD:
            raise ConsistencyError(f"expert target {target} is masked")
        total = ops.add(total, F.cross_entropy(sc.fused, pos))
    return total


def loss_og(fine_enc, target_index):
    """-log p(target object) over the final node's object logits."""
    logits = fine_enc.object_logits
    if logits.shape[0] == 0:
        raise ValueError("object grounding needs at least one object")
    return F.cross_entropy(logits, target_index)


def loss_pid(model, env, episode, rng, t_max=15, fusion=None, record=None):
    """Sample from the current policy; supervise every step with the expert's choice.

    Returns (loss, rollout, final ActionScores).
    """
    ro = Rollout(model, env, episode)
    total = _zero(model)
    last = None
    for _ in range(t_max):
        sc = ro.scores(fusion=fusion)
        last = sc
        target = pid_expert(env, ro.tmap, episode.goal_nodes)
        pos = _target_position(sc, target)
        total = ops.add(total, F.cross_entropy(sc.fused, pos))
        probs = F.softmax(sc.fused.data)
        a = _sample_action(probs, rng)
        if record is not None:
            record.steps.append(StepRecord(ro.current, sc.fused.data.copy(), sc.index[a], _f(sc.sigma), float(probs[0])))
        if a == 0:
            break
        ro.move_to(sc.index[a])
    if record is not None:
        record.path = list(ro.path)
    return total, ro, last


def _sample_action(probs, rng):
    """Inverse-CDF draw that never lands on a zero-probability entry."""
    a = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    a = min(a, len(probs) - 1)
    while probs[a] == 0.0:
        a -= 1
    return a


def _f(x):
    return None if x is None else float(x.data)


def _mask_positions(rng, n, p=MASK_PROB):
    m = rng.random(n) < p
    if not m.any():
        m[rng.integers(n)] = True
    return m


def loss_mlm(model, env, episode, rng, mask_id=1):
    """Masked-word prediction from averaged coarse/fine contextual word embeddings."""
    tokens = np.asarray(episode.instruction, dtype=np.int64)
    masked = _mask_positions(rng, len(tokens))
    inp = np.where(masked, mask_id, tokens)
    ro, _ = teacher_forced(model, env, episode, tokens=inp, score=False)
    coarse = model.coarse_forward(ro.tmap, ro.text)
    fine = model.fine_forward(ro.text, ro.tmap)
    positions = np.flatnonzero(masked)
    logits = model.mlm_logits(ro.text, coarse.hidden, fine.hidden, positions)
    total = _zero(model)
    for row, pos in enumerate(positions):
        total = ops.add(total, F.cross_entropy(ops.getitem(logits, row), int(tokens[pos])))
    return ops.mul(total, 1.0 / len(positions))


def mrc_targets(env, pano):
    """Class index per view (room type seen) and object (offset by room types)."""
    n_rooms = env.config.n_room_types
    return np.concatenate([pano.view_classes, n_rooms + pano.obj_classes]).astype(np.int64)


def loss_mrc(model, env, episode, rng):
    """KL(one-hot class || predicted) for randomly zeroed tokens of the final panorama."""
    ro, _ = teacher_forced(model, env, episode, score=False)
    node = ro.current
    pano = observation(env, node)
    n, m = pano.n_views, pano.m_objects
    drop = _mask_positions(rng, n + m)
    views, objects = model.encode_panorama(pano, view_drop=drop[:n], obj_drop=drop[n:])
    enc = encoded_from_arrays(env, node, views, objects)
    fine = model.fine_forward(ro.text, ro.tmap, enc=enc)
    rows = 1 + np.flatnonzero(drop)
    targets = mrc_targets(env, pano)[drop]
    logits = model.mrc_logits(fine.hidden, rows)
    n_cls = model.config.n_region_classes
    total = _zero(model)
    for r, c in enumerate(targets):
        onehot = np.zeros(n_cls)
        onehot[c] = 1.0
        total = ops.add(total, F.kl_divergence(onehot, ops.getitem(logits, r)))
    return ops.mul(total, 1.0 / len(targets))


def finetune_losses(model, env, ep, rng, lam, cfg):
    """Per-episode combined objective lam * SAP + PID + OG; returns (loss, LossReport)."""
    rep = LossReport(lam=lam, task="finetune")
    terms = []
    ro, steps = teacher_forced(model, env, ep, fusion=cfg.fusion, score=lam != 0)
    if lam != 0:
        sap = loss_sap(model, env, ep, _forced=(ro, steps))
        rep.sap = float(sap.data)
        terms.append(ops.mul(sap, lam))
    if ep.target_object[1] >= 0:
        fine = steps[-1][0].fine_enc if steps else model.fine_forward(ro.text, ro.tmap)
        og = loss_og(fine, ep.target_object[1])
        rep.og = float(og.data)
        terms.append(og)
    pid, _, _ = loss_pid(model, env, ep, rng, t_max=cfg.t_max, fusion=cfg.fusion)
    rep.pid = float(pid.data)
    terms.append(pid)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    rep.total = lam * rep.sap + rep.pid + rep.og
    return total, rep


# -- batched objectives ------------------------------------------------------------
#
# The training loops run these packed versions; they compute the same sums as
# the per-episode functions above in a fixed number of encoder passes.


def batch_context(model, items, all_nodes=False):
    """Encode the instructions and the panoramas a batch can reach.

    With ``all_nodes`` every node of each house is encoded (needed when the
    policy explores); otherwise only expert-path nodes.
    """
    text = encode_texts(model, [ep.instruction for _, ep in items])
    if all_nodes:
        wanted = [(env, u) for env, _ in items for u in range(env.node_count)]
    else:
        wanted = [(env, u) for env, ep in items for u in ep.expert_path]
    return text, PanoIndex(model, wanted)


def _sum(t):
    return ops.tsum(t) if t.shape[0] else None


def _check_targets(ps, targets, what):
    for k, t in enumerate(targets):
        if ps.scores(k)[t] <= MASK_THRESHOLD:
            raise ConsistencyError(f"{what} target at item {k} is masked")


def batch_teacher_forced(model, items, text, index, fusion=None):
    """SAP and OG over expert paths of a batch; returns (sap_each tensor, og_each tensor, owners, og_items)."""
    views, targets, owners, finals = [], [], [], []
    for i, (env, ep) in enumerate(items):
        ro = IndexRollout(model, env, ep, index, i)
        path = list(ep.expert_path)
        for j, node in enumerate(path):
            if ro.current != node:
                raise ConsistencyError("expert path is not a walk from the start node")
            target = path[j + 1] if j + 1 < len(path) else STOP
            v = ro.view()
            views.append(v)
            targets.append(0 if target is STOP else v.index.index(target))
            owners.append(i)
            if target is not STOP:
                ro.observe(target)
        finals.append(len(views) - 1)
    ps = packed_step(model, text, index.tokens, views, fusion)
    _check_targets(ps, targets, "expert")
    nll = ps.nll(list(range(len(views))), targets)
    og_items = [i for i, (_, ep) in enumerate(items)
                if ep.target_object[1] >= 0 and len(views[finals[i]].obj_rows)]
    og = ps.object_nll([finals[i] for i in og_items], [items[i][1].target_object[1] for i in og_items]) if og_items else None
    return nll, np.asarray(owners), og, og_items


def batch_pid(model, items, text, index, rng, t_max=15, fusion=None):
    """Lockstep policy rollouts labelled by the expert; returns (summed loss, per-episode values, paths)."""
    ros = [IndexRollout(model, env, ep, index, i) for i, (env, ep) in enumerate(items)]
    active = list(range(len(items)))
    each = np.zeros(len(items))
    total = None
    for _ in range(t_max):
        if not active:
            break
        views = [ros[i].view() for i in active]
        ps = packed_step(model, text, index.tokens, views, fusion)
        targets = []
        for k, i in enumerate(active):
            target = pid_expert(items[i][0], ros[i].tmap, items[i][1].goal_nodes)
            targets.append(0 if target is STOP else views[k].index.index(target))
        _check_targets(ps, targets, "PID")
        nll = ps.nll(list(range(len(views))), targets)
        each[active] += nll.data
        step_total = ops.tsum(nll)
        total = step_total if total is None else ops.add(total, step_total)
        still = []
        for k, i in enumerate(active):
            a = _sample_action(F.softmax(ps.scores(k)), rng)
            if a != 0:
                ros[i].move_to(views[k].index[a])
                still.append(i)
        active = still
    return total, each, [ro.path for ro in ros]


def _final_views(model, items, index):
    """Walk every expert path in index mode; one view per item at its last node."""
    views = []
    for i, (env, ep) in enumerate(items):
        ro = IndexRollout(model, env, ep, index, i)
        path = list(ep.expert_path)
        for j, node in enumerate(path):
            if ro.current != node:
                raise ConsistencyError("expert path is not a walk from the start node")
            if j + 1 < len(path):
                ro.observe(path[j + 1])
        views.append(ro.view())
    return views


def _weighted_nll(logits, targets, weights):
    """sum_k weights[k] * -log softmax(logits[k])[targets[k]]."""
    lsm = ops.log_softmax(logits, axis=-1)
    picked = ops.getitem(lsm, (np.arange(len(targets)), np.asarray(targets)))
    return ops.mul(ops.tsum(ops.mul(picked, np.asarray(weights, dtype=logits.dtype))), -1.0)


def batch_mlm(model, items, rng, mask_id=1):
    """Summed per-episode MLM losses (same rng use as :func:`loss_mlm` item by item)."""
    inputs, targets, weights, positions = [], [], [], []
    for _, ep in items:
        tokens = np.asarray(ep.instruction, dtype=np.int64)
        masked = _mask_positions(rng, len(tokens))
        inputs.append(np.where(masked, mask_id, tokens))
        pos = np.flatnonzero(masked)
        positions.append(pos)
        targets.extend(tokens[pos])
        weights.extend([1.0 / len(pos)] * len(pos))
    text = encode_texts(model, inputs)
    index = PanoIndex(model, [(env, u) for env, ep in items for u in ep.expert_path])
    views = _final_views(model, items, index)
    coarse_h, coarse_g, _ = coarse_forward(model, text, index.tokens, views)
    fine_h, fine_g, *_ = fine_forward(model, text, index.tokens, views)
    b = _Blocks(model)
    qi = _pad_groups(text.rows)
    wc = b.attn("mlm.coarse_cross", text.hidden, coarse_h, qi, coarse_g)
    wf = b.attn("mlm.fine_cross", text.hidden, fine_h, qi, fine_g)
    avg = ops.mul(ops.add(wc, wf), 0.5)
    rows = np.concatenate([text.rows[i][pos] for i, pos in enumerate(positions)])
    logits = model._ffn("mlm.head", ops.getitem(avg, rows))
    return _weighted_nll(logits, targets, weights)


def batch_mrc(model, items, rng):
    """Summed per-episode MRC losses (same rng use as :func:`loss_mrc` item by item)."""
    text = encode_texts(model, [ep.instruction for _, ep in items])
    index = PanoIndex(model, [(env, u) for env, ep in items for u in ep.expert_path])
    views = _final_views(model, items, index)
    panos, drops = [], []
    for env, ep in items:
        pano = observation(env, ep.expert_path[-1])
        panos.append(pano)
        drops.append(_mask_positions(rng, pano.n_views + pano.m_objects))
    dropped, rows = encode_panoramas(model, panos, drops)
    off = index.tokens.shape[0]
    views = [replace(v, view_rows=r[0] + off, obj_rows=r[1] + off) for v, r in zip(views, rows)]
    fine_h, fine_g, *_ = fine_forward(model, text, ops.concat([index.tokens, dropped]), views)
    picks, targets, weights = [], [], []
    for (env, _), pano, d, g in zip(items, panos, drops, fine_g):
        k = np.flatnonzero(d)
        picks.append(g[0] + 1 + k)
        targets.extend(mrc_targets(env, pano)[d])
        weights.extend([1.0 / len(k)] * len(k))
    logits = model.mrc_logits(fine_h, np.concatenate(picks))
    return _weighted_nll(logits, targets, weights)


def batch_finetune_losses(model, items, rng, lam, cfg):
    """Summed lam * SAP + PID + OG over a batch; returns (loss, LossReport of per-episode means)."""
    text, index = batch_context(model, items, all_nodes=True)
    n = len(items)
    rep = LossReport(lam=lam, task="finetune", samples={"episodes": n})
    nll, owners, og, og_items = batch_teacher_forced(model, items, text, index, cfg.fusion)
    terms = []
    if lam != 0:
        terms.append(ops.mul(ops.tsum(nll), lam))
        rep.sap = float(nll.data.sum()) / n
    if og is not None:
        terms.append(ops.tsum(og))
        rep.og = float(og.data.sum()) / n
    pid, _, _ = batch_pid(model, items, text, index, rng, t_max=cfg.t_max, fusion=cfg.fusion)
    terms.append(pid)
    rep.pid = float(pid.data) / n
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    rep.total = lam * rep.sap + rep.pid + rep.og
    return ops.mul(total, 1.0 / n), rep


def batch_pretrain_loss(model, task, items, rng, cfg):
    """Mean per-episode loss of one pretraining task over a batch (None if nothing to learn)."""
    n = len(items)
    if task in ("sap", "og", "sap_og"):
        text, index = batch_context(model, items)
        nll, _, og, _ = batch_teacher_forced(model, items, text, index, cfg.fusion)
        parts = []
        if task != "og":
            parts.append(ops.tsum(nll))
        if task != "sap" and og is not None:
            parts.append(ops.tsum(og))
        if not parts:
            return None
        total = parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])
        return ops.mul(total, 1.0 / n)
    if task == "mlm":
        return ops.mul(batch_mlm(model, items, rng), 1.0 / n)
    if task == "mrc":
        return ops.mul(batch_mrc(model, items, rng), 1.0 / n)
    raise ValueError(f"unknown pretraining task {task!r}")


# -- loops --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    batch_size: int = 1
    seed: int = 0
    tasks: tuple = ("sap", "og", "mlm", "mrc")
    lam: float = 0.2
    t_max: int = 15
    fusion: str = None
    log_every: int = 50
    lr_schedule: str = "constant"   # or "cosine": decays to 0 over ``steps``


# Small-compute recipe (about three minutes on one core): single-layer stacks,
# larger batches and a higher learning rate than the defaults. SAP and OG share
# one teacher-forced pass ("sap_og"); fine-tuning rollouts are capped at 10
# steps, roughly twice the mean expert path length.
DESK_MODEL = dict(text_layers=1, coarse_layers=1, fine_layers=1)
DESK_PRETRAIN = TrainConfig(steps=650, lr=1e-3, batch_size=16, tasks=("sap_og",))
DESK_FINETUNE = TrainConfig(steps=450, lr=1e-3, batch_size=8, t_max=10)

PRETRAIN_TASKS = ("sap", "og", "sap_og", "mlm", "mrc")


LR_SCHEDULES = ("constant", "cosine")


def lr_at(cfg, it):
    """Learning rate for iteration ``it`` of a run of ``cfg.steps``."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * it / max(cfg.steps, 1)))
    raise ValueError(f"unknown learning-rate schedule {cfg.lr_schedule!r}")


def _sample(rng, episodes):
    return episodes[int(rng.integers(len(episodes)))]


def pretrain(model, episodes, cfg=TrainConfig(), on_report=None):
    """Round-robin over the pretraining tasks on expert demonstrations.

    ``episodes`` is a list of (env, episode) pairs. Each iteration draws
    ``batch_size`` episodes for one task. Mutates and returns ``model.params``.
    """
    if not episodes:
        raise ValueError("empty training set")
    for task in cfg.tasks:
        if task not in PRETRAIN_TASKS:
            raise ValueError(f"unknown pretraining task {task!r}")
    lr_at(cfg, 0)
    rng = np.random.default_rng([cfg.seed, 11])
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    store = model.params
    for it in range(cfg.steps):
        task = cfg.tasks[it % len(cfg.tasks)]
        store.zero_grad()
        items = [_sample(rng, episodes) for _ in range(cfg.batch_size)]
        loss = batch_pretrain_loss(model, task, items, rng, cfg)
        value = 0.0
        if loss is not None:
            loss.backward()
            value = float(loss.data)
        rep = LossReport(step=it, task=task, total=value, samples={task: cfg.batch_size})
        setattr(rep, "sap" if task == "sap_og" else task, value)
        opt.lr = lr_at(cfg, it)
        opt.step(store)
        if on_report is not None:
            on_report(rep)
    return store


def finetune(model, episodes, cfg=TrainConfig(), lam=None, on_report=None):
    """Fine-tune with lam * L_SAP + L_PID + L_OG (``lam`` defaults to cfg.lam)."""
    if not episodes:
        raise ValueError("empty training set")
    lam = cfg.lam if lam is None else lam
    lr_at(cfg, 0)
    rng = np.random.default_rng([cfg.seed, 13])
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    store = model.params
    for it in range(cfg.steps):
        store.zero_grad()
        items = [_sample(rng, episodes) for _ in range(cfg.batch_size)]
        loss, rep = batch_finetune_losses(model, items, rng, lam, cfg)
        loss.backward()
        rep.step = it
        opt.lr = lr_at(cfg, it)
        opt.step(store)
        if on_report is not None:
            on_report(rep)
    return store


def log_writer(fh):
    """Report callback that appends JSON lines to an open file."""

    def write(rep):
        fh.write(rep.to_json() + "\n")

    return write
