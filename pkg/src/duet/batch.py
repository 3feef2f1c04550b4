"""Packed forward passes: many decision steps through the encoders at once.

All items of a batch share one row table per encoder and attention runs per
group, so items never see each other. The results equal the per-step
methods of :class:`~duet.model.DuetModel` up to floating-point summation
order; the gain is that the op count no longer grows with the batch.

Maps used here are built in index mode: each node records which rows of a
panorama token table it pools, and pooling becomes one sparse product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .envsim import observation
from .model import MASK_THRESHOLD, NEG_INF, PAD_ID, visited_mask
from .tensorcore import Tensor, ops
from .topomap import NAVIGABLE, EncodedPanorama, TopoMap


def _pad_groups(groups):
    """List of row-index lists -> (S, Lmax) int array padded with -1."""
    width = max((len(g) for g in groups), default=0)
    out = np.full((len(groups), max(width, 1)), -1, dtype=np.int64)
    for i, g in enumerate(groups):
        out[i, : len(g)] = g
    return out


def _rows_matrix(rows, n_cols, weights=None, n_rows=None):
    """Sparse (n_rows, n_cols) matrix; ``rows[i]`` lists the columns summed into row i."""
    r, c, w = [], [], []
    for i, cols in enumerate(rows):
        cols = list(cols)
        r.extend([i] * len(cols))
        c.extend(cols)
        w.extend([1.0] * len(cols) if weights is None else [weights[i]] * len(cols))
    shape = (len(rows) if n_rows is None else n_rows, n_cols)
    return sparse.csr_matrix((np.asarray(w, dtype=np.float64), (r, c)), shape=shape)


class _Blocks:
    """Packed versions of the encoder building blocks."""

    def __init__(self, model):
        self.m = model
        self.p = model.params
        self.heads = model.config.heads

    def attn(self, name, xq, xkv, q_index, kv_index, bias=None):
        p = self.p
        a = ops.segment_attention(
            xq, xkv, p[f"{name}.W_q"], p[f"{name}.W_k"], p[f"{name}.W_v"],
            p[f"{name}.b_q"], p[f"{name}.b_k"], p[f"{name}.b_v"],
            q_index=q_index, kv_index=kv_index, bias=bias, heads=self.heads,
        )
        a = ops.linear(a, p[f"{name}.W_o"], p[f"{name}.b_o"])
        return self.m._ln(f"{name}.ln", ops.add(xq, a))

    def ffn_block(self, name, x):
        return self.m._ffn_block(name, x)

    def with_stop(self, name, x, slots):
        """Insert the learned stop row: ``slots`` indexes [stop; x] (0 = stop)."""
        d = self.m.config.hidden
        return ops.getitem(ops.concat([ops.reshape(self.p[name], (1, d)), x]), slots)


# -- text and panoramas ---------------------------------------------------------


@dataclass
class PackedText:
    hidden: Tensor                  # (sum L, d)
    rows: list                      # per text: its rows in ``hidden``
    keys: list                      # per text: its non-padding rows


def encode_texts(model, token_lists):
    """Encode several instructions in one pass."""
    cfg = model.config
    ids, pos, rows, keys = [], [], [], []
    off = 0
    for toks in token_lists:
        t = np.asarray(toks, dtype=np.int64)
        if t.ndim != 1 or not 1 <= len(t) <= cfg.max_text_len:
            raise ValueError(f"instruction length must be in [1, {cfg.max_text_len}]")
        if t.min() < 0 or t.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of vocabulary [0, {cfg.vocab_size})")
        ids.append(t)
        pos.append(np.arange(len(t)))
        r = np.arange(off, off + len(t))
        rows.append(r)
        keys.append(r[t != PAD_ID])
        off += len(t)
    ids, pos = np.concatenate(ids), np.concatenate(pos)
    p = model.params
    b = _Blocks(model)
    x = ops.add(ops.getitem(p["text.word_emb"], ids), ops.getitem(p["text.pos_emb"], pos))
    x = model._ln("text.ln_in", ops.add(x, p["text.type_emb"]))
    qi, ki = _pad_groups(rows), _pad_groups(keys)
    for i in range(cfg.text_layers):
        x = b.attn(f"text.layers.{i}.self", x, x, qi, ki)
        x = b.ffn_block(f"text.layers.{i}.ffn", x)
    return PackedText(hidden=x, rows=rows, keys=keys)


def _angles(o):
    o = np.asarray(o, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([np.sin(o[:, 0]), np.cos(o[:, 0]), np.sin(o[:, 1]), np.cos(o[:, 1])])


def encode_panoramas(model, panos, drops=None):
    """Encode panoramas into one token table.

    Returns (tokens, rows) where ``rows[i]`` = (view rows, object rows) of
    panorama i. ``drops[i]`` optionally zeroes input features (views then
    objects), as in masked region classification.
    """
    cfg = model.config
    dt = model.dtype
    vfs, ofs, vang, oang, groups, rows = [], [], [], [], [], []
    nv_total = sum(len(p.view_feats) for p in panos)
    v_off, o_off, off = 0, nv_total, 0
    perm = []
    for i, pano in enumerate(panos):
        vf = np.asarray(pano.view_feats, dtype=dt)
        of = np.asarray(pano.obj_feats, dtype=dt).reshape(-1, cfg.feature_dim)
        if vf.shape[0] < 1:
            raise ValueError("panorama needs at least one view")
        if vf.shape[1] != cfg.feature_dim:
            raise ValueError(f"feature dim {vf.shape[1]} does not match model feature_dim {cfg.feature_dim}")
        n, m = len(vf), len(of)
        if drops is not None and drops[i] is not None:
            d = np.asarray(drops[i], dtype=bool)
            vf = np.where(d[:n, None], 0.0, vf)
            of = np.where(d[n:, None], 0.0, of)
        vfs.append(vf)
        ofs.append(of)
        vang.append(_angles(pano.view_orient))
        oang.append(_angles(pano.obj_orient) if m else np.zeros((0, 4)))
        # packed order is [views; objects] per panorama
        perm.extend(range(v_off, v_off + n))
        perm.extend(range(o_off, o_off + m))
        rows.append((np.arange(off, off + n), np.arange(off + n, off + n + m)))
        groups.append(range(off, off + n + m))
        v_off, o_off, off = v_off + n, o_off + m, off + n + m
    p = model.params
    views = ops.add(model._linear("pano.view_proj", model._c(np.vstack(vfs))),
                    model._linear("pano.ang_proj", model._c(np.vstack(vang))))
    views = ops.add(views, ops.getitem(p["pano.type_emb"], 0))
    parts = [views]
    if o_off > nv_total:
        objs = ops.add(model._linear("pano.obj_proj", model._c(np.vstack(ofs))),
                       model._linear("pano.ang_proj", model._c(np.vstack(oang))))
        parts.append(ops.add(objs, ops.getitem(p["pano.type_emb"], 1)))
    x = ops.concat(parts) if len(parts) > 1 else views
    x = model._ln("pano.ln_in", ops.getitem(x, np.asarray(perm, dtype=np.int64)))
    b = _Blocks(model)
    gi = _pad_groups(groups)
    for i in range(cfg.pano_layers):
        x = b.attn(f"pano.layers.{i}.self", x, x, gi, gi)
        x = b.ffn_block(f"pano.layers.{i}.ffn", x)
    return x, rows


# -- decision views -----------------------------------------------------------


@dataclass
class StepView:
    """Everything a packed forward needs about one decision, as plain arrays."""

    text: int                       # index into the PackedText
    index: list                     # score position -> node id (0 = stop / None)
    visited: np.ndarray             # (K+1,) coarse mask
    pool: list                      # per map node: token rows averaged
    loc: np.ndarray                 # (K, 6)
    steps: np.ndarray               # (K,)
    dist: np.ndarray                # (K+1, K+1) GASA distances
    view_rows: np.ndarray           # (n,) current node's view rows
    obj_rows: np.ndarray            # (m,)
    absf: np.ndarray                # (3,)
    nbr: np.ndarray                 # (n, 6)
    ind: np.ndarray                 # (n, 1)
    local_nodes: list               # neighbours in fine score order
    local_views: list               # their view indices
    conv: list                      # per global position: list of local slots summed
    conv_mask: np.ndarray           # (K+1,)


def step_view(model, tmap, text_id):
    """Freeze the decision inputs of an index-mode map."""
    enc = tmap.fine_cache
    if enc is None or enc.rows is None:
        raise ValueError("map has no token rows for the current node")
    cfg = model.config
    if len(tmap) > cfg.max_nodes:
        raise ValueError(f"map has {len(tmap)} nodes, more than max_nodes={cfg.max_nodes}")
    loc, steps = model.coarse_geometry(tmap)
    vrows, orows = (np.asarray(r, dtype=np.int64) for r in enc.rows)
    absf, nbr, ind = model.fine_geometry(tmap, enc, len(vrows))
    local_nodes = sorted(enc.navigable_views)
    slot = {u: i + 1 for i, u in enumerate(local_nodes)}
    back = [slot[u] for u in local_nodes if tmap.records[u].status != NAVIGABLE]
    conv, cmask = [[0]], [False]
    for u in tmap.order:
        if u in slot:
            conv.append([slot[u]])
            cmask.append(False)
        else:
            conv.append(list(back))
            cmask.append(not back)
    vis = visited_mask(tmap)
    return StepView(
        text=text_id,
        index=tmap.position_index(),
        visited=vis,
        pool=[tmap.records[u].pool_rows() for u in tmap.order],
        loc=loc,
        steps=steps,
        dist=tmap.distance_matrix(cfg.distance_mode),
        view_rows=vrows,
        obj_rows=orows,
        absf=absf,
        nbr=nbr,
        ind=ind,
        local_nodes=local_nodes,
        local_views=[enc.navigable_views[u] for u in local_nodes],
        conv=conv,
        conv_mask=np.asarray(cmask) | vis,
    )


@dataclass
class PackedScores:
    fused: Tensor                   # all items' action scores, concatenated
    offsets: np.ndarray             # (S+1,) item boundaries in ``fused``
    sigma: Tensor = None            # (S,) or None
    object_logits: Tensor = None    # all items' object logits, concatenated
    obj_offsets: np.ndarray = None
    coarse_hidden: Tensor = None
    coarse_groups: np.ndarray = None
    fine_hidden: Tensor = None
    fine_groups: np.ndarray = None
    views: list = field(default_factory=list)

    def scores(self, s):
        return self.fused.data[self.offsets[s]:self.offsets[s + 1]]

    def _padded(self, values, offsets, items):
        width = max(int(offsets[i + 1] - offsets[i]) for i in items)
        idx = np.full((len(items), width), len(values.data), dtype=np.int64)
        for r, i in enumerate(items):
            idx[r, : offsets[i + 1] - offsets[i]] = np.arange(offsets[i], offsets[i + 1])
        ext = ops.concat([values, Tensor(np.full(1, NEG_INF, dtype=values.dtype))])
        return ops.getitem(ext, idx)

    def nll(self, items, targets):
        """(len(items),) negative log-probabilities of score positions ``targets``."""
        lsm = ops.log_softmax(self._padded(self.fused, self.offsets, items), axis=-1)
        return ops.mul(ops.getitem(lsm, (np.arange(len(items)), np.asarray(targets))), -1.0)

    def object_nll(self, items, targets):
        lsm = ops.log_softmax(self._padded(self.object_logits, self.obj_offsets, items), axis=-1)
        return ops.mul(ops.getitem(lsm, (np.arange(len(items)), np.asarray(targets))), -1.0)


def _cross_keys(text, views):
    return _pad_groups([text.keys[v.text] for v in views])


def coarse_forward(model, text, table, views, use_gasa=None):
    """Packed coarse encoder; returns (hidden, group rows (S, Kmax+1), masked scores)."""
    cfg = model.config
    use_gasa = cfg.use_gasa if use_gasa is None else use_gasa
    p = model.params
    b = _Blocks(model)
    pools = [r for v in views for r in v.pool]
    if any(not r for r in pools):
        raise ValueError("map node without pooled tokens")
    pool = _rows_matrix(pools, table.shape[0], weights=[1.0 / len(r) for r in pools])
    x = ops.add(ops.sparse_matmul(pool, table), model._linear("coarse.loc_proj", model._c(np.vstack([v.loc for v in views]))))
    x = ops.add(x, ops.getitem(p["coarse.step_emb"], np.concatenate([v.steps for v in views])))
    slots, groups, off, k_off = [], [], 0, 0
    for v in views:
        k = len(v.pool)
        slots.extend([0] + list(range(1 + k_off, 1 + k_off + k)))
        groups.append(range(off, off + k + 1))
        off += k + 1
        k_off += k
    x = model._ln("coarse.ln_in", b.with_stop("coarse.stop_emb", x, np.asarray(slots)))
    gi = _pad_groups(groups)
    ki = _cross_keys(text, views)
    width = gi.shape[1]
    dist = np.zeros((len(views), width, width), dtype=model.dtype)
    for i, v in enumerate(views):
        n = len(v.index)
        dist[i, :n, :n] = v.dist
    h = cfg.heads
    for i in range(cfg.coarse_layers):
        pre = f"coarse.layers.{i}"
        bias = None
        if use_gasa:
            w_e = ops.reshape(p[f"{pre}.gasa.W_e"], (1, h, 1, 1))
            b_e = ops.reshape(p[f"{pre}.gasa.b_e"], (1, h, 1, 1))
            bias = ops.add(ops.mul(w_e, dist[:, None]), b_e)
        if cfg.coarse_order == "cross_gasa_ffn":
            x = b.attn(f"{pre}.cross", x, text.hidden, gi, ki)
            x = b.attn(f"{pre}.gasa", x, x, gi, gi, bias)
        else:
            x = b.attn(f"{pre}.gasa", x, x, gi, gi, bias)
            x = b.attn(f"{pre}.cross", x, text.hidden, gi, ki)
        x = b.ffn_block(f"{pre}.ffn", x)
    raw = ops.reshape(model._ffn("coarse.head", x), (x.shape[0],))
    mask = np.concatenate([v.visited for v in views])
    return x, gi, ops.masked_fill(raw, mask)


def fine_forward(model, text, table, views):
    """Packed fine encoder; returns (hidden, groups, local scores, local offsets, object logits, obj offsets)."""
    cfg = model.config
    b = _Blocks(model)
    tok_rows, absf, nbr, ind, slots, groups = [], [], [], [], [], []
    off, r_off = 0, 0
    for v in views:
        n, m = len(v.view_rows), len(v.obj_rows)
        tok_rows.append(v.view_rows)
        tok_rows.append(v.obj_rows)
        absf.append(np.repeat(v.absf[None], n + m, axis=0))
        nbr.append(np.vstack([v.nbr, np.zeros((m, 6))]))
        ind.append(np.vstack([v.ind, np.zeros((m, 1))]))
        slots.extend([0] + list(range(1 + r_off, 1 + r_off + n + m)))
        groups.append(range(off, off + 1 + n + m))
        off += 1 + n + m
        r_off += n + m
    tokens = ops.getitem(table, np.concatenate(tok_rows))
    abs_emb = model._linear("fine.abs_proj", model._c(np.vstack(absf)))
    nbr_emb = ops.mul(model._linear("fine.nbr_proj", model._c(np.vstack(nbr))), model._c(np.vstack(ind)))
    x = ops.add(ops.add(tokens, abs_emb), nbr_emb)
    x = model._ln("fine.ln_in", b.with_stop("fine.stop_emb", x, np.asarray(slots)))
    gi = _pad_groups(groups)
    ki = _cross_keys(text, views)
    for i in range(cfg.fine_layers):
        pre = f"fine.layers.{i}"
        x = b.attn(f"{pre}.cross", x, text.hidden, gi, ki)
        x = b.attn(f"{pre}.self", x, x, gi, gi)
        x = b.ffn_block(f"{pre}.ffn", x)
    local_rows, local_off, obj_rows, obj_off = [], [0], [], [0]
    for v, g in zip(views, groups):
        start = g.start
        local_rows.extend([start] + [start + 1 + k for k in v.local_views])
        local_off.append(local_off[-1] + 1 + len(v.local_views))
        n, m = len(v.view_rows), len(v.obj_rows)
        obj_rows.extend(range(start + 1 + n, start + 1 + n + m))
        obj_off.append(obj_off[-1] + m)
    local = ops.reshape(model._ffn("fine.head", ops.getitem(x, np.asarray(local_rows))), (len(local_rows),))
    if obj_rows:
        objs = ops.reshape(model._ffn("fine.obj_head", ops.getitem(x, np.asarray(obj_rows))), (len(obj_rows),))
    else:
        objs = model._c(np.zeros(0))
    return x, gi, local, np.asarray(local_off), objs, np.asarray(obj_off)


def packed_step(model, text, table, views, fusion=None, use_gasa=None):
    """Action scores for many decisions at once (see :meth:`DuetModel.step`)."""
    mode = fusion or model.config.fusion
    fine_h, fine_g, local, local_off, objs, obj_off = fine_forward(model, text, table, views)
    conv_rows, offsets = [], [0]
    for v, lo in zip(views, local_off[:-1]):
        conv_rows.extend([[lo + c for c in slots] for slots in v.conv])
        offsets.append(offsets[-1] + len(v.conv))
    conv = _rows_matrix(conv_rows, local.shape[0])
    fmask = np.concatenate([v.conv_mask for v in views])
    fine_global = ops.masked_fill(ops.sparse_matmul(conv, local), fmask)
    out = PackedScores(fused=fine_global, offsets=np.asarray(offsets), object_logits=objs, obj_offsets=obj_off,
                       fine_hidden=fine_h, fine_groups=fine_g, views=views)
    if mode == "fine_only":
        return out
    coarse_h, coarse_g, coarse = coarse_forward(model, text, table, views, use_gasa)
    out.coarse_hidden, out.coarse_groups = coarse_h, coarse_g
    if mode == "coarse_only":
        out.fused = coarse
        return out
    seg = np.repeat(np.arange(len(views)), np.diff(offsets))
    mask = (coarse.data <= MASK_THRESHOLD) | (fine_global.data <= MASK_THRESHOLD)
    if mode == "dynamic":
        stops = ops.concat([ops.getitem(coarse_h, coarse_g[:, 0]), ops.getitem(fine_h, fine_g[:, 0])], axis=1)
        sigma = ops.reshape(ops.sigmoid(model._ffn("fusion.gate", stops)), (len(views),))
        s = ops.getitem(sigma, seg)
        blended = ops.add(ops.mul(coarse, s), ops.mul(fine_global, ops.sub(1.0, s)))
        out.sigma = sigma
    elif mode == "average":
        blended = ops.add(ops.mul(coarse, 0.5), ops.mul(fine_global, 0.5))
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    out.fused = ops.masked_fill(blended, mask)
    return out


# -- index-mode episodes ----------------------------------------------------------


class PanoIndex:
    """Token table for the panoramas of a batch, keyed by (house id, node)."""

    def __init__(self, model, wanted, drops=None):
        """``wanted`` lists (env, node) pairs; duplicates are encoded once."""
        keys, panos = {}, []
        for env, node in wanted:
            key = (env.house_id, node)
            if key not in keys:
                keys[key] = len(panos)
                panos.append(observation(env, node))
        self.tokens, rows = encode_panoramas(model, panos, drops)
        self.rows = {k: rows[i] for k, i in keys.items()}

    def encoded(self, env, node):
        pano = env.panoramas[node]
        return EncodedPanorama(
            node_id=node,
            views=None,
            objects=None,
            navigable_views=dict(pano.navigable_views),
            position=pano.position,
            neighbor_positions={v: env.coords[v] for v in pano.navigable_views},
            rows=self.rows[(env.house_id, node)],
        )


class IndexRollout:
    """Rollout whose map refers to rows of a shared :class:`PanoIndex`."""

    def __init__(self, model, env, episode, index, text_id):
        cfg = model.config
        self.model, self.env, self.episode = model, env, episode
        self.index, self.text_id = index, text_id
        self.tmap = TopoMap(d_max=cfg.d_max, distance_mode=cfg.distance_mode)
        self.t = 0
        self.path = []
        self.observe(episode.start_node)

    @property
    def current(self):
        return self.tmap.current

    def observe(self, node):
        self.t += 1
        self.tmap.update(self.t, self.index.encoded(self.env, node))
        self.path.append(node)

    def move_to(self, target):
        route = self.tmap.route(self.tmap.current, target)
        for u in route[1:]:
            self.observe(u)
        return route

    def view(self):
        return step_view(self.model, self.tmap, self.text_id)
