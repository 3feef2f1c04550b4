"""Dual-scale graph transformer: text, panorama, coarse and fine encoders.

All weights live in one :class:`~duet.tensorcore.ParamStore` under dotted
names (``coarse.layers.0.gasa.W_q`` ...). The encoders are plain methods on
:class:`DuetModel`; every forward pass is a pure function of (inputs, params).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .tensorcore import NEG_INF, MASK_THRESHOLD, ParamStore, Tensor, as_tensor, ops
from .tensorcore import functional as F
from .topomap import NAVIGABLE

FUSION_MODES = ("dynamic", "average", "coarse_only", "fine_only")
COARSE_ORDERS = ("cross_gasa_ffn", "gasa_cross_ffn")
PAD_ID = 0


@dataclass(frozen=True)
class DuetConfig:
    feature_dim: int = 64
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 128
    text_layers: int = 2
    pano_layers: int = 1
    coarse_layers: int = 2
    fine_layers: int = 2
    max_steps: int = 30
    max_nodes: int = 64
    max_text_len: int = 48
    vocab_size: int = 37
    n_region_classes: int = 28
    use_gasa: bool = True
    fusion: str = "dynamic"
    distance_mode: str = "metric"
    d_max: float = 50.0
    floor_height: float = 3.0
    coarse_order: str = "cross_gasa_ffn"
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        for name in ("text_layers", "pano_layers", "coarse_layers", "fine_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.coarse_order not in COARSE_ORDERS:
            raise ValueError(f"unknown coarse layer order {self.coarse_order!r}")

    @classmethod
    def for_env(cls, env_config, **overrides):
        vocab = env_config.vocab()
        base = dict(
            feature_dim=env_config.feature_dim,
            vocab_size=len(vocab),
            n_region_classes=env_config.n_room_types + env_config.n_object_classes,
            floor_height=env_config.floor_height,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, **overrides):
        """Layer counts and width of the full-size architecture (not used in tests)."""
        base = dict(hidden=768, heads=12, ffn_dim=3072, text_layers=9, pano_layers=2, coarse_layers=4, fine_layers=4)
        base.update(overrides)
        return cls(**base)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


@dataclass
class TextEncoding:
    hidden: Tensor                  # (L, d)
    pad_mask: np.ndarray            # (L,) True at padding
    tokens: tuple = ()


@dataclass
class CoarseEncoding:
    hidden: Tensor                  # (K+1, d); row 0 is the stop node
    raw_scores: Tensor              # (K+1,) before masking
    scores: Tensor                  # (K+1,) visited nodes at the mask sentinel
    mask: np.ndarray                # (K+1,) True where masked


@dataclass
class FineEncoding:
    hidden: Tensor                  # (1+n+m, d) = [r0; R; O]
    scores: Tensor                  # (|N|+1,) stop then neighbours by id
    object_logits: Tensor           # (m,)
    local_nodes: list               # neighbour ids in score order (after stop)
    n_views: int = 0

    @property
    def stop(self):
        return self.hidden[0]


@dataclass
class ActionScores:
    coarse: Tensor
    fine: Tensor
    fine_global: Tensor
    sigma: Tensor
    fused: Tensor
    mask: np.ndarray
    index: list                     # score position -> node id, 0 = stop (None)
    object_logits: Tensor
    coarse_enc: CoarseEncoding = None
    fine_enc: FineEncoding = None

    def probs(self):
        return F.softmax(self.fused.data)


# -- parameter initialisation -----------------------------------------------


# residual branches start small so tokens keep their identity through deep stacks
RESIDUAL_INIT = 0.2


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


def _init_linear(store, rng, name, d_in, d_out, bias=True, std=None):
    store.add(f"{name}.W", _normal(rng, (d_in, d_out), std or 1.0 / math.sqrt(d_in)))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out))


def _init_ln(store, name, d):
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def _init_attn(store, rng, name, d):
    for w in ("q", "k", "v"):
        store.add(f"{name}.W_{w}", _normal(rng, (d, d), 1.0 / math.sqrt(d)))
        store.add(f"{name}.b_{w}", np.zeros(d))
    store.add(f"{name}.W_o", _normal(rng, (d, d), RESIDUAL_INIT / math.sqrt(d)))
    store.add(f"{name}.b_o", np.zeros(d))
    _init_ln(store, f"{name}.ln", d)


def _init_ffn(store, rng, name, d_in, d_hid, d_out, out_scale=1.0):
    store.add(f"{name}.W_1", _normal(rng, (d_in, d_hid), 1.0 / math.sqrt(d_in)))
    store.add(f"{name}.b_1", np.zeros(d_hid))
    store.add(f"{name}.W_2", _normal(rng, (d_hid, d_out), out_scale / math.sqrt(d_hid)))
    store.add(f"{name}.b_2", np.zeros(d_out))


def _init_ffn_block(store, rng, name, d, d_ff):
    _init_ffn(store, rng, name, d, d_ff, d, RESIDUAL_INIT)
    _init_ln(store, f"{name}.ln", d)


def init_params(config, seed=0):
    """Fresh parameters for ``config`` (deterministic in seed)."""
    rng = np.random.default_rng([seed, 7])
    d, ff = config.hidden, config.ffn_dim
    s = ParamStore(np.float64)
    emb_std = 0.5

    s.add("text.word_emb", _normal(rng, (config.vocab_size, d), 1.0))
    s.add("text.pos_emb", _normal(rng, (config.max_text_len, d), emb_std))
    s.add("text.type_emb", _normal(rng, (d,), emb_std))
    _init_ln(s, "text.ln_in", d)
    for i in range(config.text_layers):
        _init_attn(s, rng, f"text.layers.{i}.self", d)
        _init_ffn_block(s, rng, f"text.layers.{i}.ffn", d, ff)

    # panorama features are roughly unit-norm vectors, not unit-variance coordinates
    _init_linear(s, rng, "pano.view_proj", config.feature_dim, d, std=1.0)
    _init_linear(s, rng, "pano.obj_proj", config.feature_dim, d, std=1.0)
    _init_linear(s, rng, "pano.ang_proj", 4, d)
    s.add("pano.type_emb", _normal(rng, (2, d), emb_std))
    _init_ln(s, "pano.ln_in", d)
    for i in range(config.pano_layers):
        _init_attn(s, rng, f"pano.layers.{i}.self", d)
        _init_ffn_block(s, rng, f"pano.layers.{i}.ffn", d, ff)

    _init_linear(s, rng, "coarse.loc_proj", 6, d)
    s.add("coarse.step_emb", _normal(rng, (config.max_steps + 1, d), emb_std))
    s.add("coarse.stop_emb", _normal(rng, (d,), emb_std))
    _init_ln(s, "coarse.ln_in", d)
    for i in range(config.coarse_layers):
        _init_attn(s, rng, f"coarse.layers.{i}.cross", d)
        _init_attn(s, rng, f"coarse.layers.{i}.gasa", d)
        s.add(f"coarse.layers.{i}.gasa.W_e", np.zeros(config.heads))
        s.add(f"coarse.layers.{i}.gasa.b_e", np.zeros(config.heads))
        _init_ffn_block(s, rng, f"coarse.layers.{i}.ffn", d, ff)
    _init_ffn(s, rng, "coarse.head", d, d, 1)

    _init_linear(s, rng, "fine.abs_proj", 3, d)
    _init_linear(s, rng, "fine.nbr_proj", 6, d)
    s.add("fine.stop_emb", _normal(rng, (d,), emb_std))
    _init_ln(s, "fine.ln_in", d)
    for i in range(config.fine_layers):
        _init_attn(s, rng, f"fine.layers.{i}.cross", d)
        _init_attn(s, rng, f"fine.layers.{i}.self", d)
        _init_ffn_block(s, rng, f"fine.layers.{i}.ffn", d, ff)
    _init_ffn(s, rng, "fine.head", d, d, 1)
    _init_ffn(s, rng, "fine.obj_head", d, d, 1)

    _init_ffn(s, rng, "fusion.gate", 2 * d, d, 1)

    _init_attn(s, rng, "mlm.coarse_cross", d)
    _init_attn(s, rng, "mlm.fine_cross", d)
    _init_ffn(s, rng, "mlm.head", d, d, config.vocab_size)
    _init_ffn(s, rng, "mrc.head", d, d, config.n_region_classes)
    return s.astype(config.dtype) if config.dtype != "float64" else s


def param_shapes(config):
    return {n: t.shape for n, t in init_params(config, 0).items()}


# -- pure score-space operations ---------------------------------------------


def convert_local_scores(local_scores, tmap, local_nodes):
    """Map stop + neighbour scores onto the map's global action positions.

    Nodes that are neither the stop action nor a neighbour of the current node
    share the backtrack score: the sum of the local scores of visited
    neighbours. Without any visited neighbour the backtrack score is masked.
    Visited nodes are masked as in the coarse scores. Returns (scores, mask).
    """
    local_scores = as_tensor(local_scores)
    pos = {u: i + 1 for i, u in enumerate(local_nodes)}
    visited_local = [pos[u] for u in local_nodes if tmap.records[u].status != NAVIGABLE]
    back_slot = len(local_nodes) + 1
    if visited_local:
        s_back = ops.reshape(ops.tsum(ops.getitem(local_scores, np.asarray(visited_local))), (1,))
    else:
        s_back = Tensor(np.zeros(1, dtype=local_scores.dtype))
    ext = ops.concat([local_scores, s_back])
    gather = [0]
    mask = [False]
    for u in tmap.order:
        if u in pos:
            gather.append(pos[u])
            mask.append(False)
        else:
            gather.append(back_slot)
            mask.append(not visited_local)
    mask = np.asarray(mask) | visited_mask(tmap)
    return ops.masked_fill(ops.getitem(ext, np.asarray(gather)), mask), mask


def visited_mask(tmap):
    return np.asarray([False] + [tmap.records[u].status != NAVIGABLE for u in tmap.order])


def fuse(coarse, fine_global, sigma, mode="dynamic"):
    """Blend coarse and converted fine scores; a masked entry in either stays masked."""
    if mode == "coarse_only":
        return as_tensor(coarse)
    if mode == "fine_only":
        return as_tensor(fine_global)
    coarse, fine_global = as_tensor(coarse), as_tensor(fine_global)
    if mode == "average":
        sigma = 0.5
    elif mode != "dynamic":
        raise ValueError(f"unknown fusion mode {mode!r}")
    mask = (coarse.data <= MASK_THRESHOLD) | (fine_global.data <= MASK_THRESHOLD)
    if isinstance(sigma, Tensor):
        blended = ops.add(ops.mul(coarse, sigma), ops.mul(fine_global, ops.sub(1.0, sigma)))
    else:
        blended = ops.add(ops.mul(coarse, float(sigma)), ops.mul(fine_global, 1.0 - float(sigma)))
    return ops.masked_fill(blended, mask)


def location_features(frm, to, heading, dist, hops):
    """(sin, cos relative heading, sin, cos elevation, distance / 10, hops / 10)."""
    dx, dy, dz = to[0] - frm[0], to[1] - frm[1], to[2] - frm[2]
    horiz = math.hypot(dx, dy)
    rel = (math.atan2(dy, dx) - heading) if horiz > 0 else 0.0
    elev = math.atan2(dz, horiz) if (horiz > 0 or dz) else 0.0
    return (math.sin(rel), math.cos(rel), math.sin(elev), math.cos(elev), dist / 10.0, hops / 10.0)


# -- the model ------------------------------------------------------------------


class DuetModel:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.dtype = np.dtype(config.dtype)

    def _c(self, a):
        return Tensor(np.asarray(a, dtype=self.dtype))

    # -- building blocks -------------------------------------------------------
    def _linear(self, name, x):
        p = self.params
        return ops.linear(x, p[f"{name}.W"], p[f"{name}.b"])

    def _ln(self, name, x):
        return ops.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _ffn(self, name, x):
        p = self.params
        h = ops.gelu(ops.linear(x, p[f"{name}.W_1"], p[f"{name}.b_1"]))
        return ops.linear(h, p[f"{name}.W_2"], p[f"{name}.b_2"])

    def _attn_block(self, name, xq, xkv, bias=None):
        p = self.params
        a = ops.attention(
            xq, xkv, p[f"{name}.W_q"], p[f"{name}.W_k"], p[f"{name}.W_v"],
            p[f"{name}.b_q"], p[f"{name}.b_k"], p[f"{name}.b_v"],
            bias=bias, heads=self.config.heads,
        )
        a = ops.linear(a, p[f"{name}.W_o"], p[f"{name}.b_o"])
        return self._ln(f"{name}.ln", ops.add(xq, a))

    def _ffn_block(self, name, x):
        return self._ln(f"{name}.ln", ops.add(x, self._ffn(name, x)))

    def _key_bias(self, n_query, pad_mask):
        if pad_mask is None or not pad_mask.any():
            return None
        return np.broadcast_to(np.where(pad_mask, NEG_INF, 0.0), (n_query, len(pad_mask))).astype(self.dtype)

    # -- text ----------------------------------------------------------------
    def encode_text(self, tokens):
        ids = np.asarray(tokens, dtype=np.int64)
        cfg = self.config
        if ids.ndim != 1 or not 1 <= len(ids) <= cfg.max_text_len:
            raise ValueError(f"instruction length must be in [1, {cfg.max_text_len}]")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of vocabulary [0, {cfg.vocab_size})")
        p = self.params
        x = ops.add(F.embedding_lookup(p["text.word_emb"], ids), ops.getitem(p["text.pos_emb"], slice(0, len(ids))))
        x = self._ln("text.ln_in", ops.add(x, p["text.type_emb"]))
        pad = ids == PAD_ID
        bias = self._key_bias(len(ids), pad)
        for i in range(cfg.text_layers):
            x = self._attn_block(f"text.layers.{i}.self", x, x, bias)
            x = self._ffn_block(f"text.layers.{i}.ffn", x)
        return TextEncoding(hidden=x, pad_mask=pad, tokens=tuple(int(t) for t in ids))

    # -- panorama --------------------------------------------------------------
    def encode_panorama(self, pano, view_drop=None, obj_drop=None):
        """Joint self-attention over view and object tokens; returns (views, objects)."""
        cfg = self.config
        vf = np.asarray(pano.view_feats, dtype=self.dtype)
        of = np.asarray(pano.obj_feats, dtype=self.dtype).reshape(-1, vf.shape[1] if vf.size else cfg.feature_dim)
        if vf.shape[0] < 1:
            raise ValueError("panorama needs at least one view")
        if vf.shape[1] != cfg.feature_dim or of.shape[1] != cfg.feature_dim:
            raise ValueError(f"feature dim {vf.shape[1]} does not match model feature_dim {cfg.feature_dim}")
        if view_drop is not None:
            vf = np.where(np.asarray(view_drop)[:, None], 0.0, vf)
        if obj_drop is not None and len(of):
            of = np.where(np.asarray(obj_drop)[:, None], 0.0, of)
        n, m = len(vf), len(of)
        p = self.params

        def ang(o):
            o = np.asarray(o, dtype=self.dtype).reshape(-1, 2)
            return np.column_stack([np.sin(o[:, 0]), np.cos(o[:, 0]), np.sin(o[:, 1]), np.cos(o[:, 1])])

        views = ops.add(self._linear("pano.view_proj", self._c(vf)), self._linear("pano.ang_proj", self._c(ang(pano.view_orient))))
        views = ops.add(views, ops.getitem(p["pano.type_emb"], 0))
        parts = [views]
        if m:
            objs = ops.add(self._linear("pano.obj_proj", self._c(of)), self._linear("pano.ang_proj", self._c(ang(pano.obj_orient))))
            parts.append(ops.add(objs, ops.getitem(p["pano.type_emb"], 1)))
        x = self._ln("pano.ln_in", ops.concat(parts) if m else views)
        for i in range(cfg.pano_layers):
            x = self._attn_block(f"pano.layers.{i}.self", x, x)
            x = self._ffn_block(f"pano.layers.{i}.ffn", x)
        if m:
            return ops.getitem(x, slice(0, n)), ops.getitem(x, slice(n, n + m))
        return x, self._c(np.zeros((0, cfg.hidden)))

    # -- coarse scale ------------------------------------------------------------
    def coarse_geometry(self, tmap):
        """Location features (K, 6) and clipped last-visit steps (K,) of the map nodes."""
        cfg = self.config
        cur = tmap.current
        ci = tmap.order.index(cur)
        dist = np.minimum(tmap.floyd()[0][ci], cfg.d_max)
        hops = np.minimum(tmap.hops_from(cur), cfg.d_max)
        recs = [tmap.records[u] for u in tmap.order]
        delta = np.asarray([r.coordinates for r in recs], dtype=np.float64) - tmap.records[cur].coordinates
        horiz = np.hypot(delta[:, 0], delta[:, 1])
        rel = np.where(horiz > 0, np.arctan2(delta[:, 1], delta[:, 0]) - tmap.heading, 0.0)
        elev = np.arctan2(delta[:, 2], horiz)
        loc = np.column_stack([np.sin(rel), np.cos(rel), np.sin(elev), np.cos(elev), dist / 10.0, hops / 10.0])
        steps = np.minimum([r.last_visit_step for r in recs], cfg.max_steps).astype(np.int64)
        return loc.astype(self.dtype).reshape(-1, 6), steps

    def coarse_inputs(self, tmap):
        """Node input rows (stop first) before the input layer norm."""
        cfg = self.config
        p = self.params
        loc, steps = self.coarse_geometry(tmap)
        pooled = ops.stack([tmap.records[u].pooled_rep for u in tmap.order])
        x = ops.add(pooled, self._linear("coarse.loc_proj", self._c(loc)))
        x = ops.add(x, ops.getitem(p["coarse.step_emb"], steps))
        return ops.concat([ops.reshape(p["coarse.stop_emb"], (1, cfg.hidden)), x])

    def graph_bias(self, layer, tmap):
        p = self.params
        e = tmap.distance_matrix(self.config.distance_mode)
        return F.graph_bias(e.astype(self.dtype), p[f"coarse.layers.{layer}.gasa.W_e"], p[f"coarse.layers.{layer}.gasa.b_e"])

    def coarse_forward(self, tmap, text, use_gasa=None):
        cfg = self.config
        use_gasa = cfg.use_gasa if use_gasa is None else use_gasa
        if len(tmap) < 1:
            raise ValueError("coarse encoder needs a map with at least one node")
        if len(tmap) > cfg.max_nodes:
            raise ValueError(f"map has {len(tmap)} nodes, more than max_nodes={cfg.max_nodes}")
        x = self._ln("coarse.ln_in", self.coarse_inputs(tmap))
        kbias = self._key_bias(x.shape[0], text.pad_mask)
        for i in range(cfg.coarse_layers):
            pre = f"coarse.layers.{i}"
            bias = self.graph_bias(i, tmap) if use_gasa else None
            if cfg.coarse_order == "cross_gasa_ffn":
                x = self._attn_block(f"{pre}.cross", x, text.hidden, kbias)
                x = self._attn_block(f"{pre}.gasa", x, x, bias)
            else:
                x = self._attn_block(f"{pre}.gasa", x, x, bias)
                x = self._attn_block(f"{pre}.cross", x, text.hidden, kbias)
            x = self._ffn_block(f"{pre}.ffn", x)
        raw = ops.reshape(self._ffn("coarse.head", x), (x.shape[0],))
        mask = visited_mask(tmap)
        return CoarseEncoding(hidden=x, raw_scores=raw, scores=ops.masked_fill(raw, mask), mask=mask)

    # -- fine scale ----------------------------------------------------------------
    def fine_geometry(self, tmap, enc, n):
        """Start-relative position (3,), neighbour features (n, 6) and indicator (n, 1)."""
        start = tmap.records[tmap.start].coordinates
        pos = np.asarray(enc.position)
        absf = [(pos[0] - start[0]) / 10.0, (pos[1] - start[1]) / 10.0, (pos[2] - start[2]) / self.config.floor_height]
        nbr = np.zeros((n, 6))
        ind = np.zeros((n, 1))
        for v, k in enc.navigable_views.items():
            if not 0 <= k < n:
                raise ValueError(f"navigable view index {k} out of range for {n} views")
            npos = np.asarray(enc.neighbor_positions[v])
            nbr[k] = location_features(pos, npos, tmap.heading, float(np.linalg.norm(npos - pos)), 1.0)
            ind[k] = 1.0
        return np.asarray(absf, dtype=self.dtype), nbr.astype(self.dtype), ind.astype(self.dtype)

    def fine_inputs(self, tmap, enc=None):
        cfg = self.config
        p = self.params
        enc = enc or tmap.fine_cache
        if enc is None:
            raise ValueError("no encoded panorama for the current node")
        views, objects = as_tensor(enc.views), as_tensor(enc.objects)
        n, m = views.shape[0], objects.shape[0]
        absf, nbr, ind = self.fine_geometry(tmap, enc, n)
        abs_emb = self._linear("fine.abs_proj", self._c(absf))
        nbr_emb = ops.mul(self._linear("fine.nbr_proj", self._c(nbr)), self._c(ind))
        r = ops.add(ops.add(views, abs_emb), nbr_emb)
        parts = [ops.reshape(p["fine.stop_emb"], (1, cfg.hidden)), r]
        if m:
            parts.append(ops.add(objects, abs_emb))
        return ops.concat(parts), n, m

    def fine_forward(self, text, tmap, enc=None):
        cfg = self.config
        enc = enc or tmap.fine_cache
        x, n, m = self.fine_inputs(tmap, enc)
        x = self._ln("fine.ln_in", x)
        kbias = self._key_bias(x.shape[0], text.pad_mask)
        for i in range(cfg.fine_layers):
            pre = f"fine.layers.{i}"
            x = self._attn_block(f"{pre}.cross", x, text.hidden, kbias)
            x = self._attn_block(f"{pre}.self", x, x)
            x = self._ffn_block(f"{pre}.ffn", x)
        local_nodes = sorted(enc.navigable_views)
        rows = np.asarray([0] + [1 + enc.navigable_views[u] for u in local_nodes])
        scores = ops.reshape(self._ffn("fine.head", ops.getitem(x, rows)), (len(rows),))
        if m:
            obj = ops.reshape(self._ffn("fine.obj_head", ops.getitem(x, slice(1 + n, 1 + n + m))), (m,))
        else:
            obj = self._c(np.zeros(0))
        return FineEncoding(hidden=x, scores=scores, object_logits=obj, local_nodes=local_nodes, n_views=n)

    # -- fusion --------------------------------------------------------------------
    def fusion_gate(self, coarse_stop, fine_stop):
        z = self._ffn("fusion.gate", ops.concat([coarse_stop, fine_stop]))
        return ops.reshape(ops.sigmoid(z), ())

    def step(self, text, tmap, fusion=None, use_gasa=None):
        """Full decision step over {stop} + map nodes for the map's current node."""
        mode = fusion or self.config.fusion
        fine = self.fine_forward(text, tmap)
        fine_global, fmask = convert_local_scores(fine.scores, tmap, fine.local_nodes)
        coarse = sigma = None
        if mode != "fine_only":
            coarse = self.coarse_forward(tmap, text, use_gasa)
        if mode == "dynamic":
            sigma = self.fusion_gate(coarse.hidden[0], fine.hidden[0])
        elif mode == "average":
            sigma = self._c(0.5)
        fused = fuse(
            coarse.scores if coarse is not None else None,
            fine_global,
            sigma,
            mode,
        )
        return ActionScores(
            coarse=coarse.scores if coarse is not None else None,
            fine=fine.scores,
            fine_global=fine_global,
            sigma=sigma,
            fused=fused,
            mask=fused.data <= MASK_THRESHOLD,
            index=tmap.position_index(),
            object_logits=fine.object_logits,
            coarse_enc=coarse,
            fine_enc=fine,
        )

    # -- auxiliary heads -----------------------------------------------------------
    def mlm_logits(self, text, coarse_hidden, fine_hidden, positions):
        """Vocabulary logits at ``positions`` from averaged coarse/fine word contexts."""
        w = text.hidden
        wc = self._attn_block("mlm.coarse_cross", w, coarse_hidden)
        wf = self._attn_block("mlm.fine_cross", w, fine_hidden)
        avg = ops.mul(ops.add(wc, wf), 0.5)
        return self._ffn("mlm.head", ops.getitem(avg, np.asarray(positions)))

    def mrc_logits(self, fine_hidden, rows):
        return self._ffn("mrc.head", ops.getitem(fine_hidden, np.asarray(rows)))

    def with_config(self, **changes):
        return DuetModel(replace(self.config, **changes), self.params)
