"""Node estimator: behavior search units, target attention, MMoE head.

Scores a candidate tree node ``n`` for a user ``u`` with history ``B``:

  1. Co branch: bilinear relevance ``r_i = (W_q e_n)^T (W_k e_i) / sqrt(d)``
     over the learned ID embeddings of the most recent ``M_co`` behaviors;
     the top ``K_esu`` behaviors are kept and their *reused* scores are
     softmaxed into attention weights for ``x_co = sum a_i W_v e_i``.
  2. MM branch: plain dot products ``r_i = z_n . z_i`` over the frozen
     content embeddings of the most recent ``M_mm`` behaviors select a
     second top-``K_esu`` subset; fresh scaled dot-product attention with
     separate ``W_*_mm`` matrices over the *ID embeddings* of that subset
     yields ``x_mm``. No gradient ever flows into the frozen embeddings.
  3. ``x = concat(e_n, x_user, x_co, x_mm)`` feeds a mixture-of-experts
     head: L shared experts, a softmax gate and a tower per objective,
     sigmoid outputs.

Everything is float64 numpy. ``forward_nodes`` scores a batch of nodes
for one (user, history) at once; behavior-side projections are computed
once and shared, which is mathematically identical to node-by-node
evaluation. It records every intermediate needed by ``backward``, which
produces exact reverse-mode gradients (top-k selection is treated as a
fixed index set; the probability clip used in the loss is treated as
identity).

Checkpoints (``MCKPT1``) are a named-tensor container: magic, a JSON
config block, then per tensor its name, shape, and little-endian float32
data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .corpus import BehaviorSequence
from .errors import ConfigError, FormatError, LookupFailure, ShapeError
from .mmembed import EmbeddingStore
from .tree import IndexTree

_MAGIC = b"MCKPT1"


@dataclass(frozen=True)
class EstimatorConfig:
    d_id: int = 32
    d_user: int = 16
    K_esu: int = 8
    M_co: int = 64
    M_mm: int = 128
    T: int = 3
    n_experts: int = 4
    expert_hidden: int = 64
    expert_out: int = 32
    tower_hidden: int = 32
    use_co_gsu: bool = True
    use_mm_gsu: bool = True

    def __post_init__(self):
        if self.M_co > self.M_mm:
            raise ConfigError(
                f"M_co ({self.M_co}) must not exceed M_mm ({self.M_mm})"
            )
        for name in ("d_id", "d_user", "K_esu", "M_co", "M_mm", "T",
                     "n_experts", "expert_hidden", "expert_out", "tower_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def concat_dim(self) -> int:
        # x = concat(x_video, x_user, x_co, x_mm), each of width d_id
        return 4 * self.d_id


class EstimatorParams:
    """All trainable tensors, keyed by name in a flat dict."""

    def __init__(self, cfg: EstimatorConfig, n_nodes: int,
                 tensors: dict[str, np.ndarray]):
        self.cfg = cfg
        self.n_nodes = n_nodes
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: EstimatorConfig, n_nodes: int, seed: int) -> "EstimatorParams":
        rng = np.random.default_rng(seed)
        d = cfg.d_id
        D = cfg.concat_dim
        t: dict[str, np.ndarray] = {}
        t["id_emb"] = rng.normal(scale=0.1, size=(n_nodes, d))
        t["W_user"] = rng.normal(scale=1.0 / np.sqrt(cfg.d_user),
                                 size=(cfg.d_user, d))
        t["b_user"] = np.zeros(d)
        for name in ("W_q", "W_k", "W_v", "W_q_mm", "W_k_mm", "W_v_mm"):
            t[name] = rng.normal(scale=1.0 / np.sqrt(d), size=(d, d))
        t["no_hist_co"] = np.zeros(d)
        t["no_hist_mm"] = np.zeros(d)
        for i in range(cfg.n_experts):
            t[f"expert_{i}_W1"] = rng.normal(scale=np.sqrt(2.0 / D),
                                             size=(D, cfg.expert_hidden))
            t[f"expert_{i}_b1"] = np.zeros(cfg.expert_hidden)
            t[f"expert_{i}_W2"] = rng.normal(scale=np.sqrt(2.0 / cfg.expert_hidden),
                                             size=(cfg.expert_hidden, cfg.expert_out))
            t[f"expert_{i}_b2"] = np.zeros(cfg.expert_out)
        for tt in range(cfg.T):
            t[f"gate_{tt}_W"] = rng.normal(scale=np.sqrt(1.0 / D),
                                           size=(D, cfg.n_experts))
            t[f"gate_{tt}_b"] = np.zeros(cfg.n_experts)
            t[f"tower_{tt}_W1"] = rng.normal(scale=np.sqrt(2.0 / cfg.expert_out),
                                             size=(cfg.expert_out, cfg.tower_hidden))
            t[f"tower_{tt}_b1"] = np.zeros(cfg.tower_hidden)
            t[f"tower_{tt}_W2"] = rng.normal(scale=np.sqrt(1.0 / cfg.tower_hidden),
                                             size=(cfg.tower_hidden, 1))
            t[f"tower_{tt}_b2"] = np.zeros(1)
        return cls(cfg, n_nodes, t)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.tensors.items()}

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(
            self.cfg, self.n_nodes,
            {k: v.copy() for k, v in self.tensors.items()},
        )


@dataclass
class ForwardTrace:
    """Every intermediate of a batched forward over N nodes.

    Selection index arrays hold positions local to each branch's window;
    ``co_positions``/``mm_positions`` map those to absolute positions in
    the full input sequence (old -> recent), which is what set overlap is
    measured on.
    """

    node_ids: np.ndarray  # (N,)
    co_scores: np.ndarray  # (N, Mc)
    mm_scores: np.ndarray  # (N, Mm)
    co_selected: np.ndarray  # (N, Kc) local window indices, score-desc
    mm_selected: np.ndarray  # (N, Km)
    co_positions: np.ndarray  # (Mc,) absolute sequence positions
    mm_positions: np.ndarray  # (Mm,)
    a_co: np.ndarray  # (N, Kc) attention weights, rows sum to 1
    a_mm: np.ndarray  # (N, Km)
    x_co: np.ndarray  # (N, d)
    x_mm: np.ndarray  # (N, d)
    x_user: np.ndarray  # (d,)
    x_video: np.ndarray  # (N, d)
    logits: np.ndarray  # (N, T)
    probs: np.ndarray  # (N, T), entries in (0, 1)
    co_empty: bool = False
    mm_empty: bool = False
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest scores, ties to earlier positions."""
    # stable argsort of the negated scores keeps earlier indices first on ties
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, : min(k, scores.shape[1])]


def top_k_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest entries of a 1-D score array.

    Returned in descending score order; ties broken by earlier position.
    If there are fewer than K scores, all indices are returned.
    """
    if k < 1:
        raise ConfigError("K must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    return _top_k_rows(scores[None, :], k)[0]


def _behavior_leaves(tree: IndexTree, items: np.ndarray) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= tree.n_items):
        raise LookupFailure("behavior item outside corpus")
    return tree.item_to_leaf[items]


def _check_nodes(node_ids: np.ndarray, n_nodes: int) -> np.ndarray:
    node_ids = np.atleast_1d(np.asarray(node_ids, dtype=np.int64))
    if node_ids.size and (node_ids.min() < 0 or node_ids.max() >= n_nodes):
        raise LookupFailure("node id outside tree")
    return node_ids


def co_gsu_scores(seq_items: np.ndarray, target: int, params: EstimatorParams,
                  tree: IndexTree) -> np.ndarray:
    """Bilinear ID-embedding relevance of each behavior to the target node."""
    t = params.tensors
    leaves = _behavior_leaves(tree, seq_items)
    (target,) = _check_nodes(target, params.n_nodes)
    E = t["id_emb"][leaves]  # (M, d)
    q = t["W_q"] @ t["id_emb"][target]  # (d,)
    return (E @ t["W_k"].T) @ q / np.sqrt(params.cfg.d_id)


def mm_gsu_scores(seq_items: np.ndarray, target: int, tree: IndexTree,
                  store: EmbeddingStore) -> np.ndarray:
    """Frozen-embedding dot-product relevance of each behavior to the target."""
    (target,) = _check_nodes(target, tree.n_nodes)
    Z = store.vectors(np.asarray(seq_items, dtype=np.int64))  # (M, d_mm)
    return Z @ tree.z[target]


def esu(params: EstimatorParams, reused_co_scores: np.ndarray,
        co_leaves: np.ndarray, mm_leaves: np.ndarray,
        target: int) -> tuple[np.ndarray, np.ndarray]:
    """Target attention over the two selected behavior subsets.

    The Co side softmaxes the reused search scores and combines
    ``W_v``-projected ID embeddings; the MM side runs fresh scaled
    dot-product attention with the ``W_*_mm`` matrices over the ID
    embeddings of its subset. An empty subset yields a zero vector (the
    caller substitutes the learned no-history vector).
    """
    t = params.tensors
    cfg = params.cfg
    (target,) = _check_nodes(target, params.n_nodes)
    e_n = t["id_emb"][target]
    if len(co_leaves):
        a = _softmax_rows(np.asarray(reused_co_scores, dtype=np.float64)[None, :])[0]
        x_co = a @ (t["id_emb"][co_leaves] @ t["W_v"].T)
    else:
        x_co = np.zeros(cfg.d_id)
    if len(mm_leaves):
        E = t["id_emb"][mm_leaves]  # (K, d)
        logits = (E @ t["W_k_mm"].T) @ (t["W_q_mm"] @ e_n) / np.sqrt(cfg.d_id)
        a = _softmax_rows(logits[None, :])[0]
        x_mm = a @ (E @ t["W_v_mm"].T)
    else:
        x_mm = np.zeros(cfg.d_id)
    return x_co, x_mm


def mmoe_forward(x: np.ndarray, params: EstimatorParams) -> np.ndarray:
    """Multi-gate mixture-of-experts head; returns per-objective probabilities."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.cfg.concat_dim:
        raise ShapeError(
            f"mmoe input dim {x.shape[1]} != configured {params.cfg.concat_dim}"
        )
    _, probs, _ = _mmoe_with_cache(x, params)
    return probs


def _mmoe_with_cache(x: np.ndarray, params: EstimatorParams):
    t = params.tensors
    cfg = params.cfg
    expert_pre, expert_h, expert_out = [], [], []
    for i in range(cfg.n_experts):
        pre = x @ t[f"expert_{i}_W1"] + t[f"expert_{i}_b1"]
        h = np.maximum(pre, 0.0)
        expert_pre.append(pre)
        expert_h.append(h)
        expert_out.append(h @ t[f"expert_{i}_W2"] + t[f"expert_{i}_b2"])
    E_out = np.stack(expert_out)  # (L, N, p)
    gates, mixed, tower_pre, tower_h, logits = [], [], [], [], []
    for tt in range(cfg.T):
        g = _softmax_rows(x @ t[f"gate_{tt}_W"] + t[f"gate_{tt}_b"])  # (N, L)
        f_t = np.einsum("nl,lnp->np", g, E_out)
        pre = f_t @ t[f"tower_{tt}_W1"] + t[f"tower_{tt}_b1"]
        h = np.maximum(pre, 0.0)
        logit = h @ t[f"tower_{tt}_W2"] + t[f"tower_{tt}_b2"]  # (N, 1)
        gates.append(g)
        mixed.append(f_t)
        tower_pre.append(pre)
        tower_h.append(h)
        logits.append(logit[:, 0])
    logits = np.stack(logits, axis=1)  # (N, T)
    probs = _sigmoid(logits)
    cache = (expert_pre, expert_h, E_out, gates, mixed, tower_pre, tower_h)
    return logits, probs, cache


def forward_nodes(
    user_feat: Optional[np.ndarray],
    seq: BehaviorSequence | np.ndarray,
    node_ids: np.ndarray,
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
    record: bool = False,
) -> ForwardTrace:
    """Score a batch of candidate nodes for one (user, history).

    Behavior-side projections (Co keys/values, frozen MM embeddings) are
    computed once for the whole batch; per-node work is query-side only.
    With ``record=True`` the trace keeps the caches ``backward`` needs.
    """
    cfg = params.cfg
    t = params.tensors
    d = cfg.d_id
    node_ids = _check_nodes(node_ids, params.n_nodes)
    N = len(node_ids)
    seq_items = np.asarray(
        seq.items if isinstance(seq, BehaviorSequence) else seq, dtype=np.int64
    )
    S = len(seq_items)

    e_n = t["id_emb"][node_ids]  # (N, d)

    # user projection (shared across nodes)
    if user_feat is None:
        user_feat = np.zeros(cfg.d_user)
    user_feat = np.asarray(user_feat, dtype=np.float64)
    if user_feat.shape != (cfg.d_user,):
        raise ShapeError(f"user_feat shape {user_feat.shape} != ({cfg.d_user},)")
    x_user = user_feat @ t["W_user"] + t["b_user"]  # (d,)

    # Co branch over the most recent M_co events
    co_lo = max(0, S - cfg.M_co)
    co_items = seq_items[co_lo:]
    co_positions = np.arange(co_lo, S, dtype=np.int64)
    Mc = len(co_items)
    co_empty = Mc == 0
    if not co_empty and cfg.use_co_gsu:
        co_leaves = _behavior_leaves(tree, co_items)
        E_co = t["id_emb"][co_leaves]  # (Mc, d)
        Q = e_n @ t["W_q"].T  # (N, d)
        Kmat = E_co @ t["W_k"].T  # (Mc, d)
        R = (Q @ Kmat.T) / np.sqrt(d)  # (N, Mc)
        sel_co = _top_k_rows(R, cfg.K_esu)  # (N, Kc)
        co_logits = np.take_along_axis(R, sel_co, axis=1)
        a_co = _softmax_rows(co_logits)
        V = E_co @ t["W_v"].T  # (Mc, d)
        V_sel = V[sel_co]  # (N, Kc, d)
        x_co = np.einsum("nk,nkd->nd", a_co, V_sel)
    else:
        co_leaves = np.empty(0, dtype=np.int64)
        E_co = np.empty((0, d))
        Q = Kmat = V = None
        R = np.empty((N, 0))
        sel_co = np.empty((N, 0), dtype=np.int64)
        a_co = np.empty((N, 0))
        V_sel = np.empty((N, 0, d))
        x_co = np.zeros((N, d))

    # MM branch over the most recent M_mm events
    mm_lo = max(0, S - cfg.M_mm)
    mm_items = seq_items[mm_lo:]
    mm_positions = np.arange(mm_lo, S, dtype=np.int64)
    Mm = len(mm_items)
    mm_empty = Mm == 0
    if not mm_empty and cfg.use_mm_gsu:
        Z_seq = store.vectors(mm_items)  # (Mm, d_mm), frozen
        Z_n = tree.z[node_ids]  # (N, d_mm), frozen
        R_mm = Z_n @ Z_seq.T  # (N, Mm)
        sel_mm = _top_k_rows(R_mm, cfg.K_esu)  # (N, Km)
        mm_leaves = _behavior_leaves(tree, mm_items)
        sel_leaf_rows = mm_leaves[sel_mm]  # (N, Km)
        E_sel = t["id_emb"][sel_leaf_rows]  # (N, Km, d)
        q_mm = e_n @ t["W_q_mm"].T  # (N, d)
        k_mm = E_sel @ t["W_k_mm"].T  # (N, Km, d)
        mm_logits = np.einsum("nd,nkd->nk", q_mm, k_mm) / np.sqrt(d)
        a_mm = _softmax_rows(mm_logits)
        v_mm = E_sel @ t["W_v_mm"].T  # (N, Km, d)
        x_mm = np.einsum("nk,nkd->nd", a_mm, v_mm)
    else:
        R_mm = np.empty((N, 0))
        sel_mm = np.empty((N, 0), dtype=np.int64)
        sel_leaf_rows = np.empty((N, 0), dtype=np.int64)
        E_sel = np.empty((N, 0, d))
        q_mm = k_mm = v_mm = None
        a_mm = np.empty((N, 0))
        x_mm = np.zeros((N, d))

    # Cold-start contract: the trace reports zero attention outputs for an
    # empty history, but the concat consumes a learned no-history bias in
    # that slot so the prediction stays informative.
    slot_co = x_co
    if co_empty and cfg.use_co_gsu:
        slot_co = x_co + t["no_hist_co"]
    slot_mm = x_mm
    if mm_empty and cfg.use_mm_gsu:
        slot_mm = x_mm + t["no_hist_mm"]

    x_video = e_n
    x = np.concatenate(
        [x_video, np.broadcast_to(x_user, (N, d)), slot_co, slot_mm], axis=1
    )
    logits, probs, mmoe_cache = _mmoe_with_cache(x, params)

    trace = ForwardTrace(
        node_ids=node_ids,
        co_scores=R,
        mm_scores=R_mm,
        co_selected=sel_co,
        mm_selected=sel_mm,
        co_positions=co_positions,
        mm_positions=mm_positions,
        a_co=a_co,
        a_mm=a_mm,
        x_co=x_co,
        x_mm=x_mm,
        x_user=x_user,
        x_video=x_video,
        logits=logits,
        probs=probs,
        co_empty=co_empty,
        mm_empty=mm_empty,
    )
    if record:
        trace.cache = {
            "x": x,
            "user_feat": user_feat,
            "e_n": e_n,
            "co_leaves": co_leaves,
            "E_co": E_co,
            "Q": Q,
            "Kmat": Kmat,
            "V": V,
            "V_sel": V_sel,
            "sel_leaf_rows": sel_leaf_rows,
            "E_sel": E_sel,
            "q_mm": q_mm,
            "k_mm": k_mm,
            "v_mm": v_mm,
            "mmoe": mmoe_cache,
        }
    return trace


def forward(
    user_feat: Optional[np.ndarray],
    seq: BehaviorSequence | np.ndarray,
    node: int,
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
    record: bool = False,
) -> ForwardTrace:
    """Single-node forward; the batched path with N=1."""
    return forward_nodes(
        user_feat, seq, np.array([node], dtype=np.int64), params, tree, store,
        record=record,
    )


def backward(
    trace: ForwardTrace,
    labels: np.ndarray,
    params: EstimatorParams,
    out: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradients of ``sum_{n,t} BCE(labels, probs)`` w.r.t. all params.

    ``labels`` is (N, T). Gradients accumulate into ``out`` when given.
    Selection index sets are treated as constants; nothing is produced for
    the frozen content embeddings (they are not parameters).
    """
    if not trace.cache:
        raise ShapeError("trace was not recorded with record=True")
    cfg = params.cfg
    t = params.tensors
    d = cfg.d_id
    N = trace.n_nodes
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (N, cfg.T):
        raise ShapeError(f"labels shape {labels.shape} != ({N}, {cfg.T})")
    grads = out if out is not None else params.zero_grads()
    c = trace.cache
    x = c["x"]

    # d(sum BCE)/dlogit = p - y for sigmoid outputs
    dlogits = trace.probs - labels  # (N, T)

    expert_pre, expert_h, E_out, gates, mixed, tower_pre, tower_h = c["mmoe"]
    dx = np.zeros_like(x)
    dE_out = np.zeros_like(E_out)  # (L, N, p)
    for tt in range(cfg.T):
        dlog = dlogits[:, tt : tt + 1]  # (N, 1)
        grads[f"tower_{tt}_W2"] += tower_h[tt].T @ dlog
        grads[f"tower_{tt}_b2"] += dlog.sum(axis=0)
        dh = dlog @ t[f"tower_{tt}_W2"].T
        dh[tower_pre[tt] <= 0.0] = 0.0
        grads[f"tower_{tt}_W1"] += mixed[tt].T @ dh
        grads[f"tower_{tt}_b1"] += dh.sum(axis=0)
        df = dh @ t[f"tower_{tt}_W1"].T  # (N, p)
        g = gates[tt]  # (N, L)
        dg = np.einsum("np,lnp->nl", df, E_out)
        dE_out += g.T[:, :, None] * df[None, :, :]
        dg_logits = g * (dg - (dg * g).sum(axis=1, keepdims=True))
        grads[f"gate_{tt}_W"] += x.T @ dg_logits
        grads[f"gate_{tt}_b"] += dg_logits.sum(axis=0)
        dx += dg_logits @ t[f"gate_{tt}_W"].T
    for i in range(cfg.n_experts):
        dout = dE_out[i]  # (N, p)
        grads[f"expert_{i}_W2"] += expert_h[i].T @ dout
        grads[f"expert_{i}_b2"] += dout.sum(axis=0)
        dh = dout @ t[f"expert_{i}_W2"].T
        dh[expert_pre[i] <= 0.0] = 0.0
        grads[f"expert_{i}_W1"] += x.T @ dh
        grads[f"expert_{i}_b1"] += dh.sum(axis=0)
        dx += dh @ t[f"expert_{i}_W1"].T

    dx_video = dx[:, :d]
    dx_user = dx[:, d : 2 * d]
    dx_co = dx[:, 2 * d : 3 * d]
    dx_mm = dx[:, 3 * d :]

    de_n = dx_video.copy()  # (N, d)

    du = dx_user.sum(axis=0)  # x_user shared across nodes
    grads["W_user"] += np.outer(c["user_feat"], du)
    grads["b_user"] += du

    if trace.co_scores.shape[1] > 0:
        sel = trace.co_selected  # (N, Kc)
        a = trace.a_co
        V_sel = c["V_sel"]
        dA = np.einsum("nd,nkd->nk", dx_co, V_sel)
        dV_sel = a[:, :, None] * dx_co[:, None, :]  # (N, Kc, d)
        dlog_co = a * (dA - (dA * a).sum(axis=1, keepdims=True))
        Mc = trace.co_scores.shape[1]
        dR = np.zeros((N, Mc))
        np.add.at(dR, (np.arange(N)[:, None], sel), dlog_co)
        dV = np.zeros((Mc, d))
        np.add.at(dV, sel.ravel(), dV_sel.reshape(-1, d))
        E_co = c["E_co"]
        grads["W_v"] += dV.T @ E_co
        dE_co = dV @ t["W_v"]
        scale = 1.0 / np.sqrt(d)
        dQ = (dR @ c["Kmat"]) * scale  # (N, d)
        dK = (dR.T @ c["Q"]) * scale  # (Mc, d)
        grads["W_q"] += dQ.T @ c["e_n"]
        de_n += dQ @ t["W_q"]
        grads["W_k"] += dK.T @ E_co
        dE_co += dK @ t["W_k"]
        np.add.at(grads["id_emb"], c["co_leaves"], dE_co)
    elif cfg.use_co_gsu and trace.co_empty:
        grads["no_hist_co"] += dx_co.sum(axis=0)

    if trace.mm_scores.shape[1] > 0:
        a = trace.a_mm
        E_sel = c["E_sel"]  # (N, Km, d)
        v_mm = c["v_mm"]
        dA = np.einsum("nd,nkd->nk", dx_mm, v_mm)
        dv = a[:, :, None] * dx_mm[:, None, :]  # (N, Km, d)
        grads["W_v_mm"] += np.einsum("nkd,nke->de", dv, E_sel)
        dE_sel = dv @ t["W_v_mm"]
        dlog_mm = a * (dA - (dA * a).sum(axis=1, keepdims=True))
        scale = 1.0 / np.sqrt(d)
        dq = np.einsum("nk,nkd->nd", dlog_mm, c["k_mm"]) * scale
        dk = dlog_mm[:, :, None] * c["q_mm"][:, None, :] * scale  # (N, Km, d)
        grads["W_q_mm"] += dq.T @ c["e_n"]
        de_n += dq @ t["W_q_mm"]
        grads["W_k_mm"] += np.einsum("nkd,nke->de", dk, E_sel)
        dE_sel += dk @ t["W_k_mm"]
        np.add.at(
            grads["id_emb"],
            c["sel_leaf_rows"].ravel(),
            dE_sel.reshape(-1, d),
        )
    elif cfg.use_mm_gsu and trace.mm_empty:
        grads["no_hist_mm"] += dx_mm.sum(axis=0)

    np.add.at(grads["id_emb"], trace.node_ids, de_n)
    return grads


def save_params(params: EstimatorParams, path, extra_config: dict | None = None) -> None:
    cfg_json = {"estimator": asdict(params.cfg), "n_nodes": params.n_nodes}
    if extra_config:
        cfg_json.update(extra_config)
    blob = json.dumps(cfg_json, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name in sorted(params.tensors):
            arr = params.tensors[name]
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated checkpoint file")
    return buf


def load_params(path) -> tuple[EstimatorParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise FormatError("bad magic in checkpoint file")
        (json_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg_json = json.loads(_read_exact(fh, json_len).decode("utf-8"))
        cfg = EstimatorConfig(**cfg_json["estimator"])
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise FormatError(f"truncated checkpoint at tensor {name}")
            tensors[name] = (
                np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
            )
    return EstimatorParams(cfg, cfg_json["n_nodes"], tensors), cfg_json
