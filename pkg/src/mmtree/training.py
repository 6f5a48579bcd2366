"""Level-wise estimator training on the index tree.

A logged event (user, history, target item, per-objective labels) is
lifted onto the tree: every ancestor of the target's leaf carries the
event's labels at its level, every other node is a zero-label negative.
Each level from 1 to H contributes all its positives plus ``k_neg``
uniformly sampled real negatives per positive; the root is skipped (it
is an ancestor of everything and carries no signal). The loss is the
multi-objective sum of binary cross-entropies over the sampled nodes,
with probabilities clipped to [eps, 1 - eps] so a saturated sigmoid
cannot produce an infinite loss. Gradients treat the clip as identity.

Training is plain mini-batch Adam. Each step appends one CSV row
``step,mean_loss,loss_0..loss_{T-1},wall_ms``; wall_ms is the only
nondeterministic field in any artifact this module writes.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .corpus import LogStream, TrainingInstance, UserProfile, user_feature
from .errors import ConfigError, LookupFailure, TrainingError
from .estimator import EstimatorConfig, EstimatorParams, backward, forward_nodes, save_params
from .mmembed import EmbeddingStore
from .optim import Adam
from .tree import IndexTree, ancestors

CLIP_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    k_neg: int = 2
    seed: int = 0
    checkpoint_every: int = 0  # steps between checkpoints; 0 keeps only the final one

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.k_neg < 0:
            raise ConfigError("epochs, batch_size, k_neg must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def pseudo_labels(tree: IndexTree, positive_leaves: np.ndarray) -> list[np.ndarray]:
    """Per-level arrays of nodes whose subtree contains a positive leaf.

    Returned list is indexed by level 0..H; each entry is sorted and
    duplicate-free. Level H is the positive leaves themselves, level 0
    is the root whenever any positive exists.
    """
    positive_leaves = np.unique(np.asarray(positive_leaves, dtype=np.int64))
    if positive_leaves.size:
        if (
            positive_leaves.min() < tree.first_leaf
            or positive_leaves.max() >= tree.n_nodes
            or tree.placeholder[positive_leaves].any()
        ):
            raise LookupFailure("positive leaves must be real leaf nodes")
    levels: list[np.ndarray] = [None] * (tree.height + 1)
    current = positive_leaves
    for h in range(tree.height, -1, -1):
        levels[h] = current
        current = np.unique((current - 1) >> 1) if h > 0 else current
    return levels


def sample_level(
    tree: IndexTree,
    level: int,
    positives: np.ndarray,
    k_neg: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """All positives at a level plus ``k_neg`` per positive sampled negatives.

    Negatives are drawn uniformly without replacement from the real
    (non-placeholder) nodes of the level that are not positive; if fewer
    exist, all of them are taken. Returns (nodes, pseudo) with pseudo 1
    for positives, 0 for negatives.
    """
    positives = np.asarray(positives, dtype=np.int64)
    candidates = np.setdiff1d(tree.real_nodes_at_level(level), positives)
    n_neg = min(k_neg * len(positives), len(candidates))
    if n_neg > 0:
        negatives = rng.choice(candidates, size=n_neg, replace=False)
        negatives.sort()
    else:
        negatives = np.empty(0, dtype=np.int64)
    nodes = np.concatenate([positives, negatives])
    pseudo = np.concatenate(
        [np.ones(len(positives), dtype=np.int8), np.zeros(n_neg, dtype=np.int8)]
    )
    return nodes, pseudo


def _instance_nodes(
    instance: TrainingInstance,
    tree: IndexTree,
    k_neg: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sampled (nodes, per-objective labels) for one event, levels 1..H."""
    leaf = tree.leaf_for_item(instance.target)
    path = ancestors(tree, leaf)  # root..leaf, level == index
    all_nodes: list[np.ndarray] = []
    all_pos: list[np.ndarray] = []
    for h in range(1, tree.height + 1):
        nodes, pseudo = sample_level(
            tree, h, np.array([path[h]], dtype=np.int64), k_neg, rng
        )
        all_nodes.append(nodes)
        all_pos.append(pseudo)
    nodes = np.concatenate(all_nodes) if all_nodes else np.empty(0, np.int64)
    pseudo = np.concatenate(all_pos) if all_pos else np.empty(0, np.int8)
    labels = np.where(
        pseudo[:, None] == 1,
        np.asarray(instance.labels, dtype=np.float64)[None, :],
        0.0,
    )
    return nodes, labels


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """(total, per-objective) clipped binary cross-entropy sums."""
    p = np.clip(probs, CLIP_EPS, 1.0 - CLIP_EPS)
    ll = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    per_objective = ll.sum(axis=0)
    return float(per_objective.sum()), per_objective


def instance_loss(
    instance: TrainingInstance,
    user_feat: Optional[np.ndarray],
    tree: IndexTree,
    store: EmbeddingStore,
    params: EstimatorParams,
    k_neg: int,
    rng: np.random.Generator,
    grads: dict[str, np.ndarray] | None = None,
) -> tuple[float, np.ndarray]:
    """Loss of one event; accumulates exact gradients into ``grads`` if given."""
    nodes, labels = _instance_nodes(instance, tree, k_neg, rng)
    trace = forward_nodes(
        user_feat, instance.sequence, nodes, params, tree, store,
        record=grads is not None,
    )
    total, per_objective = bce_loss(trace.probs, labels)
    if grads is not None:
        backward(trace, labels, params, out=grads)
    return total, per_objective


@dataclass
class StepMetrics:
    step: int
    mean_loss: float
    per_objective: np.ndarray
    wall_ms: float


def train_estimator(
    instances: list[TrainingInstance],
    users: dict,
    tree: IndexTree,
    store: EmbeddingStore,
    est_cfg: EstimatorConfig,
    tcfg: TrainConfig,
    out_dir: Path | str | None = None,
    params: EstimatorParams | None = None,
) -> tuple[EstimatorParams, list[StepMetrics]]:
    """Mini-batch Adam over logged events; returns trained params and metrics.

    When ``out_dir`` is given, writes ``metrics.csv`` plus checkpoints
    (``ckpt_final.bin`` always; ``ckpt_{step}.bin`` every
    ``checkpoint_every`` steps if that is nonzero). A user missing from
    ``users`` falls back to a zero feature vector.
    """
    if not instances:
        raise TrainingError("no training instances")
    if params is None:
        params = EstimatorParams.init(est_cfg, tree.n_nodes, seed=tcfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    opt = Adam(lr=tcfg.lr)
    metrics: list[StepMetrics] = []
    writer = None
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "mean_loss"]
            + [f"loss_{t}" for t in range(est_cfg.T)]
            + ["wall_ms"]
        )
    step = 0
    try:
        for _epoch in range(tcfg.epochs):
            order = rng.permutation(len(instances))
            for lo in range(0, len(order), tcfg.batch_size):
                t0 = time.perf_counter()
                batch = order[lo : lo + tcfg.batch_size]
                grads = params.zero_grads()
                losses = []
                per_obj = np.zeros(est_cfg.T)
                for i in batch:
                    inst = instances[i]
                    feat = user_feature(users.get(inst.user))
                    loss, po = instance_loss(
                        inst, feat, tree, store, params, tcfg.k_neg, rng,
                        grads=grads,
                    )
                    if not np.isfinite(loss):
                        raise TrainingError(
                            f"non-finite loss at step {step}, instance {i} "
                            f"(user {inst.user}, target {inst.target})"
                        )
                    losses.append(loss)
                    per_obj += po
                scale = 1.0 / len(batch)
                for g in grads.values():
                    g *= scale
                opt.step(params.tensors, grads)
                step += 1
                wall_ms = (time.perf_counter() - t0) * 1000.0
                m = StepMetrics(step, float(np.mean(losses)), per_obj * scale, wall_ms)
                metrics.append(m)
                if writer is not None:
                    writer.writerow(
                        [m.step, f"{m.mean_loss:.10g}"]
                        + [f"{v:.10g}" for v in m.per_objective]
                        + [f"{m.wall_ms:.3f}"]
                    )
                if (
                    out_dir is not None
                    and tcfg.checkpoint_every
                    and step % tcfg.checkpoint_every == 0
                ):
                    save_params(params, out_dir / f"ckpt_{step}.bin")
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_params(params, out_dir / "ckpt_final.bin")
    return params, metrics


def instances_by_user(stream: LogStream) -> dict[int, list[TrainingInstance]]:
    """Group a log stream's events by user, preserving time order."""
    out: dict[int, list[TrainingInstance]] = {}
    for inst in stream.instances:
        out.setdefault(inst.user, []).append(inst)
    return out


def time_split(
    stream: LogStream, train_frac: float = 0.8
) -> tuple[list[TrainingInstance], dict[int, list[TrainingInstance]]]:
    """Per-user chronological split into training events and held-out events.

    The first ``train_frac`` of each user's events (by position in their
    timeline) become training instances; the rest are returned per user
    for evaluation. Users with nothing held out are absent from the
    second mapping.
    """
    if not 0.0 < train_frac < 1.0:
        raise ConfigError("train_frac must be in (0, 1)")
    train: list[TrainingInstance] = []
    held: dict[int, list[TrainingInstance]] = {}
    for user, events in instances_by_user(stream).items():
        cut = int(round(train_frac * len(events)))
        cut = min(max(cut, 0), len(events))
        train.extend(events[:cut])
        if events[cut:]:
            held[user] = events[cut:]
    return train, held


@dataclass(frozen=True)
class HeapTendency:
    """How often a held-out target's whole ancestor path scores well."""

    fraction: float
    n_pass: int
    n_evaluated: int
    level_failures: np.ndarray  # indexed by level; [0] is always 0


def heap_tendency(
    held: dict[int, list[TrainingInstance]],
    users: dict[int, UserProfile],
    tree: IndexTree,
    store: EmbeddingStore,
    params: EstimatorParams,
    k_neg: int = 2,
    seed: int = 0,
    max_instances: Optional[int] = None,
    scorer=None,
) -> HeapTendency:
    """Measure the trained stand-in for the max-heap property.

    For each held-out event the target's leaf is lifted to per-level
    pseudo-labels and every level 1..H is sampled the same way training
    samples it: the ancestor plus ``k_neg`` random real negatives. The
    event passes when the ancestor's mean-over-objectives score ranks in
    the top half of the sampled candidates at every level (fewer than
    ceil(|S|/2) candidates strictly above it, so ties do not hurt).
    Beam search can only reach a leaf whose ancestors keep outranking
    the field on the way down, which is what this fraction estimates.

    ``scorer`` (node ids -> scores) replaces the estimator and exists
    for tests. ``level_failures[h]`` counts events whose ancestor at
    level h ranked in the bottom half; one event can fail several
    levels and is counted at each of them.
    """
    events = [ev for evs in held.values() for ev in evs]
    if max_instances is not None:
        events = events[:max_instances]
    if not events:
        raise ConfigError("no held-out instances to evaluate")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    level_failures = np.zeros(tree.height + 1, dtype=np.int64)
    n_pass = 0
    for inst in events:
        feat = user_feature(users.get(inst.user))
        leaf = tree.leaf_for_item(inst.target)
        path = ancestors(tree, leaf)
        ok = True
        for h in range(1, tree.height + 1):
            cands, _ = sample_level(
                tree, h, np.array([path[h]], dtype=np.int64), k_neg, rng
            )
            if scorer is None:
                trace = forward_nodes(feat, inst.sequence, cands, params, tree, store)
                scores = trace.probs.mean(axis=1)
            else:
                scores = np.asarray(scorer(cands), dtype=np.float64)
            above = int((scores > scores[cands == path[h]][0]).sum())
            if above >= (len(cands) + 1) // 2:
                ok = False
                level_failures[h] += 1
        n_pass += ok
    return HeapTendency(n_pass / len(events), n_pass, len(events), level_failures)
