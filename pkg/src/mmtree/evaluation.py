"""Offline evaluation: recall, hierarchical recall, branch overlap, ablations.

Protocol: each user's timeline is split chronologically; the earlier
part is training data and the later part defines the user's relevant
item set. Retrieval quality is Recall@m over that set. Hierarchical
recall generalizes this to interior levels: the relevant set at level h
is the set of level-h ancestors of the relevant leaves (duplicates
collapse, shrinking the denominator), compared against the beam at that
level. At the bottom level this reduces to plain recall over the beam's
leaves, computed through the same code path.

The overlap rate measures how differently the two search branches read
the same history: for each user it is the size of the intersection of
the Co-selected and MM-selected absolute sequence positions at the
user's top retrieved leaf, divided by the selection size.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import TrainingInstance, UserProfile, user_feature
from .errors import ConfigError
from .estimator import (
    EstimatorConfig,
    EstimatorParams,
    forward_nodes,
)
from .mmembed import EmbeddingStore
from .retrieval import BeamTrace, RetrievalResult, retrieve
from .tree import IndexTree, ancestor_at, build_tree


def recall_at_k(retrieved: np.ndarray, relevant: set[int] | np.ndarray) -> float:
    """|retrieved ∩ relevant| / |relevant|; relevant must be non-empty."""
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ConfigError("relevant set is empty")
    hits = sum(1 for i in retrieved if int(i) in relevant)
    return hits / len(relevant)


def hier_recall(
    trace: BeamTrace,
    relevant_items: Sequence[int],
    tree: IndexTree,
    level: int,
    beam_width: int,
) -> float:
    """Recall of the level-h beam against level-h ancestors of the relevant leaves."""
    if trace is None:
        raise ConfigError("hierarchical recall needs a recorded beam trace")
    if not 0 <= level <= tree.height:
        raise ConfigError(f"level {level} outside [0, {tree.height}]")
    targets = {
        int(ancestor_at(tree, tree.leaf_for_item(int(it)), level))
        for it in relevant_items
    }
    if not targets:
        raise ConfigError("relevant set is empty")
    beam = trace.levels[level][:beam_width]
    hits = sum(1 for n in beam if int(n) in targets)
    return hits / len(targets)


def overlap_rate(
    co_positions: np.ndarray, mm_positions: np.ndarray
) -> float:
    """Shared fraction of the two selected position sets.

    Both arguments are absolute sequence positions. The denominator is
    the smaller selection size, so identical selections give exactly 1.0
    and disjoint ones exactly 0.0 regardless of history length.
    """
    a, b = set(co_positions.tolist()), set(mm_positions.tolist())
    denom = min(len(a), len(b))
    if denom == 0:
        return 0.0
    return len(a & b) / denom


@dataclass
class UserEval:
    user: int
    recall: float
    hier: dict[int, float]
    overlap: float
    result: RetrievalResult
    a_co: np.ndarray  # attention over Co-selected slots, may be empty
    a_mm: np.ndarray
    co_positions: np.ndarray
    mm_positions: np.ndarray
    hist_len: int = 0


def evaluate_user(
    user: int,
    user_feat: Optional[np.ndarray],
    history: np.ndarray,
    relevant: set[int],
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
    beam_width: int,
    m_ret: int,
    hier_levels: Sequence[int] = (),
) -> UserEval:
    """Retrieve for one user and score the result against the relevant set.

    Attention weights and branch overlap are read off a recorded forward
    at the user's top retrieved leaf, the node the system actually
    ranked first.
    """
    res = retrieve(
        user_feat, history, params, tree, store, beam_width, m_ret, user=user
    )
    rec = recall_at_k(res.items, relevant)
    hier = {
        h: hier_recall(res.trace, sorted(relevant), tree, h, beam_width)
        for h in hier_levels
    }
    top_leaf = res.trace.levels[-1][0]
    t = forward_nodes(
        user_feat, history, np.array([top_leaf]), params, tree, store
    )
    co_pos = t.co_positions[t.co_selected[0]] if t.co_selected.size else np.empty(0, np.int64)
    mm_pos = t.mm_positions[t.mm_selected[0]] if t.mm_selected.size else np.empty(0, np.int64)
    return UserEval(
        user=user,
        recall=rec,
        hier=hier,
        overlap=overlap_rate(co_pos, mm_pos),
        result=res,
        a_co=t.a_co[0],
        a_mm=t.a_mm[0],
        co_positions=co_pos,
        mm_positions=mm_pos,
        hist_len=len(history),
    )


def history_and_relevant(
    train_events: list[TrainingInstance], held_events: list[TrainingInstance]
) -> tuple[np.ndarray, set[int]]:
    """Evaluation inputs for one user: observed item sequence, future targets."""
    hist = [int(e.target) for e in train_events]
    relevant = {int(e.target) for e in held_events}
    return np.asarray(hist, dtype=np.int64), relevant


def split_users(user_ids: Sequence[int], n_splits: int) -> list[list[int]]:
    """Deterministic disjoint user splits (round-robin over sorted ids)."""
    if n_splits < 1:
        raise ConfigError("n_splits must be >= 1")
    ordered = sorted(int(u) for u in user_ids)
    return [ordered[i::n_splits] for i in range(n_splits)]


def random_baseline_recall(
    relevant_by_user: dict[int, set[int]], n_items: int, m_ret: int, seed: int
) -> float:
    """Mean recall of drawing m_ret distinct uniform items per user."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9151]))
    recalls = []
    for user in sorted(relevant_by_user):
        rel = relevant_by_user[user]
        if not rel:
            continue
        picks = rng.choice(n_items, size=min(m_ret, n_items), replace=False)
        recalls.append(recall_at_k(picks, rel))
    return float(np.mean(recalls)) if recalls else 0.0


@dataclass
class EvalReport:
    """Aggregate metrics plus the configuration that produced them."""

    config: dict
    n_users: int
    recall_mean: float
    recall_std: float
    split_recalls: list[float]
    hier_mean: dict[int, float]
    overlap_mean: float
    n_excluded: int = 0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "n_users": self.n_users,
            "n_excluded": self.n_excluded,
            "recall_mean": self.recall_mean,
            "recall_std": self.recall_std,
            "split_recalls": self.split_recalls,
            "hier_recall_mean": {str(k): v for k, v in self.hier_mean.items()},
            "overlap_mean": self.overlap_mean,
        }
        payload.update(self.extras)
        return json.dumps(payload, indent=2, sort_keys=True)


def evaluate_splits(
    users: dict,
    train_by_user: dict[int, list[TrainingInstance]],
    held_by_user: dict[int, list[TrainingInstance]],
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
    beam_width: int,
    m_ret: int,
    n_splits: int = 5,
    hier_levels: Sequence[int] = (),
    config_echo: dict | None = None,
    collect: list[UserEval] | None = None,
) -> EvalReport:
    """Evaluate every held-out user, aggregated over disjoint user splits.

    Users whose relevant set is empty are skipped and counted in the
    report's ``n_excluded`` rather than treated as zero-recall.
    """
    eligible = [u for u, ev in held_by_user.items() if ev]
    n_excluded = len(held_by_user) - len(eligible)
    splits = split_users(eligible, n_splits)
    split_recalls: list[float] = []
    hier_acc: dict[int, list[float]] = {h: [] for h in hier_levels}
    overlaps: list[float] = []
    n_users = 0
    for group in splits:
        recs = []
        for user in group:
            feat = user_feature(users.get(user))
            hist, relevant = history_and_relevant(
                train_by_user.get(user, []), held_by_user[user]
            )
            ue = evaluate_user(
                user, feat, hist, relevant, params, tree, store,
                beam_width, m_ret, hier_levels,
            )
            recs.append(ue.recall)
            overlaps.append(ue.overlap)
            for h in hier_levels:
                hier_acc[h].append(ue.hier[h])
            if collect is not None:
                collect.append(ue)
            n_users += 1
        if recs:
            split_recalls.append(float(np.mean(recs)))
    return EvalReport(
        config=config_echo or {},
        n_users=n_users,
        recall_mean=float(np.mean(split_recalls)) if split_recalls else 0.0,
        recall_std=float(np.std(split_recalls)) if split_recalls else 0.0,
        split_recalls=split_recalls,
        hier_mean={
            h: float(np.mean(v)) if v else 0.0 for h, v in hier_acc.items()
        },
        overlap_mean=float(np.mean(overlaps)) if overlaps else 0.0,
        n_excluded=n_excluded,
    )


def export_attention(
    evals: Sequence[UserEval], out_dir: Path | str, m_co: int, m_mm: int
) -> dict:
    """Write per-user attention matrices and a shared weight histogram.

    ``attention_co.csv`` and ``attention_mm.csv`` hold one row per user
    spanning that branch's full search window (``m_co`` / ``m_mm``
    columns, ordered oldest to most recent; the last column is the most
    recent event). Selected positions carry their softmax weight, every
    other position is zero, so each row sums to 1. Users with an empty
    selection are dropped from the matrices. ``attention_hist.csv`` bins
    the selected weights of both branches into 50 uniform bins on
    [0, max]. Returns summary statistics (mean row entropy per branch);
    callers report these, nothing is asserted about them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def _scatter(w: np.ndarray, positions: np.ndarray, hist_len: int,
                 width: int) -> np.ndarray:
        row = np.zeros(width)
        # absolute position p maps to column p - hist_len + width: the
        # most recent event lands in the last column, shorter histories
        # leave leading zeros
        row[positions - hist_len + width] = w
        return row

    def _entropy(row: np.ndarray) -> float:
        p = row[row > 0]
        return float(-(p * np.log(p)).sum()) if p.size else 0.0

    summaries = {}
    for name, width in (("co", m_co), ("mm", m_mm)):
        rows = []
        ents = []
        for ue in evals:
            w = ue.a_co if name == "co" else ue.a_mm
            pos = ue.co_positions if name == "co" else ue.mm_positions
            if w.size == 0:
                continue
            scattered = _scatter(np.asarray(w, dtype=np.float64), pos,
                                 ue.hist_len, width)
            rows.append([int(ue.user)] + [f"{v:.10g}" for v in scattered])
            ents.append(_entropy(scattered))
        with open(out_dir / f"attention_{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user"] + [f"pos_{i}" for i in range(width)])
            writer.writerows(rows)
        summaries[f"mean_entropy_{name}"] = float(np.mean(ents)) if ents else 0.0

    co_w = np.concatenate(
        [ue.a_co for ue in evals] or [np.zeros(0)]
    )
    mm_w = np.concatenate(
        [ue.a_mm for ue in evals] or [np.zeros(0)]
    )
    pooled = np.concatenate([co_w, mm_w])
    top = float(pooled.max()) if pooled.size else 1.0
    top = top if top > 0 else 1.0
    edges = np.linspace(0.0, top, 51)
    hist_co, _ = np.histogram(co_w, bins=edges)
    hist_mm, _ = np.histogram(mm_w, bins=edges)
    with open(out_dir / "attention_hist.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count_co", "count_mm"])
        for i in range(50):
            writer.writerow(
                [f"{edges[i]:.10g}", f"{edges[i + 1]:.10g}",
                 int(hist_co[i]), int(hist_mm[i])]
            )
    with open(out_dir / "attention_summary.json", "w") as fh:
        json.dump(summaries, fh, indent=2, sort_keys=True)
    return summaries


ABLATION_VARIANTS = ("full", "no_mm_gsu", "no_both_gsu", "id_tree")


def run_ablation(
    users: dict,
    train_by_user: dict[int, list[TrainingInstance]],
    held_by_user: dict[int, list[TrainingInstance]],
    tree: IndexTree,
    store: EmbeddingStore,
    est_cfg: EstimatorConfig,
    train_cfg,
    beam_width: int,
    m_ret: int,
    n_splits: int = 5,
    variants: Sequence[str] = ABLATION_VARIANTS,
    config_echo: dict | None = None,
) -> dict:
    """Train and evaluate each model variant on identical data.

    Variants: the full model; the model without the content-side search
    branch (``no_mm_gsu``); the model without either search branch
    (``no_both_gsu``); and ``id_tree``, which drops both branches *and*
    replaces the content-built tree entirely. The id_tree variant starts
    from a tree over random unit vectors, trains, rebuilds the tree by
    clustering the learned leaf ID embeddings, and retrains on that:
    retrieval structure learned from interactions alone.

    Returns the full grid regardless of how the variants rank.
    """
    from .mmembed import EmbeddingStore as _Store
    from .training import train_estimator

    train_instances = [
        e for user in sorted(train_by_user) for e in train_by_user[user]
    ]
    grid: dict[str, dict] = {}
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant: {variant}")
        t_start = time.perf_counter()
        cfg = EstimatorConfig(
            **{
                **asdict(est_cfg),
                "use_co_gsu": variant in ("full", "no_mm_gsu"),
                "use_mm_gsu": variant == "full",
            }
        )
        if variant == "id_tree":
            rng = np.random.default_rng(
                np.random.SeedSequence([train_cfg.seed, 7211])
            )
            rand = rng.normal(size=(store.n_items, store.d))
            rand /= np.linalg.norm(rand, axis=1, keepdims=True)
            t0 = build_tree(_Store(rand, frozen=True), seed=train_cfg.seed)
            params0, _ = train_estimator(
                train_instances, users, t0, store, cfg, train_cfg
            )
            leaf_vecs = params0.tensors["id_emb"][
                t0.item_to_leaf[np.arange(store.n_items)]
            ]
            t_final = build_tree(_Store(leaf_vecs.copy(), frozen=True),
                                 seed=train_cfg.seed)
            params, _ = train_estimator(
                train_instances, users, t_final, store, cfg, train_cfg
            )
            use_tree = t_final
        else:
            params, _ = train_estimator(
                train_instances, users, tree, store, cfg, train_cfg
            )
            use_tree = tree
        report = evaluate_splits(
            users, train_by_user, held_by_user, params, use_tree, store,
            beam_width, m_ret, n_splits=n_splits,
        )
        grid[variant] = {
            "recall_mean": report.recall_mean,
            "recall_std": report.recall_std,
            "split_recalls": report.split_recalls,
            "wall_seconds": round(time.perf_counter() - t_start, 3),
        }
    return {"config": config_echo or {}, "variants": grid}
