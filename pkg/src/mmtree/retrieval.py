"""Beam-search retrieval over the index tree.

The beam starts at the root. At each level the children of the current
beam (placeholders excluded) are scored in ascending node-id order in a
single batched estimator call, and the K best survive; ties go to the
lower node id. After the bottom level the top ``m_ret`` leaves map back
to items through the leaf-item bijection.

A node's retrieval score is the mean of the estimator's per-objective
probabilities. Scoring the whole candidate set in one call keeps the
arithmetic identical from run to run and makes a full-width beam
reproduce an exhaustive scoring of the level bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from .corpus import BehaviorSequence
from .errors import ConfigError
from .estimator import EstimatorParams, forward_nodes
from .mmembed import EmbeddingStore
from .tree import IndexTree


def score_nodes(
    user_feat: Optional[np.ndarray],
    seq: BehaviorSequence | np.ndarray,
    node_ids: np.ndarray,
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
) -> np.ndarray:
    """Retrieval scores for a batch of nodes: mean over objective probabilities."""
    trace = forward_nodes(user_feat, seq, node_ids, params, tree, store)
    return trace.probs.mean(axis=1)


def node_score(
    user_feat: Optional[np.ndarray],
    seq: BehaviorSequence | np.ndarray,
    node: int,
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
) -> float:
    return float(
        score_nodes(user_feat, seq, np.array([node], dtype=np.int64),
                    params, tree, store)[0]
    )


@dataclass
class BeamTrace:
    """Ranked beam per level, root to bottom; scores align with the ids."""

    levels: list[np.ndarray]  # levels[h]: node ids, best first
    scores: list[np.ndarray]

    @property
    def height(self) -> int:
        return len(self.levels) - 1


def _rank(cands: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best candidates, score descending, ties to lower id."""
    order = np.lexsort((cands, -scores))
    return order[:k]


def beam_search(
    user_feat: Optional[np.ndarray],
    seq: BehaviorSequence | np.ndarray,
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
    beam_width: int,
    scorer=None,
) -> BeamTrace:
    """Expand level by level, keeping the ``beam_width`` best nodes.

    ``scorer`` swaps the estimator for a callable ``node_ids -> scores``;
    used by tests to drive the search with a scoring function of known
    structure.
    """
    if beam_width < 1:
        raise ConfigError("beam width must be >= 1")
    if scorer is None:
        def scorer(node_ids):
            return score_nodes(user_feat, seq, node_ids, params, tree, store)
    root = np.array([0], dtype=np.int64)
    levels = [root]
    scores = [scorer(root)]
    beam = root
    for _h in range(1, tree.height + 1):
        cands = np.concatenate([2 * beam + 1, 2 * beam + 2])
        cands = cands[~tree.placeholder[cands]]
        cands.sort()
        s = scorer(cands)
        keep = _rank(cands, s, beam_width)
        levels.append(cands[keep])
        scores.append(s[keep])
        beam = levels[-1]
    return BeamTrace(levels=levels, scores=scores)


@dataclass
class RetrievalResult:
    user: int
    items: np.ndarray  # (m,) item ids, best first
    scores: np.ndarray  # (m,)
    trace: BeamTrace


def retrieve(
    user_feat: Optional[np.ndarray],
    seq: BehaviorSequence | np.ndarray,
    params: EstimatorParams,
    tree: IndexTree,
    store: EmbeddingStore,
    beam_width: int,
    m_ret: int,
    user: int = -1,
) -> RetrievalResult:
    """Top ``m_ret`` items from the final beam's leaves.

    ``m_ret`` larger than the beam width cannot be satisfied and is a
    configuration error.
    """
    if m_ret < 1:
        raise ConfigError("m_ret must be >= 1")
    if m_ret > beam_width:
        raise ConfigError(
            f"m_ret ({m_ret}) exceeds beam width ({beam_width}); "
            "the final beam holds at most beam-width leaves"
        )
    trace = beam_search(user_feat, seq, params, tree, store, beam_width)
    leaves = trace.levels[-1][:m_ret]
    scores = trace.scores[-1][:m_ret]
    items = tree.leaf_to_item[leaves - tree.first_leaf]
    return RetrievalResult(user=user, items=items, scores=scores, trace=trace)


def result_to_json(result: RetrievalResult) -> str:
    """One JSONL record: user, ranked items with scores, beam per level."""
    rec = {
        "user": int(result.user),
        "items": [
            {"id": int(i), "score": float(s)}
            for i, s in zip(result.items, result.scores)
        ],
        "beams": {
            str(h): [int(n) for n in ids]
            for h, ids in enumerate(result.trace.levels)
        },
    }
    return json.dumps(rec)


def write_results(results: Iterable[RetrievalResult], fh: TextIO) -> int:
    n = 0
    for r in results:
        fh.write(result_to_json(r) + "\n")
        n += 1
    return n
