"""Shared fixtures: a small synthetic world every test file can reuse.

The `world64` fixture bundles a 64-item corpus, a unit-norm embedding
store, the tree built over it, and a small estimator configuration. It
is deliberately small enough that exhaustive oracles (full leaf scans,
brute-force subtree enumeration) stay fast.
"""

import numpy as np
import pytest

from mmtree.corpus import generate_corpus, generate_logs
from mmtree.estimator import EstimatorConfig, EstimatorParams
from mmtree.mmembed import EmbeddingStore
from mmtree.tree import build_tree

# one verdict line per acceptance criterion, echoed after the test
# summary so the numbers are visible without -s (test_acceptance fills it)
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)


def unit_store(n_items: int, d: int, seed: int) -> EmbeddingStore:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n_items, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return EmbeddingStore(v)


class World:
    """Corpus + store + tree + estimator config glued together."""

    def __init__(self, n_items=64, n_clusters=8, d_mm=6, seed=101):
        self.corpus = generate_corpus(n_items, n_clusters, 6, 6, seed)
        self.store = unit_store(n_items, d_mm, seed + 1)
        self.tree = build_tree(self.store, seed=seed + 2)
        self.est_cfg = EstimatorConfig(
            d_id=8, d_user=5, K_esu=3, M_co=8, M_mm=12, T=2,
            n_experts=2, expert_hidden=10, expert_out=6, tower_hidden=6,
        )

    def params(self, seed=0, jitter=0.0) -> EstimatorParams:
        p = EstimatorParams.init(self.est_cfg, self.tree.n_nodes, seed=seed)
        if jitter:
            rng = np.random.default_rng(seed + 777)
            for k in p.tensors:
                p.tensors[k] += jitter * rng.normal(size=p.tensors[k].shape)
        return p

    def history(self, length, seed=0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.integers(0, self.store.n_items, size=length).astype(np.int64)

    def feat(self, seed=0) -> np.ndarray:
        return np.random.default_rng(seed + 55).normal(size=self.est_cfg.d_user)


@pytest.fixture(scope="session")
def world64() -> World:
    return World()


@pytest.fixture(scope="session")
def stream200():
    """A small but statistically useful log stream (200 users x 12 events)."""
    corpus = generate_corpus(64, 8, 6, 6, seed=31)
    return corpus, generate_logs(corpus, 200, 12, T=2, seed=32, max_seq_len=12)
