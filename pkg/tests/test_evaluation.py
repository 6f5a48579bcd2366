"""Metric arithmetic, aggregation, attention export, and the ablation grid."""

import csv
import json

import numpy as np
import pytest

from conftest import unit_store
from mmtree.errors import ConfigError
from mmtree.estimator import EstimatorConfig, EstimatorParams
from mmtree.evaluation import (
    ABLATION_VARIANTS,
    EvalReport,
    UserEval,
    evaluate_splits,
    evaluate_user,
    export_attention,
    hier_recall,
    history_and_relevant,
    overlap_rate,
    random_baseline_recall,
    recall_at_k,
    run_ablation,
    split_users,
)
from mmtree.retrieval import BeamTrace, retrieve
from mmtree.training import TrainConfig, instances_by_user, time_split
from mmtree.tree import ancestor_at, build_tree


# ---------------------------------------------------------------- recall


def test_recall_superset_is_one():
    assert recall_at_k(np.array([5, 1, 9, 2]), {1, 2}) == 1.0


def test_recall_disjoint_is_zero():
    assert recall_at_k(np.array([5, 9]), {1, 2}) == 0.0


def test_recall_half():
    assert recall_at_k(np.array([1, 7]), {1, 2}) == 0.5


def test_recall_rejects_empty_relevant():
    with pytest.raises(ConfigError):
        recall_at_k(np.array([1, 2]), set())


# ---------------------------------------------------------------- hier recall


def _trace_with_level(tree, level, nodes):
    """Minimal trace whose ``level`` beam is exactly ``nodes``."""
    levels = [np.array([0], dtype=np.int64) for _ in range(tree.height + 1)]
    levels[level] = np.asarray(nodes, dtype=np.int64)
    scores = [np.zeros(len(l)) for l in levels]
    return BeamTrace(levels=levels, scores=scores)


def test_hier_recall_one_subtree_fully_covered(world64):
    tree = world64.tree
    # all relevant items under the level-1 node that is their shared ancestor
    anc = ancestor_at(tree, tree.leaf_for_item(3), 1)
    relevant = [i for i in range(10) if ancestor_at(tree, tree.leaf_for_item(i), 1) == anc][:3]
    trace = _trace_with_level(tree, 1, [anc])
    assert hier_recall(trace, relevant, tree, 1, 4) == 1.0


def test_hier_recall_half_of_two_targets(world64):
    tree = world64.tree
    items = list(range(tree.n_items))
    anc = {i: ancestor_at(tree, tree.leaf_for_item(i), 1) for i in items}
    a = items[0]
    b = next(i for i in items if anc[i] != anc[a])
    trace = _trace_with_level(tree, 1, [anc[a]])
    assert hier_recall(trace, [a, b], tree, 1, 4) == 0.5


def test_hier_recall_shared_ancestors_shrink_denominator(world64):
    tree = world64.tree
    items = list(range(tree.n_items))
    anc = {i: ancestor_at(tree, tree.leaf_for_item(i), 1) for i in items}
    a = items[0]
    same = [i for i in items if anc[i] == anc[a]][:4]
    assert len(same) == 4
    # four relevant items but one distinct ancestor: hitting it scores 1.0
    trace = _trace_with_level(tree, 1, [anc[a]])
    assert hier_recall(trace, same, tree, 1, 4) == 1.0


def test_hier_recall_requires_trace_and_valid_level(world64):
    tree = world64.tree
    with pytest.raises(ConfigError):
        hier_recall(None, [1], tree, 1, 4)
    trace = _trace_with_level(tree, 1, [1])
    with pytest.raises(ConfigError):
        hier_recall(trace, [1], tree, tree.height + 1, 4)


# ---------------------------------------------------------------- overlap


def test_overlap_identical_sets():
    pos = np.array([3, 7, 11])
    assert overlap_rate(pos, pos.copy()) == 1.0


def test_overlap_disjoint_sets():
    assert overlap_rate(np.array([1, 2]), np.array([3, 4])) == 0.0


def test_overlap_one_third():
    a = np.array([1, 2, 3])
    b = np.array([3, 4, 5])
    assert overlap_rate(a, b) == pytest.approx(1 / 3)


def test_overlap_empty_selection_is_zero():
    assert overlap_rate(np.empty(0, np.int64), np.array([1, 2])) == 0.0


# ---------------------------------------------------------------- splits


def test_split_users_disjoint_cover_deterministic():
    ids = [9, 3, 5, 7, 1, 4, 8]
    splits = split_users(ids, 3)
    assert splits == split_users(list(reversed(ids)), 3)
    flat = sorted(u for g in splits for u in g)
    assert flat == sorted(ids)
    sizes = [len(g) for g in splits]
    assert max(sizes) - min(sizes) <= 1


def test_split_users_validates_count():
    with pytest.raises(ConfigError):
        split_users([1, 2], 0)


def test_random_baseline_recall_deterministic_and_bounded():
    rel = {u: {u % 7, (u * 3) % 7} for u in range(30)}
    a = random_baseline_recall(rel, n_items=40, m_ret=10, seed=3)
    b = random_baseline_recall(rel, n_items=40, m_ret=10, seed=3)
    assert a == b
    assert 0.0 <= a <= 1.0
    # drawing the full corpus finds everything
    assert random_baseline_recall(rel, n_items=40, m_ret=40, seed=3) == 1.0


# ---------------------------------------------------------------- evaluate


@pytest.fixture(scope="module")
def eval_world(stream200):
    corpus, stream = stream200
    store = unit_store(corpus.n_items, 6, seed=33)
    tree = build_tree(store, seed=34)
    cfg = EstimatorConfig(
        d_id=8, d_user=6, K_esu=3, M_co=8, M_mm=12, T=2,
        n_experts=2, expert_hidden=10, expert_out=6, tower_hidden=6,
    )
    params = EstimatorParams.init(cfg, tree.n_nodes, seed=2)
    train, held = time_split(stream)
    train_by_user = {}
    for inst in train:
        train_by_user.setdefault(inst.user, []).append(inst)
    return stream, store, tree, cfg, params, train_by_user, held


def test_evaluate_user_fields_are_consistent(eval_world):
    stream, store, tree, cfg, params, train_by_user, held = eval_world
    user = next(iter(held))
    hist, relevant = history_and_relevant(train_by_user[user], held[user])
    ue = evaluate_user(
        user, stream.users[user].user_feat, hist, relevant, params, tree,
        store, beam_width=8, m_ret=8, hier_levels=(1, 3, tree.height),
    )
    assert ue.user == user
    assert ue.recall == recall_at_k(ue.result.items, relevant)
    assert set(ue.hier) == {1, 3, tree.height}
    assert 0.0 <= ue.overlap <= 1.0
    assert ue.hist_len == len(hist)
    assert ue.a_co.sum() == pytest.approx(1.0)
    assert ue.a_mm.sum() == pytest.approx(1.0)


def test_hier_recall_at_bottom_equals_recall_over_beam_leaves(eval_world):
    stream, store, tree, cfg, params, train_by_user, held = eval_world
    checked = 0
    for user in list(held)[:12]:
        hist, relevant = history_and_relevant(train_by_user[user], held[user])
        res = retrieve(
            stream.users[user].user_feat, hist, params, tree, store,
            beam_width=8, m_ret=8, user=user,
        )
        beam_items = tree.leaf_to_item[res.trace.levels[-1] - tree.first_leaf]
        want = recall_at_k(beam_items, relevant)
        got = hier_recall(res.trace, sorted(relevant), tree, tree.height, 8)
        assert got == want
        checked += 1
    assert checked == 12


def test_hier_recall_non_decreasing_in_beam_width(eval_world):
    stream, store, tree, cfg, params, train_by_user, held = eval_world
    for user in list(held)[:8]:
        hist, relevant = history_and_relevant(train_by_user[user], held[user])
        res = retrieve(
            stream.users[user].user_feat, hist, params, tree, store,
            beam_width=8, m_ret=8, user=user,
        )
        for h in (1, 2, 4, tree.height):
            vals = [
                hier_recall(res.trace, sorted(relevant), tree, h, k)
                for k in (1, 2, 4, 8)
            ]
            assert vals == sorted(vals)


def test_evaluate_splits_report(eval_world):
    stream, store, tree, cfg, params, train_by_user, held = eval_world
    held = dict(list(held.items())[:20])
    held[99999] = []  # user with nothing held out: excluded, not zero-recall
    collect = []
    report = evaluate_splits(
        stream.users, train_by_user, held, params, tree, store,
        beam_width=8, m_ret=8, n_splits=5, hier_levels=(1, tree.height),
        config_echo={"tag": "unit"}, collect=collect,
    )
    assert report.n_users == 20
    assert report.n_excluded == 1
    assert len(report.split_recalls) == 5
    assert 0.0 <= report.recall_mean <= 1.0
    assert report.recall_std >= 0.0
    assert all(0.0 <= r <= 1.0 for r in report.split_recalls)
    assert all(0.0 <= v <= 1.0 for v in report.hier_mean.values())
    assert 0.0 <= report.overlap_mean <= 1.0
    assert len(collect) == 20
    assert report.config == {"tag": "unit"}


def test_eval_report_json_round_trip():
    report = EvalReport(
        config={"seed": 1},
        n_users=4,
        recall_mean=0.25,
        recall_std=0.1,
        split_recalls=[0.2, 0.3],
        hier_mean={1: 0.5},
        overlap_mean=0.125,
        n_excluded=2,
        extras={"random_recall": 0.01},
    )
    blob = json.loads(report.to_json())
    assert blob["n_excluded"] == 2
    assert blob["recall_mean"] == 0.25
    assert blob["hier_recall_mean"] == {"1": 0.5}
    assert blob["random_recall"] == 0.01


# ---------------------------------------------------------------- attention export


def test_export_attention_rows_and_histogram(tmp_path, eval_world):
    stream, store, tree, cfg, params, train_by_user, held = eval_world
    evals = []
    for user in list(held)[:10]:
        hist, relevant = history_and_relevant(train_by_user[user], held[user])
        evals.append(
            evaluate_user(
                user, stream.users[user].user_feat, hist, relevant, params,
                tree, store, beam_width=8, m_ret=8,
            )
        )
    # a user whose history produced no selections must be dropped
    empty = UserEval(
        user=424242, recall=0.0, hier={}, overlap=0.0, result=None,
        a_co=np.empty(0), a_mm=np.empty(0),
        co_positions=np.empty(0, np.int64), mm_positions=np.empty(0, np.int64),
        hist_len=0,
    )
    summary = export_attention(evals + [empty], tmp_path, cfg.M_co, cfg.M_mm)
    assert set(summary) == {"mean_entropy_co", "mean_entropy_mm"}

    for name, width in (("co", cfg.M_co), ("mm", cfg.M_mm)):
        with open(tmp_path / f"attention_{name}.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["user"] + [f"pos_{i}" for i in range(width)]
        body = rows[1:]
        assert len(body) == len(evals)  # the empty user is gone
        assert str(empty.user) not in {r[0] for r in body}
        for row in body:
            assert abs(sum(float(v) for v in row[1:]) - 1.0) <= 1e-6

    with open(tmp_path / "attention_hist.csv", newline="") as fh:
        hist_rows = list(csv.reader(fh))
    assert hist_rows[0] == ["bin_lo", "bin_hi", "count_co", "count_mm"]
    assert len(hist_rows) == 51  # header + 50 bins
    n_weights = sum(len(e.a_co) for e in evals)
    assert sum(int(r[2]) for r in hist_rows[1:]) == n_weights

    with open(tmp_path / "attention_summary.json") as fh:
        assert json.load(fh) == summary


def test_export_attention_deterministic(tmp_path, eval_world):
    stream, store, tree, cfg, params, train_by_user, held = eval_world
    user = next(iter(held))
    hist, relevant = history_and_relevant(train_by_user[user], held[user])
    ue = evaluate_user(
        user, stream.users[user].user_feat, hist, relevant, params, tree,
        store, beam_width=4, m_ret=4,
    )
    export_attention([ue], tmp_path / "a", cfg.M_co, cfg.M_mm)
    export_attention([ue], tmp_path / "b", cfg.M_co, cfg.M_mm)
    for fname in ("attention_co.csv", "attention_mm.csv", "attention_hist.csv"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


# ---------------------------------------------------------------- ablation


def _tiny_ablation_inputs(stream200):
    corpus, stream = stream200
    store = unit_store(corpus.n_items, 6, seed=33)
    tree = build_tree(store, seed=34)
    cfg = EstimatorConfig(
        d_id=8, d_user=6, K_esu=2, M_co=4, M_mm=6, T=2,
        n_experts=2, expert_hidden=6, expert_out=4, tower_hidden=4,
    )
    by_user = instances_by_user(stream)
    keep = sorted(by_user)[:24]
    train_by_user = {u: by_user[u][:-2] for u in keep}
    held_by_user = {u: by_user[u][-2:] for u in keep}
    tcfg = TrainConfig(epochs=1, batch_size=32, lr=3e-3, k_neg=1, seed=11)
    return stream, store, tree, cfg, train_by_user, held_by_user, tcfg


def test_run_ablation_single_variant(stream200):
    stream, store, tree, cfg, train_by_user, held_by_user, tcfg = _tiny_ablation_inputs(stream200)
    out = run_ablation(
        stream.users, train_by_user, held_by_user, tree, store, cfg, tcfg,
        beam_width=8, m_ret=8, n_splits=2, variants=("full",),
        config_echo={"suite": "tiny"},
    )
    assert set(out["variants"]) == {"full"}
    cell = out["variants"]["full"]
    assert 0.0 <= cell["recall_mean"] <= 1.0
    assert cell["wall_seconds"] > 0
    assert len(cell["split_recalls"]) == 2
    assert out["config"] == {"suite": "tiny"}


def test_run_ablation_reproducible_and_id_tree_runs(stream200):
    stream, store, tree, cfg, train_by_user, held_by_user, tcfg = _tiny_ablation_inputs(stream200)
    kw = dict(beam_width=8, m_ret=8, n_splits=2, variants=("no_both_gsu", "id_tree"))
    a = run_ablation(stream.users, train_by_user, held_by_user, tree, store,
                     cfg, tcfg, **kw)
    b = run_ablation(stream.users, train_by_user, held_by_user, tree, store,
                     cfg, tcfg, **kw)
    for variant in kw["variants"]:
        assert a["variants"][variant]["recall_mean"] == b["variants"][variant]["recall_mean"]
        assert a["variants"][variant]["split_recalls"] == b["variants"][variant]["split_recalls"]


def test_run_ablation_rejects_unknown_variant(stream200):
    stream, store, tree, cfg, train_by_user, held_by_user, tcfg = _tiny_ablation_inputs(stream200)
    with pytest.raises(ConfigError):
        run_ablation(
            stream.users, train_by_user, held_by_user, tree, store, cfg, tcfg,
            beam_width=8, m_ret=8, variants=("full", "no_towers"),
        )
    assert "no_towers" not in ABLATION_VARIANTS
