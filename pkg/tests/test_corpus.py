"""Corpus generation and log ingestion."""

import numpy as np
import pytest

from mmtree.corpus import (
    IngestStats,
    LogSchema,
    generate_corpus,
    generate_logs,
    ingest_logs,
    load_corpus,
    read_logs,
    read_users,
    save_corpus,
    write_logs,
    write_users,
)
from mmtree.errors import ConfigError, IngestError


def test_single_cluster_case():
    corpus = generate_corpus(4, 1, 3, 3, seed=7)
    assert corpus.n_items == 4
    assert set(corpus.clusters.tolist()) == {0}


def test_cluster_sizes_equal_when_divisible():
    corpus = generate_corpus(4096, 64, 4, 4, seed=1)
    sizes = np.bincount(corpus.clusters, minlength=64)
    assert sizes.shape == (64,)
    assert np.all(sizes == 64)


def test_corpus_deterministic():
    a = generate_corpus(50, 5, 4, 3, seed=9)
    b = generate_corpus(50, 5, 4, 3, seed=9)
    assert np.array_equal(a.text_feats, b.text_feats)
    assert np.array_equal(a.image_feats, b.image_feats)
    assert np.array_equal(a.clusters, b.clusters)
    c = generate_corpus(50, 5, 4, 3, seed=10)
    assert not np.array_equal(a.text_feats, c.text_feats)


def test_corpus_features_track_centroids():
    corpus = generate_corpus(100, 10, 8, 8, seed=3, noise=0.01)
    spread = np.linalg.norm(
        corpus.text_feats - corpus.text_centroids[corpus.clusters], axis=1
    )
    assert spread.max() < 0.2


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_items=1, n_clusters=1),
        dict(n_items=4, n_clusters=0),
        dict(n_items=4, n_clusters=5),
        dict(n_items=4, n_clusters=2, d_text=0),
    ],
)
def test_corpus_invalid_counts(kwargs):
    args = dict(n_items=4, n_clusters=2, d_text=3, d_image=3, seed=0)
    args.update(kwargs)
    with pytest.raises(ConfigError):
        generate_corpus(**args)


def test_focus_cluster_dominates_at_zero_noise():
    corpus = generate_corpus(64, 8, 4, 4, seed=5)
    stream = generate_logs(
        corpus, 20, 30, T=1, seed=6, max_seq_len=8,
        n_focus_clusters=1, event_noise=0.0,
    )
    for user, profile in stream.users.items():
        focus = int(np.argmax(profile.affinity))
        events = [i for i in stream.instances if i.user == user]
        share = np.mean([int(corpus.clusters[i.target]) == focus for i in events])
        assert share >= 0.8, f"user {user}: {share:.2f} from focus cluster"


def test_single_event_users_have_empty_sequences():
    corpus = generate_corpus(32, 4, 3, 3, seed=2)
    stream = generate_logs(corpus, 10, 1, T=3, seed=3)
    assert len(stream.instances) == 10
    for inst in stream.instances:
        assert len(inst.sequence) == 0
        assert inst.labels.shape == (3,)


def test_labels_binary_and_length_T(stream200):
    _, stream = stream200
    for inst in stream.instances:
        assert inst.labels.shape == (2,)
        assert set(np.unique(inst.labels)).issubset({0, 1})


def test_target_never_in_input_window(stream200):
    _, stream = stream200
    for inst in stream.instances:
        assert inst.target not in set(inst.sequence.items.tolist())


def test_all_items_exist_in_corpus(stream200):
    corpus, stream = stream200
    for inst in stream.instances:
        assert 0 <= inst.target < corpus.n_items
        assert np.all(inst.sequence.items >= 0)
        assert np.all(inst.sequence.items < corpus.n_items)


def test_timestamps_nondecreasing_and_window_capped(stream200):
    _, stream = stream200
    for inst in stream.instances:
        ts = inst.sequence.timestamps
        assert np.all(np.diff(ts) >= 0)
        assert len(inst.sequence) <= 12


def test_label_plausibility_matched_exceeds_mismatched():
    # >= 10k instances, compare label-0 rates between events landing in
    # a focus cluster vs outside
    corpus = generate_corpus(128, 16, 4, 4, seed=11)
    stream = generate_logs(corpus, 500, 25, T=2, seed=12, max_seq_len=16)
    assert len(stream.instances) >= 10_000
    matched, mismatched = [], []
    for inst in stream.instances:
        prof = stream.users[inst.user]
        is_focus = prof.affinity[int(corpus.clusters[inst.target])] > 0
        (matched if is_focus else mismatched).append(int(inst.labels[0]))
    assert len(matched) > 100 and len(mismatched) > 100
    assert np.mean(matched) > np.mean(mismatched)


def test_logs_deterministic():
    corpus = generate_corpus(32, 4, 3, 3, seed=1)
    s1 = generate_logs(corpus, 15, 8, T=2, seed=4)
    s2 = generate_logs(corpus, 15, 8, T=2, seed=4)
    assert len(s1) == len(s2)
    for a, b in zip(s1.instances, s2.instances):
        assert a.user == b.user and a.target == b.target
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.sequence.items, b.sequence.items)


def test_generate_logs_rejects_bad_T():
    corpus = generate_corpus(8, 2, 3, 3, seed=0)
    with pytest.raises(ConfigError):
        generate_logs(corpus, 2, 2, T=0, seed=0)


def test_write_read_roundtrip(tmp_path, stream200):
    _, stream = stream200
    path = tmp_path / "logs.csv"
    n = write_logs(stream.instances, path, T=2)
    assert n == len(stream.instances)
    back, stats = read_logs(path)
    assert stats.malformed_lines == 0
    assert stats.total_lines == n
    assert len(back) == n
    for a, b in zip(stream.instances, back):
        assert a.user == b.user and a.target == b.target
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.sequence.items, b.sequence.items)


def test_ingest_well_formed_ten_lines(tmp_path):
    path = tmp_path / "ten.csv"
    lines = ["user_id,ts,target_item,label_0,seq_item_ids"]
    for i in range(10):
        lines.append(f"{i},5,{i + 1},1,{i + 20};{i + 30}")
    path.write_text("\n".join(lines) + "\n")
    got = list(ingest_logs(path))
    assert len(got) == 10
    assert got[3].user == 3 and got[3].target == 4
    assert np.array_equal(got[3].sequence.items, [23, 33])


def test_ingest_skips_bad_label_and_counts(tmp_path):
    path = tmp_path / "bad.csv"
    rows = ["user_id,ts,target_item,label_0,seq_item_ids"]
    rows += [f"{i},3,{i},1,{i + 1};{i + 2}" for i in range(98)]
    rows.append("98,3,98,2,99;100")  # label outside {0,1}
    rows.append("99,3,99,1,100;101")
    path.write_text("\n".join(rows) + "\n")
    stats = IngestStats()
    got = list(ingest_logs(path, stats=stats))
    assert len(got) == 99
    assert stats.total_lines == 100
    assert stats.malformed_lines == 1


def test_ingest_rejects_target_in_sequence(tmp_path):
    path = tmp_path / "dup.csv"
    rows = ["user_id,ts,target_item,label_0,seq_item_ids"]
    rows += [f"{i},3,{i},1,{i + 1};{i + 2}" for i in range(99)]
    rows.append("99,3,7,1,6;7;8")  # target 7 repeated in its own window
    path.write_text("\n".join(rows) + "\n")
    stats = IngestStats()
    got = list(ingest_logs(path, stats=stats))
    assert len(got) == 99
    assert stats.malformed_lines == 1


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert list(ingest_logs(path)) == []


def test_ingest_header_only(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("user_id,ts,target_item,label_0,label_1,seq_item_ids\n")
    assert list(ingest_logs(path)) == []


def test_ingest_over_one_percent_malformed_raises(tmp_path):
    path = tmp_path / "rotten.csv"
    rows = ["user_id,ts,target_item,label_0,seq_item_ids"]
    rows += [f"{i},3,{i},1,{i + 1}" for i in range(50)]
    rows += ["x,y,z,1,1"] * 2  # 2/52 > 1%
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(IngestError):
        list(ingest_logs(path))


def test_ingest_schema_T_mismatch(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("user_id,ts,target_item,label_0,label_1,seq_item_ids\n")
    with pytest.raises(IngestError):
        list(ingest_logs(path, schema=LogSchema(T=3)))


def test_ingest_bad_header(tmp_path):
    path = tmp_path / "hdr.csv"
    path.write_text("who,when,what\n1,2,3\n")
    with pytest.raises(IngestError):
        list(ingest_logs(path))


def test_ingest_range_check_with_n_items(tmp_path):
    path = tmp_path / "range.csv"
    rows = ["user_id,ts,target_item,label_0,seq_item_ids"]
    rows += [f"{i},3,{i},1,{i + 1}" for i in range(99)]
    rows.append("99,3,500,1,1;2")  # target outside an override corpus size
    path.write_text("\n".join(rows) + "\n")
    stats = IngestStats()
    got = list(ingest_logs(path, schema=LogSchema(T=1, n_items=100), stats=stats))
    assert len(got) == 99
    assert stats.malformed_lines == 1


def test_ingest_missing_file():
    with pytest.raises(OSError):
        list(ingest_logs("/nonexistent/logs.csv"))


def test_users_roundtrip(tmp_path, stream200):
    _, stream = stream200
    path = tmp_path / "users.csv"
    write_users(stream.users, path)
    back = read_users(path)
    assert set(back) == set(stream.users)
    for uid, prof in stream.users.items():
        assert np.array_equal(back[uid], prof.user_feat)


def test_save_load_corpus_roundtrip(tmp_path):
    corpus = generate_corpus(48, 6, 5, 4, seed=21)
    d1 = tmp_path / "c1"
    save_corpus(corpus, d1)
    back = load_corpus(d1)
    assert back.n_items == corpus.n_items
    assert np.array_equal(back.text_feats, corpus.text_feats)
    assert np.array_equal(back.image_feats, corpus.image_feats)
    assert np.array_equal(back.clusters, corpus.clusters)
    # saving the loaded corpus again produces byte-identical files
    d2 = tmp_path / "c2"
    save_corpus(back, d2)
    for name in ("text_feats.npy", "image_feats.npy", "clusters.npy", "meta.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
