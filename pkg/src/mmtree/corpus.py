"""Synthetic item universe and behavior-log generation/ingestion.

Items live in latent Gaussian clusters: each item's text/image feature
vector is its cluster centroid plus isotropic noise, which gives the rest
of the pipeline a measurable ground-truth similarity structure. Users are
assigned an affinity distribution over a few focus clusters; their events
sample items through that affinity, and per-objective engagement labels
fire at a higher rate for affinity-matched items.

Log files are CSV with one training instance per line:

    user_id,ts,target_item,label_0,...,label_{T-1},seq_item_ids

where ``seq_item_ids`` is a semicolon-separated item list (oldest first)
and the header's ``label_*`` column count carries T. A companion
``users.csv`` (``user_id,feat_0,...``) persists user feature vectors for
the estimator stages.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import ConfigError, IngestError

DEFAULT_MATCHED_RATES = (0.5, 0.3, 0.1)
MISMATCH_FACTOR = 0.1


@dataclass(frozen=True)
class ItemContent:
    """Content features and generator provenance for a single item."""

    item: int
    text_feat: np.ndarray
    image_feat: np.ndarray
    latent_cluster: int


@dataclass
class ItemCorpus:
    """The item universe: dense ids ``[0, n_items)`` with content features.

    ``clusters`` is generator provenance (hidden from models); the
    centroid matrices are kept so the log generator can build cluster-aware
    user features.
    """

    n_items: int
    n_clusters: int
    text_feats: np.ndarray  # (n_items, d_text)
    image_feats: np.ndarray  # (n_items, d_image)
    clusters: np.ndarray  # (n_items,) int
    text_centroids: np.ndarray  # (n_clusters, d_text)
    image_centroids: np.ndarray  # (n_clusters, d_image)
    seed: int

    @property
    def d_text(self) -> int:
        return self.text_feats.shape[1]

    @property
    def d_image(self) -> int:
        return self.image_feats.shape[1]

    def content(self, item: int) -> ItemContent:
        return ItemContent(
            item=item,
            text_feat=self.text_feats[item],
            image_feat=self.image_feats[item],
            latent_cluster=int(self.clusters[item]),
        )

    def cluster_members(self, cluster: int) -> np.ndarray:
        return np.nonzero(self.clusters == cluster)[0]


@dataclass
class UserProfile:
    """Generator-side user state; ``user_feat`` is model-visible."""

    user: int
    user_feat: np.ndarray
    affinity: np.ndarray  # distribution over latent clusters, sums to 1


@dataclass
class BehaviorSequence:
    """Ordered (item, timestamp) events for one user."""

    user: int
    items: np.ndarray  # (M,) int
    timestamps: np.ndarray  # (M,) int, non-decreasing

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class TrainingInstance:
    """One (user, history, target) example with a T-dim binary label vector."""

    user: int
    sequence: BehaviorSequence
    target: int
    labels: np.ndarray  # (T,) int in {0, 1}


@dataclass
class LogSchema:
    """Column layout of a behavior-log file."""

    T: int
    n_items: int | None = None

    def header(self) -> list[str]:
        labels = [f"label_{t}" for t in range(self.T)]
        return ["user_id", "ts", "target_item", *labels, "seq_item_ids"]

    @classmethod
    def from_header(cls, columns: list[str], n_items: int | None = None) -> "LogSchema":
        expected_prefix = ["user_id", "ts", "target_item"]
        if columns[:3] != expected_prefix or not columns or columns[-1] != "seq_item_ids":
            raise IngestError(f"unrecognized log header: {columns!r}")
        label_cols = columns[3:-1]
        if not label_cols or any(
            c != f"label_{t}" for t, c in enumerate(label_cols)
        ):
            raise IngestError(f"bad label columns in log header: {label_cols!r}")
        return cls(T=len(label_cols), n_items=n_items)


@dataclass
class IngestStats:
    """Counters accumulated while reading a log file."""

    total_lines: int = 0
    malformed_lines: int = 0


@dataclass
class LogStream:
    """Materialized training instances plus the user profiles behind them."""

    instances: list[TrainingInstance]
    users: dict[int, UserProfile] = field(default_factory=dict)

    def __iter__(self) -> Iterator[TrainingInstance]:
        return iter(self.instances)

    def __len__(self) -> int:
        return len(self.instances)


def generate_corpus(
    n_items: int,
    n_clusters: int,
    d_text: int,
    d_image: int,
    seed: int,
    noise: float = 0.1,
) -> ItemCorpus:
    """Sample a clustered synthetic corpus.

    Item ``i`` belongs to cluster ``i % n_clusters`` (equal sizes whenever
    divisible) and its features are that cluster's centroid plus isotropic
    Gaussian noise of scale ``noise``. Deterministic under ``seed``.
    """
    if n_items < 2:
        raise ConfigError(f"n_items must be >= 2, got {n_items}")
    if n_clusters < 1 or n_clusters > n_items:
        raise ConfigError(
            f"n_clusters must be in [1, n_items], got {n_clusters} for {n_items} items"
        )
    if d_text < 1 or d_image < 1:
        raise ConfigError("feature dims must be positive")
    rng = np.random.default_rng(seed)
    text_centroids = rng.normal(size=(n_clusters, d_text))
    image_centroids = rng.normal(size=(n_clusters, d_image))
    clusters = np.arange(n_items, dtype=np.int64) % n_clusters
    text_feats = text_centroids[clusters] + noise * rng.normal(size=(n_items, d_text))
    image_feats = image_centroids[clusters] + noise * rng.normal(
        size=(n_items, d_image)
    )
    return ItemCorpus(
        n_items=n_items,
        n_clusters=n_clusters,
        text_feats=text_feats,
        image_feats=image_feats,
        clusters=clusters,
        text_centroids=text_centroids,
        image_centroids=image_centroids,
        seed=seed,
    )


def generate_logs(
    corpus: ItemCorpus,
    n_users: int,
    events_per_user: int,
    T: int,
    seed: int,
    max_seq_len: int = 128,
    n_focus_clusters: int = 3,
    event_noise: float = 0.1,
    matched_rates: tuple[float, ...] = DEFAULT_MATCHED_RATES,
    user_feat_noise: float = 0.05,
) -> LogStream:
    """Simulate per-user event streams and emit one instance per event.

    Each user gets an affinity distribution concentrated on
    ``n_focus_clusters`` latent clusters. Events sample a cluster by
    affinity (or, with probability ``event_noise``, any item uniformly)
    and an item uniformly inside it. Objective ``t`` labels fire with rate
    ``matched_rates[t]`` when the event's cluster is a focus cluster and a
    tenth of that otherwise. The instance for event ``i`` uses the user's
    history ``[0, i)`` truncated to the most recent ``max_seq_len`` events.

    An event's item is redrawn while it collides with the current window,
    so an instance's target never appears in its own input sequence (the
    feed does not re-surface something just shown). If the window has
    swallowed the whole corpus the event is logged but no instance is
    emitted for it.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if corpus.n_items == 0:
        raise ConfigError("corpus is empty")
    if n_users < 1 or events_per_user < 1:
        raise ConfigError("n_users and events_per_user must be positive")
    rng = np.random.default_rng(seed)
    rates = np.array([matched_rates[t % len(matched_rates)] for t in range(T)])
    n_focus = min(n_focus_clusters, corpus.n_clusters)
    members = [corpus.cluster_members(c) for c in range(corpus.n_clusters)]

    instances: list[TrainingInstance] = []
    users: dict[int, UserProfile] = {}
    for user in range(n_users):
        focus = rng.choice(corpus.n_clusters, size=n_focus, replace=False)
        weights = rng.dirichlet(np.full(n_focus, 2.0))
        affinity = np.zeros(corpus.n_clusters)
        affinity[focus] = weights
        user_feat = affinity @ corpus.text_centroids
        user_feat = user_feat + user_feat_noise * rng.normal(size=user_feat.shape)
        users[user] = UserProfile(user=user, user_feat=user_feat, affinity=affinity)

        focus_set = set(int(c) for c in focus)
        items = np.empty(events_per_user, dtype=np.int64)
        timestamps = np.arange(events_per_user, dtype=np.int64)
        for e in range(events_per_user):
            lo = max(0, e - max_seq_len)
            window = items[lo:e]
            item = -1
            for _attempt in range(50):
                if rng.random() < event_noise:
                    cand = int(rng.integers(corpus.n_items))
                else:
                    pool = members[int(focus[rng.choice(n_focus, p=weights)])]
                    cand = int(pool[rng.integers(len(pool))])
                if not (window == cand).any():
                    item = cand
                    break
            emit = True
            if item < 0:
                outside = np.setdiff1d(np.arange(corpus.n_items), window)
                if outside.size:
                    item = int(outside[rng.integers(outside.size)])
                else:
                    item = cand
                    emit = False
            items[e] = item
            matched = int(corpus.clusters[item]) in focus_set
            event_rates = rates if matched else MISMATCH_FACTOR * rates
            labels = (rng.random(T) < event_rates).astype(np.int8)
            if emit:
                seq = BehaviorSequence(
                    user=user, items=items[lo:e], timestamps=timestamps[lo:e]
                )
                instances.append(
                    TrainingInstance(
                        user=user, sequence=seq, target=item, labels=labels
                    )
                )
    return LogStream(instances=instances, users=users)


def write_logs(stream: Iterable[TrainingInstance], path, T: int) -> int:
    """Write instances to a log file; returns the number of lines written."""
    schema = LogSchema(T=T)
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.header())
        for inst in stream:
            seq = ";".join(str(int(i)) for i in inst.sequence.items)
            writer.writerow(
                [
                    inst.user,
                    int(inst.sequence.timestamps[-1]) + 1 if len(inst.sequence) else 0,
                    inst.target,
                    *[int(v) for v in inst.labels],
                    seq,
                ]
            )
            n += 1
    return n


def write_users(users: dict[int, UserProfile], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        first = next(iter(users.values()))
        writer.writerow(["user_id", *[f"feat_{i}" for i in range(len(first.user_feat))]])
        for uid in sorted(users):
            writer.writerow([uid, *[repr(float(v)) for v in users[uid].user_feat]])


def read_users(path) -> dict[int, np.ndarray]:
    feats: dict[int, np.ndarray] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            feats[int(row[0])] = np.array([float(v) for v in row[1:]])
    return feats


def _parse_line(row: list[str], schema: LogSchema) -> TrainingInstance:
    if len(row) != 4 + schema.T:
        raise ValueError("wrong field count")
    user = int(row[0])
    ts = int(row[1])
    target = int(row[2])
    labels = np.array([int(v) for v in row[3 : 3 + schema.T]], dtype=np.int8)
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("label outside {0,1}")
    seq_field = row[3 + schema.T].strip()
    items = (
        np.array([int(v) for v in seq_field.split(";")], dtype=np.int64)
        if seq_field
        else np.empty(0, dtype=np.int64)
    )
    if user < 0 or target < 0 or np.any(items < 0):
        raise ValueError("negative id")
    if schema.n_items is not None:
        if target >= schema.n_items or np.any(items >= schema.n_items):
            raise ValueError("item id outside corpus")
    if (items == target).any():
        raise ValueError("target repeated in its input sequence")
    m = len(items)
    timestamps = np.arange(ts - m, ts, dtype=np.int64)
    return TrainingInstance(
        user=user,
        sequence=BehaviorSequence(user=user, items=items, timestamps=timestamps),
        target=target,
        labels=labels,
    )


def ingest_logs(
    path, schema: LogSchema | None = None, stats: IngestStats | None = None
) -> Iterator[TrainingInstance]:
    """Yield instances from a log file in file order.

    Malformed lines are counted in ``stats`` and skipped; if more than 1%
    of lines are malformed the stream raises ``IngestError`` at the end.
    An unreadable path raises ``OSError``. A schema with ``n_items`` set
    additionally validates item-id ranges.
    """
    if stats is None:
        stats = IngestStats()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return  # empty file -> empty stream
        file_schema = LogSchema.from_header(
            header, n_items=schema.n_items if schema else None
        )
        if schema is not None and schema.T != file_schema.T:
            raise IngestError(
                f"log file has T={file_schema.T}, expected T={schema.T}"
            )
        for row in reader:
            stats.total_lines += 1
            try:
                yield _parse_line(row, file_schema)
            except (ValueError, IndexError):
                stats.malformed_lines += 1
    if stats.total_lines and stats.malformed_lines / stats.total_lines > 0.01:
        raise IngestError(
            f"{stats.malformed_lines}/{stats.total_lines} malformed lines (>1%)"
        )


def read_logs(path, schema: LogSchema | None = None) -> tuple[list[TrainingInstance], IngestStats]:
    """Materialize ``ingest_logs`` into a list, returning ingest counters."""
    stats = IngestStats()
    instances = list(ingest_logs(path, schema=schema, stats=stats))
    return instances, stats


def user_feature(entry) -> Optional[np.ndarray]:
    """Feature vector from a user-table entry (profile or raw array)."""
    if entry is None:
        return None
    if isinstance(entry, UserProfile):
        return entry.user_feat
    return np.asarray(entry, dtype=np.float64)


def save_corpus(corpus: ItemCorpus, out_dir, extra_meta: dict | None = None) -> None:
    """Persist a corpus as plain ``.npy`` arrays plus a JSON header.

    ``.npy`` holds no timestamps, so identical corpora produce identical
    bytes on disk. ``extra_meta`` entries (e.g. a resolved-config echo)
    are merged into ``meta.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "text_feats.npy", corpus.text_feats)
    np.save(out_dir / "image_feats.npy", corpus.image_feats)
    np.save(out_dir / "clusters.npy", corpus.clusters)
    np.save(out_dir / "text_centroids.npy", corpus.text_centroids)
    np.save(out_dir / "image_centroids.npy", corpus.image_centroids)
    with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                **(extra_meta or {}),
                "n_items": corpus.n_items,
                "n_clusters": corpus.n_clusters,
                "seed": corpus.seed,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")


def load_corpus(in_dir) -> ItemCorpus:
    in_dir = Path(in_dir)
    with open(in_dir / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    return ItemCorpus(
        n_items=int(meta["n_items"]),
        n_clusters=int(meta["n_clusters"]),
        text_feats=np.load(in_dir / "text_feats.npy"),
        image_feats=np.load(in_dir / "image_feats.npy"),
        clusters=np.load(in_dir / "clusters.npy"),
        text_centroids=np.load(in_dir / "text_centroids.npy"),
        image_centroids=np.load(in_dir / "image_centroids.npy"),
        seed=int(meta["seed"]),
    )
