"""Contrastive training of frozen per-item content embeddings.

A small two-layer perceptron encodes ``concat(text_feat, image_feat)``
into R^d. It is trained with an in-batch InfoNCE objective over
similar-item pairs (here: pairs sampled inside the same latent cluster),
which pulls positive pairs together and pushes the rest of the batch
away. Outputs are L2-normalized both for the loss and in the final store,
so dot products downstream coincide with cosine similarity.

Store file format (``MMEB1``): magic ``MMEB1`` + little-endian uint32
``n_items``, uint32 ``d``; then per item a uint32 item id followed by
``d`` little-endian float32 values. A CSV debug export is also provided.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import ItemCorpus
from .errors import (
    ConfigError,
    FormatError,
    FrozenStoreError,
    LookupFailure,
    ShapeError,
    TrainingError,
)
from .optim import Adam

_MAGIC = b"MMEB1"


@dataclass
class PairDataset:
    """Anchor/positive item pairs with generator-ground-truth similarity."""

    pairs: np.ndarray  # (n_pairs, 2) int, pairs[:, 0] != pairs[:, 1]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class EmbedTrainConfig:
    d_out: int = 32
    hidden: int = 64
    batch_size: int = 256
    epochs: int = 10
    lr: float = 1e-3
    temperature: float = 0.1
    seed: int = 0


class EncoderParams:
    """Weights of the 2-layer content encoder."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.hidden = hidden
        self.d_out = d_out
        # b1 starts slightly positive so no input row can have every ReLU
        # unit dead at once: a fully dead row yields a zero pre-norm
        # output whose normalization gradient blows up
        self.tensors: dict[str, np.ndarray] = {
            "W1": rng.normal(size=(d_in, hidden)) * np.sqrt(2.0 / d_in),
            "b1": np.full(hidden, 0.1),
            "W2": rng.normal(size=(hidden, d_out)) * np.sqrt(1.0 / hidden),
            "b2": np.zeros(d_out),
        }


def encode(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    """Encode rows of X to unit-norm vectors in R^d."""
    out, _ = _encode_with_cache(params, X)
    return out


def _encode_with_cache(params: EncoderParams, X: np.ndarray):
    t = params.tensors
    pre = X @ t["W1"] + t["b1"]
    h = np.maximum(pre, 0.0)
    f = h @ t["W2"] + t["b2"]
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    y = f / norms
    return y, (X, pre, h, f, norms, y)


def _encode_backward(params: EncoderParams, cache, dY: np.ndarray,
                     grads: dict[str, np.ndarray]) -> None:
    """Accumulate encoder gradients for upstream dL/dY into ``grads``."""
    t = params.tensors
    X, pre, h, f, norms, y = cache
    # y = f / ||f||  =>  df = (dy - y * <y, dy>) / ||f||
    inner = np.sum(y * dY, axis=1, keepdims=True)
    dF = (dY - y * inner) / norms
    grads["W2"] += h.T @ dF
    grads["b2"] += dF.sum(axis=0)
    dH = dF @ t["W2"].T
    dH[pre <= 0.0] = 0.0
    grads["W1"] += X.T @ dH
    grads["b1"] += dH.sum(axis=0)


class EmbeddingStore:
    """Frozen map item id -> vector in R^d.

    Writes are rejected once frozen; the backing matrix is marked
    read-only so accidental in-place mutation fails loudly too.
    """

    def __init__(self, vectors: np.ndarray, frozen: bool = False,
                 meta: dict | None = None):
        self._vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        self.meta = meta if meta is not None else {}
        self._frozen = False
        if frozen:
            self.freeze()

    @property
    def n_items(self) -> int:
        return self._vectors.shape[0]

    @property
    def d(self) -> int:
        return self._vectors.shape[1]

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def matrix(self) -> np.ndarray:
        return self._vectors

    def freeze(self) -> None:
        self._frozen = True
        self._vectors.setflags(write=False)

    def vector(self, item: int) -> np.ndarray:
        if not 0 <= item < self.n_items:
            raise LookupFailure(f"item {item} not in store of size {self.n_items}")
        return self._vectors[item]

    def vectors(self, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items)
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise LookupFailure("item id outside store")
        return self._vectors[items]

    def set_vector(self, item: int, value: np.ndarray) -> None:
        if self._frozen:
            raise FrozenStoreError("store is frozen; writes are not allowed")
        self._vectors[item] = value


def build_pairs(corpus: ItemCorpus, pairs_per_item: int, seed: int) -> PairDataset:
    """Sample same-cluster (anchor, positive) pairs, ``pairs_per_item`` per item.

    Singleton clusters cannot contribute pairs; a warning is emitted for
    each. Deterministic under ``seed``.
    """
    if pairs_per_item < 1:
        raise ConfigError("pairs_per_item must be >= 1")
    rng = np.random.default_rng(seed)
    pairs: list[tuple[int, int]] = []
    members = {c: corpus.cluster_members(c) for c in range(corpus.n_clusters)}
    for c, items in members.items():
        if len(items) < 2:
            warnings.warn(f"cluster {c} has {len(items)} item(s); no pairs sampled")
    for i in range(corpus.n_items):
        pool = members[int(corpus.clusters[i])]
        others = pool[pool != i]
        if len(others) == 0:
            continue
        k = min(pairs_per_item, len(others))
        js = rng.choice(others, size=k, replace=False)
        pairs.extend((i, int(j)) for j in js)
    return PairDataset(pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2))


def info_nce_loss(anchor: np.ndarray, positive: np.ndarray,
                  negatives: list[np.ndarray] | np.ndarray,
                  temperature: float) -> float:
    """Contrastive loss for one anchor against a positive and explicit negatives.

    Similarity is the raw dot product. Computed via logsumexp for
    stability; always finite and >= 0 up to rounding.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    if negatives.shape[0] == 0:
        raise ConfigError("negatives must be non-empty")
    if anchor.shape != positive.shape or negatives.shape[1] != anchor.shape[0]:
        raise ShapeError(
            f"dim mismatch: anchor {anchor.shape}, positive {positive.shape}, "
            f"negatives {negatives.shape}"
        )
    s_pos = float(anchor @ positive) / temperature
    s_neg = (negatives @ anchor) / temperature
    logits = np.concatenate(([s_pos], s_neg))
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - s_pos)


def _batch_loss_and_grads(params: EncoderParams, corpus: ItemCorpus,
                          batch: np.ndarray, temperature: float):
    """Mean in-batch InfoNCE over a batch of pairs, plus encoder grads.

    Row r's positive is its paired item; its negatives are the other
    rows' positives (the in-batch scheme).
    """
    Xa = np.concatenate(
        [corpus.text_feats[batch[:, 0]], corpus.image_feats[batch[:, 0]]], axis=1
    )
    Xp = np.concatenate(
        [corpus.text_feats[batch[:, 1]], corpus.image_feats[batch[:, 1]]], axis=1
    )
    A, cache_a = _encode_with_cache(params, Xa)
    P, cache_p = _encode_with_cache(params, Xp)
    B = len(batch)
    S = (A @ P.T) / temperature  # (B, B), diagonal = positives
    m = S.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(S - m).sum(axis=1))
    loss = float(np.mean(lse - np.diag(S)))

    soft = np.exp(S - m)
    soft /= soft.sum(axis=1, keepdims=True)
    dS = soft.copy()
    dS[np.arange(B), np.arange(B)] -= 1.0
    dS /= B
    dA = (dS @ P) / temperature
    dP = (dS.T @ A) / temperature
    grads = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    _encode_backward(params, cache_a, dA, grads)
    _encode_backward(params, cache_p, dP, grads)
    return loss, grads


def encode_corpus(params: EncoderParams, corpus: ItemCorpus,
                  batch_size: int = 1024) -> np.ndarray:
    X = np.concatenate([corpus.text_feats, corpus.image_feats], axis=1)
    out = np.empty((corpus.n_items, params.d_out))
    for lo in range(0, corpus.n_items, batch_size):
        out[lo : lo + batch_size] = encode(params, X[lo : lo + batch_size])
    return out


def train_embeddings(corpus: ItemCorpus, pairs: PairDataset,
                     cfg: EmbedTrainConfig) -> EmbeddingStore:
    """Train the encoder by mini-batch Adam on mean in-batch InfoNCE.

    Returns a frozen store covering every corpus item; the per-epoch mean
    loss trajectory is recorded in ``store.meta["epoch_losses"]``.
    ``epochs=0`` skips training and encodes with the initial weights.
    """
    if cfg.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 for in-batch negatives")
    rng = np.random.default_rng(cfg.seed)
    d_in = corpus.d_text + corpus.d_image
    params = EncoderParams(d_in, cfg.hidden, cfg.d_out, rng)
    opt = Adam(lr=cfg.lr)
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = pairs.pairs[order[lo : lo + cfg.batch_size]]
            if len(batch) < 2:
                continue
            loss, grads = _batch_loss_and_grads(params, corpus, batch,
                                                cfg.temperature)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite InfoNCE loss at epoch {epoch}, batch {bi}"
                )
            opt.step(params.tensors, grads)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
    vectors = encode_corpus(params, corpus)
    return EmbeddingStore(
        vectors,
        frozen=True,
        meta={"epoch_losses": epoch_losses, "d": cfg.d_out, "seed": cfg.seed},
    )


def save_store(store: EmbeddingStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", store.n_items, store.d))
        vec32 = store.matrix.astype("<f4")
        for item in range(store.n_items):
            fh.write(struct.pack("<I", item))
            fh.write(vec32[item].tobytes())


def load_store(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FormatError(f"bad magic in embedding file: {magic!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise FormatError("truncated embedding file header")
        n_items, d = struct.unpack("<II", head)
        vectors = np.empty((n_items, d))
        row_bytes = 4 + 4 * d
        for i in range(n_items):
            buf = fh.read(row_bytes)
            if len(buf) != row_bytes:
                raise FormatError(f"truncated embedding file at item {i}")
            (item,) = struct.unpack("<I", buf[:4])
            if item != i:
                raise FormatError(f"out-of-order item id {item} at row {i}")
            vectors[i] = np.frombuffer(buf[4:], dtype="<f4")
    return EmbeddingStore(vectors, frozen=True)


def export_store_csv(store: EmbeddingStore, path) -> None:
    """Human-readable debug dump: item_id followed by the d vector entries."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("item_id," + ",".join(f"e_{i}" for i in range(store.d)) + "\n")
        for item in range(store.n_items):
            row = ",".join(repr(float(v)) for v in store.matrix[item])
            fh.write(f"{item},{row}\n")
