"""Binary index tree over item embeddings.

Construction recursively splits the item set with balanced 2-means on the
frozen item embeddings, top-down, until single items remain at the leaves.
The tree is stored as a complete binary tree of height ``H =
ceil(log2(n_items))`` in level order (root 0, children of ``n`` at
``2n+1``/``2n+2``); when ``n_items`` is not a power of two the unused
leaves (and any internal nodes with no real leaf below) are placeholders
that are never scored, sampled, or retrieved. Each internal node carries
an embedding equal to the arithmetic mean of the real item embeddings in
its subtree; leaves carry their item's embedding.

File format (``MTREE1``): magic ``MTREE1``; little-endian uint32 H,
uint64 n_items, uint32 d; per node in level order an int64 parent, uint8
has-children flag, uint8 placeholder flag and d float64 embedding values;
then the leaf-item table as n_items (uint64 item, uint64 leaf-node) rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, LookupFailure
from .mmembed import EmbeddingStore

_MAGIC = b"MTREE1"


def node_level(node: int) -> int:
    return (node + 1).bit_length() - 1


@dataclass
class IndexTree:
    """Complete binary tree with leaf <-> item bijection on real leaves."""

    height: int
    n_items: int
    z: np.ndarray  # (n_nodes, d) float64; zero rows for placeholders
    placeholder: np.ndarray  # (n_nodes,) bool
    leaf_to_item: np.ndarray  # (2**height,) int, -1 on placeholder leaves
    item_to_leaf: np.ndarray  # (n_items,) node ids

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.height + 1) - 1

    @property
    def first_leaf(self) -> int:
        return 2**self.height - 1

    @property
    def d(self) -> int:
        return self.z.shape[1]

    def _check(self, node: int) -> None:
        if not 0 <= node < self.n_nodes:
            raise LookupFailure(f"node {node} outside tree of {self.n_nodes} nodes")

    def level(self, node: int) -> int:
        self._check(node)
        return node_level(node)

    def parent(self, node: int) -> int:
        self._check(node)
        if node == 0:
            raise LookupFailure("root has no parent")
        return (node - 1) // 2

    def children(self, node: int) -> tuple[int, ...]:
        self._check(node)
        if self.is_leaf(node):
            return ()
        return (2 * node + 1, 2 * node + 2)

    def is_leaf(self, node: int) -> bool:
        return node >= self.first_leaf

    def nodes_at_level(self, h: int) -> np.ndarray:
        if not 0 <= h <= self.height:
            raise LookupFailure(f"level {h} outside [0, {self.height}]")
        return np.arange(2**h - 1, 2 ** (h + 1) - 1, dtype=np.int64)

    def real_nodes_at_level(self, h: int) -> np.ndarray:
        nodes = self.nodes_at_level(h)
        return nodes[~self.placeholder[nodes]]

    def item_for_leaf(self, node: int) -> int:
        self._check(node)
        if not self.is_leaf(node) or self.placeholder[node]:
            raise LookupFailure(f"node {node} is not a real leaf")
        return int(self.leaf_to_item[node - self.first_leaf])

    def leaf_for_item(self, item: int) -> int:
        if not 0 <= item < self.n_items:
            raise LookupFailure(f"item {item} outside corpus of {self.n_items}")
        return int(self.item_to_leaf[item])

    def leaf_items(self, node: int) -> np.ndarray:
        """Items under ``node``'s subtree (real leaves only), ascending leaf order."""
        self._check(node)
        lo, hi = node, node
        while lo < self.first_leaf:
            lo = 2 * lo + 1
            hi = 2 * hi + 2
        offs = np.arange(lo, hi + 1) - self.first_leaf
        items = self.leaf_to_item[offs]
        return items[items >= 0]


def ancestors(tree: IndexTree, node: int) -> list[int]:
    """Root-to-node path, length ``level(node) + 1``."""
    tree._check(node)
    path = [node]
    while node != 0:
        node = (node - 1) // 2
        path.append(node)
    return path[::-1]


def ancestor_at(tree: IndexTree, node: int, h: int) -> int:
    """The unique level-``h`` node on ``node``'s root path."""
    lvl = tree.level(node)
    if not 0 <= h <= lvl:
        raise LookupFailure(f"level {h} not on root path of node {node}")
    for _ in range(lvl - h):
        node = (node - 1) // 2
    return node


def two_means(points: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced 2-means split of the rows of ``points``.

    Runs k-means++ initialized Lloyd iterations to an assignment fixpoint
    (at most 100 sweeps), then rebalances: points with the smallest margin
    ``|d(x, far_center) - d(x, near_center)|`` migrate out of the larger
    cluster until the sizes differ by at most one, ties broken by lower
    point index. Returns the two index sets; the first contains point 0.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise ConfigError("two_means needs at least 2 points")
    rng = np.random.default_rng(seed)

    # k-means++ init
    first = int(rng.integers(n))
    d2 = np.sum((points - points[first]) ** 2, axis=1)
    total = d2.sum()
    if total > 0:
        second = int(rng.choice(n, p=d2 / total))
    else:
        second = (first + 1) % n
    centers = np.stack([points[first], points[second]])

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        d0 = np.sum((points - centers[0]) ** 2, axis=1)
        d1 = np.sum((points - centers[1]) ** 2, axis=1)
        new_assign = (d1 < d0).astype(np.int64)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in (0, 1):
            mask = assign == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)

    # Rebalance to sizes differing by <= 1.
    sizes = np.bincount(assign, minlength=2)
    if abs(int(sizes[0]) - int(sizes[1])) > 1:
        large = int(np.argmax(sizes))
        small = 1 - large
        n_move = (int(sizes[large]) - int(sizes[small])) // 2
        cand = np.nonzero(assign == large)[0]
        d_near = np.linalg.norm(points[cand] - centers[large], axis=1)
        d_far = np.linalg.norm(points[cand] - centers[small], axis=1)
        margin = np.abs(d_far - d_near)
        order = np.lexsort((cand, margin))  # margin asc, then lower index
        assign[cand[order[:n_move]]] = small

    a = np.nonzero(assign == assign[0])[0]
    b = np.nonzero(assign != assign[0])[0]
    return a, b


def _subtree_seed(seed: int, node: int) -> int:
    return int(np.random.SeedSequence([seed, node]).generate_state(1)[0])


def build_tree(store: EmbeddingStore, seed: int) -> IndexTree:
    """Build a balanced binary tree of height ``ceil(log2(n_items))``.

    At every internal node the current item set is split by balanced
    2-means on the stored embeddings; the half containing the lowest item
    id goes left. Deterministic under ``(store, seed)``.
    """
    n = store.n_items
    if n < 1:
        raise ConfigError("store is empty")
    H = max(0, int(np.ceil(np.log2(n)))) if n > 1 else 0
    n_nodes = 2 ** (H + 1) - 1
    first_leaf = 2**H - 1
    d = store.d

    leaf_to_item = np.full(2**H, -1, dtype=np.int64)
    item_to_leaf = np.full(n, -1, dtype=np.int64)

    stack: list[tuple[int, np.ndarray]] = [(0, np.arange(n, dtype=np.int64))]
    while stack:
        node, items = stack.pop()
        if node >= first_leaf:
            if len(items):
                leaf_to_item[node - first_leaf] = items[0]
                item_to_leaf[items[0]] = node
            continue
        if len(items) == 0:
            continue  # whole subtree stays placeholder
        if len(items) == 1:
            left_items, right_items = items, items[:0]
        else:
            a, b = two_means(store.matrix[items], _subtree_seed(seed, node))
            ia, ib = items[a], items[b]
            if ia.min() < ib.min():
                left_items, right_items = ia, ib
            else:
                left_items, right_items = ib, ia
        stack.append((2 * node + 1, left_items))
        stack.append((2 * node + 2, right_items))

    # Bottom-up mean pooling of real leaf embeddings.
    z = np.zeros((n_nodes, d))
    sums = np.zeros((n_nodes, d))
    counts = np.zeros(n_nodes, dtype=np.int64)
    leaf_nodes = np.arange(first_leaf, n_nodes)
    real = leaf_to_item >= 0
    sums[leaf_nodes[real]] = store.matrix[leaf_to_item[real]]
    counts[leaf_nodes[real]] = 1
    for node in range(first_leaf - 1, -1, -1):
        l, r = 2 * node + 1, 2 * node + 2
        sums[node] = sums[l] + sums[r]
        counts[node] = counts[l] + counts[r]
    nonzero = counts > 0
    z[nonzero] = sums[nonzero] / counts[nonzero, None]
    placeholder = ~nonzero
    return IndexTree(
        height=H,
        n_items=n,
        z=z,
        placeholder=placeholder,
        leaf_to_item=leaf_to_item,
        item_to_leaf=item_to_leaf,
    )


def save_tree(tree: IndexTree, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQI", tree.height, tree.n_items, tree.d))
        first_leaf = tree.first_leaf
        for node in range(tree.n_nodes):
            parent = -1 if node == 0 else (node - 1) // 2
            has_children = 0 if node >= first_leaf else 1
            fh.write(
                struct.pack(
                    "<qBB", parent, has_children, int(tree.placeholder[node])
                )
            )
            fh.write(tree.z[node].astype("<f8").tobytes())
        for item in range(tree.n_items):
            fh.write(struct.pack("<QQ", item, int(tree.item_to_leaf[item])))


def load_tree(path) -> IndexTree:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FormatError(f"bad magic in tree file: {magic!r}")
        head = fh.read(16)
        if len(head) != 16:
            raise FormatError("truncated tree file header")
        H, n_items, d = struct.unpack("<IQI", head)
        n_nodes = 2 ** (H + 1) - 1
        first_leaf = 2**H - 1
        z = np.empty((n_nodes, d))
        placeholder = np.empty(n_nodes, dtype=bool)
        rec = 10 + 8 * d
        for node in range(n_nodes):
            buf = fh.read(rec)
            if len(buf) != rec:
                raise FormatError(f"truncated tree file at node {node}")
            parent, has_children, ph = struct.unpack("<qBB", buf[:10])
            expect_parent = -1 if node == 0 else (node - 1) // 2
            if parent != expect_parent or has_children != int(node < first_leaf):
                raise FormatError(f"inconsistent node record at node {node}")
            placeholder[node] = bool(ph)
            z[node] = np.frombuffer(buf[10:], dtype="<f8")
        leaf_to_item = np.full(2**H, -1, dtype=np.int64)
        item_to_leaf = np.full(n_items, -1, dtype=np.int64)
        for _ in range(n_items):
            buf = fh.read(16)
            if len(buf) != 16:
                raise FormatError("truncated leaf-item table")
            item, leaf = struct.unpack("<QQ", buf)
            if not (first_leaf <= leaf < n_nodes) or item >= n_items:
                raise FormatError("leaf-item table entry out of range")
            leaf_to_item[leaf - first_leaf] = item
            item_to_leaf[item] = leaf
    if np.any(item_to_leaf < 0):
        raise FormatError("leaf-item table does not cover all items")
    return IndexTree(
        height=H,
        n_items=n_items,
        z=z,
        placeholder=placeholder,
        leaf_to_item=leaf_to_item,
        item_to_leaf=item_to_leaf,
    )
