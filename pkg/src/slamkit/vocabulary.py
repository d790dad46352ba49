"""Bag-of-binary-words place recognition.

Two interchangeable retrieval backends:

Vocabulary              hierarchical k-medians tree over Hamming space
                        (majority-vote bit centroids, branching k, depth
                        <= L).  Descriptors descend by nearest centroid
                        to a leaf word; images become sparse tf-idf
                        vectors, L1-normalized, compared with
                        similarity = 1 - 0.5*||a - b||_1.
IncrementalBinaryIndex  vocabulary-free: bit-sampled hash tables filled
                        online, queries vote per stored image.

Training is fully deterministic: farthest-first center seeding and
strict-majority bit votes leave nothing to chance, so the same corpus
always yields byte-identical vocabulary files.

File format (little-endian): magic "SLKVOC1", u32 k, u32 L, u64 node
count, then per node: i64 parent (-1 for the root), 32-byte centroid,
f64 idf.  Child lists and leaf word ids are derived from parent order.
"""

from __future__ import annotations

import math
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .matching import hamming_matrix

VOCAB_MAGIC = b"SLKVOC1"

_HEADER = struct.Struct("<7sIIQ")
_NODE = struct.Struct("<q32sd")

BowVector = Dict[int, float]


def _majority(desc: np.ndarray) -> np.ndarray:
    """Strict-majority vote per bit over (N, 32) uint8 rows."""
    bits = np.unpackbits(desc, axis=1)
    vote = bits.sum(axis=0) * 2 > len(desc)
    return np.packbits(vote.astype(np.uint8))


def _k_medians(desc: np.ndarray, k: int, max_iters: int = 10):
    """Deterministic k-medians over Hamming space.

    Farthest-first seeding from descriptor 0, strict-majority centroid
    updates, empty clusters re-seeded on the farthest descriptor.
    Returns (centers (k,32), assignment (N,)).
    """
    n = len(desc)
    centers = [desc[0]]
    d_min = hamming_matrix(desc, desc[0:1]).reshape(-1).astype(np.int32)
    for _ in range(k - 1):
        far = int(np.argmax(d_min))
        centers.append(desc[far])
        d_min = np.minimum(d_min, hamming_matrix(desc, desc[far:far + 1]).reshape(-1))
    centers = np.stack(centers)
    assign = np.argmin(hamming_matrix(desc, centers), axis=1)
    for _ in range(max_iters):
        for j in range(k):
            members = desc[assign == j]
            if len(members) == 0:
                # farthest descriptor from all current centers restarts
                # the empty cluster
                d = hamming_matrix(desc, centers).min(axis=1)
                centers[j] = desc[int(np.argmax(d))]
            else:
                centers[j] = _majority(members)
        new_assign = np.argmin(hamming_matrix(desc, centers), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers, assign


class Vocabulary:
    """Hierarchical k-medians word tree with per-leaf idf weights."""

    def __init__(self, k: int, depth: int, parents: np.ndarray,
                 centroids: np.ndarray, idf: np.ndarray):
        self.k = int(k)
        self.depth = int(depth)
        self.parents = np.asarray(parents, dtype=np.int64)
        self.centroids = np.asarray(centroids, dtype=np.uint8).reshape(-1, 32)
        self.idf = np.asarray(idf, dtype=float)
        self._children: List[List[int]] = [[] for _ in range(len(self.parents))]
        for i, p in enumerate(self.parents):
            if p >= 0:
                self._children[p].append(i)
        self.word_of_node = np.full(len(self.parents), -1, dtype=np.int64)
        leaves = [i for i in range(len(self.parents)) if not self._children[i]]
        for w, node in enumerate(leaves):
            self.word_of_node[node] = w
        self.num_words = len(leaves)
        self._leaf_nodes = np.array(leaves, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.parents)

    def children(self, node: int) -> List[int]:
        return self._children[node]

    # ------------------------------------------------------------ transform

    def descend(self, desc: np.ndarray) -> np.ndarray:
        """Leaf word id for each descriptor row."""
        desc = np.asarray(desc, dtype=np.uint8).reshape(-1, 32)
        node = np.zeros(len(desc), dtype=np.int64)
        for _ in range(self.depth + 1):
            done = True
            for nid in np.unique(node):
                kids = self._children[nid]
                if not kids:
                    continue
                done = False
                sel = node == nid
                d = hamming_matrix(desc[sel], self.centroids[kids])
                node[sel] = np.asarray(kids, dtype=np.int64)[np.argmin(d, axis=1)]
            if done:
                break
        return self.word_of_node[node]

    def transform(self, desc) -> BowVector:
        """Sparse L1-normalized tf-idf vector of one image."""
        desc = np.asarray(desc, dtype=np.uint8).reshape(-1, 32)
        if len(desc) == 0:
            return {}
        words = self.descend(desc)
        leaf_nodes = self._leaf_nodes[words]
        vec: BowVector = {}
        for w, node in zip(words, leaf_nodes):
            weight = self.idf[node]
            if weight > 0.0:
                vec[int(w)] = vec.get(int(w), 0.0) + weight
        total = sum(vec.values())
        if total <= 0.0:
            return {}
        return {w: v / total for w, v in vec.items()}

    # ----------------------------------------------------------------- file

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(VOCAB_MAGIC, self.k, self.depth, len(self.parents)))
            for i in range(len(self.parents)):
                f.write(_NODE.pack(int(self.parents[i]),
                                   self.centroids[i].tobytes(),
                                   float(self.idf[i])))

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise ValueError(f"{path}: truncated vocabulary header")
            magic, k, depth, count = _HEADER.unpack(head)
            if magic != VOCAB_MAGIC:
                raise ValueError(f"{path}: not a vocabulary file (bad magic)")
            parents = np.empty(count, dtype=np.int64)
            centroids = np.empty((count, 32), dtype=np.uint8)
            idf = np.empty(count, dtype=float)
            for i in range(count):
                blob = f.read(_NODE.size)
                if len(blob) < _NODE.size:
                    raise ValueError(f"{path}: truncated at node {i}")
                p, c, w = _NODE.unpack(blob)
                parents[i] = p
                centroids[i] = np.frombuffer(c, dtype=np.uint8)
                idf[i] = w
        return cls(k, depth, parents, centroids, idf)


def train_vocabulary(descriptor_arrays: Sequence[np.ndarray], k: int = 10,
                     depth: int = 3) -> Vocabulary:
    """Build a word tree from per-image descriptor arrays.

    Nodes with fewer than k distinct descriptors stop splitting early.
    idf(word) = ln(num images / images containing the word), measured on
    the training corpus itself.
    """
    arrays = [np.asarray(a, dtype=np.uint8).reshape(-1, 32)
              for a in descriptor_arrays if len(a)]
    if not arrays:
        raise ValueError("no training descriptors")
    if k < 2:
        raise ValueError("branching factor must be >= 2")
    all_desc = np.concatenate(arrays)
    parents: List[int] = [-1]
    centroids: List[np.ndarray] = [_majority(all_desc)]
    # FIFO split queue keeps node ids in breadth-first order
    queue: List[Tuple[int, np.ndarray, int]] = [(0, np.arange(len(all_desc)), 0)]
    while queue:
        node_id, subset, level = queue.pop(0)
        desc = all_desc[subset]
        if level >= depth or len(subset) < k or len(np.unique(desc, axis=0)) < 2:
            continue  # leaf
        centers, assign = _k_medians(desc, k)
        for j in range(k):
            members = subset[assign == j]
            if len(members) == 0:
                continue
            child = len(parents)
            parents.append(node_id)
            centroids.append(centers[j])
            queue.append((child, members, level + 1))
    vocab = Vocabulary(k, depth, np.array(parents, dtype=np.int64),
                       np.stack(centroids), np.zeros(len(parents)))
    # document frequency over the training images
    n_images = len(arrays)
    df: Dict[int, int] = {}
    for arr in arrays:
        for w in set(vocab.descend(arr).tolist()):
            df[w] = df.get(w, 0) + 1
    for node in vocab._leaf_nodes:
        w = int(vocab.word_of_node[node])
        n = df.get(w, 0)
        vocab.idf[node] = math.log(n_images / n) if n > 0 else 0.0
    return vocab


def similarity(a: BowVector, b: BowVector) -> float:
    """1 - 0.5*||a - b||_1 over L1-normalized vectors; empty scores 0."""
    if not a or not b:
        return 0.0
    l1 = 0.0
    for w in set(a) | set(b):
        l1 += abs(a.get(w, 0.0) - b.get(w, 0.0))
    return max(0.0, 1.0 - 0.5 * l1)


class IncrementalBinaryIndex:
    """Online binary-descriptor index: bit-sampled hash tables + voting.

    Images are added as they arrive (no pretrained data).  A query
    gathers bucket collisions per table, keeps candidates within
    max_hamming of the query descriptor, and scores each stored image by
    the fraction of query descriptors it wins.  The query image itself
    is never returned.
    """

    def __init__(self, num_tables: int = 8, bits_per_table: int = 16,
                 max_hamming: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.bit_choices = np.stack([rng.choice(256, bits_per_table, replace=False)
                                     for _ in range(num_tables)])
        self.max_hamming = int(max_hamming)
        self._powers = 1 << np.arange(bits_per_table, dtype=np.uint64)
        self._desc: List[np.ndarray] = []
        self._image_of: List[int] = []
        self._buckets: Dict[Tuple[int, int], List[int]] = {}
        self.images: List[int] = []

    def __len__(self) -> int:
        return len(self._desc)

    def _keys(self, desc: np.ndarray) -> np.ndarray:
        bits = np.unpackbits(np.asarray(desc, np.uint8).reshape(-1, 32), axis=1)
        sampled = bits[:, self.bit_choices]  # (n, tables, bits)
        return sampled.astype(np.uint64) @ self._powers

    def add(self, image_id: int, desc: np.ndarray) -> None:
        desc = np.asarray(desc, dtype=np.uint8).reshape(-1, 32)
        if len(desc) == 0:
            return
        keys = self._keys(desc)
        base = len(self._desc)
        for i in range(len(desc)):
            self._desc.append(desc[i])
            self._image_of.append(image_id)
            for t in range(keys.shape[1]):
                self._buckets.setdefault((t, int(keys[i, t])), []).append(base + i)
        if image_id not in self.images:
            self.images.append(image_id)

    def query(self, desc: np.ndarray, exclude_image=None,
              max_results: int = 5) -> List[Tuple[int, float]]:
        """Ranked (image id, vote fraction); exclude_image is an id or set."""
        desc = np.asarray(desc, dtype=np.uint8).reshape(-1, 32)
        if len(desc) == 0 or not self._desc:
            return []
        if exclude_image is None:
            excluded = frozenset()
        elif isinstance(exclude_image, (int, np.integer)):
            excluded = frozenset((int(exclude_image),))
        else:
            excluded = frozenset(int(e) for e in exclude_image)
        keys = self._keys(desc)
        store = np.stack(self._desc)
        image_of = np.asarray(self._image_of)
        votes: Dict[int, int] = {}
        for i in range(len(desc)):
            cand: set = set()
            for t in range(keys.shape[1]):
                cand.update(self._buckets.get((t, int(keys[i, t])), ()))
            if excluded:
                cand = {c for c in cand if self._image_of[c] not in excluded}
            if not cand:
                continue
            ids = np.fromiter(cand, dtype=np.int64)
            d = hamming_matrix(desc[i: i + 1], store[ids]).reshape(-1)
            best = int(np.argmin(d))
            if d[best] <= self.max_hamming:
                img = int(image_of[ids[best]])
                votes[img] = votes.get(img, 0) + 1
        scored = [(img, v / len(desc)) for img, v in votes.items()]
        scored.sort(key=lambda s: (-s[1], s[0]))
        return scored[:max_results]
