"""Graph datasets: portable text format, preprocessing, mixing, synthetic
generators and Gromov delta-hyperbolicity analysis.

Directory format (all text UTF-8, LF endings, '.' decimal separator):

* ``nodes.csv``   — header ``id,label,f0,f1,...``; one row per node with
  ``id`` running 0..n-1 in order and an integer class label.
* ``edges.tsv``   — two tab-separated node ids per line, undirected;
  self-loops, duplicates and reversed duplicates are rejected.
* ``splits.json`` — object with node-id arrays ``train``, ``val``, ``test``.

Features are L1 row-normalized at load time; all-zero rows stay zero.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "GraphDataset", "LinkSplit", "load_dataset", "save_dataset",
    "mix_datasets", "delta_hyperbolicity", "synth_dataset",
]


@dataclass
class GraphDataset:
    """Undirected graph with node features, labels and split masks."""

    name: str
    features: np.ndarray        # (n, F)
    labels: np.ndarray          # (n,) integer class ids
    edges: list                 # unordered pairs, stored as (u, v) with u < v
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape != (n,):
            raise ValueError("features must be (n, F) and labels (n,)")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative class ids")
        canon = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) references an unknown node")
            key = (min(u, v), max(u, v))
            if key in canon:
                raise ValueError(f"duplicate edge ({u}, {v})")
            canon.add(key)
        self.edges = sorted(canon)
        masks = []
        seen = set()
        for mask in (self.train_mask, self.val_mask, self.test_mask):
            mask = np.asarray(sorted(int(i) for i in mask), dtype=np.int64)
            if mask.size and (mask[0] < 0 or mask[-1] >= n):
                raise ValueError("mask references an unknown node")
            if seen & set(mask.tolist()):
                raise ValueError("masks overlap")
            seen |= set(mask.tolist())
            masks.append(mask)
        self.train_mask, self.val_mask, self.test_mask = masks

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    def edge_set(self) -> set:
        return set(self.edges)

    def neighbors(self) -> list:
        adj = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj


@dataclass(frozen=True)
class LinkSplit:
    """Edge split for link prediction with verified negative pairs."""

    train_edges: tuple
    val_edges: tuple
    test_edges: tuple
    val_negatives: tuple
    test_negatives: tuple

    def __post_init__(self):
        groups = (self.train_edges, self.val_edges, self.test_edges,
                  self.val_negatives, self.test_negatives)
        seen = set()
        for group in groups:
            pairs = set(group)
            if pairs & seen:
                raise ValueError("link split groups must be disjoint")
            seen |= pairs
        for u, v in self.val_negatives + self.test_negatives:
            if u == v:
                raise ValueError("negative pair is a self-pair")


def _l1_normalize_rows(features: np.ndarray) -> np.ndarray:
    out = np.array(features, dtype=np.float64)
    sums = np.abs(out).sum(axis=1)
    for i, s in enumerate(sums):
        # rows already normalized (within round-off) stay bit-identical so
        # that save -> load round-trips exactly; zero rows stay zero
        if s == 0.0 or abs(s - 1.0) <= 1e-12:
            continue
        out[i] /= s
    return out


def load_dataset(path) -> GraphDataset:
    """Read a dataset directory, validate it, and L1-normalize the features."""
    root = Path(path)
    for fname in ("nodes.csv", "edges.tsv", "splits.json"):
        if not (root / fname).exists():
            raise FileNotFoundError(f"missing file {fname} in {root}")

    rows = (root / "nodes.csv").read_text(encoding="utf-8").splitlines()
    if not rows:
        raise ValueError("nodes.csv is empty")
    header = rows[0].split(",")
    if header[:2] != ["id", "label"]:
        raise ValueError("nodes.csv header must start with 'id,label'")
    n_features = len(header) - 2
    features, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row.strip():
            continue
        cells = row.split(",")
        if len(cells) - 2 != n_features:
            raise ValueError(
                f"ragged feature row at line {lineno}: {len(cells) - 2} features,"
                f" expected {n_features}")
        node_id = int(cells[0])
        if node_id != len(features):
            raise ValueError(
                f"node ids must run 0..n-1 in order; got {node_id} at line {lineno}")
        labels.append(int(cells[1]))
        features.append([float(c) for c in cells[2:]])
    n = len(features)

    edges = []
    seen = set()
    for lineno, row in enumerate(
            (root / "edges.tsv").read_text(encoding="utf-8").splitlines(), start=1):
        if not row.strip():
            continue
        parts = row.split("\t")
        if len(parts) != 2:
            raise ValueError(f"edge line {lineno} must hold two tab-separated ids")
        u, v = int(parts[0]), int(parts[1])
        if u == v:
            raise ValueError(f"self-loop at line {lineno}")
        for node in (u, v):
            if not 0 <= node < n:
                raise ValueError(f"unknown node id {node} at line {lineno}")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise ValueError(f"duplicate edge at line {lineno}")
        seen.add(key)
        edges.append(key)

    splits = json.loads((root / "splits.json").read_text(encoding="utf-8"))
    extra = set(splits) - {"train", "val", "test"}
    if extra:
        raise ValueError(f"splits.json has unknown keys: {sorted(extra)}")
    masks = {k: splits.get(k, []) for k in ("train", "val", "test")}

    return GraphDataset(
        name=root.name,
        features=_l1_normalize_rows(np.asarray(features, dtype=np.float64).reshape(n, n_features)),
        labels=np.asarray(labels, dtype=np.int64),
        edges=edges,
        train_mask=masks["train"], val_mask=masks["val"], test_mask=masks["test"])


def save_dataset(dataset: GraphDataset, path) -> None:
    """Write a dataset in the portable directory format."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    header = ["id", "label"] + [f"f{i}" for i in range(dataset.num_features)]
    lines = [",".join(header)]
    for i in range(dataset.n):
        cells = [str(i), str(int(dataset.labels[i]))]
        cells += [repr(float(x)) for x in dataset.features[i]]
        lines.append(",".join(cells))
    (root / "nodes.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "edges.tsv").write_text(
        "".join(f"{u}\t{v}\n" for u, v in dataset.edges), encoding="utf-8")
    (root / "splits.json").write_text(json.dumps({
        "train": dataset.train_mask.tolist(),
        "val": dataset.val_mask.tolist(),
        "test": dataset.test_mask.tolist()}, indent=0) + "\n", encoding="utf-8")


def _random_masks(n: int, proportions, rng: np.random.Generator):
    order = rng.permutation(n)
    n_train = int(math.floor(proportions[0] * n))
    n_val = int(math.floor(proportions[1] * n))
    return (order[:n_train], order[n_train:n_train + n_val],
            order[n_train + n_val:])


def mix_datasets(a: GraphDataset, b: GraphDataset, split=(0.6, 0.2, 0.2),
                 seed: int = 0) -> GraphDataset:
    """Disjoint union of two graphs: no new edges, features zero-padded on
    the right, the second graph's classes kept distinct, fresh random masks."""
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError("split proportions must sum to one")
    n = a.n + b.n
    width = max(a.num_features, b.num_features)
    features = np.zeros((n, width))
    features[:a.n, :a.num_features] = a.features
    features[a.n:, :b.num_features] = b.features
    labels = np.concatenate([a.labels, b.labels + a.num_classes])
    edges = list(a.edges) + [(u + a.n, v + a.n) for u, v in b.edges]
    rng = np.random.default_rng(seed)
    train, val, test = _random_masks(n, split, rng)
    return GraphDataset(name=f"{a.name}+{b.name}", features=features,
                        labels=labels, edges=edges,
                        train_mask=train, val_mask=val, test_mask=test)


# ---------------------------------------------------------------------------
# delta-hyperbolicity


def _components(adj: list) -> list:
    n = len(adj)
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        comp = []
        queue = deque([start])
        seen[start] = True
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        comps.append(comp)
    return comps


def _bfs_distances(adj: list, sources: list) -> dict:
    dist = {}
    for s in sources:
        d = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in d:
                    d[v] = d[u] + 1
                    queue.append(v)
        dist[s] = d
    return dist


def _quad_delta(dist: dict, w: int, x: int, y: int, z: int) -> float:
    sums = sorted((dist[w][x] + dist[y][z],
                   dist[w][y] + dist[x][z],
                   dist[w][z] + dist[x][y]), reverse=True)
    return (sums[0] - sums[1]) / 2.0


def delta_hyperbolicity(dataset: GraphDataset, mode: str = "exact",
                        samples: int | None = None, seed: int = 0) -> dict:
    """Four-point hyperbolicity over quadruples drawn within components.

    ``exact`` enumerates every quadruple (n <= 60 only); ``sampled`` draws
    ``samples`` distinct quadruples uniformly, falling back to full
    enumeration when they are all requested.  Returns the maximum delta and a
    histogram of quadruple deltas.
    """
    if dataset.n < 4:
        raise ValueError("hyperbolicity needs at least 4 nodes")
    if mode not in ("exact", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exact" and dataset.n > 60:
        raise ValueError("exact mode is limited to 60 nodes; use sampled")
    if mode == "sampled" and (samples is None or samples <= 0):
        raise ValueError("sampled mode needs a positive sample count")

    adj = dataset.neighbors()
    comps = [c for c in _components(adj) if len(c) >= 4]
    if not comps:
        raise ValueError("no connected component has 4 nodes")
    totals = [math.comb(len(c), 4) for c in comps]
    total_quads = sum(totals)

    histogram: dict[float, int] = {}
    max_delta = 0.0

    def record(delta: float):
        nonlocal max_delta
        histogram[delta] = histogram.get(delta, 0) + 1
        max_delta = max(max_delta, delta)

    if mode == "exact" or samples >= total_quads:
        for comp in comps:
            dist = _bfs_distances(adj, comp)
            for quad in itertools.combinations(comp, 4):
                record(_quad_delta(dist, *quad))
        count = total_quads
    else:
        rng = np.random.default_rng(seed)
        dist_by_comp = [_bfs_distances(adj, c) for c in comps]
        weights = np.array(totals, dtype=np.float64) / total_quads
        chosen: set = set()
        while len(chosen) < samples:
            ci = int(rng.choice(len(comps), p=weights))
            quad = tuple(sorted(rng.choice(len(comps[ci]), size=4, replace=False)))
            key = (ci, quad)
            if key in chosen:
                continue
            chosen.add(key)
            nodes = [comps[ci][j] for j in quad]
            record(_quad_delta(dist_by_comp[ci], *nodes))
        count = samples

    return {"max_delta": max_delta,
            "histogram": dict(sorted(histogram.items())),
            "num_quadruples": count}


# ---------------------------------------------------------------------------
# synthetic generators


def _onehot_noise_features(labels: np.ndarray, rng: np.random.Generator,
                           noise: float = 0.05) -> np.ndarray:
    classes = int(labels.max()) + 1
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out + noise * rng.standard_normal(out.shape)


def synth_dataset(kind: str, *, depth: int = 3, branching: int = 2,
                  sizes=(20, 20), p_in: float = 0.5, p_out: float = 0.01,
                  width: int = 3, height: int = 3, seed: int = 0) -> GraphDataset:
    """Deterministic synthetic graphs: complete trees, stochastic block
    models, and grid lattices."""
    rng = np.random.default_rng(seed)

    if kind == "tree":
        if depth < 1 or branching < 1:
            raise ValueError("tree needs positive depth and branching")
        edges = []
        levels = [0]
        nodes = [0]
        frontier = [0]
        for level in range(1, depth + 1):
            nxt = []
            for parent in frontier:
                for _ in range(branching):
                    child = len(nodes)
                    nodes.append(child)
                    levels.append(level)
                    edges.append((parent, child))
                    nxt.append(child)
            frontier = nxt
        labels = np.array(levels, dtype=np.int64) % 2
        name = f"tree{depth}x{branching}"

    elif kind == "sbm":
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("sbm needs at least two non-empty blocks")
        if not (0.0 <= p_out <= 1.0 and 0.0 <= p_in <= 1.0):
            raise ValueError("sbm probabilities must lie in [0, 1]")
        labels = np.concatenate([np.full(s, b, dtype=np.int64)
                                 for b, s in enumerate(sizes)])
        n = labels.size
        edges = []
        for u in range(n):
            for v in range(u + 1, n):
                p = p_in if labels[u] == labels[v] else p_out
                if rng.random() < p:
                    edges.append((u, v))
        name = "sbm" + "x".join(str(s) for s in sizes)

    elif kind == "grid":
        if width < 1 or height < 1:
            raise ValueError("grid needs positive extents")
        edges = []
        labels = np.zeros(width * height, dtype=np.int64)
        for r in range(height):
            for c in range(width):
                i = r * width + c
                labels[i] = (r + c) % 2
                if c + 1 < width:
                    edges.append((i, i + 1))
                if r + 1 < height:
                    edges.append((i, i + width))
        name = f"grid{width}x{height}"

    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    features = _onehot_noise_features(labels, rng)
    train, val, test = _random_masks(labels.size, (0.6, 0.2, 0.2), rng)
    return GraphDataset(name=name, features=features, labels=labels,
                        edges=edges, train_mask=train, val_mask=val,
                        test_mask=test)
