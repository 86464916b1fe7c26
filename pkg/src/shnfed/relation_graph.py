"""Client relation graphs built from embeddings via cosine similarity.

Nodes are clients; edges come from either k-nearest-neighbor selection
(symmetrized by union) or a similarity threshold. The adjacency always
carries a unit diagonal for message-passing normalization, while the edge
list itself never contains self-loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sheaf import Graph
from .tensor import ShapeError

# Similarities within this distance of +/-1 snap to exactly +/-1, so
# "exactly parallel" stays well-defined under float rounding.
PARALLEL_SNAP = 1e-12


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Per-client embedding rows with a stable client-id ordering."""

    client_ids: tuple[int, ...]
    matrix: np.ndarray  # (n, f)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[0] != len(self.client_ids):
            raise ShapeError(
                f"embedding matrix {m.shape} does not match {len(self.client_ids)} client ids"
            )
        if len(set(self.client_ids)) != len(self.client_ids):
            raise ValueError("duplicate client ids")
        if not np.isfinite(m).all():
            raise ValueError("embeddings must be finite")
        norms = np.linalg.norm(m, axis=1)
        if m.shape[0] and norms.min() == 0.0:
            bad = int(np.argmin(norms))
            raise ValueError(
                f"client {self.client_ids[bad]} has a zero embedding; cosine is undefined"
            )

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    sim = float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))
    if abs(sim - 1.0) < PARALLEL_SNAP:
        return 1.0
    if abs(sim + 1.0) < PARALLEL_SNAP:
        return -1.0
    return sim


def cosine_similarity_matrix(emb: EmbeddingMatrix) -> np.ndarray:
    """Pairwise cosine similarities, exactly symmetric, unit diagonal."""
    unit = emb.matrix / np.linalg.norm(emb.matrix, axis=1, keepdims=True)
    sims = unit @ unit.T
    sims = np.triu(sims) + np.triu(sims, 1).T  # mirror: exact A = A^T
    sims = np.clip(sims, -1.0, 1.0)
    sims[np.abs(sims - 1.0) < PARALLEL_SNAP] = 1.0
    sims[np.abs(sims + 1.0) < PARALLEL_SNAP] = -1.0
    np.fill_diagonal(sims, 1.0)
    return sims


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientRelationGraph:
    """Similarity-derived graph over clients plus its build recipe."""

    graph: Graph
    adjacency: np.ndarray  # binary, symmetric, unit diagonal
    embeddings: EmbeddingMatrix
    recipe: dict = field(default_factory=dict)

    def __post_init__(self):
        a = self.adjacency
        n = self.graph.n
        if a.shape != (n, n):
            raise ShapeError(f"adjacency {a.shape} does not match {n} nodes")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if not np.isin(a, (0.0, 1.0)).all():
            raise ValueError("adjacency must be binary")
        if not (np.diag(a) == 1.0).all():
            raise ValueError("adjacency diagonal must be non-zero")
        if not np.array_equal(a - np.eye(n), self.graph.adjacency()):
            raise ValueError("edge list does not match off-diagonal adjacency support")


def _finish(emb: EmbeddingMatrix, pairs, recipe: dict) -> ClientRelationGraph:
    graph = Graph.from_pairs(emb.n, pairs)
    return ClientRelationGraph(
        graph=graph,
        adjacency=graph.adjacency() + np.eye(emb.n),
        embeddings=emb,
        recipe=recipe,
    )


def build_knn_graph(emb: EmbeddingMatrix, k: int) -> ClientRelationGraph:
    """Connect each client to its k most cosine-similar peers (union-symmetrized).

    Ties at the k-th rank break toward the lower client index; the client
    itself is never a candidate. k=0 yields the self-loop-only graph.
    """
    if not 0 <= k < emb.n:
        raise ValueError(f"k must satisfy 0 <= k < n, got k={k} with n={emb.n}")
    sims = cosine_similarity_matrix(emb)
    pairs = []
    for i in range(emb.n):
        order = sorted((j for j in range(emb.n) if j != i), key=lambda j: (-sims[i, j], j))
        for j in order[:k]:
            pairs.append((min(i, j), max(i, j)))
    return _finish(emb, pairs, {"method": "knn", "k": int(k)})


def build_threshold_graph(emb: EmbeddingMatrix, tau: float) -> ClientRelationGraph:
    """Edge (u, v) wherever cosine similarity >= tau; may be disconnected."""
    tau = float(tau)
    if not -1.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [-1, 1], got {tau}")
    sims = cosine_similarity_matrix(emb)
    iu, iv = np.triu_indices(emb.n, k=1)
    pairs = [(int(u), int(v)) for u, v in zip(iu, iv) if sims[u, v] >= tau]
    return _finish(emb, pairs, {"method": "cosine", "tau": tau})


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def _component_count(graph: Graph) -> int:
    parent = list(range(graph.n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in graph.edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
    return len({find(i) for i in range(graph.n)})


def graph_diagnostics(crg: ClientRelationGraph, labels=None) -> dict:
    """Structural summary; homophily is intra-label edges / all edges."""
    g = crg.graph
    n, ne = g.n, g.num_edges
    out = {
        "nodes": n,
        "edge_count": ne,
        "density": (2.0 * ne / (n * (n - 1))) if n > 1 else 0.0,
        "connected_components": _component_count(g),
        "mean_degree": (2.0 * ne / n) if n else 0.0,
        "homophily": None,
    }
    if labels is not None and ne > 0:
        labels = np.asarray(labels)
        if labels.shape[0] != n:
            raise ShapeError(f"{labels.shape[0]} labels for {n} nodes")
        intra = sum(1 for u, v in g.edges if labels[u] == labels[v])
        out["homophily"] = intra / ne
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_embeddings(path, emb: EmbeddingMatrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"e{i}" for i in range(emb.dim))
        fh.write(f"client_id,{cols}\n")
        for cid, row in zip(emb.client_ids, emb.matrix):
            fh.write(f"{cid}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path) -> EmbeddingMatrix:
    ids: list[int] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("client_id,"):
            raise ValueError(f"{path}: line 1: expected header starting with 'client_id,'")
        width = len(header.strip().split(",")) - 1
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != width + 1:
                raise ValueError(f"{path}: line {lineno}: expected {width + 1} fields, got {len(parts)}")
            try:
                ids.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return EmbeddingMatrix(tuple(ids), np.array(rows, dtype=np.float64).reshape(len(ids), width))


def save_edge_list(path, crg: ClientRelationGraph) -> None:
    """One 'u v' line per edge, preceded by a one-line recipe comment."""
    recipe = " ".join(f"{k}={v}" for k, v in sorted(crg.recipe.items()))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={crg.graph.n} {recipe}\n")
        for u, v in crg.graph.edges:
            fh.write(f"{u} {v}\n")


def load_edge_list(path, n: int | None = None) -> Graph:
    pairs = []
    size = n
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("n=") and size is None:
                        size = int(token[2:])
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 'u v', got {line!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-integer endpoint in {line!r}") from None
    if size is None:
        size = 1 + max((max(p) for p in pairs), default=-1)
    return Graph.from_pairs(size, pairs)


def save_adjacency(path, crg: ClientRelationGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in crg.adjacency:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
