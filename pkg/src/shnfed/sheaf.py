"""Cellular sheaves on undirected graphs.

A sheaf attaches a d-dimensional stalk to every node and edge, plus one
restriction map per node-edge incidence. This module builds the coboundary
and Laplacian operators, a learned-restriction diffusion layer (residual
form, differentiable end to end), and Dirichlet-energy diagnostics.

Conventions used throughout:
  - edges are stored canonically as (u, v) with u < v;
  - 0-cochains are (n*d) x f matrices, node-major blocks of d rows;
  - for edge e the coboundary reads (delta x)_e = F_hi x_v - F_lo x_u,
    where lo/hi are the lower/higher-indexed endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

# Degree blocks with an eigenvalue below this are treated as singular and
# regularized additively before the inverse square root.
DEGREE_EPS = 1e-6

# A Householder vector with squared norm below this is replaced by e1.
HOUSEHOLDER_EPS_SQ = 1e-24

MAP_CLASSES = ("general", "diagonal", "orthogonal")

ACTIVATIONS = {"tanh": T.tanh, "elu": T.elu}


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph: node count plus a sorted, deduplicated edge list."""

    n: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"negative node count {self.n}")
        prev = None
        for u, v in self.edges:
            if not (0 <= u < v < self.n):
                raise ValueError(f"edge ({u}, {v}) out of range or not oriented u < v")
            if prev is not None and (u, v) <= prev:
                raise ValueError("edge list must be sorted and unique")
            prev = (u, v)

    @classmethod
    def from_pairs(cls, n: int, pairs) -> "Graph":
        """Normalize arbitrary (u, v) pairs: orient, deduplicate, sort."""
        seen = set()
        for u, v in pairs:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop ({u}, {u}) not allowed in a sheaf graph")
            seen.add((min(u, v), max(u, v)))
        return cls(n=n, edges=tuple(sorted(seen)))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 adjacency with a zero diagonal."""
        a = np.zeros((self.n, self.n))
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        return a

    def endpoint_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.edges:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        e = np.asarray(self.edges, dtype=np.intp)
        return e[:, 0], e[:, 1]


def block_rows(nodes: np.ndarray, d: int) -> np.ndarray:
    """Row indices of the d-row blocks for the given nodes."""
    nodes = np.asarray(nodes, dtype=np.intp)
    return (nodes[:, None] * d + np.arange(d, dtype=np.intp)).ravel()


# ---------------------------------------------------------------------------
# sheaf container
# ---------------------------------------------------------------------------


@dataclass
class CellularSheaf:
    """A graph with stalk dimension d and one restriction map per incidence.

    maps_lo[e] acts on the lower-indexed endpoint of edge e, maps_hi[e] on
    the higher-indexed one; both are d x d.
    """

    graph: Graph
    stalk_dim: int
    maps_lo: np.ndarray  # (E, d, d)
    maps_hi: np.ndarray  # (E, d, d)

    def __post_init__(self):
        d, ne = self.stalk_dim, self.graph.num_edges
        if d < 1:
            raise ValueError(f"stalk dimension must be >= 1, got {d}")
        for name, maps in (("maps_lo", self.maps_lo), ("maps_hi", self.maps_hi)):
            if maps.shape != (ne, d, d):
                raise T.ShapeError(f"{name} shape {maps.shape} != ({ne}, {d}, {d})")

    @classmethod
    def identity(cls, graph: Graph, stalk_dim: int) -> "CellularSheaf":
        eye = np.tile(np.eye(stalk_dim), (graph.num_edges, 1, 1))
        return cls(graph, stalk_dim, eye.copy(), eye.copy())

    def restriction(self, node: int, edge_index: int) -> np.ndarray:
        u, v = self.graph.edges[edge_index]
        if node == u:
            return self.maps_lo[edge_index]
        if node == v:
            return self.maps_hi[edge_index]
        raise ValueError(f"node {node} is not incident to edge {edge_index} = ({u}, {v})")

    def max_orthogonality_defect(self) -> float:
        """max over maps of ||Q^T Q - I||_inf; ~0 for the orthogonal class."""
        if self.graph.num_edges == 0:
            return 0.0
        eye = np.eye(self.stalk_dim)
        defect = 0.0
        for maps in (self.maps_lo, self.maps_hi):
            gram = maps.transpose(0, 2, 1) @ maps
            defect = max(defect, np.abs(gram - eye).max())
        return float(defect)


# ---------------------------------------------------------------------------
# coboundary and Laplacian (numeric path)
# ---------------------------------------------------------------------------


def coboundary_apply(sheaf: CellularSheaf, x: np.ndarray) -> np.ndarray:
    """Edge-major disagreement (delta x)_e = F_hi x_v - F_lo x_u, shape (E*d, f)."""
    d = sheaf.stalk_dim
    n, ne = sheaf.graph.n, sheaf.graph.num_edges
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != n * d:
        raise T.ShapeError(f"cochain shape {x.shape} incompatible with n*d = {n * d}")
    if ne == 0:
        return np.zeros((0, x.shape[1]))
    lo, hi = sheaf.graph.endpoint_arrays()
    xu = x[block_rows(lo, d)].reshape(ne, d, -1)
    xv = x[block_rows(hi, d)].reshape(ne, d, -1)
    out = sheaf.maps_hi @ xv - sheaf.maps_lo @ xu
    return out.reshape(ne * d, -1)


def _batched_inv_sqrt(blocks: np.ndarray, eps: float = DEGREE_EPS) -> np.ndarray:
    """Inverse square root of each symmetric PSD block via eigendecomposition.

    Near-singular blocks (min eigenvalue < eps) get an additive eps shift;
    well-conditioned blocks are handled exactly, so identity-sheaf reductions
    stay exact to machine precision.
    """
    lam, u = np.linalg.eigh(blocks)
    singular = lam[:, 0] < eps
    lam_eff = np.where(singular[:, None], lam + eps, lam)
    lam_eff = np.maximum(lam_eff, eps * 1e-6)
    f = lam_eff ** -0.5
    return (u * f[:, None, :]) @ u.transpose(0, 2, 1)


@dataclass
class SheafLaplacian:
    """Dense sheaf Laplacian with its block-degree normalization."""

    matrix: np.ndarray          # (n*d, n*d), L
    degree_blocks: np.ndarray   # (n, d, d), diagonal blocks of L
    inv_sqrt_blocks: np.ndarray  # (n, d, d), D^{-1/2} per node
    normalized: np.ndarray      # (n*d, n*d), D^{-1/2} L D^{-1/2}


def build_sheaf_laplacian(sheaf: CellularSheaf, eps: float = DEGREE_EPS) -> SheafLaplacian:
    """Assemble L blockwise: diagonal sum F^T F, off-diagonal -F_a^T F_b."""
    d, n = sheaf.stalk_dim, sheaf.graph.n
    lap = np.zeros((n * d, n * d))
    for e, (u, v) in enumerate(sheaf.graph.edges):
        fu, fv = sheaf.maps_lo[e], sheaf.maps_hi[e]
        us, vs = slice(u * d, (u + 1) * d), slice(v * d, (v + 1) * d)
        lap[us, us] += fu.T @ fu
        lap[vs, vs] += fv.T @ fv
        lap[us, vs] -= fu.T @ fv
        lap[vs, us] -= fv.T @ fu
    deg = np.stack([lap[i * d:(i + 1) * d, i * d:(i + 1) * d] for i in range(n)])
    inv_sqrt = _batched_inv_sqrt(deg, eps)
    scale = np.zeros_like(lap)
    for i in range(n):
        scale[i * d:(i + 1) * d, i * d:(i + 1) * d] = inv_sqrt[i]
    normalized = scale @ lap @ scale
    return SheafLaplacian(lap, deg, inv_sqrt, normalized)


# ---------------------------------------------------------------------------
# differentiable building blocks
# ---------------------------------------------------------------------------


def householder_orthogonal(params: T.Tensor, blocks: int = 1) -> T.Tensor:
    """Map (blocks*d) x d unconstrained parameters to stacked orthogonal maps.

    Block b's rows are read as d Householder vectors; its output is the
    product of the corresponding reflections. Degenerate vectors (squared
    norm < 1e-24) are deterministically replaced by e1, so zero input yields
    a fixed reflection product.
    """
    if params.rows % blocks:
        raise T.ShapeError(f"householder: {params.shape} not divisible into {blocks} blocks")
    d = params.rows // blocks
    if params.cols != d:
        raise T.ShapeError(f"householder: blocks of {params.rows // blocks}x{params.cols} are not square")
    q = T.Tensor(np.tile(np.eye(d), (blocks, 1)))
    expand = np.repeat(np.arange(blocks, dtype=np.intp), d)
    e1 = np.zeros((blocks, d))
    e1[:, 0] = 1.0
    for i in range(d):
        v = T.gather_rows(params, np.arange(blocks, dtype=np.intp) * d + i)
        sq = T.row_sums(T.mul(v, v))
        keep = (sq.value >= HOUSEHOLDER_EPS_SQ).astype(np.float64)
        if keep.min() < 1.0:  # splice in e1 rows for degenerate vectors
            v = T.add(T.scale_rows(v, T.Tensor(keep)), T.Tensor(e1 * (1.0 - keep)))
            sq = T.row_sums(T.mul(v, v))
        coef = T.scale(T.reciprocal(sq), 2.0)                    # 2/||v||^2, (B,1)
        row = T.bmm(v, q, blocks)                                # v^T Q_b, (B, d)
        outer = T.bmm(T.reshape(v, blocks * d, 1), row, blocks)  # v (v^T Q), (B*d, d)
        q = T.sub(q, T.scale_rows(outer, T.gather_rows(coef, expand)))
    return q


class RestrictionMapLearner:
    """Learned restriction maps: affine + tanh over a pair of stalk blocks.

    The input is [vec(target block) || vec(other block)] (target node first,
    fixed repo-wide), width 2*d*f. The output parameterizes one d x d map in
    the configured class: all entries (general), the diagonal (diagonal), or
    Householder pre-parameters (orthogonal).
    """

    def __init__(self, stalk_dim: int, channels: int, map_class: str, rng: T.Rng):
        if map_class not in MAP_CLASSES:
            raise ValueError(f"unknown restriction-map class {map_class!r}")
        self.stalk_dim = stalk_dim
        self.channels = channels
        self.map_class = map_class
        out = stalk_dim if map_class == "diagonal" else stalk_dim * stalk_dim
        width = 2 * stalk_dim * channels
        self.weight = T.Tensor(T.glorot_uniform(rng, width, out), requires_grad=True)
        self.bias = T.Tensor(np.zeros((1, out)), requires_grad=True)

    def parameters(self) -> list[T.Tensor]:
        return [self.weight, self.bias]

    def maps_for_pairs(self, x: T.Tensor, targets: np.ndarray, others: np.ndarray) -> T.Tensor:
        """Stacked (P*d) x d restriction maps for P (target, other) node pairs."""
        d, f = self.stalk_dim, self.channels
        p = len(targets)
        if p == 0:
            return T.Tensor(np.zeros((0, d)))
        xt = T.reshape(T.gather_rows(x, block_rows(targets, d)), p, d * f)
        xo = T.reshape(T.gather_rows(x, block_rows(others, d)), p, d * f)
        pre = T.tanh(T.add_bias(T.matmul(T.concat_cols([xt, xo]), self.weight), self.bias))
        if self.map_class == "diagonal":
            eye = T.Tensor(np.tile(np.eye(d), (p, 1)))
            return T.scale_rows(eye, T.reshape(pre, p * d, 1))
        square = T.reshape(pre, p * d, d)
        if self.map_class == "general":
            return square
        return householder_orthogonal(square, blocks=p)


def edge_restriction_maps(
    learner: RestrictionMapLearner, graph: Graph, x: T.Tensor
) -> tuple[T.Tensor, T.Tensor]:
    """Both incident maps per edge from current features: (maps_lo, maps_hi)."""
    lo, hi = graph.endpoint_arrays()
    return (
        learner.maps_for_pairs(x, targets=lo, others=hi),
        learner.maps_for_pairs(x, targets=hi, others=lo),
    )


def sheaf_from_maps(graph: Graph, stalk_dim: int, maps_lo: T.Tensor, maps_hi: T.Tensor) -> CellularSheaf:
    """Snapshot differentiable map stacks into a plain CellularSheaf."""
    ne = graph.num_edges
    return CellularSheaf(
        graph,
        stalk_dim,
        maps_lo.value.reshape(ne, stalk_dim, stalk_dim).copy(),
        maps_hi.value.reshape(ne, stalk_dim, stalk_dim).copy(),
    )


def laplacian_apply(
    graph: Graph,
    stalk_dim: int,
    maps_lo: T.Tensor,
    maps_hi: T.Tensor,
    y: T.Tensor,
) -> T.Tensor:
    """Differentiable L y via gather -> per-edge disagreement -> scatter."""
    d, n, ne = stalk_dim, graph.n, graph.num_edges
    if ne == 0:
        return T.Tensor(np.zeros(y.shape))
    lo, hi = graph.endpoint_arrays()
    lo_rows, hi_rows = block_rows(lo, d), block_rows(hi, d)
    dx = T.sub(
        T.bmm(maps_hi, T.gather_rows(y, hi_rows), ne),
        T.bmm(maps_lo, T.gather_rows(y, lo_rows), ne),
    )
    pull_hi = T.bmm(T.transpose_blocks(maps_hi, ne), dx, ne)
    pull_lo = T.bmm(T.transpose_blocks(maps_lo, ne), dx, ne)
    return T.sub(
        T.scatter_rows(pull_hi, hi_rows, n * d),
        T.scatter_rows(pull_lo, lo_rows, n * d),
    )


def degree_blocks(
    graph: Graph, stalk_dim: int, maps_lo: T.Tensor, maps_hi: T.Tensor
) -> T.Tensor:
    """Differentiable stacked diagonal blocks of L: D_v = sum F^T F, (n*d, d)."""
    d, n, ne = stalk_dim, graph.n, graph.num_edges
    if ne == 0:
        return T.Tensor(np.zeros((n * d, d)))
    lo, hi = graph.endpoint_arrays()
    prod_lo = T.bmm(T.transpose_blocks(maps_lo, ne), maps_lo, ne)
    prod_hi = T.bmm(T.transpose_blocks(maps_hi, ne), maps_hi, ne)
    return T.add(
        T.scatter_rows(prod_lo, block_rows(lo, d), n * d),
        T.scatter_rows(prod_hi, block_rows(hi, d), n * d),
    )


def block_inv_sqrt(dstack: T.Tensor, blocks: int, eps: float = DEGREE_EPS) -> T.Tensor:
    """Differentiable per-block inverse square root of stacked symmetric blocks.

    Forward matches _batched_inv_sqrt. Backward applies the standard spectral
    rule for symmetric matrix functions: with S = U diag(lam) U^T and
    h = U f(lam) U^T, dL/dS = U (K o (U^T G_sym U)) U^T, where K's off-diagonal
    entries are divided differences of f and its diagonal is f'.
    """
    d = dstack.cols
    if dstack.rows != blocks * d:
        raise T.ShapeError(f"block_inv_sqrt: {dstack.shape} not {blocks} stacked {d}x{d} blocks")
    s3 = dstack.value.reshape(blocks, d, d)
    lam, u = np.linalg.eigh(s3)
    singular = lam[:, 0] < eps
    lam_eff = np.where(singular[:, None], lam + eps, lam)
    lam_eff = np.maximum(lam_eff, eps * 1e-6)
    f = lam_eff ** -0.5
    out3 = (u * f[:, None, :]) @ u.transpose(0, 2, 1)

    def backprop(g):
        g3 = g.reshape(blocks, d, d)
        g_sym = 0.5 * (g3 + g3.transpose(0, 2, 1))
        fp = -0.5 * lam_eff ** -1.5
        df = f[:, :, None] - f[:, None, :]
        dl = lam_eff[:, :, None] - lam_eff[:, None, :]
        tol = 1e-10 * np.maximum(1.0, np.abs(lam_eff).max(axis=1))
        near = np.abs(dl) < tol[:, None, None]
        mid = 0.5 * (lam_eff[:, :, None] + lam_eff[:, None, :])
        k = np.where(near, -0.5 * mid ** -1.5, df / np.where(near, 1.0, dl))
        inner = u.transpose(0, 2, 1) @ g_sym @ u
        ds = u @ (k * inner) @ u.transpose(0, 2, 1)
        T.accumulate(dstack, ds.reshape(blocks * d, d))

    return T.make_op(out3.reshape(blocks * d, d), (dstack,), backprop)


def normalized_laplacian_apply(
    graph: Graph,
    stalk_dim: int,
    maps_lo: T.Tensor,
    maps_hi: T.Tensor,
    y: T.Tensor,
    inv_sqrt: T.Tensor,
) -> T.Tensor:
    """Differentiable (D^{-1/2} L D^{-1/2}) y with precomputed D^{-1/2} stack."""
    n = graph.n
    half = T.bmm(inv_sqrt, y, n)
    mixed = laplacian_apply(graph, stalk_dim, maps_lo, maps_hi, half)
    return T.bmm(inv_sqrt, mixed, n)


def sheaf_diffusion_layer(
    x: T.Tensor,
    graph: Graph,
    learner: RestrictionMapLearner,
    w_left: T.Tensor,
    w_right: T.Tensor,
    activation: str = "tanh",
) -> T.Tensor:
    """One residual diffusion step: x - act(D^-1/2 L D^-1/2 (I (x) W1) x W2).

    The sheaf (restriction maps and degree normalization) is rebuilt from the
    current features, so the underlying geometry changes layer to layer.
    Requires w_right square: the residual needs matching channel widths.
    """
    d, f = learner.stalk_dim, learner.channels
    n = graph.n
    if x.shape != (n * d, f):
        raise T.ShapeError(f"cochain shape {x.shape} != ({n * d}, {f})")
    if w_left.shape != (d, d):
        raise T.ShapeError(f"w_left shape {w_left.shape} != ({d}, {d})")
    if w_right.shape != (f, f):
        raise T.ShapeError(
            f"w_right shape {w_right.shape} must be square ({f}, {f}): "
            "the residual update needs equal input/output channels"
        )
    act = ACTIVATIONS[activation]
    maps_lo, maps_hi = edge_restriction_maps(learner, graph, x)
    deg = degree_blocks(graph, d, maps_lo, maps_hi)
    inv_sqrt = block_inv_sqrt(deg, blocks=n)
    mixed = T.matmul(T.bmm(T.tile_rows(w_left, n), x, n), w_right)
    update = normalized_laplacian_apply(graph, d, maps_lo, maps_hi, mixed, inv_sqrt)
    return T.sub(x, act(update))


# ---------------------------------------------------------------------------
# Dirichlet energies (diagnostics, numeric)
# ---------------------------------------------------------------------------


def graph_dirichlet_energy(weights: np.ndarray, x: np.ndarray) -> float:
    """Feature disagreement across weighted edges under augmented degrees.

    E = sum over unordered pairs w_uv * ||x_u/sqrt(1+deg_u) - x_v/sqrt(1+deg_v)||^2,
    with deg the weighted degree; equals tr(X^T Lap X) for the augmented
    normalized Laplacian Lap = I - D^{-1/2}(W+I)D^{-1/2}. The diagonal of the
    weight matrix is ignored (the augmentation supplies the self term).
    """
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = w.shape[0]
    if w.shape != (n, n) or x.shape[0] != n:
        raise T.ShapeError(f"weights {w.shape} and features {x.shape} disagree")
    if (w < 0).any():
        raise ValueError("edge weights must be non-negative")
    off = w - np.diag(np.diag(w))
    deg = off.sum(axis=1)
    y = x / np.sqrt(1.0 + deg)[:, None]
    iu, iv = np.triu_indices(n, k=1)
    diff = y[iu] - y[iv]
    return float((off[iu, iv] * (diff * diff).sum(axis=1)).sum())


def sheaf_dirichlet_energy(sheaf: CellularSheaf, lap: SheafLaplacian, x: np.ndarray) -> float:
    """Edge-wise disagreement of D^{-1/2}-scaled features under the sheaf.

    E = sum over edges ||F_hi D_v^{-1/2} x_v - F_lo D_u^{-1/2} x_u||^2, which
    equals the quadratic form x^T (D^{-1/2} L D^{-1/2}) x.
    """
    d, n = sheaf.stalk_dim, sheaf.graph.n
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != n * d:
        raise T.ShapeError(f"cochain shape {x.shape} incompatible with n*d = {n * d}")
    y = (lap.inv_sqrt_blocks @ x.reshape(n, d, -1)).reshape(n * d, -1)
    dx = coboundary_apply(sheaf, y)
    return float((dx * dx).sum())


def heat_step(lap: SheafLaplacian, x: np.ndarray, alpha: float) -> np.ndarray:
    """One explicit heat iteration x <- x - alpha * (normalized L) x."""
    return x - alpha * (lap.normalized @ x)
