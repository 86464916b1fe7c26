"""Hypernetwork model variants that emit per-client target parameters.

Three encoders share an embedding source and a layer-wise hypernetwork head:
no encoder (plain), a graph-convolution stack, or a sheaf-diffusion stack.
Embeddings are either learned from one-hot client ids (stage one of the
pipeline) or loaded as a fixed matrix (graph stages train on frozen
embeddings and a prebuilt client relation graph).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .relation_graph import EmbeddingMatrix
from .sheaf import (
    ACTIVATIONS,
    CellularSheaf,
    Graph,
    RestrictionMapLearner,
    sheaf_diffusion_layer,
    sheaf_from_maps,
    edge_restriction_maps,
)

VARIANTS = ("hn", "ghn", "shn")


# ---------------------------------------------------------------------------
# target network layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetSpec:
    """Named (rows, cols) layout of every parameter matrix in a client model."""

    layers: tuple[tuple[str, tuple[int, int]], ...]

    def __post_init__(self):
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names in target spec")
        for name, (r, c) in self.layers:
            if r < 1 or c < 1:
                raise ValueError(f"layer {name} has invalid shape ({r}, {c})")

    @property
    def total_parameters(self) -> int:
        return sum(r * c for _, (r, c) in self.layers)

    def sizes(self) -> list[int]:
        return [r * c for _, (r, c) in self.layers]


def mlp_spec(in_dim: int, hidden: int, out_dim: int) -> TargetSpec:
    """Two-layer MLP layout; the desk-scale regression default is 8-32-2."""
    return TargetSpec(
        layers=(
            ("linear0.weight", (in_dim, hidden)),
            ("linear0.bias", (1, hidden)),
            ("linear1.weight", (hidden, out_dim)),
            ("linear1.bias", (1, out_dim)),
        )
    )


# ---------------------------------------------------------------------------
# embedding net (one-hot client id -> embedding row)
# ---------------------------------------------------------------------------


class EmbeddingNet:
    """One-hidden-layer MLP over one-hot client ids; row m embeds client m."""

    def __init__(self, num_clients: int, hidden_dim: int, embed_dim: int, rng: T.Rng):
        self.num_clients = num_clients
        self.w1 = T.Tensor(T.glorot_uniform(rng, num_clients, hidden_dim), requires_grad=True)
        self.b1 = T.Tensor(np.zeros((1, hidden_dim)), requires_grad=True)
        self.w2 = T.Tensor(T.glorot_uniform(rng, hidden_dim, embed_dim), requires_grad=True)
        self.b2 = T.Tensor(np.zeros((1, embed_dim)), requires_grad=True)

    def forward(self) -> T.Tensor:
        """Embeddings for all clients; one-hot input makes layer 1 a row lookup."""
        h = T.tanh(T.add_bias(self.w1, self.b1))
        return T.add_bias(T.matmul(h, self.w2), self.b2)

    def named_parameters(self):
        return [
            ("embed.w1", self.w1),
            ("embed.b1", self.b1),
            ("embed.w2", self.w2),
            ("embed.b2", self.b2),
        ]


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D^{-1/2} A D^{-1/2}; A must carry self-loops so no degree is zero."""
    a = np.asarray(adjacency, dtype=np.float64)
    deg = a.sum(axis=1)
    if (deg <= 0).any():
        raise ValueError("adjacency rows must have non-zero degree (self-loops required)")
    inv_sqrt = deg ** -0.5
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_layer(adjacency: np.ndarray, h: T.Tensor, w: T.Tensor, activation: str = "tanh") -> T.Tensor:
    """Graph convolution H' = act(D^{-1/2} A D^{-1/2} H W)."""
    act = ACTIVATIONS[activation]
    norm = T.Tensor(normalized_adjacency(adjacency))
    return act(T.matmul(T.matmul(norm, h), w))


class GcnEncoder:
    """Stack of graph-convolution layers over a fixed adjacency."""

    def __init__(
        self,
        adjacency: np.ndarray,
        in_dim: int,
        hidden_dim: int,
        num_layers: int,
        rng: T.Rng,
        activation: str = "tanh",
    ):
        if num_layers < 1:
            raise ValueError("graph-convolution encoder needs at least one layer")
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self.activation = activation
        widths = [in_dim] + [hidden_dim] * num_layers
        self.weights = [
            T.Tensor(T.glorot_uniform(rng, widths[i], widths[i + 1]), requires_grad=True)
            for i in range(num_layers)
        ]
        self.out_dim = hidden_dim

    def forward(self, x: T.Tensor) -> T.Tensor:
        h = x
        for w in self.weights:
            h = gcn_layer(self.adjacency, h, w, self.activation)
        return h

    def layer_outputs(self, x: T.Tensor) -> list[T.Tensor]:
        """Per-node representations before and after each convolution."""
        outs = [x]
        for w in self.weights:
            outs.append(gcn_layer(self.adjacency, outs[-1], w, self.activation))
        return outs

    def named_parameters(self):
        return [(f"enc.layer{i}.w", w) for i, w in enumerate(self.weights)]


class SheafEncoder:
    """Linear lift to stalk blocks, sheaf-diffusion layers, flatten readout."""

    def __init__(
        self,
        graph: Graph,
        in_dim: int,
        stalk_dim: int,
        hidden_channels: int,
        num_layers: int,
        rng: T.Rng,
        map_class: str = "orthogonal",
        activation: str = "tanh",
    ):
        if num_layers < 0:
            raise ValueError("negative layer count")
        self.graph = graph
        self.stalk_dim = stalk_dim
        self.hidden_channels = hidden_channels
        self.activation = activation
        self.projection = T.Tensor(
            T.glorot_uniform(rng, in_dim, stalk_dim * hidden_channels), requires_grad=True
        )
        self.layers = []
        for _ in range(num_layers):
            learner = RestrictionMapLearner(stalk_dim, hidden_channels, map_class, rng)
            w_left = T.Tensor(T.glorot_uniform(rng, stalk_dim, stalk_dim), requires_grad=True)
            w_right = T.Tensor(
                T.glorot_uniform(rng, hidden_channels, hidden_channels), requires_grad=True
            )
            self.layers.append((learner, w_left, w_right))
        self.out_dim = stalk_dim * hidden_channels

    def _lift(self, x: T.Tensor) -> T.Tensor:
        n = x.rows
        return T.reshape(T.matmul(x, self.projection), n * self.stalk_dim, self.hidden_channels)

    def forward(self, x: T.Tensor) -> T.Tensor:
        n = x.rows
        h = self._lift(x)
        for learner, w_left, w_right in self.layers:
            h = sheaf_diffusion_layer(h, self.graph, learner, w_left, w_right, self.activation)
        return T.reshape(h, n, self.out_dim)

    def snapshot_sheaves(self, x: T.Tensor) -> list[CellularSheaf]:
        """The per-layer sheaves induced by the current features (no grads)."""
        out = []
        with T.no_grad():
            h = self._lift(x)
            for learner, w_left, w_right in self.layers:
                maps_lo, maps_hi = edge_restriction_maps(learner, self.graph, h)
                out.append(sheaf_from_maps(self.graph, self.stalk_dim, maps_lo, maps_hi))
                h = sheaf_diffusion_layer(h, self.graph, learner, w_left, w_right, self.activation)
        return out

    def layer_outputs(self, x: T.Tensor) -> list[T.Tensor]:
        """Stalk-block features ((n*d, channels)) after the lift and after
        each diffusion layer."""
        outs = [self._lift(x)]
        for learner, w_left, w_right in self.layers:
            outs.append(
                sheaf_diffusion_layer(outs[-1], self.graph, learner, w_left, w_right, self.activation)
            )
        return outs

    def named_parameters(self):
        named = [("enc.proj", self.projection)]
        for i, (learner, w_left, w_right) in enumerate(self.layers):
            named.append((f"enc.layer{i}.phi.w", learner.weight))
            named.append((f"enc.layer{i}.phi.b", learner.bias))
            named.append((f"enc.layer{i}.w_left", w_left))
            named.append((f"enc.layer{i}.w_right", w_right))
        return named


# ---------------------------------------------------------------------------
# hypernetwork head
# ---------------------------------------------------------------------------


class HyperHead:
    """Per-target-layer MLPs from a client representation to flat parameters."""

    def __init__(self, in_dim: int, hidden_dim: int, spec: TargetSpec, rng: T.Rng):
        self.spec = spec
        self.in_dim = in_dim
        self.blocks = []
        for name, (r, c) in spec.layers:
            w1 = T.Tensor(T.glorot_uniform(rng, in_dim, hidden_dim), requires_grad=True)
            b1 = T.Tensor(np.zeros((1, hidden_dim)), requires_grad=True)
            w2 = T.Tensor(T.glorot_uniform(rng, hidden_dim, r * c), requires_grad=True)
            b2 = T.Tensor(np.zeros((1, r * c)), requires_grad=True)
            self.blocks.append((name, w1, b1, w2, b2))

    def forward(self, z: T.Tensor) -> list[T.Tensor]:
        """One (clients, layer_size) matrix per target layer."""
        if z.cols != self.in_dim:
            raise T.ShapeError(f"head input width {z.cols} != expected {self.in_dim}")
        outs = []
        for _, w1, b1, w2, b2 in self.blocks:
            h = T.tanh(T.add_bias(T.matmul(z, w1), b1))
            outs.append(T.add_bias(T.matmul(h, w2), b2))
        return outs

    def named_parameters(self):
        named = []
        for name, w1, b1, w2, b2 in self.blocks:
            named.extend(
                [
                    (f"head.{name}.w1", w1),
                    (f"head.{name}.b1", b1),
                    (f"head.{name}.w2", w2),
                    (f"head.{name}.b2", b2),
                ]
            )
        return named


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs shared by the three variants."""

    variant: str
    num_clients: int
    embed_dim: int = 16
    embed_hidden: int = 32
    encoder_hidden: int = 32
    encoder_layers: int = 3
    stalk_dim: int = 2
    head_hidden: int = 64
    map_class: str = "orthogonal"
    activation: str = "tanh"
    learn_embeddings: bool | None = None  # None: hn learns, graph variants freeze

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "ghn" and self.encoder_layers < 1:
            raise ValueError("ghn needs encoder_layers >= 1")
        if self.encoder_layers < 0:
            raise ValueError("negative encoder_layers")

    @property
    def embeddings_learned(self) -> bool:
        if self.learn_embeddings is None:
            return self.variant == "hn"
        return self.learn_embeddings


class HyperNetModel:
    """An embedding source, an optional encoder, and a hypernetwork head."""

    def __init__(
        self,
        cfg: ModelConfig,
        spec: TargetSpec,
        rng: T.Rng,
        graph: Graph | None = None,
        adjacency: np.ndarray | None = None,
        embeddings: np.ndarray | None = None,
    ):
        self.cfg = cfg
        self.spec = spec
        self.embedding_net = None
        self.fixed_embeddings = None
        if cfg.embeddings_learned:
            self.embedding_net = EmbeddingNet(cfg.num_clients, cfg.embed_hidden, cfg.embed_dim, rng)
        else:
            if embeddings is None:
                raise ValueError(f"variant {cfg.variant!r} with frozen embeddings needs an embedding matrix")
            embeddings = np.asarray(embeddings, dtype=np.float64)
            if embeddings.shape != (cfg.num_clients, cfg.embed_dim):
                raise T.ShapeError(
                    f"embeddings {embeddings.shape} != ({cfg.num_clients}, {cfg.embed_dim})"
                )
            self.fixed_embeddings = embeddings

        if cfg.variant == "hn":
            self.encoder = None
            head_in = cfg.embed_dim
        elif cfg.variant == "ghn":
            if adjacency is None:
                raise ValueError("ghn needs a client relation graph (adjacency with self-loops)")
            self.encoder = GcnEncoder(
                adjacency, cfg.embed_dim, cfg.encoder_hidden, cfg.encoder_layers, rng, cfg.activation
            )
            head_in = self.encoder.out_dim
        else:
            if graph is None:
                raise ValueError("shn needs a client relation graph (edge list)")
            self.encoder = SheafEncoder(
                graph,
                cfg.embed_dim,
                cfg.stalk_dim,
                cfg.encoder_hidden,
                cfg.encoder_layers,
                rng,
                cfg.map_class,
                cfg.activation,
            )
            head_in = self.encoder.out_dim
        self.head = HyperHead(head_in, cfg.head_hidden, spec, rng)

    # -- forward ------------------------------------------------------------

    def client_representations(self) -> T.Tensor:
        """One representation row per client (all clients, mixing included)."""
        if self.embedding_net is not None:
            x = self.embedding_net.forward()
        else:
            x = T.Tensor(self.fixed_embeddings)
        if self.encoder is None:
            return x
        return self.encoder.forward(x)

    def generate(self, ids: np.ndarray) -> list[T.Tensor]:
        """Per-target-layer (len(ids), layer_size) parameter matrices."""
        z = T.gather_rows(self.client_representations(), np.asarray(ids, dtype=np.intp))
        return self.head.forward(z)

    def client_parameters(self, outs: list[T.Tensor], row: int) -> list[np.ndarray]:
        """Materialize one client's parameter matrices from head outputs."""
        mats = []
        for (_, (r, c)), out in zip(self.spec.layers, outs):
            mats.append(out.value[row].reshape(r, c).copy())
        return mats

    def embedding_matrix(self) -> EmbeddingMatrix:
        if self.embedding_net is not None:
            with T.no_grad():
                rows = self.embedding_net.forward().value
        else:
            rows = self.fixed_embeddings
        return EmbeddingMatrix(tuple(range(self.cfg.num_clients)), rows.copy())

    # -- parameter access -----------------------------------------------------

    def named_parameters(self):
        named = []
        if self.embedding_net is not None:
            named.extend(self.embedding_net.named_parameters())
        if self.encoder is not None:
            named.extend(self.encoder.named_parameters())
        named.extend(self.head.named_parameters())
        return named

    def parameters(self) -> list[T.Tensor]:
        return [t for _, t in self.named_parameters()]


def representation_row_std(z: np.ndarray) -> float:
    """Mean over features of the across-client standard deviation."""
    return float(np.std(z, axis=0).mean())


# ---------------------------------------------------------------------------
# checkpoints (single JSON document, bit-exact round trip)
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(doc["shape"]).copy()


def save_checkpoint(
    path,
    model: HyperNetModel,
    round_index: int,
    rng_state: dict | None = None,
    adam_state: T.AdamState | None = None,
    extra: dict | None = None,
) -> None:
    """Self-describing JSON checkpoint; float64 payloads are base64 bytes."""
    doc = {
        "format": "shnfed-checkpoint-v1",
        "variant": model.cfg.variant,
        "round": int(round_index),
        "params": [
            {"name": name, **_encode_array(t.value)} for name, t in model.named_parameters()
        ],
        "rng_state": rng_state,
        "adam": None,
        "extra": extra or {},
    }
    if adam_state is not None:
        doc["adam"] = {
            "step": adam_state.step,
            "m": [_encode_array(a) for a in adam_state.m],
            "v": [_encode_array(a) for a in adam_state.v],
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    """Checkpoint document with arrays decoded; see restore_checkpoint."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "shnfed-checkpoint-v1":
        raise ValueError(f"{path}: not a recognized checkpoint file")
    doc["params"] = [
        {"name": p["name"], "value": _decode_array(p)} for p in doc["params"]
    ]
    if doc.get("adam") is not None:
        doc["adam"] = {
            "step": doc["adam"]["step"],
            "m": [_decode_array(a) for a in doc["adam"]["m"]],
            "v": [_decode_array(a) for a in doc["adam"]["v"]],
        }
    return doc


def restore_checkpoint(doc: dict, model: HyperNetModel, adam_state: T.AdamState | None = None) -> int:
    """Load parameters (and optimizer moments) in place; returns the round."""
    if doc["variant"] != model.cfg.variant:
        raise ValueError(f"checkpoint variant {doc['variant']!r} != model {model.cfg.variant!r}")
    named = dict(model.named_parameters())
    saved = {p["name"]: p["value"] for p in doc["params"]}
    if set(named) != set(saved):
        missing = set(named) ^ set(saved)
        raise ValueError(f"checkpoint parameter names disagree with model: {sorted(missing)}")
    for name, tensor in named.items():
        if saved[name].shape != tensor.value.shape:
            raise T.ShapeError(
                f"checkpoint param {name} shape {saved[name].shape} != {tensor.value.shape}"
            )
        tensor.value = saved[name]
    if adam_state is not None and doc.get("adam") is not None:
        adam_state.step = doc["adam"]["step"]
        adam_state.m = doc["adam"]["m"]
        adam_state.v = doc["adam"]["v"]
    return int(doc["round"])
