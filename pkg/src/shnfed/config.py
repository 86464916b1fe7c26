"""Run configuration: a flat TOML document with field-level validation.

Every experiment is described by one RunConfig. The file is copied verbatim
into the run directory so results stay self-describing; the resolved values
(after command-line overrides) are echoed into the summary JSON.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CLI_VARIANTS = ("hn", "ghn", "shn", "fedavg", "fedavg-ft", "local")
TASK_KINDS = ("cluster_regression", "cluster_classification", "dirichlet_classification")
GRAPH_METHODS = ("knn", "cosine")
SWEEP_AXES = ("layers", "knn_k", "cosine_tau", "stalk_dim")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    # task
    task_kind: str = "cluster_regression"
    num_clients: int = 20
    num_clusters: int = 4
    train_samples: int = 40
    test_samples: int = 20
    input_dim: int = 8
    output_dim: int = 2
    noise: float = 0.05
    dirichlet_alpha: float = 0.1
    num_classes: int = 4
    samples_per_class: int = 100
    # client model: a small MLP so whole federations train in seconds
    target_hidden: int = 32
    # hypernetwork
    variant: str = "shn"
    embed_dim: int = 16
    embed_hidden: int = 32
    encoder_hidden: int = 32
    encoder_layers: int = 3
    stalk_dim: int = 2
    head_hidden: int = 64
    map_class: str = "orthogonal"
    activation: str = "tanh"
    # relation graph
    graph_method: str = "knn"
    knn_k: int = 4
    cosine_tau: float = 0.8
    # federation
    rounds: int = 300
    clients_per_round: int = 5
    local_steps: int = 50
    client_lr: float = 0.01
    batch_size: int = 16
    server_optimizer: str = "adam"
    server_lr: float = 0.001
    server_weight_decay: float = 5e-5
    eval_interval: int = 50
    # experiment harness
    seed: int = 0
    repeats: int = 5
    sweep_axis: str = "layers"
    sweep_values: tuple = ()
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        def bad(fieldname, message):
            raise ConfigError(f"{fieldname}: {message}")

        if self.task_kind not in TASK_KINDS:
            bad("task_kind", f"expected one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.variant not in CLI_VARIANTS:
            bad("variant", f"expected one of {CLI_VARIANTS}, got {self.variant!r}")
        if self.graph_method not in GRAPH_METHODS:
            bad("graph_method", f"expected one of {GRAPH_METHODS}, got {self.graph_method!r}")
        if self.sweep_axis not in SWEEP_AXES:
            bad("sweep_axis", f"expected one of {SWEEP_AXES}, got {self.sweep_axis!r}")

        positive = (
            "num_clients", "num_clusters", "train_samples", "test_samples",
            "input_dim", "output_dim", "num_classes", "samples_per_class",
            "target_hidden", "embed_dim", "embed_hidden", "encoder_hidden",
            "head_hidden", "clients_per_round", "batch_size", "eval_interval",
            "repeats",
        )
        for name in positive:
            if getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        for name in ("rounds", "local_steps"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        for name in ("client_lr", "server_lr"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if self.noise < 0:
            bad("noise", "must be >= 0")
        if self.dirichlet_alpha <= 0:
            bad("dirichlet_alpha", "must be > 0")
        if self.server_weight_decay < 0:
            bad("server_weight_decay", "must be >= 0")

        if self.num_clusters > self.num_clients:
            bad("num_clusters", "cannot exceed num_clients")
        if self.clients_per_round > self.num_clients:
            bad("clients_per_round", "cannot exceed num_clients")
        if self.variant in ("ghn", "shn") and self.encoder_layers < 1:
            bad("encoder_layers", "graph variants need at least one layer")
        if self.encoder_layers < 0:
            bad("encoder_layers", "must be >= 0")
        if not 0 <= self.knn_k < self.num_clients:
            bad("knn_k", f"must satisfy 0 <= k < num_clients={self.num_clients}")
        if not -1.0 <= self.cosine_tau <= 1.0:
            bad("cosine_tau", "must lie in [-1, 1]")
        if self.stalk_dim not in (1, 2, 3, 4, 5):
            bad("stalk_dim", "must be in {1, 2, 3, 4, 5}")
        if self.map_class not in ("general", "diagonal", "orthogonal"):
            bad("map_class", "expected general, diagonal, or orthogonal")
        if self.activation not in ("tanh", "elu"):
            bad("activation", "expected tanh or elu")
        if self.server_optimizer not in ("adam", "sgd"):
            bad("server_optimizer", "expected adam or sgd")

        for v in self.sweep_values:
            if self.sweep_axis == "layers" and (int(v) != v or v < 1):
                bad("sweep_values", f"layers value {v!r} must be an integer >= 1")
            if self.sweep_axis == "knn_k" and not (int(v) == v and 0 <= v < self.num_clients):
                bad("sweep_values", f"knn_k value {v!r} must satisfy 0 <= k < num_clients")
            if self.sweep_axis == "cosine_tau" and not -1.0 <= v <= 1.0:
                bad("sweep_values", f"cosine_tau value {v!r} must lie in [-1, 1]")
            if self.sweep_axis == "stalk_dim" and v not in (1, 2, 3, 4, 5):
                bad("sweep_values", f"stalk_dim value {v!r} must be in {{1..5}}")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["sweep_values"] = list(self.sweep_values)
        return doc


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_INT_FIELDS = {f.name for f in dataclasses.fields(RunConfig) if f.type == "int"}
_FLOAT_FIELDS = {f.name for f in dataclasses.fields(RunConfig) if f.type == "float"}
_STR_FIELDS = {f.name for f in dataclasses.fields(RunConfig) if f.type == "str"}


def _coerce(name: str, value):
    if name == "sweep_values":
        if not isinstance(value, (list, tuple)):
            raise ConfigError("sweep_values: expected an array of numbers")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"sweep_values: {v!r} is not a number")
            out.append(float(v) if isinstance(v, float) else int(v))
        return tuple(out)
    if name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if name in _STR_FIELDS:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"unhandled config field {name}")


def config_from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs = {name: _coerce(name, value) for name, value in doc.items()}
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return config_from_dict(doc)


def dump_config_toml(cfg: RunConfig) -> str:
    """Flat TOML rendering of a config (keys in declaration order)."""
    lines = []
    for name, value in cfg.to_dict().items():
        if isinstance(value, str):
            lines.append(f'{name} = "{value}"')
        elif isinstance(value, list):
            lines.append(f"{name} = [{', '.join(repr(v) for v in value)}]")
        elif isinstance(value, float):
            lines.append(f"{name} = {value!r}")
        else:
            lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def run_id(cfg: RunConfig, seed: int | None = None) -> str:
    """Short content hash of (config, seed); identical inputs, identical id.

    out_dir is excluded: where artifacts land does not change what was run.
    """
    doc = cfg.to_dict()
    doc.pop("out_dir")
    if seed is not None:
        doc["seed"] = seed
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()[:12]
