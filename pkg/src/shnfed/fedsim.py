"""Deterministic single-process federation: partitioners, clients, server loop.

The simulator keeps the federated privacy shape without real networking: the
only values crossing the client boundary are parameter sets. Clients hold
their datasets in private attributes and expose update/evaluate only.
Client updates within a round are independent and may run on a thread pool
(capped by the SHNFED_THREADS environment variable); determinism is preserved
by pre-drawing every client's local seed from the server stream in client-id
order before dispatch.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .hypernets import HyperNetModel, TargetSpec, restore_checkpoint, save_checkpoint
from .relation_graph import EmbeddingMatrix

METRICS_HEADER = ("round", "client_id", "split", "metric_name", "value")


# ---------------------------------------------------------------------------
# client-side model execution
# ---------------------------------------------------------------------------


def mlp_forward(params: list[T.Tensor], x: T.Tensor) -> T.Tensor:
    """Two-layer MLP with tanh hidden activation; matches mlp_spec layouts."""
    w0, b0, w1, b1 = params
    hidden = T.tanh(T.add_bias(T.matmul(x, w0), b0))
    return T.add_bias(T.matmul(hidden, w1), b1)


def linear_forward(params: list[T.Tensor], x: T.Tensor) -> T.Tensor:
    """Single linear map; used with one-layer target specs."""
    return T.matmul(x, params[0])


def init_target_params(spec: TargetSpec, rng: T.Rng) -> list[np.ndarray]:
    """Glorot weights, zero biases, in spec order."""
    mats = []
    for name, (r, c) in spec.layers:
        if name.endswith(".bias"):
            mats.append(np.zeros((r, c)))
        else:
            mats.append(T.glorot_uniform(rng, r, c))
    return mats


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------


@dataclass
class ClientData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValueError("inputs and targets must have matching lengths")
        if len(self.x_test) < 1:
            raise ValueError("every client needs at least one test sample")


class Client:
    """One federation participant. The dataset never leaves this object:
    the public surface accepts and returns parameter sets and scalar metrics
    only."""

    def __init__(self, client_id: int, data: ClientData, metric: str, forward=mlp_forward):
        self.client_id = client_id
        self._data = data
        self._metric = metric
        self._forward = forward

    @property
    def num_train_samples(self) -> int:
        return len(self._data.x_train)

    def update(
        self,
        params: list[np.ndarray],
        local_steps: int,
        lr: float,
        batch_size: int,
        seed: int,
    ) -> list[np.ndarray]:
        """Mini-batch SGD from the given parameters; returns the new ones."""
        if local_steps < 0:
            raise ValueError("negative local_steps")
        tensors = [T.Tensor(p.copy(), requires_grad=True) for p in params]
        n = self.num_train_samples
        if n == 0:
            raise RuntimeError(f"client {self.client_id}: empty train set")
        rng = T.Rng(seed)
        order = np.arange(n)
        pos = n  # force a reshuffle on the first mini-batch draw
        for step in range(local_steps):
            if batch_size >= n:
                idx = order
            else:
                if pos + batch_size > n:
                    order = rng.gen.permutation(n)
                    pos = 0
                idx = order[pos : pos + batch_size]
                pos += batch_size
            pred = self._forward(tensors, T.Tensor(self._data.x_train[idx]))
            loss = T.mse_loss(pred, self._data.y_train[idx])
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"client {self.client_id}: non-finite training loss at local step {step}"
                )
            T.backward(loss)
            T.sgd_step(tensors, [t.grad_or_zero() for t in tensors], lr)
            T.zero_grad(tensors)
        return [t.value for t in tensors]

    def evaluate(self, params: list[np.ndarray], split: str = "test") -> float:
        """Metric of the given parameters on the local split (mse/accuracy)."""
        if split == "train":
            x, y = self._data.x_train, self._data.y_train
        elif split == "test":
            x, y = self._data.x_test, self._data.y_test
        else:
            raise ValueError(f"unknown split {split!r}")
        with T.no_grad():
            pred = self._forward([T.Tensor(p) for p in params], T.Tensor(x)).value
        if self._metric == "mse":
            return float(np.mean((pred - y) ** 2))
        if self._metric == "accuracy":
            return float(np.mean(pred.argmax(axis=1) == y.argmax(axis=1)))
        raise ValueError(f"unknown metric {self._metric!r}")


# ---------------------------------------------------------------------------
# synthetic tasks and partitioners
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTask:
    kind: str
    metric: str
    in_dim: int
    out_dim: int
    clients: tuple[Client, ...]
    metadata: dict = field(default_factory=dict)
    forward: callable = mlp_forward

    @property
    def num_clients(self) -> int:
        return len(self.clients)


def _split_train_test(x, y, test_count):
    return ClientData(x[:-test_count], y[:-test_count], x[-test_count:], y[-test_count:])


def partition_clusters(
    num_clients: int,
    num_clusters: int,
    rng: T.Rng,
    kind: str = "cluster_regression",
    train_samples: int = 40,
    test_samples: int = 20,
    in_dim: int = 8,
    out_dim: int = 2,
    noise: float = 0.05,
) -> SyntheticTask:
    """Clients assigned round-robin to clusters; each cluster has its own
    ground truth (a random linear map for regression, a label pair drawn
    from well-separated Gaussian blobs for classification)."""
    if num_clusters > num_clients:
        raise ValueError("more clusters than clients")
    if num_clusters < 1 or num_clients < 1:
        raise ValueError("counts must be positive")
    cluster_of = np.arange(num_clients) % num_clusters

    if kind == "cluster_regression":
        maps = [
            rng.gen.normal(size=(in_dim, out_dim)) / np.sqrt(in_dim)
            for _ in range(num_clusters)
        ]
        clients = []
        for m in range(num_clients):
            w = maps[cluster_of[m]]
            x = rng.gen.normal(size=(train_samples + test_samples, in_dim))
            y = x @ w + noise * rng.gen.normal(size=(len(x), out_dim))
            data = _split_train_test(x, y, test_samples)
            clients.append(Client(m, data, "mse"))
        return SyntheticTask(
            kind,
            "mse",
            in_dim,
            out_dim,
            tuple(clients),
            metadata={"cluster_of": cluster_of.tolist(), "noise": noise},
        )

    if kind == "cluster_classification":
        # Two private labels per cluster; blobs separated enough that the
        # Bayes-optimal accuracy is near one inside a cluster.
        num_classes = 2 * num_clusters
        centers = rng.gen.normal(size=(num_classes, in_dim))
        centers *= 4.0 / np.linalg.norm(centers, axis=1, keepdims=True)
        clients = []
        for m in range(num_clients):
            labels = rng.gen.integers(0, 2, size=train_samples + test_samples)
            labels += 2 * cluster_of[m]
            x = centers[labels] + rng.gen.normal(size=(len(labels), in_dim))
            y = np.eye(num_classes)[labels]
            data = _split_train_test(x, y, test_samples)
            clients.append(Client(m, data, "accuracy"))
        return SyntheticTask(
            kind,
            "accuracy",
            in_dim,
            num_classes,
            tuple(clients),
            metadata={"cluster_of": cluster_of.tolist()},
        )

    raise ValueError(f"unknown cluster task kind {kind!r}")


def make_blob_dataset(num_classes: int, samples_per_class: int, in_dim: int, rng: T.Rng):
    """Labelled Gaussian blobs used as the base pool for Dirichlet splits."""
    centers = rng.gen.normal(size=(num_classes, in_dim))
    centers *= 4.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    xs, labels = [], []
    for c in range(num_classes):
        xs.append(centers[c] + rng.gen.normal(size=(samples_per_class, in_dim)))
        labels.append(np.full(samples_per_class, c, dtype=np.intp))
    return np.vstack(xs), np.concatenate(labels)


def _dirichlet_proportions(alpha: float, size: int, rng: T.Rng) -> np.ndarray:
    """Dirichlet(alpha * 1) draw that stays defined in the alpha -> 0 limit,
    where the distribution concentrates on a random vertex of the simplex."""
    g = rng.gen.gamma(alpha, 1.0, size)
    total = g.sum()
    if not np.isfinite(total) or total <= 0.0:
        p = np.zeros(size)
        p[rng.gen.integers(size)] = 1.0
        return p
    return g / total


def _allot_by_class(labels, num_clients, alpha, rng):
    assignment = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = rng.gen.permutation(idx)
        p = _dirichlet_proportions(alpha, num_clients, rng)
        counts = rng.gen.multinomial(len(idx), p)
        start = 0
        for m, k in enumerate(counts):
            assignment[m].extend(idx[start : start + k].tolist())
            start += k
    return assignment


def partition_dirichlet(base_dataset, num_clients: int, alpha: float, rng: T.Rng) -> SyntheticTask:
    """Split a labelled pool across clients with per-class Dirichlet(alpha)
    proportions. A client left without train data triggers one resample of
    the whole allotment; a second failure is an error."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x, labels = base_dataset
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1

    assignment = _allot_by_class(labels, num_clients, alpha, rng)
    min_needed = 2  # at least one train and one test sample
    if any(len(a) < min_needed for a in assignment):
        assignment = _allot_by_class(labels, num_clients, alpha, rng)
    for m, a in enumerate(assignment):
        if len(a) < min_needed:
            raise ValueError(
                f"client {m} has an empty train or test set after resampling; "
                f"increase the sample pool or alpha={alpha}"
            )

    one_hot = np.eye(num_classes)
    clients = []
    counts = np.zeros((num_clients, num_classes), dtype=np.intp)
    for m, a in enumerate(assignment):
        idx = np.array(sorted(a), dtype=np.intp)
        idx = rng.gen.permutation(idx)
        xs, ys = x[idx], one_hot[labels[idx]]
        test_count = max(1, len(idx) // 4)
        clients.append(Client(m, _split_train_test(xs, ys, test_count), "accuracy"))
        np.add.at(counts[m], labels[idx], 1)
    return SyntheticTask(
        "dirichlet_classification",
        "accuracy",
        x.shape[1],
        num_classes,
        tuple(clients),
        metadata={"alpha": alpha, "label_counts": counts.tolist()},
    )


# ---------------------------------------------------------------------------
# federation loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 300
    clients_per_round: int = 5
    local_steps: int = 50
    client_lr: float = 0.01
    batch_size: int = 16
    server_optimizer: str = "adam"
    server_lr: float = 0.001
    server_weight_decay: float = 5e-5
    eval_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        for name in ("clients_per_round", "local_steps", "batch_size", "eval_interval"):
            if getattr(self, name) < 1 and not (name == "local_steps" and self.local_steps == 0):
                raise ValueError(f"{name} must be positive")
        if self.server_optimizer not in ("adam", "sgd"):
            raise ValueError("server_optimizer must be 'adam' or 'sgd'")


@dataclass
class RoundRecord:
    round_index: int
    sampled: tuple[int, ...]
    theta_pred: list[list[np.ndarray]]
    theta_opt: list[list[np.ndarray]]
    server_loss: float
    wall_time: float

    def __post_init__(self):
        if not (len(self.theta_pred) == len(self.theta_opt) == len(self.sampled)):
            raise ValueError("prediction/optimum lists must align with the sampled ids")


@dataclass
class EvalSummary:
    per_client: dict[int, float]
    mu: float
    sigma: float

    @classmethod
    def from_values(cls, per_client: dict[int, float]) -> "EvalSummary":
        vals = np.array([per_client[k] for k in sorted(per_client)])
        return cls(per_client, float(vals.mean()), float(vals.std()))


def _thread_count() -> int:
    raw = os.environ.get("SHNFED_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_client_updates(clients, sampled, theta_pred, config, seeds):
    """Run the sampled clients' local updates, optionally on a thread pool.
    Results come back in the order of `sampled` regardless of thread count."""
    jobs = [
        (clients[m], theta_pred[i], seeds[i]) for i, m in enumerate(sampled)
    ]

    def work(job):
        client, params, seed = job
        return client.update(params, config.local_steps, config.client_lr, config.batch_size, seed)

    workers = _thread_count()
    if workers == 1 or len(jobs) <= 1:
        return [work(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, jobs))


def sample_clients(rng: T.Rng, num_clients: int, count: int) -> np.ndarray:
    """Distinct client ids, ascending, drawn without replacement."""
    if count > num_clients:
        raise ValueError("clients_per_round exceeds the federation size")
    return np.sort(rng.gen.choice(num_clients, size=count, replace=False))


def run_round(
    model: HyperNetModel,
    clients: tuple[Client, ...],
    config: FederationConfig,
    rng: T.Rng,
    adam_state: T.AdamState | None,
    round_index: int,
) -> RoundRecord:
    """One communication round: sample, generate, local updates, server step."""
    start = time.perf_counter()
    sampled = sample_clients(rng, len(clients), config.clients_per_round)
    outs = model.generate(sampled)
    theta_pred = [model.client_parameters(outs, i) for i in range(len(sampled))]
    seeds = [int(rng.gen.integers(2**63)) for _ in sampled]

    theta_opt = _run_client_updates(clients, sampled, theta_pred, config, seeds)

    target = np.vstack([np.concatenate([m.ravel() for m in mats]) for mats in theta_opt])
    loss = T.mse_loss(T.concat_cols(outs), target)
    T.backward(loss)
    params = model.parameters()
    grads = [p.grad_or_zero() for p in params]
    if config.server_optimizer == "adam":
        T.adam_step(
            params,
            grads,
            adam_state,
            lr=config.server_lr,
            weight_decay=config.server_weight_decay,
        )
    else:
        T.sgd_step(params, grads, config.server_lr)
    T.zero_grad(params)

    return RoundRecord(
        round_index,
        tuple(int(m) for m in sampled),
        theta_pred,
        theta_opt,
        float(loss.item()),
        time.perf_counter() - start,
    )


def evaluate_personalized(model: HyperNetModel, clients, split: str = "test") -> EvalSummary:
    """Generate every client's parameters and score them on local data;
    mu/sigma run over all clients, not just the sampled ones."""
    ids = np.arange(len(clients))
    with T.no_grad():
        outs = model.generate(ids)
    per_client = {}
    for i, client in enumerate(clients):
        per_client[client.client_id] = client.evaluate(model.client_parameters(outs, i), split)
    return EvalSummary.from_values(per_client)


def evaluate_param_sets(params_by_client: dict[int, list[np.ndarray]], clients, split="test") -> EvalSummary:
    per_client = {
        c.client_id: c.evaluate(params_by_client[c.client_id], split) for c in clients
    }
    return EvalSummary.from_values(per_client)


@dataclass
class TrainingResult:
    rounds_run: int
    round_records: list[RoundRecord]
    metrics: list[tuple]
    final_eval: EvalSummary
    embeddings: EmbeddingMatrix
    server_losses: list[float]
    elapsed: float


def _eval_rows(round_index, model, clients, metric_name):
    rows = []
    for split in ("train", "test"):
        summary = evaluate_personalized(model, clients, split)
        for cid in sorted(summary.per_client):
            rows.append((round_index, cid, split, metric_name, summary.per_client[cid]))
    return rows


def run_training(
    model: HyperNetModel,
    clients: tuple[Client, ...],
    config: FederationConfig,
    metric_name: str = "mse",
    checkpoint: dict | None = None,
    checkpoint_path=None,
) -> TrainingResult:
    """The server loop: R rounds with periodic personalized evaluation.

    Passing a checkpoint document resumes mid-run bit-for-bit: parameters,
    optimizer moments, server RNG state, and the round counter are restored,
    and only the remaining rounds (and their eval rows) are produced.
    """
    start = time.perf_counter()
    rng = T.Rng(config.seed)
    adam_state = T.AdamState.for_params(model.parameters())
    start_round = 0
    if checkpoint is not None:
        start_round = restore_checkpoint(checkpoint, model, adam_state)
        rng.set_state(checkpoint["rng_state"])

    records, metrics, losses = [], [], []
    if config.rounds == 0 and start_round == 0:
        metrics.extend(_eval_rows(0, model, clients, metric_name))
    for t in range(start_round, config.rounds):
        record = run_round(model, clients, config, rng, adam_state, t)
        records.append(record)
        losses.append(record.server_loss)
        completed = t + 1
        if completed % config.eval_interval == 0 or completed == config.rounds:
            metrics.extend(_eval_rows(completed, model, clients, metric_name))

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, model, config.rounds, rng_state=rng.state(), adam_state=adam_state
        )
    final_eval = evaluate_personalized(model, clients)
    return TrainingResult(
        rounds_run=config.rounds - start_round,
        round_records=records,
        metrics=metrics,
        final_eval=final_eval,
        embeddings=model.embedding_matrix(),
        server_losses=losses,
        elapsed=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def weighted_average(param_lists: list[list[np.ndarray]], counts) -> list[np.ndarray]:
    """Parameter mean weighted by sample counts: p_m = n_m / N."""
    weights = np.asarray(counts, dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("sample counts must be positive")
    weights = weights / weights.sum()
    return [
        sum(w * mats[i] for w, mats in zip(weights, param_lists))
        for i in range(len(param_lists[0]))
    ]


def fedavg_baseline(
    clients: tuple[Client, ...],
    spec: TargetSpec,
    config: FederationConfig,
    finetune: bool = False,
    finetune_steps: int | None = None,
    metric_name: str = "mse",
) -> tuple[list[np.ndarray], EvalSummary, list[tuple]]:
    """Weighted parameter averaging with p_m = n_m / N over the sampled set;
    optionally a per-client finetune pass before evaluation."""
    rng = T.Rng(config.seed)
    theta = init_target_params(spec, rng)
    for _ in range(config.rounds):
        sampled = sample_clients(rng, len(clients), config.clients_per_round)
        seeds = [int(rng.gen.integers(2**63)) for _ in sampled]
        theta_pred = [[p.copy() for p in theta] for _ in sampled]
        updates = _run_client_updates(clients, sampled, theta_pred, config, seeds)
        theta = weighted_average(updates, [clients[m].num_train_samples for m in sampled])

    if finetune:
        steps = config.local_steps if finetune_steps is None else finetune_steps
        seeds = [int(rng.gen.integers(2**63)) for _ in clients]
        params_by_client = {}
        for client, seed in zip(clients, seeds):
            params_by_client[client.client_id] = client.update(
                [p.copy() for p in theta], steps, config.client_lr, config.batch_size, seed
            )
        summary = evaluate_param_sets(params_by_client, clients)
    else:
        summary = evaluate_param_sets({c.client_id: theta for c in clients}, clients)
    rows = [
        (config.rounds, cid, "test", metric_name, summary.per_client[cid])
        for cid in sorted(summary.per_client)
    ]
    return theta, summary, rows


def local_baseline(
    clients: tuple[Client, ...],
    spec: TargetSpec,
    config: FederationConfig,
) -> tuple[dict[int, list[np.ndarray]], EvalSummary]:
    """Every client trains its own model from scratch. The step budget equals
    the federated total divided evenly: local_steps * clients_per_round *
    rounds / |M| mini-batch steps per client."""
    rng = T.Rng(config.seed)
    budget = int(np.ceil(config.local_steps * config.clients_per_round * config.rounds / len(clients)))
    params_by_client = {}
    for client in clients:
        theta = init_target_params(spec, rng)
        seed = int(rng.gen.integers(2**63))
        params_by_client[client.client_id] = client.update(
            theta, budget, config.client_lr, config.batch_size, seed
        )
    return params_by_client, evaluate_param_sets(params_by_client, clients)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def write_metrics_csv(path, rows, append: bool = False) -> None:
    """`round,client_id,split,metric_name,value` — one row per client/eval."""
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(METRICS_HEADER)
        for row in rows:
            r, cid, split, name, value = row
            writer.writerow((r, cid, split, name, repr(float(value))))


def read_metrics_csv(path) -> list[tuple]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for r, cid, split, name, value in reader:
            rows.append((int(r), int(cid), split, name, float(value)))
    return rows
