"""Command-line experiment harness.

Verbs:
  train     one run (hypernet variants or baselines); writes a run directory
  graph     build a client relation graph from an embeddings CSV
  sweep     three-stage pipeline swept over layers / knn_k / cosine_tau / stalk_dim
  diagnose  depth traces (row std, Dirichlet energies) for untrained encoders
  eval      re-evaluate a finished run directory from its checkpoint

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
The environment variable SHNFED_THREADS caps parallel client updates.
All artifacts except the summary's wall-clock field are byte-reproducible
from (config, seed).
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import (
    CLI_VARIANTS,
    SWEEP_AXES,
    ConfigError,
    RunConfig,
    config_from_dict,
    dump_config_toml,
    load_config,
    run_id,
)
from .fedsim import (
    FederationConfig,
    evaluate_personalized,
    fedavg_baseline,
    local_baseline,
    make_blob_dataset,
    partition_clusters,
    partition_dirichlet,
    run_training,
    write_metrics_csv,
)
from .hypernets import (
    GcnEncoder,
    HyperNetModel,
    ModelConfig,
    SheafEncoder,
    load_checkpoint,
    mlp_spec,
    representation_row_std,
    restore_checkpoint,
)
from .relation_graph import (
    EmbeddingMatrix,
    build_knn_graph,
    build_threshold_graph,
    graph_diagnostics,
    load_edge_list,
    load_embeddings,
    save_adjacency,
    save_edge_list,
    save_embeddings,
)
from .sheaf import (
    CellularSheaf,
    build_sheaf_laplacian,
    graph_dirichlet_energy,
    heat_step,
    sheaf_dirichlet_energy,
)

# Deterministic substream keys derived from the run seed.
TASK_STREAM, MODEL_STREAM, DIAG_STREAM = 1, 2, 4

THREE_STAGE_HINT = (
    "variant {variant!r} needs frozen embeddings and a prebuilt relation graph; "
    "run the three stages in order: "
    "(1) `shnfed train --variant hn` to learn and export embeddings, "
    "(2) `shnfed graph --embeddings <run>/embeddings.csv --out <dir>` to build the graph, "
    "(3) `shnfed train --variant {variant} --embeddings <csv> --graph <edges>`"
)


# ---------------------------------------------------------------------------
# config-driven builders
# ---------------------------------------------------------------------------


def build_task(cfg: RunConfig, seed: int):
    rng = T.Rng(seed).child(TASK_STREAM)
    if cfg.task_kind == "dirichlet_classification":
        base = make_blob_dataset(cfg.num_classes, cfg.samples_per_class, cfg.input_dim, rng)
        return partition_dirichlet(base, cfg.num_clients, cfg.dirichlet_alpha, rng)
    return partition_clusters(
        cfg.num_clients,
        cfg.num_clusters,
        rng,
        kind=cfg.task_kind,
        train_samples=cfg.train_samples,
        test_samples=cfg.test_samples,
        in_dim=cfg.input_dim,
        out_dim=cfg.output_dim,
        noise=cfg.noise,
    )


def build_target_spec(cfg: RunConfig, task):
    return mlp_spec(task.in_dim, cfg.target_hidden, task.out_dim)


def model_config(cfg: RunConfig, variant: str) -> ModelConfig:
    return ModelConfig(
        variant=variant,
        num_clients=cfg.num_clients,
        embed_dim=cfg.embed_dim,
        embed_hidden=cfg.embed_hidden,
        encoder_hidden=cfg.encoder_hidden,
        encoder_layers=cfg.encoder_layers,
        stalk_dim=cfg.stalk_dim,
        head_hidden=cfg.head_hidden,
        map_class=cfg.map_class,
        activation=cfg.activation,
    )


def fed_config(cfg: RunConfig, seed: int) -> FederationConfig:
    return FederationConfig(
        rounds=cfg.rounds,
        clients_per_round=cfg.clients_per_round,
        local_steps=cfg.local_steps,
        client_lr=cfg.client_lr,
        batch_size=cfg.batch_size,
        server_optimizer=cfg.server_optimizer,
        server_lr=cfg.server_lr,
        server_weight_decay=cfg.server_weight_decay,
        eval_interval=cfg.eval_interval,
        seed=seed,
    )


def build_relation_graph(cfg: RunConfig, embeddings: EmbeddingMatrix):
    if cfg.graph_method == "knn":
        return build_knn_graph(embeddings, cfg.knn_k)
    return build_threshold_graph(embeddings, cfg.cosine_tau)


def build_hypernet(
    cfg: RunConfig,
    variant: str,
    spec,
    seed: int,
    graph=None,
    adjacency=None,
    embeddings=None,
) -> HyperNetModel:
    rng = T.Rng(seed).child(MODEL_STREAM)
    return HyperNetModel(
        model_config(cfg, variant),
        spec,
        rng,
        graph=graph,
        adjacency=adjacency,
        embeddings=embeddings,
    )


def run_hypernet_variant(
    cfg: RunConfig,
    variant: str,
    seed: int,
    graph=None,
    embeddings=None,
    checkpoint=None,
    checkpoint_path=None,
):
    """One complete training run for hn/ghn/shn at the given seed."""
    task = build_task(cfg, seed)
    spec = build_target_spec(cfg, task)
    adjacency = None
    emb_matrix = None
    if variant in ("ghn", "shn"):
        if graph is None or embeddings is None:
            raise ConfigError(THREE_STAGE_HINT.format(variant=variant))
        if embeddings.n != cfg.num_clients:
            raise ConfigError(
                f"embeddings have {embeddings.n} rows but num_clients={cfg.num_clients}"
            )
        if embeddings.dim != cfg.embed_dim:
            raise ConfigError(
                f"embeddings have dim {embeddings.dim} but embed_dim={cfg.embed_dim}; "
                "set embed_dim to match the frozen embedding file"
            )
        if graph.n != cfg.num_clients:
            raise ConfigError(f"graph has {graph.n} nodes but num_clients={cfg.num_clients}")
        adjacency = graph.adjacency() + np.eye(graph.n)
        emb_matrix = embeddings.matrix
    model = build_hypernet(
        cfg, variant, spec, seed, graph=graph, adjacency=adjacency, embeddings=emb_matrix
    )
    result = run_training(
        model,
        task.clients,
        fed_config(cfg, seed),
        metric_name=task.metric,
        checkpoint=checkpoint,
        checkpoint_path=checkpoint_path,
    )
    return task, model, result


def run_baseline_variant(cfg: RunConfig, variant: str, seed: int):
    """FedAvg (optionally finetuned) or the equal-budget local baseline."""
    task = build_task(cfg, seed)
    spec = build_target_spec(cfg, task)
    fc = fed_config(cfg, seed)
    if variant in ("fedavg", "fedavg-ft"):
        _, summary, rows = fedavg_baseline(
            task.clients, spec, fc, finetune=(variant == "fedavg-ft"), metric_name=task.metric
        )
    elif variant == "local":
        _, summary = local_baseline(task.clients, spec, fc)
        rows = [
            (fc.rounds, cid, "test", task.metric, summary.per_client[cid])
            for cid in sorted(summary.per_client)
        ]
    else:
        raise ConfigError(f"unknown baseline variant {variant!r}")
    return task, summary, rows


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def write_summary(path, cfg: RunConfig, seed, variant, metric_name, summary, extra=None):
    doc = {
        "run_id": run_id(cfg, seed),
        "variant": variant,
        "seed": seed,
        "metric_name": metric_name,
        "config": cfg.to_dict(),
        "final": {
            "mu": summary.mu,
            "sigma": summary.sigma,
            "per_client": {str(k): v for k, v in sorted(summary.per_client.items())},
        },
    }
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


def _write_config_copy(run_dir: Path, cfg: RunConfig, config_path):
    target = run_dir / "config.toml"
    if config_path:
        shutil.copyfile(config_path, target)
    else:
        target.write_text(dump_config_toml(cfg), encoding="utf-8")


def encoder_layer_energies(model: HyperNetModel) -> list[tuple[int, str, float]]:
    """(layer, metric, value) Dirichlet-energy trace through the encoder.

    Graph energy is measured on per-node representations against the binary
    relation graph; sheaf energy additionally uses each layer's induced sheaf.
    """
    if model.encoder is None:
        return []
    rows = []
    with T.no_grad():
        x = T.Tensor(model.fixed_embeddings)
        if isinstance(model.encoder, GcnEncoder):
            weights = model.encoder.adjacency - np.diag(np.diag(model.encoder.adjacency))
            for layer, h in enumerate(model.encoder.layer_outputs(x)):
                rows.append((layer, "graph_energy", graph_dirichlet_energy(weights, h.value)))
        else:
            enc: SheafEncoder = model.encoder
            weights = enc.graph.adjacency()
            n, d = enc.graph.n, enc.stalk_dim
            outs = enc.layer_outputs(x)
            sheaves = enc.snapshot_sheaves(x)
            for layer, h in enumerate(outs):
                flat = h.value.reshape(n, d * enc.hidden_channels)
                rows.append((layer, "graph_energy", graph_dirichlet_energy(weights, flat)))
                if layer > 0:
                    sheaf = sheaves[layer - 1]
                    lap = build_sheaf_laplacian(sheaf)
                    energy = sheaf_dirichlet_energy(sheaf, lap, h.value)
                    rows.append((layer, "sheaf_energy", energy))
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _resolve_config(args) -> tuple[RunConfig, str | None]:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    cfg = cfg.replace(**overrides) if overrides else cfg.validate()
    return cfg, args.config


def cmd_train(args) -> int:
    cfg, config_path = _resolve_config(args)
    started = time.perf_counter()
    variant = cfg.variant
    run_dir = Path(cfg.out_dir) / f"{variant}-{run_id(cfg, cfg.seed)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_config_copy(run_dir, cfg, config_path)

    if variant in ("fedavg", "fedavg-ft", "local"):
        task, summary, rows = run_baseline_variant(cfg, variant, cfg.seed)
        write_metrics_csv(run_dir / "metrics.csv", rows)
        write_summary(
            run_dir / "summary.json", cfg, cfg.seed, variant, task.metric, summary,
            extra={"runtime_seconds": time.perf_counter() - started},
        )
        print(run_dir)
        return 0

    graph = embeddings = None
    if variant in ("ghn", "shn"):
        if not args.embeddings or not args.graph:
            raise ConfigError(THREE_STAGE_HINT.format(variant=variant))
        embeddings = load_embeddings(args.embeddings)
        graph = load_edge_list(args.graph)
    checkpoint = load_checkpoint(args.resume) if args.resume else None

    task, model, result = run_hypernet_variant(
        cfg, variant, cfg.seed,
        graph=graph, embeddings=embeddings,
        checkpoint=checkpoint, checkpoint_path=run_dir / "checkpoint.json",
    )
    write_metrics_csv(run_dir / "metrics.csv", result.metrics, append=bool(checkpoint))
    save_embeddings(run_dir / "embeddings.csv", result.embeddings)
    if variant in ("ghn", "shn"):
        shutil.copyfile(args.graph, run_dir / "graph_edges.txt")
    write_summary(
        run_dir / "summary.json", cfg, cfg.seed, variant, task.metric, result.final_eval,
        extra={
            "rounds_run": result.rounds_run,
            "server_loss_first": result.server_losses[0] if result.server_losses else None,
            "server_loss_last": result.server_losses[-1] if result.server_losses else None,
            "runtime_seconds": time.perf_counter() - started,
        },
    )
    print(run_dir)
    return 0


def load_labels(path, client_ids) -> list:
    """`client_id,label` CSV; returns labels aligned with the given ids."""
    by_id = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "client_id,label":
            raise ValueError(f"{path}: expected header 'client_id,label', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                cid, label = line.split(",")
                by_id[int(cid)] = label
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed label row {line!r}")
    missing = [cid for cid in client_ids if cid not in by_id]
    if missing:
        raise ValueError(f"{path}: no label for client id(s) {missing}")
    return [by_id[cid] for cid in client_ids]


def cmd_graph(args) -> int:
    embeddings = load_embeddings(args.embeddings)
    if args.method == "knn":
        crg = build_knn_graph(embeddings, args.k)
    else:
        crg = build_threshold_graph(embeddings, args.tau)
    labels = load_labels(args.labels, embeddings.client_ids) if args.labels else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_edge_list(out / "edges.txt", crg)
    save_adjacency(out / "adjacency.csv", crg)
    diag = graph_diagnostics(crg, labels=labels)
    with open(out / "diagnostics.json", "w", encoding="utf-8") as fh:
        json.dump(diag, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(out)
    return 0


def _parse_values(raw: str, axis: str) -> tuple:
    out = []
    for piece in raw.split(","):
        piece = piece.strip()
        if not piece:
            continue
        try:
            out.append(float(piece) if axis == "cosine_tau" else int(piece))
        except ValueError:
            raise ConfigError(f"sweep value {piece!r} is not a number")
    if not out:
        raise ConfigError("sweep needs at least one value")
    return tuple(out)


def apply_sweep_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "layers":
        return cfg.replace(encoder_layers=int(value))
    if axis == "knn_k":
        return cfg.replace(graph_method="knn", knn_k=int(value))
    if axis == "cosine_tau":
        return cfg.replace(graph_method="cosine", cosine_tau=float(value))
    if axis == "stalk_dim":
        return cfg.replace(stalk_dim=int(value))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args) -> int:
    cfg, _ = _resolve_config(args)
    axis = args.axis or cfg.sweep_axis
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    values = _parse_values(args.values, axis) if args.values else cfg.sweep_values
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    for v in variants:
        if v not in CLI_VARIANTS:
            raise ConfigError(f"unknown sweep variant {v!r}")
    cfg = cfg.replace(sweep_axis=axis, sweep_values=values)

    out = Path(cfg.out_dir) / f"sweep-{axis}-{run_id(cfg, cfg.seed)}"
    out.mkdir(parents=True, exist_ok=True)
    sweep_rows, energy_rows, failures = [], [], []

    for repeat in range(cfg.repeats):
        seed = cfg.seed + repeat
        # Stage 1: plain hypernetwork learns the client embeddings.
        _, stage1_model, stage1 = run_hypernet_variant(cfg, "hn", seed)
        embeddings = stage1.embeddings
        save_embeddings(out / f"embeddings-rep{repeat}.csv", embeddings)

        for value in values:
            cfg_v = apply_sweep_axis(cfg, axis, value)
            crg = build_relation_graph(cfg_v, embeddings)  # stage 2
            for variant in variants:
                try:
                    if variant in ("fedavg", "fedavg-ft", "local"):
                        _, summary, _ = run_baseline_variant(cfg_v, variant, seed)
                    elif variant == "hn":
                        _, _, res = run_hypernet_variant(cfg_v, "hn", seed)
                        summary = res.final_eval
                    else:
                        _, model, res = run_hypernet_variant(
                            cfg_v, variant, seed, graph=crg.graph, embeddings=embeddings
                        )
                        summary = res.final_eval
                        for layer, metric, val in encoder_layer_energies(model):
                            energy_rows.append((value, variant, repeat, layer, metric, val))
                    sweep_rows.append((value, variant, repeat, summary.mu, summary.sigma))
                except ConfigError:
                    raise
                except Exception as exc:  # record and continue with the sweep
                    failures.append(
                        {"axis_value": value, "variant": variant, "repeat": repeat,
                         "error": f"{type(exc).__name__}: {exc}"}
                    )
                    sweep_rows.append((value, variant, repeat, float("nan"), float("nan")))

    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("axis_value,variant,repeat,mu,sigma\n")
        for value, variant, repeat, mu, sigma in sweep_rows:
            fh.write(f"{value},{variant},{repeat},{mu!r},{sigma!r}\n")
    with open(out / "energy_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("axis_value,variant,repeat,layer,metric,value\n")
        for value, variant, repeat, layer, metric, val in energy_rows:
            fh.write(f"{value},{variant},{repeat},{layer},{metric},{val!r}\n")

    # Per (value, variant): mean of per-repeat mu, and both the mean of the
    # per-repeat sigmas and the pooled across-repeat std of mu.
    aggregates = []
    for value in values:
        for variant in variants:
            rows = [r for r in sweep_rows if r[0] == value and r[1] == variant]
            mus = np.array([r[3] for r in rows])
            mus = mus[np.isfinite(mus)]
            sigmas = np.array([r[4] for r in rows])
            sigmas = sigmas[np.isfinite(sigmas)]
            aggregates.append(
                {
                    "axis_value": value,
                    "variant": variant,
                    "mu_mean": float(mus.mean()) if mus.size else float("nan"),
                    "sigma_mean": float(sigmas.mean()) if sigmas.size else float("nan"),
                    "mu_std_across_repeats": float(mus.std()) if mus.size else float("nan"),
                }
            )
    with open(out / "sweep_summary.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"axis": axis, "values": list(values), "variants": list(variants),
             "repeats": cfg.repeats, "aggregates": aggregates, "failures": failures},
            fh, indent=1, sort_keys=True,
        )
        fh.write("\n")
    print(out)
    return 0


# ---------------------------------------------------------------------------
# smoothing diagnostics
# ---------------------------------------------------------------------------


def smoothing_traces(
    graph,
    x0: np.ndarray,
    depths,
    stalk_dim: int,
    map_class: str,
    activation: str,
    seed: int,
) -> list[tuple[int, str, str, float]]:
    """(depth, encoder, metric, value) rows for four untrained encoders:
    a GCN stack, a sheaf-diffusion stack, plain normalized-adjacency
    propagation, and identity-sheaf heat steps (alpha=1, d=1)."""
    n, f = x0.shape
    raw_adj = graph.adjacency()
    degrees = raw_adj.sum(axis=1)
    if (degrees == 0).any():
        raise ValueError("propagation traces need a graph without isolated nodes")
    inv_sqrt = degrees**-0.5
    prop = raw_adj * inv_sqrt[:, None] * inv_sqrt[None, :]
    adjacency_loops = raw_adj + np.eye(n)
    identity_lap = build_sheaf_laplacian(CellularSheaf.identity(graph, 1))

    rows = []

    def record(depth, encoder, value_matrix, sheaf=None, lap=None, stalk=None):
        rows.append((depth, encoder, "row_std", representation_row_std(value_matrix)))
        energy = graph_dirichlet_energy(raw_adj, value_matrix)
        rows.append((depth, encoder, "graph_energy", energy))
        if sheaf is not None:
            rows.append((depth, encoder, "sheaf_energy", sheaf_dirichlet_energy(sheaf, lap, stalk)))

    with T.no_grad():
        for depth in sorted(set(int(d) for d in depths)):
            if depth < 0:
                raise ValueError("depths must be >= 0")
            if depth == 0:
                for encoder in ("gcn", "sheaf", "gcn_prop", "heat"):
                    record(0, encoder, x0)
                continue

            rng = T.Rng(seed).child(DIAG_STREAM)
            gcn = GcnEncoder(adjacency_loops, f, f, depth, rng, activation)
            record(depth, "gcn", gcn.forward(T.Tensor(x0)).value)

            rng = T.Rng(seed).child(DIAG_STREAM)
            sheaf_enc = SheafEncoder(graph, f, stalk_dim, f, depth, rng, map_class, activation)
            stalk = sheaf_enc.layer_outputs(T.Tensor(x0))[-1].value
            final_sheaf = sheaf_enc.snapshot_sheaves(T.Tensor(x0))[-1]
            flat = stalk.reshape(n, stalk_dim * f)
            record(depth, "sheaf", flat, sheaf=final_sheaf,
                   lap=build_sheaf_laplacian(final_sheaf), stalk=stalk)

            h = x0
            for _ in range(depth):
                h = prop @ h
            record(depth, "gcn_prop", h)

            ht = x0
            for _ in range(depth):
                ht = heat_step(identity_lap, ht, 1.0)
            record(depth, "heat", ht)
    return rows


def cmd_diagnose(args) -> int:
    embeddings = load_embeddings(args.embeddings)
    if args.graph:
        graph = load_edge_list(args.graph)
        if graph.n != embeddings.n:
            raise ConfigError(
                f"graph has {graph.n} nodes but embeddings have {embeddings.n} rows"
            )
    else:
        if args.method == "knn":
            graph = build_knn_graph(embeddings, args.k).graph
        else:
            graph = build_threshold_graph(embeddings, args.tau).graph
    if not 1 <= args.stalk_dim <= 5:
        raise ConfigError("stalk-dim must be in {1..5}")
    try:
        depths = [int(p) for p in args.depths.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"depths {args.depths!r} must be a comma list of integers")
    if not depths or min(depths) < 0:
        raise ConfigError("depths must be non-negative integers")

    rows = smoothing_traces(
        graph, embeddings.matrix, depths, args.stalk_dim, args.map_class,
        args.activation, args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "smoothing.csv", "w", encoding="utf-8") as fh:
        fh.write("depth,encoder,metric,value\n")
        for depth, encoder, metric, value in rows:
            fh.write(f"{depth},{encoder},{metric},{value!r}\n")
    print(out)
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"{run_dir}: no summary.json; is this a run directory?")
    with open(summary_path, encoding="utf-8") as fh:
        prior = json.load(fh)
    cfg = config_from_dict(prior["config"])
    variant = prior["variant"]
    seed = prior["seed"]
    if variant not in ("hn", "ghn", "shn"):
        raise ConfigError(f"eval supports hypernetwork runs; {variant!r} has no checkpoint")

    task = build_task(cfg, seed)
    spec = build_target_spec(cfg, task)
    graph = adjacency = emb_matrix = None
    if variant in ("ghn", "shn"):
        embeddings = load_embeddings(run_dir / "embeddings.csv")
        graph = load_edge_list(run_dir / "graph_edges.txt")
        adjacency = graph.adjacency() + np.eye(graph.n)
        emb_matrix = embeddings.matrix
    model = build_hypernet(
        cfg, variant, spec, seed, graph=graph, adjacency=adjacency, embeddings=emb_matrix
    )
    doc = load_checkpoint(run_dir / "checkpoint.json")
    restore_checkpoint(doc, model)
    summary = evaluate_personalized(model, task.clients)
    out_path = Path(args.out) if args.out else run_dir / "eval.json"
    result = {
        "run_id": prior["run_id"],
        "variant": variant,
        "round": doc["round"],
        "metric_name": task.metric,
        "mu": summary.mu,
        "sigma": summary.sigma,
        "per_client": {str(k): v for k, v in sorted(summary.per_client.items())},
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"{variant} round {doc['round']}: mu={summary.mu!r} sigma={summary.sigma!r}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shnfed",
        description="Personalized-federated-learning experiments with sheaf hypernetworks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training configuration")
    train.add_argument("--config", help="TOML run configuration")
    train.add_argument("--seed", type=int, help="override the config seed")
    train.add_argument("--out", help="override the output directory")
    train.add_argument("--variant", choices=CLI_VARIANTS)
    train.add_argument("--embeddings", help="frozen embeddings CSV (ghn/shn)")
    train.add_argument("--graph", help="relation-graph edge list (ghn/shn)")
    train.add_argument("--resume", help="checkpoint JSON to resume from")
    train.set_defaults(func=cmd_train)

    graph = sub.add_parser("graph", help="build a client relation graph")
    graph.add_argument("--embeddings", required=True)
    graph.add_argument("--method", choices=("knn", "cosine"), default="knn")
    graph.add_argument("--k", type=int, default=4)
    graph.add_argument("--tau", type=float, default=0.8)
    graph.add_argument("--labels", help="client_id,label CSV for homophily diagnostics")
    graph.add_argument("--out", required=True)
    graph.set_defaults(func=cmd_graph)

    sweep = sub.add_parser("sweep", help="three-stage pipeline over an axis")
    sweep.add_argument("--config", help="TOML run configuration")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--out")
    sweep.add_argument("--axis", choices=SWEEP_AXES)
    sweep.add_argument("--values", help="comma-separated axis values")
    sweep.add_argument("--variants", default="ghn,shn")
    sweep.set_defaults(func=cmd_sweep)

    diag = sub.add_parser("diagnose", help="over-smoothing depth traces")
    diag.add_argument("--embeddings", required=True)
    diag.add_argument("--graph", help="edge list; built from embeddings when omitted")
    diag.add_argument("--method", choices=("knn", "cosine"), default="knn")
    diag.add_argument("--k", type=int, default=4)
    diag.add_argument("--tau", type=float, default=0.8)
    diag.add_argument("--stalk-dim", type=int, default=2)
    diag.add_argument("--map-class", choices=("general", "diagonal", "orthogonal"),
                      default="orthogonal")
    diag.add_argument("--activation", choices=("tanh", "elu"), default="tanh")
    diag.add_argument("--depths", default="0,1,2,4,8,16,32")
    diag.add_argument("--seed", type=int, default=0)
    diag.add_argument("--out", required=True)
    diag.set_defaults(func=cmd_diagnose)

    ev = sub.add_parser("eval", help="re-evaluate a run directory")
    ev.add_argument("--run", required=True)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
