"""Tests for the federation simulator: tasks, clients, server loop, baselines."""

from dataclasses import replace

import numpy as np
import pytest

import shnfed.tensor as T
from shnfed.fedsim import (
    Client,
    ClientData,
    EvalSummary,
    FederationConfig,
    evaluate_param_sets,
    evaluate_personalized,
    fedavg_baseline,
    init_target_params,
    linear_forward,
    local_baseline,
    make_blob_dataset,
    mlp_forward,
    partition_clusters,
    partition_dirichlet,
    read_metrics_csv,
    run_round,
    run_training,
    sample_clients,
    weighted_average,
    write_metrics_csv,
    _dirichlet_proportions,
)
from shnfed.hypernets import (
    HyperNetModel,
    ModelConfig,
    TargetSpec,
    load_checkpoint,
    mlp_spec,
)

SPEC = mlp_spec(8, 16, 2)


def tiny_setup(num_clients=6, seed=40, model_seed=2):
    task = partition_clusters(num_clients, 2, T.Rng(seed), train_samples=30, test_samples=10)
    cfg = ModelConfig("hn", num_clients, embed_dim=8, embed_hidden=16, head_hidden=16)
    model = HyperNetModel(cfg, SPEC, T.Rng(model_seed))
    return task, model


def linear_client(seed=0, n=30, in_dim=3):
    rng = T.Rng(seed)
    x = rng.gen.normal(size=(n, in_dim))
    w = rng.gen.normal(size=(in_dim, 1))
    y = x @ w
    data = ClientData(x, y, x[:5], y[:5])
    return Client(0, data, "mse", forward=linear_forward), x, y


class TestClientUpdate:
    def test_zero_learning_rate_is_identity(self):
        task, _ = tiny_setup()
        client = task.clients[0]
        theta = init_target_params(SPEC, T.Rng(1))
        out = client.update(theta, local_steps=10, lr=0.0, batch_size=8, seed=5)
        for a, b in zip(theta, out):
            assert np.array_equal(a, b)
            assert a is not b

    def test_zero_steps_is_identity(self):
        task, _ = tiny_setup()
        theta = init_target_params(SPEC, T.Rng(1))
        out = task.clients[0].update(theta, local_steps=0, lr=0.1, batch_size=8, seed=5)
        for a, b in zip(theta, out):
            assert np.array_equal(a, b)

    def test_input_parameters_not_mutated(self):
        task, _ = tiny_setup()
        theta = init_target_params(SPEC, T.Rng(1))
        frozen = [p.copy() for p in theta]
        task.clients[0].update(theta, local_steps=5, lr=0.05, batch_size=8, seed=5)
        for a, b in zip(theta, frozen):
            assert np.array_equal(a, b)

    def test_one_full_batch_step_matches_closed_form(self):
        # For a linear model and full-batch mse, one SGD step is
        # theta - lr * 2 X^T (X theta - y) / B.
        client, x, y = linear_client(seed=8)
        theta = [T.Rng(9).gen.normal(size=(3, 1))]
        lr = 0.05
        out = client.update([theta[0].copy()], local_steps=1, lr=lr, batch_size=len(x), seed=0)
        expected = theta[0] - lr * 2.0 * x.T @ (x @ theta[0] - y) / len(x)
        assert np.max(np.abs(out[0] - expected)) < 1e-10

    def test_full_batch_descent_is_monotone_below_stability_bound(self):
        client, x, y = linear_client(seed=12, n=40)
        hessian = 2.0 * x.T @ x / len(x)
        lr = 1.0 / np.linalg.eigvalsh(hessian).max()
        theta = [T.Rng(13).gen.normal(size=(3, 1))]
        losses = [client.evaluate(theta, "train")]
        for _ in range(50):
            theta = client.update(theta, local_steps=1, lr=lr, batch_size=len(x), seed=0)
            losses.append(client.evaluate(theta, "train"))
        diffs = np.diff(losses)
        assert (diffs <= 1e-12).all()
        assert losses[-1] < losses[0]

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_non_finite_loss_aborts_with_diagnostic(self):
        client, x, y = linear_client(seed=8)
        theta = [np.full((3, 1), 10.0)]
        with pytest.raises(RuntimeError, match=r"client 0: non-finite training loss"):
            client.update(theta, local_steps=200, lr=50.0, batch_size=len(x), seed=0)

    def test_unknown_split_rejected(self):
        task, _ = tiny_setup()
        with pytest.raises(ValueError, match="unknown split"):
            task.clients[0].evaluate(init_target_params(SPEC, T.Rng(1)), "validation")


class TestClusterPartitioner:
    def test_round_robin_cluster_sizes(self):
        task = partition_clusters(20, 4, T.Rng(0), train_samples=4, test_samples=2)
        cluster_of = np.array(task.metadata["cluster_of"])
        assert [int((cluster_of == c).sum()) for c in range(4)] == [5, 5, 5, 5]

    def test_single_cluster_is_iid(self):
        task = partition_clusters(5, 1, T.Rng(0), train_samples=4, test_samples=2)
        assert set(task.metadata["cluster_of"]) == {0}

    def test_one_cluster_per_client(self):
        task = partition_clusters(5, 5, T.Rng(0), train_samples=4, test_samples=2)
        assert task.metadata["cluster_of"] == [0, 1, 2, 3, 4]

    def test_more_clusters_than_clients_rejected(self):
        with pytest.raises(ValueError, match="more clusters"):
            partition_clusters(3, 4, T.Rng(0))

    def test_construction_is_deterministic(self):
        a = partition_clusters(6, 3, T.Rng(4), train_samples=8, test_samples=4)
        b = partition_clusters(6, 3, T.Rng(4), train_samples=8, test_samples=4)
        for ca, cb in zip(a.clients, b.clients):
            assert ca._data.x_train.tobytes() == cb._data.x_train.tobytes()
            assert ca._data.y_test.tobytes() == cb._data.y_test.tobytes()

    def test_same_cluster_shares_ground_truth_map(self):
        task = partition_clusters(4, 2, T.Rng(7), train_samples=200, test_samples=10, noise=0.0)
        # noiseless targets: regress y on x per client and compare maps
        def fitted(c):
            d = c._data
            return np.linalg.lstsq(d.x_train, d.y_train, rcond=None)[0]

        w0, w1, w2, w3 = (fitted(c) for c in task.clients)
        assert np.max(np.abs(w0 - w2)) < 1e-8  # clients 0,2 share cluster 0
        assert np.max(np.abs(w1 - w3)) < 1e-8
        assert np.max(np.abs(w0 - w1)) > 1e-2

    def test_classification_clusters_use_private_label_pairs(self):
        task = partition_clusters(
            6, 3, T.Rng(9), kind="cluster_classification", train_samples=30, test_samples=10
        )
        assert task.metric == "accuracy"
        assert task.out_dim == 6
        for m, client in enumerate(task.clients):
            cluster = task.metadata["cluster_of"][m]
            labels = set(client._data.y_train.argmax(axis=1)) | set(
                client._data.y_test.argmax(axis=1)
            )
            assert labels <= {2 * cluster, 2 * cluster + 1}


class TestDirichletPartitioner:
    def test_huge_alpha_gives_uniform_histograms(self):
        rng = T.Rng(11)
        base = make_blob_dataset(4, 1000, 8, rng)
        task = partition_dirichlet(base, 8, 1e15, rng)
        counts = np.array(task.metadata["label_counts"], dtype=np.float64)
        frac = counts / counts.sum(axis=1, keepdims=True)
        assert np.abs(frac - 0.25).max() < 0.05

    def test_tiny_alpha_concentrates_each_class_on_one_client(self):
        rng = T.Rng(3)
        for _ in range(20):
            p = _dirichlet_proportions(1e-15, 6, rng)
            assert np.count_nonzero(p) == 1
            assert p.max() == 1.0

    def test_tiny_alpha_with_more_clients_than_classes_errors_after_resample(self):
        rng = T.Rng(0)
        base = make_blob_dataset(2, 50, 4, rng)
        with pytest.raises(ValueError, match="after resampling"):
            partition_dirichlet(base, 8, 1e-15, rng)

    def test_fixed_seed_assignment_is_byte_identical(self):
        def build():
            rng = T.Rng(3)
            base = make_blob_dataset(4, 50, 8, rng)
            return partition_dirichlet(base, 8, 0.1, rng)

        a, b = build(), build()
        assert a.metadata["label_counts"] == b.metadata["label_counts"]
        for ca, cb in zip(a.clients, b.clients):
            assert ca._data.x_train.tobytes() == cb._data.x_train.tobytes()
            assert ca._data.y_train.tobytes() == cb._data.y_train.tobytes()

    def test_every_client_has_train_and_test_data(self):
        rng = T.Rng(3)
        base = make_blob_dataset(4, 50, 8, rng)
        task = partition_dirichlet(base, 8, 0.1, rng)
        for client in task.clients:
            assert client.num_train_samples >= 1
            assert len(client._data.x_test) >= 1

    def test_nonpositive_alpha_rejected(self):
        with pytest.raises(ValueError, match="alpha"):
            partition_dirichlet((np.zeros((4, 2)), np.array([0, 0, 1, 1])), 2, 0.0, T.Rng(0))


class TestSampling:
    def test_sample_is_sorted_distinct_and_right_sized(self):
        rng = T.Rng(5)
        for _ in range(50):
            s = sample_clients(rng, 10, 4)
            assert len(s) == 4 == len(set(s.tolist()))
            assert (np.diff(s) > 0).all()

    def test_full_participation_is_all_clients(self):
        s = sample_clients(T.Rng(1), 7, 7)
        assert s.tolist() == list(range(7))

    def test_oversized_request_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            sample_clients(T.Rng(1), 3, 4)

    def test_long_run_frequencies_within_binomial_bounds(self):
        rng = T.Rng(17)
        n, k, t = 10, 3, 2000
        counts = np.zeros(n)
        for _ in range(t):
            counts[sample_clients(rng, n, k)] += 1
        p = k / n
        sigma = np.sqrt(t * p * (1 - p))
        assert np.abs(counts - t * p).max() < 3 * sigma


class TestRunRound:
    def test_zero_local_steps_leaves_server_untouched(self):
        task, model = tiny_setup()
        cfg = FederationConfig(
            rounds=1, clients_per_round=3, local_steps=0, client_lr=0.01,
            batch_size=8, server_weight_decay=0.0, seed=0,
        )
        before = {n: t.value.copy() for n, t in model.named_parameters()}
        state = T.AdamState.for_params(model.parameters())
        record = run_round(model, task.clients, cfg, T.Rng(0), state, 0)
        assert record.server_loss == 0.0
        for name, tensor in model.named_parameters():
            assert np.array_equal(before[name], tensor.value)

    def test_full_participation_samples_everyone(self):
        task, model = tiny_setup()
        cfg = FederationConfig(rounds=1, clients_per_round=6, local_steps=1,
                               batch_size=8, seed=0)
        state = T.AdamState.for_params(model.parameters())
        record = run_round(model, task.clients, cfg, T.Rng(0), state, 0)
        assert record.sampled == tuple(range(6))

    def test_round_record_aligns_and_loss_nonnegative(self):
        task, model = tiny_setup()
        cfg = FederationConfig(rounds=1, clients_per_round=3, local_steps=2,
                               batch_size=8, seed=0)
        state = T.AdamState.for_params(model.parameters())
        record = run_round(model, task.clients, cfg, T.Rng(0), state, 0)
        assert len(record.theta_pred) == len(record.theta_opt) == 3
        assert record.server_loss > 0.0
        for mats in record.theta_pred + record.theta_opt:
            assert [m.shape for m in mats] == [shape for _, shape in SPEC.layers]

    def test_fixed_seed_rounds_are_identical(self):
        def one():
            task, model = tiny_setup()
            cfg = FederationConfig(rounds=1, clients_per_round=3, local_steps=3,
                                   batch_size=8, seed=9)
            state = T.AdamState.for_params(model.parameters())
            return run_round(model, task.clients, cfg, T.Rng(9), state, 0), model

        ra, ma = one()
        rb, mb = one()
        assert ra.sampled == rb.sampled
        assert ra.server_loss == rb.server_loss
        for a, b in zip(ra.theta_opt, rb.theta_opt):
            for x, y in zip(a, b):
                assert np.array_equal(x, y)
        for (_, ta), (_, tb) in zip(ma.named_parameters(), mb.named_parameters()):
            assert np.array_equal(ta.value, tb.value)

    def test_parallel_client_updates_match_serial(self, monkeypatch):
        def one():
            task, model = tiny_setup()
            cfg = FederationConfig(rounds=1, clients_per_round=4, local_steps=5,
                                   batch_size=8, seed=3)
            state = T.AdamState.for_params(model.parameters())
            return run_round(model, task.clients, cfg, T.Rng(3), state, 0)

        monkeypatch.setenv("SHNFED_THREADS", "1")
        serial = one()
        monkeypatch.setenv("SHNFED_THREADS", "4")
        threaded = one()
        assert serial.server_loss == threaded.server_loss
        for a, b in zip(serial.theta_opt, threaded.theta_opt):
            for x, y in zip(a, b):
                assert np.array_equal(x, y)


class TestEvaluation:
    def test_identical_clients_have_zero_sigma(self):
        rng = T.Rng(2)
        x = rng.gen.normal(size=(10, 3))
        y = rng.gen.normal(size=(10, 1))
        data = ClientData(x, y, x, y)
        clients = (
            Client(0, data, "mse", forward=linear_forward),
            Client(1, data, "mse", forward=linear_forward),
        )
        theta = [rng.gen.normal(size=(3, 1))]
        summary = evaluate_param_sets({0: theta, 1: theta}, clients)
        assert summary.sigma == 0.0

    def test_known_losses_average_exactly(self):
        x = np.zeros((4, 2))
        mk = lambda cid, level: Client(
            cid,
            ClientData(x, np.full((4, 1), level), x, np.full((4, 1), level)),
            "mse",
            forward=linear_forward,
        )
        clients = (mk(0, 1.0), mk(1, np.sqrt(3.0)))
        theta = [np.zeros((2, 1))]
        summary = evaluate_param_sets({0: theta, 1: theta}, clients)
        assert summary.per_client[0] == pytest.approx(1.0, abs=1e-12)
        assert summary.per_client[1] == pytest.approx(3.0, abs=1e-12)
        assert summary.mu == pytest.approx(2.0, abs=1e-12)

    def test_personalized_eval_matches_flat_reference_loop(self):
        task, model = tiny_setup()
        summary = evaluate_personalized(model, task.clients)
        ids = np.arange(len(task.clients))
        with T.no_grad():
            outs = model.generate(ids)
        for i, client in enumerate(task.clients):
            mats = model.client_parameters(outs, i)
            assert summary.per_client[client.client_id] == client.evaluate(mats)
        vals = [summary.per_client[c.client_id] for c in task.clients]
        assert summary.mu == pytest.approx(np.mean(vals), abs=1e-15)
        assert summary.sigma == pytest.approx(np.std(vals), abs=1e-15)
        assert len(summary.per_client) == len(task.clients)


class TestRunTraining:
    def cfg(self, **kw):
        base = dict(rounds=6, clients_per_round=3, local_steps=3, client_lr=0.02,
                    batch_size=8, eval_interval=3, seed=21)
        base.update(kw)
        return FederationConfig(**base)

    def test_metrics_schema_and_cadence(self):
        task, model = tiny_setup()
        result = run_training(model, task.clients, self.cfg(), metric_name=task.metric)
        rounds_logged = sorted({r[0] for r in result.metrics})
        assert rounds_logged == [3, 6]
        per_eval = len(task.clients) * 2  # train and test splits
        assert len(result.metrics) == 2 * per_eval
        for r, cid, split, name, value in result.metrics:
            assert split in ("train", "test")
            assert name == "mse"
            assert np.isfinite(value)

    def test_zero_rounds_evaluates_untrained_model(self):
        task, model = tiny_setup()
        before = {n: t.value.copy() for n, t in model.named_parameters()}
        result = run_training(model, task.clients, self.cfg(rounds=0), metric_name=task.metric)
        assert sorted({r[0] for r in result.metrics}) == [0]
        for name, tensor in model.named_parameters():
            assert np.array_equal(before[name], tensor.value)

    def test_training_reduces_server_loss(self):
        task, model = tiny_setup()
        result = run_training(
            model, task.clients, self.cfg(rounds=40, eval_interval=40), metric_name=task.metric
        )
        first = np.mean(result.server_losses[:5])
        last = np.mean(result.server_losses[-5:])
        assert last < first

    def test_determinism_across_runs(self):
        def one():
            task, model = tiny_setup()
            return run_training(model, task.clients, self.cfg(), metric_name=task.metric)

        a, b = one(), one()
        assert a.metrics == b.metrics
        assert a.server_losses == b.server_losses
        assert np.array_equal(a.embeddings.matrix, b.embeddings.matrix)

    def test_resume_from_checkpoint_matches_uninterrupted(self, tmp_path):
        task_a, model_a = tiny_setup()
        full = run_training(model_a, task_a.clients, self.cfg(), metric_name=task_a.metric)

        task_b, model_b = tiny_setup()
        ckpt = tmp_path / "mid.json"
        part1 = run_training(
            model_b, task_b.clients, self.cfg(rounds=3), metric_name=task_b.metric,
            checkpoint_path=ckpt,
        )
        part2 = run_training(
            model_b, task_b.clients, self.cfg(), metric_name=task_b.metric,
            checkpoint=load_checkpoint(ckpt),
        )
        assert part2.rounds_run == 3
        assert part1.metrics + part2.metrics == full.metrics
        for (na, ta), (nb, tb) in zip(model_a.named_parameters(), model_b.named_parameters()):
            assert na == nb
            assert ta.value.tobytes() == tb.value.tobytes()
        assert full.final_eval.per_client == part2.final_eval.per_client

        path_a = tmp_path / "full.csv"
        path_b = tmp_path / "split.csv"
        write_metrics_csv(path_a, full.metrics)
        write_metrics_csv(path_b, part1.metrics)
        write_metrics_csv(path_b, part2.metrics, append=True)
        assert path_a.read_bytes() == path_b.read_bytes()


class TestBaselines:
    def test_weighted_average_hand_example(self):
        avg = weighted_average([[np.array([[0.0]])], [np.array([[4.0]])]], [1, 3])
        assert avg[0][0, 0] == pytest.approx(3.0, abs=1e-15)

    def test_weighted_average_identical_updates_is_identity(self):
        mats = [np.arange(6.0).reshape(2, 3), np.ones((1, 3))]
        avg = weighted_average([mats, mats, mats], [4, 4, 4])
        for a, b in zip(avg, mats):
            assert np.max(np.abs(a - b)) < 1e-12

    def test_weighted_average_rejects_nonpositive_counts(self):
        with pytest.raises(ValueError, match="positive"):
            weighted_average([[np.zeros((1, 1))]], [0])

    def test_iid_fedavg_close_to_centralized_oracle(self):
        task = partition_clusters(6, 1, T.Rng(40), train_samples=40, test_samples=20)
        cfg = FederationConfig(rounds=300, clients_per_round=3, local_steps=30,
                               client_lr=0.1, batch_size=40, seed=40, eval_interval=100)
        _, summary, _ = fedavg_baseline(task.clients, SPEC, cfg)

        pool_x = np.vstack([c._data.x_train for c in task.clients])
        pool_y = np.vstack([c._data.y_train for c in task.clients])
        pooled = Client(0, ClientData(pool_x, pool_y, pool_x[:1], pool_y[:1]), "mse")
        budget = cfg.rounds * cfg.clients_per_round * cfg.local_steps
        theta = pooled.update(
            init_target_params(SPEC, T.Rng(cfg.seed)), budget, cfg.client_lr, cfg.batch_size, 123
        )
        central = evaluate_param_sets({c.client_id: theta for c in task.clients}, task.clients)
        assert abs(summary.mu - central.mu) <= 0.10 * central.mu

    def test_finetune_differs_from_global_and_runs(self):
        task = partition_clusters(4, 2, T.Rng(5), train_samples=20, test_samples=10)
        cfg = FederationConfig(rounds=10, clients_per_round=2, local_steps=5,
                               client_lr=0.05, batch_size=8, seed=5, eval_interval=10)
        _, plain, rows = fedavg_baseline(task.clients, SPEC, cfg, metric_name=task.metric)
        _, tuned, _ = fedavg_baseline(task.clients, SPEC, cfg, finetune=True,
                                      metric_name=task.metric)
        assert len(rows) == 4
        assert all(r[3] == "mse" for r in rows)
        assert tuned.mu != plain.mu

    def test_local_baseline_budget_and_output(self):
        captured = []

        class Spy(Client):
            def update(self, params, local_steps, lr, batch_size, seed):
                captured.append(local_steps)
                return super().update(params, local_steps, lr, batch_size, seed)

        task = partition_clusters(4, 2, T.Rng(6), train_samples=20, test_samples=10)
        clients = tuple(
            Spy(c.client_id, c._data, "mse") for c in task.clients
        )
        cfg = FederationConfig(rounds=6, clients_per_round=2, local_steps=10,
                               client_lr=0.05, batch_size=8, seed=6, eval_interval=6)
        params_by_client, summary = local_baseline(clients, SPEC, cfg)
        assert captured == [30, 30, 30, 30]  # ceil(10 * 2 * 6 / 4)
        assert set(params_by_client) == {0, 1, 2, 3}
        assert len(summary.per_client) == 4


class TestPrivacyShape:
    def test_client_public_surface_exposes_only_parameters_and_metrics(self):
        task, _ = tiny_setup()
        public = {a for a in dir(task.clients[0]) if not a.startswith("_")}
        assert public == {"client_id", "num_train_samples", "update", "evaluate"}

    def test_update_returns_fresh_arrays(self):
        task, _ = tiny_setup()
        theta = init_target_params(SPEC, T.Rng(1))
        out = task.clients[0].update(theta, 2, 0.01, 8, 0)
        for a, b in zip(theta, out):
            assert a is not b
            assert not np.shares_memory(a, b)


class TestMetricsFiles:
    def test_round_trip(self, tmp_path):
        rows = [(3, 0, "test", "mse", 0.125), (3, 1, "train", "mse", 1.0 / 3.0)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        assert read_metrics_csv(path) == rows

    def test_header_is_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="unexpected metrics header"):
            read_metrics_csv(path)

    def test_float_repr_round_trip_is_exact(self, tmp_path):
        value = 0.1 + 0.2  # not exactly representable in decimal
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, [(1, 0, "test", "mse", value)])
        assert read_metrics_csv(path)[0][4] == value
