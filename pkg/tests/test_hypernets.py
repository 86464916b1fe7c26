"""Tests for the hypernetwork variants and their shared building blocks."""

import json

import numpy as np
import pytest

import shnfed.tensor as T
from shnfed.hypernets import (
    EmbeddingNet,
    HyperHead,
    HyperNetModel,
    ModelConfig,
    TargetSpec,
    gcn_layer,
    load_checkpoint,
    mlp_spec,
    normalized_adjacency,
    representation_row_std,
    restore_checkpoint,
    save_checkpoint,
)
from shnfed.relation_graph import EmbeddingMatrix, build_knn_graph
from shnfed.sheaf import Graph

from gradcheck import check_gradients


def relation_graph(n=12, dim=16, k=4, seed=7):
    rng = T.Rng(seed)
    rows = rng.gen.normal(size=(n, dim))
    return build_knn_graph(EmbeddingMatrix(tuple(range(n)), rows), k)


def small_model(variant, seed=3, num_clients=8, layers=2, **overrides):
    crg = relation_graph(n=num_clients, dim=6, k=3, seed=11)
    kwargs = dict(
        embed_dim=6,
        encoder_hidden=5,
        encoder_layers=layers,
        stalk_dim=2,
        head_hidden=8,
    )
    kwargs.update(overrides)
    cfg = ModelConfig(variant=variant, num_clients=num_clients, **kwargs)
    spec = mlp_spec(3, 4, 2)
    rng = T.Rng(seed)
    embeddings = None
    if not cfg.embeddings_learned:
        embeddings = T.Rng(seed + 100).gen.normal(size=(num_clients, 6))
    model = HyperNetModel(
        cfg,
        spec,
        rng,
        graph=crg.graph,
        adjacency=crg.adjacency,
        embeddings=embeddings,
    )
    return model, crg


class TestTargetSpec:
    def test_regression_default_has_354_parameters(self):
        assert mlp_spec(8, 32, 2).total_parameters == 354

    def test_sizes_match_shapes(self):
        spec = mlp_spec(3, 4, 2)
        assert spec.sizes() == [12, 4, 8, 2]
        assert spec.total_parameters == 26

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            TargetSpec(layers=(("w", (2, 2)), ("w", (3, 3))))

    def test_invalid_shape_rejected(self):
        with pytest.raises(ValueError, match="invalid shape"):
            TargetSpec(layers=(("w", (0, 2)),))


class TestEmbeddingNet:
    def test_shape_and_determinism(self):
        a = EmbeddingNet(10, 8, 4, T.Rng(5)).forward()
        b = EmbeddingNet(10, 8, 4, T.Rng(5)).forward()
        assert a.shape == (10, 4)
        assert np.array_equal(a.value, b.value)

    def test_loss_on_one_row_leaves_other_onehot_rows_untouched(self):
        net = EmbeddingNet(6, 8, 4, T.Rng(5))
        z = net.forward()
        row = T.gather_rows(z, np.array([2]))
        T.backward(T.mse_loss(row, np.zeros((1, 4))))
        g = net.w1.grad
        assert g is not None
        assert np.linalg.norm(g[2]) > 0
        for other in (0, 1, 3, 4, 5):
            assert np.array_equal(g[other], np.zeros(8))


class TestGcnLayer:
    def test_matches_dense_oracle(self):
        rng = T.Rng(1)
        n, f, h = 5, 4, 3
        graph = Graph.from_pairs(n, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 4)])
        adj = graph.adjacency() + np.eye(n)
        x = T.Tensor(rng.gen.normal(size=(n, f)))
        w = T.Tensor(rng.gen.normal(size=(f, h)))

        out = gcn_layer(adj, x, w)

        deg = adj.sum(axis=1)
        norm = np.diag(deg**-0.5) @ adj @ np.diag(deg**-0.5)
        expected = np.tanh(norm @ x.value @ w.value)
        assert np.max(np.abs(out.value - expected)) < 1e-10

    def test_identity_adjacency_reduces_to_dense_layer(self):
        rng = T.Rng(2)
        x = T.Tensor(rng.gen.normal(size=(6, 4)))
        w = T.Tensor(rng.gen.normal(size=(4, 4)))
        out = gcn_layer(np.eye(6), x, w)
        assert np.array_equal(out.value, np.tanh(x.value @ w.value))

    def test_zero_degree_rejected(self):
        adj = np.zeros((3, 3))
        adj[0, 0] = 1.0
        with pytest.raises(ValueError, match="self-loops"):
            normalized_adjacency(adj)

    def test_gradients_match_finite_differences(self):
        rng = T.Rng(3)
        adj = Graph.from_pairs(4, [(0, 1), (1, 2), (2, 3)]).adjacency() + np.eye(4)
        x = T.Tensor(rng.gen.normal(size=(4, 3)), requires_grad=True)
        w = T.Tensor(rng.gen.normal(size=(3, 3)), requires_grad=True)
        target = rng.gen.normal(size=(4, 3))

        def loss():
            return T.mse_loss(gcn_layer(adj, x, w, "elu"), target)

        assert check_gradients(loss, [x, w]) < 1e-5


class TestHyperHead:
    def test_output_shapes_follow_spec(self):
        spec = mlp_spec(3, 4, 2)
        head = HyperHead(5, 8, spec, T.Rng(0))
        outs = head.forward(T.Tensor(np.ones((6, 5))))
        assert [o.shape for o in outs] == [(6, 12), (6, 4), (6, 8), (6, 2)]

    def test_width_mismatch_rejected(self):
        head = HyperHead(5, 8, mlp_spec(3, 4, 2), T.Rng(0))
        with pytest.raises(T.ShapeError, match="head input width"):
            head.forward(T.Tensor(np.ones((6, 4))))

    def test_gradients_match_finite_differences(self):
        rng = T.Rng(4)
        spec = TargetSpec(layers=(("a", (2, 3)), ("b", (1, 2))))
        head = HyperHead(3, 4, spec, T.Rng(4))
        z = T.Tensor(rng.gen.normal(size=(5, 3)), requires_grad=True)
        targets = [rng.gen.normal(size=(5, 6)), rng.gen.normal(size=(5, 2))]

        def loss():
            outs = head.forward(z)
            return T.mse_loss(T.concat_cols(outs), np.hstack(targets))

        params = [z] + [t for _, t in head.named_parameters()]
        assert check_gradients(loss, params) < 1e-4


class TestModelAssembly:
    def test_variants_produce_conserved_parameter_counts(self):
        for variant in ("hn", "ghn", "shn"):
            model, _ = small_model(variant)
            outs = model.generate(np.array([0, 3, 5]))
            assert [o.shape for o in outs] == [(3, 12), (3, 4), (3, 8), (3, 2)]
            assert sum(o.cols for o in outs) == model.spec.total_parameters
            mats = model.client_parameters(outs, 1)
            assert [m.shape for m in mats] == [(3, 4), (1, 4), (4, 2), (1, 2)]
            assert np.array_equal(mats[0].ravel(), outs[0].value[1])

    def test_construction_is_deterministic(self):
        for variant in ("hn", "ghn", "shn"):
            a, _ = small_model(variant, seed=9)
            b, _ = small_model(variant, seed=9)
            for (name_a, ta), (name_b, tb) in zip(a.named_parameters(), b.named_parameters()):
                assert name_a == name_b
                assert np.array_equal(ta.value, tb.value)
            assert np.array_equal(
                a.generate(np.arange(4))[0].value, b.generate(np.arange(4))[0].value
            )

    def test_graph_variants_require_graph_inputs(self):
        spec = mlp_spec(3, 4, 2)
        x = np.zeros((8, 6))
        with pytest.raises(ValueError, match="relation graph"):
            HyperNetModel(
                ModelConfig("ghn", 8, embed_dim=6), spec, T.Rng(0), embeddings=x
            )
        with pytest.raises(ValueError, match="relation graph"):
            HyperNetModel(
                ModelConfig("shn", 8, embed_dim=6), spec, T.Rng(0), embeddings=x
            )

    def test_frozen_variant_requires_embeddings(self):
        crg = relation_graph(n=8, dim=6)
        with pytest.raises(ValueError, match="embedding matrix"):
            HyperNetModel(
                ModelConfig("ghn", 8, embed_dim=6),
                mlp_spec(3, 4, 2),
                T.Rng(0),
                adjacency=crg.adjacency,
            )

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown variant"):
            ModelConfig("gat", 8)

    def test_embedding_matrix_export(self):
        model, _ = small_model("hn")
        emb = model.embedding_matrix()
        assert emb.client_ids == tuple(range(8))
        assert emb.matrix.shape == (8, 6)
        with T.no_grad():
            assert np.array_equal(emb.matrix, model.embedding_net.forward().value)

    def test_plain_variant_equals_zero_layer_sheaf_with_padded_identity_lift(self):
        # With a frozen embedding matrix, no diffusion layers, a lift that
        # pads the embedding with zero columns, and head weights that ignore
        # the padding, the sheaf variant reproduces the plain variant.
        n, f, d, hidden = 8, 6, 2, 4
        hn, _ = small_model("hn", seed=5, learn_embeddings=False)
        shn, _ = small_model("shn", seed=6, layers=0, encoder_hidden=hidden)

        shn.fixed_embeddings[:] = hn.fixed_embeddings
        lift = np.zeros((f, d * hidden))
        lift[:, :f] = np.eye(f)
        shn.encoder.projection.value = lift
        for hn_block, shn_block in zip(hn.head.blocks, shn.head.blocks):
            _, w1_hn, b1_hn, w2_hn, b2_hn = hn_block
            _, w1_shn, b1_shn, w2_shn, b2_shn = shn_block
            w1_shn.value[:] = 0.0
            w1_shn.value[:f] = w1_hn.value
            b1_shn.value[:] = b1_hn.value
            w2_shn.value[:] = w2_hn.value
            b2_shn.value[:] = b2_hn.value

        ids = np.arange(n)
        outs_hn = hn.generate(ids)
        outs_shn = shn.generate(ids)
        for a, b in zip(outs_hn, outs_shn):
            assert np.max(np.abs(a.value - b.value)) < 1e-10

    def test_zero_update_weights_make_sheaf_layers_identity(self):
        model, _ = small_model("shn", layers=3)
        for _, w_left, w_right in model.encoder.layers:
            w_left.value[:] = 0.0
            w_right.value[:] = 0.0
        x = T.Tensor(model.fixed_embeddings)
        with T.no_grad():
            z = model.encoder.forward(x)
            lift = T.matmul(x, model.encoder.projection)
        assert np.array_equal(z.value, lift.value)

    def test_mixing_sends_gradients_to_every_embedding_row(self):
        # A loss on one sampled client must reach the embedding rows of every
        # client within message-passing range (here: the whole graph).
        model, crg = small_model("ghn", layers=3, learn_embeddings=True)
        outs = model.generate(np.array([0]))
        T.backward(T.mse_loss(T.concat_cols(outs), np.zeros((1, 26))))
        g = model.embedding_net.w1.grad
        assert g is not None
        assert all(np.linalg.norm(g[i]) > 0 for i in range(model.cfg.num_clients))


class TestOverSmoothingDiagnostic:
    def test_deep_graph_convolutions_collapse_but_sheaf_diffusion_does_not(self):
        crg = relation_graph(n=20, dim=16, k=6, seed=13)
        x = T.Rng(17).gen.normal(size=(20, 16))

        def row_std(variant, layers):
            cfg = ModelConfig(
                variant,
                20,
                embed_dim=16,
                encoder_hidden=32,
                encoder_layers=layers,
                stalk_dim=2,
                learn_embeddings=False,
            )
            model = HyperNetModel(
                cfg,
                mlp_spec(3, 4, 2),
                T.Rng(23),
                graph=crg.graph,
                adjacency=crg.adjacency,
                embeddings=x,
            )
            with T.no_grad():
                return representation_row_std(model.client_representations().value)

        ghn_shallow, ghn_deep = row_std("ghn", 2), row_std("ghn", 32)
        shn_shallow, shn_deep = row_std("shn", 2), row_std("shn", 32)
        assert ghn_deep < 0.1 * ghn_shallow
        assert shn_deep > 0.5 * shn_shallow


class TestEndToEndGradients:
    def test_sheaf_variant_finite_difference_smoke(self):
        model, _ = small_model("shn", seed=21, layers=2)
        ids = np.array([1, 4, 6])
        rng = T.Rng(55)
        targets = rng.gen.normal(size=(3, model.spec.total_parameters))

        def loss():
            return T.mse_loss(T.concat_cols(model.generate(ids)), targets)

        named = dict(model.named_parameters())
        probe = [
            named["enc.proj"],
            named["enc.layer0.phi.w"],
            named["enc.layer1.w_left"],
            named["enc.layer1.w_right"],
            named["head.linear0.weight.w1"],
            named["head.linear1.bias.b2"],
        ]
        assert check_gradients(loss, probe) < 1e-3

    def test_graph_variant_finite_difference_smoke(self):
        model, _ = small_model("ghn", seed=22, layers=2, learn_embeddings=True)
        ids = np.array([0, 2])
        targets = T.Rng(56).gen.normal(size=(2, model.spec.total_parameters))

        def loss():
            return T.mse_loss(T.concat_cols(model.generate(ids)), targets)

        named = dict(model.named_parameters())
        probe = [named["embed.w1"], named["enc.layer0.w"], named["head.linear0.bias.w2"]]
        assert check_gradients(loss, probe) < 1e-4


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model_a, _ = small_model("shn", seed=31)
        model_b, _ = small_model("shn", seed=32)
        params = model_a.parameters()
        state = T.AdamState.for_params(params)
        grads = [np.full(p.value.shape, 0.25) for p in params]
        T.adam_step(params, grads, state, lr=0.01)
        rng = T.Rng(99)
        rng.gen.normal(size=4)

        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model_a, 7, rng_state=rng.state(), adam_state=state)
        doc = load_checkpoint(path)

        state_b = T.AdamState.for_params(model_b.parameters())
        assert restore_checkpoint(doc, model_b, state_b) == 7
        for (na, ta), (nb, tb) in zip(model_a.named_parameters(), model_b.named_parameters()):
            assert na == nb
            assert ta.value.tobytes() == tb.value.tobytes()
        assert state_b.step == state.step
        for ma, mb in zip(state.m, state_b.m):
            assert ma.tobytes() == mb.tobytes()

        rng_b = T.Rng(1)
        rng_b.set_state(doc["rng_state"])
        assert np.array_equal(rng.gen.normal(size=8), rng_b.gen.normal(size=8))

        path2 = tmp_path / "again.json"
        save_checkpoint(path2, model_b, 7, rng_state=doc["rng_state"], adam_state=state_b)
        assert path.read_bytes() == path2.read_bytes()

    def test_variant_mismatch_rejected(self, tmp_path):
        model, _ = small_model("hn", seed=1)
        other, _ = small_model("ghn", seed=1)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model, 0)
        with pytest.raises(ValueError, match="variant"):
            restore_checkpoint(load_checkpoint(path), other)

    def test_architecture_mismatch_rejected(self, tmp_path):
        model, _ = small_model("shn", seed=1, layers=2)
        other, _ = small_model("shn", seed=1, layers=3)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model, 0)
        with pytest.raises(ValueError, match="parameter names"):
            restore_checkpoint(load_checkpoint(path), other)

    def test_unrecognized_file_rejected(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text(json.dumps({"format": "something-else"}))
        with pytest.raises(ValueError, match="not a recognized checkpoint"):
            load_checkpoint(path)

    def test_checkpoint_is_valid_json_with_descriptive_fields(self, tmp_path):
        model, _ = small_model("ghn", seed=2)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model, 12, extra={"note": "stage-two"})
        doc = json.loads(path.read_text())
        assert doc["variant"] == "ghn"
        assert doc["round"] == 12
        assert doc["extra"] == {"note": "stage-two"}
        names = [p["name"] for p in doc["params"]]
        assert "head.linear0.weight.w1" in names
        assert all(set(p) == {"name", "shape", "data"} for p in doc["params"])
