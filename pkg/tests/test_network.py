"""Whole-forecaster tests: assembly, invariants, serialization.

Parameter-count oracles are hand sums of the shapes each block owns;
behavioral oracles lean on exact invariants (node relabeling, period
causality) that hold bit for bit by construction.
"""

import json
import warnings

import numpy as np
import pytest

from taegcn.autodiff import Tensor
from taegcn.data import SeriesDataset
from taegcn.errors import ConfigError, ContractError, DataError, ShapeError
from taegcn.graph_learner import extract_static_features
from taegcn.network import (
    ModelConfig,
    TaegcnNetwork,
    load_checkpoint,
    masked_mae_loss,
    save_checkpoint,
)


def toy_config(**overrides):
    base = dict(layers=2, windows=(2, 3), heads=2, hidden_channels=8,
                state_dim=4, period=3, input_length=6, horizon=2,
                skip_channels=8, head_hidden=16, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def toy_series(n_nodes=3, steps=24, channels=1, seed=11):
    rng = np.random.default_rng(seed)
    return SeriesDataset(values=rng.uniform(-1.0, 1.0, size=(n_nodes, steps, channels)),
                         node_ids=[f"n{i}" for i in range(n_nodes)],
                         timestamps=list(range(0, steps * 300, 300)))


def ready_network(variant="full", n_nodes=3, **overrides):
    cfg = toy_config(**overrides)
    net = TaegcnNetwork(cfg, in_channels=1, variant=variant)
    net.set_static_features(extract_static_features(toy_series(n_nodes=n_nodes)))
    return net


class TestModelConfig:
    def test_defaults_are_valid(self):
        cfg = ModelConfig()
        assert cfg.layers == 4 and cfg.windows == (1, 3, 6, 12)

    def test_hidden_not_divisible_by_heads(self):
        with pytest.raises(ConfigError, match="divisible"):
            toy_config(hidden_channels=9)

    def test_input_length_not_divisible_by_period(self):
        with pytest.raises(ConfigError, match="period"):
            toy_config(input_length=7)

    def test_window_count_must_match_layers(self):
        with pytest.raises(ConfigError, match="windows"):
            toy_config(windows=(1, 2, 3))

    def test_per_head_window_count(self):
        cfg = toy_config(windows=(1, 4), window_assignment="per_head")
        assert cfg.head_windows(0) == (1, 4) == cfg.head_windows(1)
        with pytest.raises(ConfigError):
            toy_config(windows=(1, 2, 3), window_assignment="per_head")

    def test_per_layer_windows_replicate_across_heads(self):
        cfg = toy_config()
        assert cfg.head_windows(0) == (2, 2)
        assert cfg.head_windows(1) == (3, 3)

    def test_nonpositive_sizes_rejected(self):
        for field, value in [("layers", 0), ("heads", 0), ("horizon", 0),
                             ("period", -1), ("head_hidden", 0)]:
            with pytest.raises(ConfigError, match=field):
                toy_config(**{field: value})

    def test_dict_round_trip(self):
        cfg = toy_config(window_assignment="per_head", windows=(1, 5))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        raw = toy_config().to_dict()
        raw["dropout"] = 0.5
        with pytest.raises(ConfigError, match="dropout"):
            ModelConfig.from_dict(raw)


class TestConstruction:
    def test_parameter_count_full(self):
        # hand sum for layers=2, c=8, d=4, skip=8, head_hidden=16, horizon=2,
        # heads=2, in_channels=1:
        #   input proj 1*8+8=16, static proj 7*4+4=32
        #   per block: attention 5*64+8=328, gru 3*((8+4)*4+4)=156,
        #              pair mlps 2*(32+4+4+1)=82, gcn 2*64+8=136, skip 8*8+8=72
        #   head 8*16+16+16*2+2=178
        net = TaegcnNetwork(toy_config(), in_channels=1)
        assert net.store.parameter_count() == 16 + 32 + 2 * 774 + 178 == 1774

    def test_parameter_count_no_attention(self):
        # attention (328) swapped for a two-tap conv 2*64+8=136 per block
        net = TaegcnNetwork(toy_config(), in_channels=1, variant="no_attention")
        assert net.store.parameter_count() == 16 + 32 + 2 * 582 + 178 == 1390

    def test_parameter_count_static_graph(self):
        # gru (156) dropped per block
        net = TaegcnNetwork(toy_config(), in_channels=1, variant="static_graph")
        assert net.store.parameter_count() == 16 + 32 + 2 * 618 + 178 == 1462

    def test_same_seed_same_weights(self):
        a = TaegcnNetwork(toy_config(), in_channels=1)
        b = TaegcnNetwork(toy_config(), in_channels=1)
        for (name_a, pa), (name_b, pb) in zip(a.store.items(), b.store.items()):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_different_weights(self):
        a = TaegcnNetwork(toy_config(seed=0), in_channels=1)
        b = TaegcnNetwork(toy_config(seed=1), in_channels=1)
        assert not np.array_equal(a.store["head.w1"].data, b.store["head.w1"].data)

    def test_static_projection_is_shared(self):
        net = TaegcnNetwork(toy_config(), in_channels=1)
        assert net.blocks[0].scorer.static_weight is net.blocks[1].scorer.static_weight
        assert "static_proj.weight" in net.store
        assert not any(name.endswith("scorer.static_weight") for name in net.store.names())

    def test_bad_variant_rejected(self):
        with pytest.raises(ConfigError, match="variant"):
            TaegcnNetwork(toy_config(), in_channels=1, variant="fancy")

    def test_target_channel_out_of_range(self):
        with pytest.raises(ConfigError, match="target_channel"):
            TaegcnNetwork(toy_config(target_channel=1), in_channels=1)


class TestForward:
    def test_shapes_batched_and_single(self):
        net = ready_network()
        rng = np.random.default_rng(0)
        batch = rng.uniform(-1, 1, size=(5, 3, 6, 1))
        out = net.forward(Tensor(batch))
        assert out.shape == (5, 3, 2)
        single = net.forward(Tensor(batch[2]))
        assert single.shape == (3, 2)
        np.testing.assert_array_equal(single.data, out.data[2])

    def test_forward_is_deterministic(self):
        net = ready_network()
        x = np.random.default_rng(1).uniform(-1, 1, size=(2, 3, 6, 1))
        np.testing.assert_array_equal(net.forward(Tensor(x)).data,
                                      net.forward(Tensor(x)).data)

    def test_requires_static_features(self):
        net = TaegcnNetwork(toy_config(), in_channels=1)
        with pytest.raises(ContractError, match="static"):
            net.forward(Tensor(np.zeros((3, 6, 1))))

    def test_wrong_shapes_rejected(self):
        net = ready_network()
        for bad in [(3, 5, 1), (2, 6, 1), (3, 6, 2), (3, 6)]:
            with pytest.raises(ShapeError):
                net.forward(Tensor(np.zeros(bad)))

    def test_node_relabeling_equivariant_bitwise(self):
        rng = np.random.default_rng(2)
        series = toy_series(n_nodes=5)
        x = rng.uniform(-1, 1, size=(5, 6, 1))
        perm = rng.permutation(5)

        cfg = toy_config()
        net = TaegcnNetwork(cfg, in_channels=1)
        feats = extract_static_features(series)

        net.set_static_features(feats)
        plain = net.forward(Tensor(x)).data
        net.set_static_features(feats[perm])
        shuffled = net.forward(Tensor(x[perm])).data
        np.testing.assert_array_equal(shuffled, plain[perm])

    def test_adjacency_periods_causal(self):
        # the first period's graph is pooled from steps 0..2 only, so
        # corrupting the final period cannot move it
        net = ready_network()
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(3, 6, 1))
        _, before = net.forward(Tensor(x), return_adjacency=True)
        bumped = x.copy()
        bumped[:, 3:, :] += rng.uniform(0.5, 1.0, size=(3, 3, 1))
        _, after = net.forward(Tensor(bumped), return_adjacency=True)
        for blk_before, blk_after in zip(before, after):
            np.testing.assert_array_equal(blk_before[0].data, blk_after[0].data)
        assert not np.array_equal(before[0][1].data, after[0][1].data)

    def test_adjacency_report_layout(self):
        net = ready_network()
        x = np.random.default_rng(4).uniform(-1, 1, size=(3, 6, 1))
        _, adjs = net.forward(Tensor(x), return_adjacency=True)
        assert len(adjs) == 2 and all(len(per) == 2 for per in adjs)
        for per in adjs:
            for a in per:
                assert a.shape == (3, 3) and (a.data >= 0).all()

    def test_static_graph_uses_one_adjacency(self):
        net = ready_network(variant="static_graph")
        x = np.random.default_rng(5).uniform(-1, 1, size=(3, 6, 1))
        _, adjs = net.forward(Tensor(x), return_adjacency=True)
        assert all(len(per) == 1 for per in adjs)
        # frozen graph ignores the window contents entirely
        _, again = net.forward(Tensor(x + 0.5), return_adjacency=True)
        np.testing.assert_array_equal(adjs[0][0].data, again[0][0].data)

    def test_no_attention_variant_runs(self):
        net = ready_network(variant="no_attention")
        x = np.random.default_rng(6).uniform(-1, 1, size=(4, 3, 6, 1))
        assert net.forward(Tensor(x)).shape == (4, 3, 2)


class TestMaskedMaeLoss:
    def test_hand_case(self):
        pred = Tensor(np.array([[1.0, 2.0]]))
        assert masked_mae_loss(pred, np.array([[2.0, 4.0]])).item() == 1.5

    def test_observed_mask_excludes(self):
        pred = Tensor(np.array([[1.0, 2.0]]))
        loss = masked_mae_loss(pred, np.array([[2.0, 4.0]]),
                               observed=np.array([[True, False]]))
        assert loss.item() == 1.0

    def test_marker_excludes(self):
        pred = Tensor(np.array([[1.0, 2.0, 3.0]]))
        loss = masked_mae_loss(pred, np.array([[0.0, 4.0, 0.0]]), missing_marker=0.0)
        assert loss.item() == 2.0

    def test_all_missing_warns_and_zeroes(self):
        pred = Tensor(np.array([[1.0]]))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loss = masked_mae_loss(pred, np.array([[0.0]]), missing_marker=0.0)
        assert loss.item() == 0.0
        assert any("missing" in str(w.message) for w in caught)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            masked_mae_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            masked_mae_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)),
                            observed=np.ones((2, 3), dtype=bool))

    def test_gradient_only_through_observed(self):
        pred = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        loss = masked_mae_loss(pred, np.array([[5.0, 2.5]]),
                               observed=np.array([[False, True]]))
        from taegcn.autodiff import backward
        backward(loss)
        np.testing.assert_array_equal(pred.grad, [[0.0, -1.0]])


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        net = ready_network()
        x = np.random.default_rng(7).uniform(-1, 1, size=(3, 6, 1))
        before = net.forward(Tensor(x)).data
        path = tmp_path / "model.json"
        save_checkpoint(path, net, state={"note": "hello", "values": [1.5, 2.25]})

        loaded, state = load_checkpoint(path)
        assert state == {"note": "hello", "values": [1.5, 2.25]}
        assert loaded.variant == net.variant
        assert loaded.config == net.config
        for (name, original), (_, restored) in zip(net.store.items(), loaded.store.items()):
            np.testing.assert_array_equal(original.data, restored.data, err_msg=name)
        np.testing.assert_array_equal(loaded.forward(Tensor(x)).data, before)

    def test_round_trip_without_static_features(self, tmp_path):
        net = TaegcnNetwork(toy_config(), in_channels=1)
        path = tmp_path / "bare.json"
        save_checkpoint(path, net)
        loaded, state = load_checkpoint(path)
        assert state == {}
        with pytest.raises(ContractError):
            loaded.forward(Tensor(np.zeros((3, 6, 1))))

    def test_variant_restored(self, tmp_path):
        net = ready_network(variant="no_attention")
        path = tmp_path / "ablate.json"
        save_checkpoint(path, net)
        loaded, _ = load_checkpoint(path)
        assert loaded.variant == "no_attention"
        assert loaded.store.parameter_count() == net.store.parameter_count()

    def test_unreadable_file_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(DataError, match="cannot read"):
            load_checkpoint(path)
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.json")

    def test_parameters_stored_as_shape_and_flat_values(self, tmp_path):
        net = ready_network()
        path = tmp_path / "model.json"
        save_checkpoint(path, net)
        payload = json.loads(path.read_text())
        entry = payload["params"]["head.w1"]
        assert entry["shape"] == [8, 16]
        assert len(entry["values"]) == 128
        assert all(isinstance(v, float) for v in entry["values"])

    def test_malformed_parameter_entry_rejected(self, tmp_path):
        net = ready_network()
        path = tmp_path / "model.json"
        save_checkpoint(path, net)
        payload = json.loads(path.read_text())
        payload["params"]["head.w1"] = [1.0, 2.0]
        path.write_text(json.dumps(payload))
        with pytest.raises(DataError, match="head.w1"):
            load_checkpoint(path)

    def test_missing_key_rejected(self, tmp_path):
        net = ready_network()
        path = tmp_path / "model.json"
        save_checkpoint(path, net)
        payload = json.loads(path.read_text())
        del payload["params"]
        path.write_text(json.dumps(payload))
        with pytest.raises(DataError, match="params"):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, tmp_path):
        net = ready_network()
        path = tmp_path / "model.json"
        save_checkpoint(path, net)
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(DataError, match="99"):
            load_checkpoint(path)
