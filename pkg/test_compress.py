import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_tiny_spec
from src import ops
from src.compress import (_Tally, backbone_params, compression_report, count_params_flops, count_stats,
                          dense_conv_backbone_params, fine_tune, global_l1_masks, instrumented_stats,
                          prunable_weights, prune_global_l1, to_sparse_model)
from src.data_loader import ECGDataset
from src.errors import ShapeError
from src.model import BackboneConfig, LightX3ECG, ModelSpec, StageConfig
from src.training import TrainConfig


def make_medium_spec() -> ModelSpec:
    backbone = BackboneConfig(
        stem_kernel=7, stem_stride=2, stem_channels=16, stem_pool=True,
        stages=[StageConfig(blocks=1, out_ch=32, kernel=7, stride=1),
                StageConfig(blocks=1, out_ch=64, kernel=7, stride=2),
                StageConfig(blocks=1, out_ch=128, kernel=7, stride=2)],
        se_reduction=4,
    )
    return ModelSpec(backbone=backbone, n_classes=4, input_length=256, attention_hidden=64)


def toy_dataset(n=16):
    rng = np.random.default_rng(0)
    y = np.eye(3, dtype=bool)[np.arange(n) % 3]
    return ECGDataset(x=rng.normal(size=(n, 3, 64)).astype(np.float32), y=y, ids=[str(i) for i in range(n)],
                      classes=["a", "b", "c"], task="multi_class", leads=("I", "II", "V1"))


class TestMasks:
    def test_worked_example(self):
        masks = global_l1_masks({"w": np.array([0.1, -0.5, 0.01, 2.0, -0.03])}, 0.8)
        np.testing.assert_array_equal(masks["w"], [False, False, False, True, False])

    def test_rejects_bad_sparsity(self):
        for s in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ShapeError):
                global_l1_masks({"w": np.ones(4)}, s)

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)),
           arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)),
           st.floats(0.01, 0.99))
    def test_count_and_global_minimality(self, a, b, sparsity):
        masks = global_l1_masks({"a": a, "b": b}, sparsity)
        magnitudes = np.abs(np.concatenate([a, b]))
        keep = np.concatenate([masks["a"], masks["b"]])
        assert (~keep).sum() == int(np.floor(sparsity * magnitudes.size + 1e-9))
        if keep.any() and (~keep).any():
            assert magnitudes[~keep].max() <= magnitudes[keep].min()

    def test_layer_mode_prunes_each_tensor(self, rng):
        weights = {"small": rng.normal(0, 0.01, size=20), "large": rng.normal(0, 10.0, size=20)}
        masks = global_l1_masks(weights, 0.5, mode="layer")
        assert (~masks["small"]).sum() == 10 and (~masks["large"]).sum() == 10
        global_masks = global_l1_masks(weights, 0.5)
        assert not global_masks["small"].any()

    def test_prune_model_counts_and_idempotence(self, tiny_model):
        _, masks = prune_global_l1(tiny_model, 0.8)
        total = sum(m.size for m in masks.values())
        assert sum(int((~m).sum()) for m in masks.values()) == int(np.floor(0.8 * total + 1e-9))
        weights = prunable_weights(tiny_model)
        for name, mask in masks.items():
            assert not weights[name][~mask].any()
        before = {name: w.copy() for name, w in weights.items()}
        _, again = prune_global_l1(tiny_model, 0.8)
        for name in masks:
            np.testing.assert_array_equal(again[name], masks[name])
            np.testing.assert_array_equal(prunable_weights(tiny_model)[name], before[name])

    def test_bn_and_biases_untouched(self, tiny_model):
        names = set(prunable_weights(tiny_model))
        assert all(name.endswith("weight") for name in names)
        assert not any(".bn" in name or "bias" in name for name in names)


class TestFineTune:
    def cfg(self):
        return TrainConfig(epochs_total=2, epochs_cosine=2, batch_size=8, seed=0)

    def test_pruned_weights_stay_zero(self):
        model = LightX3ECG(make_tiny_spec(), seed=1)
        _, masks = prune_global_l1(model, 0.7)
        fine_tune(model, toy_dataset(), masks, self.cfg(), epochs=2, lr=1e-3, progress=False)
        weights = prunable_weights(model)
        for name, mask in masks.items():
            assert not weights[name][~mask].any()

    def test_zero_learning_rate_keeps_parameters(self):
        model = LightX3ECG(make_tiny_spec(), seed=1)
        _, masks = prune_global_l1(model, 0.5)
        before = {name: p.value.copy() for name, p in model.named_parameters()}
        fine_tune(model, toy_dataset(), masks, self.cfg(), epochs=1, lr=0.0, progress=False)
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.value, before[name])


class TestAccounting:
    def test_conv_example(self):
        tally = _Tally(1)
        tally.conv(4, 8, 3, 10, bias=True)
        assert tally.params == 104

    def test_fc_example(self):
        tally = _Tally(1)
        tally.fc(512, 4)
        assert tally.params == 2052
        assert tally.flops == 4096 + 4

    def test_fc_matches_instrumented(self, rng):
        with ops.count_flops() as counter:
            ops.fully_connected(rng.normal(size=(1, 512)), rng.normal(size=(4, 512)), np.zeros(4))
        assert counter.flops == 4096 + 4

    def test_dsconv_formula(self):
        assert ops.dsconv_param_count(64, 64, 15) == 5056
        assert ops.dsconv_param_count(3, 5, 7) == 3 * 7 + 3 * 5

    @pytest.mark.parametrize("spec_factory", [make_tiny_spec, make_medium_spec])
    def test_closed_form_equals_instrumented(self, spec_factory):
        spec = spec_factory()
        model = LightX3ECG(spec, seed=0)
        params, flops = count_params_flops(spec)
        measured = instrumented_stats(model)
        assert params == measured.params
        assert flops == measured.flops

    def test_batch_scales_flops(self):
        spec = make_tiny_spec()
        assert count_params_flops(spec, batch=4)[1] == 4 * count_params_flops(spec)[1]
        assert instrumented_stats(LightX3ECG(spec), batch=4).flops == 4 * count_params_flops(spec)[1]

    def test_default_config_near_reference_size(self):
        params, flops = count_params_flops(ModelSpec())
        assert 0.75 * 5.31e6 <= params <= 1.25 * 5.31e6
        assert flops > 1e9

    def test_separable_backbone_is_small(self):
        spec = ModelSpec()
        assert backbone_params(spec) <= 0.25 * dense_conv_backbone_params(spec)


class TestSizes:
    def test_sparse_checkpoint_ratio(self):
        model = LightX3ECG(make_medium_spec(), seed=0)
        original = model.clone()
        _, masks = prune_global_l1(model, 0.8)
        report = compression_report(original, model, masks)
        assert report.loc["pruned", "sparse_bytes"] <= 0.40 * report.loc["original", "dense_bytes"]
        assert report.loc["pruned", "nonzero_params"] < report.loc["original", "nonzero_params"]
        assert report.loc["original", "params"] == report.loc["pruned", "params"]

    def test_sparse_size_monotone_in_sparsity(self):
        base = LightX3ECG(make_medium_spec(), seed=0)
        sizes = []
        for sparsity in (0.5, 0.7, 0.9):
            model, masks = prune_global_l1(base.clone(), sparsity)
            sizes.append(count_stats(model.spec, model, masks).sparse_bytes)
        assert sizes[0] > sizes[1] > sizes[2]
        assert sizes[0] < count_stats(base.spec, base).dense_bytes

    def test_flat32_indices_cost_more(self):
        model, masks = prune_global_l1(LightX3ECG(make_medium_spec(), seed=0), 0.8)
        varint = count_stats(model.spec, model, masks, "varint").sparse_bytes
        flat = count_stats(model.spec, model, masks, "flat32").sparse_bytes
        assert varint < flat

    def test_sparse_model_round_trip(self, tiny_model):
        model, masks = prune_global_l1(tiny_model, 0.6)
        sparse = to_sparse_model(model, masks, 0.6, seed=3)
        assert sparse.provenance == {"sparsity": 0.6, "seed": 3, "norm": "l1", "mode": "global"}
        assert set(sparse.sparse_names) <= set(masks)
        dense = sparse.densify()
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(dense[name], value)

    def test_stats_text(self):
        text = count_stats(make_tiny_spec()).to_text()
        assert text.startswith("params = ")
        assert "flops = " in text
