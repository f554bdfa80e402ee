import numpy as np
import numpy.testing as npt
import pytest

from config import PANetConfig
from conftest import make_sample
from exceptions import DimensionError, UsageError
from gradcheck import gradcheck_params
from panet_model import (
    ModelParams,
    PANetModel,
    apr_refine,
    attend_parts,
    cross_view_associate,
    cva_weights,
    encode_views,
    label_smooth,
    parameter_shapes,
    predict_parts,
    sample_parts,
    total_loss,
    view_part_logits,
)
from shapegen import MultiViewSample, build_dataset
from tensor_engine import Tensor


@pytest.fixture
def params(tiny_config):
    return ModelParams.initialize(tiny_config, seed=0)


def zeroed(params, prefix="", suffix=""):
    return params.replace({name: np.zeros(t.shape) for name, t in params.items()
                           if name.startswith(prefix) and name.endswith(suffix)})


def permuted(sample, order):
    return MultiViewSample(views=sample.views[order], viewpoints=sample.viewpoints[order], label=sample.label)


def full_refinement(parts, params):
    """Every layer updates every row; returns the first L rows"""
    config = params.config
    width = config.channels // config.heads

    def norm(x, prefix):
        centred = x - x.mean(axis=-1, keepdims=True)
        scaled = centred / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + 1e-5)
        return scaled * params[f"{prefix}.gain"].data + params[f"{prefix}.bias"].data

    stream = np.concatenate([params.part_tokens.data, parts])
    for d in range(config.depth):
        prefix = f"apr.{d}"
        normed = norm(stream, f"{prefix}.ln1")
        q, k, v = (
            (normed @ params[f"{prefix}.attn.w{p}"].data + params[f"{prefix}.attn.b{p}"].data)
            .reshape(len(stream), config.heads, width).transpose(1, 0, 2)
            for p in "qkv"
        )
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(width)
        scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
        mixed = (scores / scores.sum(axis=-1, keepdims=True)) @ v
        merged = mixed.transpose(1, 0, 2).reshape(len(stream), config.channels)
        stream = stream + merged @ params[f"{prefix}.attn.wo"].data + params[f"{prefix}.attn.bo"].data
        normed = norm(stream, f"{prefix}.ln2")
        hidden = np.maximum(normed @ params[f"{prefix}.mlp.w1"].data + params[f"{prefix}.mlp.b1"].data, 0.0)
        stream = stream + hidden @ params[f"{prefix}.mlp.w2"].data + params[f"{prefix}.mlp.b2"].data
    return stream[:config.parts]


class TestModelParams:
    def test_names_and_shapes(self, tiny_config, params):
        shapes = parameter_shapes(tiny_config)
        assert list(params) == list(shapes)
        assert params.part_tokens.shape == (tiny_config.parts, tiny_config.channels)
        assert params["head_q.weight"].shape == (tiny_config.attention_maps * tiny_config.channels,
                                                 tiny_config.num_classes)

    def test_initialization_is_seeded(self, tiny_config):
        a = ModelParams.initialize(tiny_config, 4).arrays()
        b = ModelParams.initialize(tiny_config, 4).arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_wrong_shape_rejected(self, tiny_config, params):
        arrays = params.arrays()
        arrays["part_tokens"] = np.zeros((tiny_config.parts + 1, tiny_config.channels))
        with pytest.raises(DimensionError):
            ModelParams.from_arrays(tiny_config, arrays)

    def test_non_finite_rejected(self, params):
        with pytest.raises(UsageError):
            params.replace({"psi.bias": np.full(params["psi.bias"].shape, np.nan)})

    def test_unknown_name_rejected(self, params):
        with pytest.raises(UsageError):
            params.replace({"nope": np.zeros(1)})


class TestEncoder:
    def test_output_extent(self, tiny_config, params):
        features = encode_views(np.zeros((3, 8, 8)), params)
        assert features.shape == (3, tiny_config.feature_size, tiny_config.feature_size, tiny_config.channels)

    def test_identical_views_identical_features(self, params):
        view = np.random.default_rng(0).uniform(size=(8, 8))
        features = encode_views([view, view], params).data
        npt.assert_allclose(features[0], features[1], atol=1e-12)

    def test_permuting_views_permutes_features(self, params):
        views = np.random.default_rng(1).uniform(size=(3, 8, 8))
        order = [2, 0, 1]
        expected = encode_views(views, params).data[order]
        npt.assert_allclose(encode_views(views[order], params).data, expected, atol=1e-12)

    def test_zero_images_zero_biases_zero_features(self, params):
        features = encode_views(np.zeros((2, 8, 8)), zeroed(params, "encoder.", ".bias"))
        assert not features.data.any()

    def test_inconsistent_sizes(self, params):
        with pytest.raises(DimensionError):
            encode_views([np.zeros((8, 8)), np.zeros((4, 4))], params)


class TestCrossViewAssociation:
    def test_scalar_hand_value(self):
        features = Tensor(np.array([2.0, 4.0]).reshape(2, 1, 1, 1))
        enhanced = cross_view_associate(features).data
        assert enhanced[0, 0, 0, 0] == pytest.approx(3.9640, abs=1e-4)
        alpha = 1.0 / (1.0 + np.exp(4.0))
        assert enhanced[0, 0, 0, 0] == pytest.approx(alpha * 2 + (1 - alpha) * 4, abs=1e-12)

    def test_single_view_is_unchanged(self):
        features = Tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 3)))
        assert cross_view_associate(features).data.tobytes() == features.data.tobytes()

    def test_identical_views(self):
        one = np.random.default_rng(3).normal(size=(2, 2, 3))
        enhanced = cross_view_associate(Tensor(np.stack([one, one, one]))).data
        for i in range(3):
            npt.assert_allclose(enhanced[i], one, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_convex_combination(self, seed):
        features = np.random.default_rng(seed).uniform(0, 1, size=(4, 2, 2, 3))
        enhanced = cross_view_associate(Tensor(features)).data
        assert np.all(enhanced >= features.min(axis=0) - 1e-12)
        assert np.all(enhanced <= features.max(axis=0) + 1e-12)
        npt.assert_allclose(cva_weights(Tensor(features)).data.sum(axis=1), 1.0, atol=1e-9)


class TestPartSampling:
    def test_hand_value(self):
        enhanced = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2, 1))
        attention = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 2, 1))
        parts = sample_parts(enhanced, attention)
        assert parts.shape == (1, 1)
        assert parts.data[0, 0] == pytest.approx(1.5)

    def test_unit_and_zero_attention(self):
        enhanced = np.random.default_rng(4).normal(size=(2, 2, 2, 3))
        ones = sample_parts(Tensor(enhanced), Tensor(np.ones((2, 2, 2, 1)))).data
        npt.assert_allclose(ones, enhanced.mean(axis=(1, 2)), atol=1e-12)
        zeros = sample_parts(Tensor(enhanced), Tensor(np.zeros((2, 2, 2, 1)))).data
        assert not zeros.any()

    def test_rows_are_view_major(self):
        rng = np.random.default_rng(5)
        enhanced, attention = rng.uniform(size=(3, 2, 2, 4)), rng.uniform(size=(3, 2, 2, 5))
        parts = sample_parts(Tensor(enhanced), Tensor(attention)).data
        assert parts.shape == (15, 4)
        for i in range(3):
            alone = sample_parts(Tensor(enhanced[i:i + 1]), Tensor(attention[i:i + 1])).data
            npt.assert_allclose(parts[i * 5:(i + 1) * 5], alone, atol=1e-12)

    def test_mismatched_maps(self):
        with pytest.raises(DimensionError):
            sample_parts(Tensor(np.ones((2, 2, 2, 3))), Tensor(np.ones((3, 2, 2, 1))))

    def test_attention_is_non_negative(self, tiny_config, params):
        enhanced = Tensor(np.random.default_rng(6).normal(size=(2, 2, 2, tiny_config.channels)))
        attention = attend_parts(enhanced, params)
        assert attention.shape == (2, 2, 2, tiny_config.attention_maps)
        assert attention.data.min() >= 0.0

    def test_zero_features_zero_attention(self, tiny_config, params):
        attention = attend_parts(Tensor(np.zeros((1, 2, 2, tiny_config.channels))), zeroed(params, "psi.bias"))
        assert not attention.data.any()


class TestRefinement:
    def test_row_permutation_of_parts_leaves_global_parts_unchanged(self, tiny_config, params):
        parts = np.random.default_rng(7).normal(size=(6, tiny_config.channels))
        order = np.random.default_rng(8).permutation(6)
        a = apr_refine(Tensor(parts), params).data
        b = apr_refine(Tensor(parts[order]), params).data
        assert np.max(np.abs(a - b)) < 1e-9

    def test_zero_block_is_identity(self, tiny_config, params):
        blank = zeroed(params, "apr.")
        parts = Tensor(np.random.default_rng(9).normal(size=(6, tiny_config.channels)))
        npt.assert_array_equal(apr_refine(parts, blank).data, params.part_tokens.data)

    def test_identical_tokens_identical_rows(self, tiny_config, params):
        tokens = np.tile(params.part_tokens.data[:1], (tiny_config.parts, 1))
        twin = params.replace({"part_tokens": tokens})
        parts = Tensor(np.random.default_rng(10).normal(size=(6, tiny_config.channels)))
        refined = apr_refine(parts, twin).data
        npt.assert_allclose(refined[0], refined[1], atol=1e-12)

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_matches_full_self_attention(self, tiny_config, depth):
        config = tiny_config.model_copy(update={"depth": depth})
        params = gradcheck_params(config, depth)
        parts = np.random.default_rng(depth).normal(size=(9, config.channels))
        npt.assert_allclose(apr_refine(Tensor(parts), params).data, full_refinement(parts, params), atol=1e-12)

    def test_depth_zero_returns_tokens(self, tiny_config):
        config = tiny_config.model_copy(update={"depth": 0})
        params = ModelParams.initialize(config, seed=0)
        parts = Tensor(np.ones((3, config.channels)))
        npt.assert_array_equal(apr_refine(parts, params).data, params.part_tokens.data)

    def test_always_l_rows(self, tiny_config, params):
        for n in (3, 30):
            parts = Tensor(np.random.default_rng(n).normal(size=(n, tiny_config.channels)))
            assert apr_refine(parts, params).shape == (tiny_config.parts, tiny_config.channels)


class TestHeads:
    def test_part_probabilities_average(self):
        config = PANetConfig(num_classes=2, resolution=8, encoder_widths=(2,), channels=2,
                             attention_maps=1, parts=2, depth=1, heads=1)
        params = ModelParams.initialize(config).replace({
            "head_p.weight": np.array([[1.0, 0.0], [0.0, 0.0]]),
            "head_p.bias": np.zeros(2),
        })
        global_parts = Tensor([[np.log(4.0), 0.0], [np.log(1.5), 0.0]])
        part_probs, probs = predict_parts(global_parts, params)
        npt.assert_allclose(part_probs.data, [[0.8, 0.2], [0.6, 0.4]], atol=1e-12)
        npt.assert_allclose(probs.data, [0.7, 0.3], atol=1e-12)

    def test_zero_view_head_is_uniform(self, tiny_config, params):
        blank = zeroed(params, "head_q.")
        parts = Tensor(np.random.default_rng(11).normal(size=(2 * tiny_config.attention_maps, tiny_config.channels)))
        q = view_part_logits(parts, blank).data
        npt.assert_allclose(q, 1.0 / tiny_config.num_classes)

    def test_view_probabilities_follow_views(self, tiny_config, params):
        m = tiny_config.attention_maps
        parts = np.random.default_rng(12).normal(size=(3 * m, tiny_config.channels))
        q = view_part_logits(Tensor(parts), params).data
        npt.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)
        swapped = np.concatenate([parts[2 * m:], parts[:2 * m]])
        npt.assert_allclose(view_part_logits(Tensor(swapped), params).data, q[[2, 0, 1]], atol=1e-12)

    def test_row_count_must_match_m(self, tiny_config, params):
        with pytest.raises(DimensionError):
            view_part_logits(Tensor(np.ones((tiny_config.attention_maps + 1, tiny_config.channels))), params)


class TestLoss:
    def test_label_smooth(self):
        npt.assert_allclose(label_smooth(2, 5, 0.1), [0.02, 0.02, 0.92, 0.02, 0.02])
        npt.assert_array_equal(label_smooth(1, 3, 0.0), [0.0, 1.0, 0.0])
        assert label_smooth(0, 7, 0.3).sum() == pytest.approx(1.0)

    def test_uniform_predictions(self):
        terms = total_loss(Tensor(np.full(5, 0.2)), Tensor(np.full((3, 5), 0.2)), 1, gamma=1.0, smoothing=0.0)
        assert terms.loss.item() == pytest.approx(2 * np.log(5), abs=1e-12)

    def test_hand_value(self):
        terms = total_loss(Tensor([0.75, 0.25]), Tensor([[0.5, 0.5]]), 0, gamma=1.0, smoothing=0.0)
        assert terms.loss.item() == pytest.approx(0.9808, abs=1e-4)
        assert terms.loss.item() == pytest.approx(-np.log(0.75) - np.log(0.5), abs=1e-12)

    def test_gamma_zero_drops_part_aware_term(self):
        terms = total_loss(Tensor([0.6, 0.4]), Tensor([[0.1, 0.9]]), 0, gamma=0.0, smoothing=0.1)
        assert terms.awe.item() > 0
        assert terms.loss.item() == terms.ce.item()

    def test_invalid_label(self):
        with pytest.raises(UsageError):
            total_loss(Tensor([0.5, 0.5]), Tensor([[0.5, 0.5]]), 2)


class TestForward:
    @pytest.mark.parametrize("views", [1, 5, 10, 20])
    def test_any_view_count(self, tiny_config, views):
        model = PANetModel(tiny_config, seed=1)
        result = model.forward(make_sample(tiny_config, views, seed=views))
        assert result.probs.shape == (tiny_config.num_classes,)
        assert result.probs.data.sum() == pytest.approx(1.0, abs=1e-9)
        assert result.global_parts.shape == (tiny_config.parts, tiny_config.channels)
        assert result.parts.shape == (views * tiny_config.attention_maps, tiny_config.channels)

    @pytest.mark.parametrize("seed", range(5))
    def test_view_permutation_invariance(self, tiny_config, seed):
        model = PANetModel(tiny_config, seed=seed)
        sample = make_sample(tiny_config, 12, seed=seed, label=seed % tiny_config.num_classes)
        order = np.random.default_rng(seed).permutation(12)
        a, b = model.forward(sample), model.forward(permuted(sample, order))
        assert np.max(np.abs(a.probs.data - b.probs.data)) < 1e-9
        assert abs(a.loss.item() - b.loss.item()) < 1e-9

    def test_view_permutation_invariance_on_rendered_objects(self, tiny_config):
        model = PANetModel(tiny_config, gradcheck_params(tiny_config, 0))
        dataset = build_dataset("arbitrary", 7, num_classes=tiny_config.num_classes,
                                resolution=tiny_config.resolution, seed=11)
        rng = np.random.default_rng(12)
        for sample in dataset.samples[:20]:
            reference = model.forward(sample).probs.data
            for _ in range(20):
                shuffled = model.forward(permuted(sample, rng.permutation(sample.v))).probs.data
                assert np.max(np.abs(shuffled - reference)) < 1e-9

    def test_deterministic(self, tiny_config):
        model = PANetModel(tiny_config, seed=2)
        sample = make_sample(tiny_config, 4)
        assert model.forward(sample).probs.data.tobytes() == model.forward(sample).probs.data.tobytes()

    def test_train_mode_augments(self, tiny_config):
        model = PANetModel(tiny_config, seed=2)
        sample = make_sample(tiny_config, 6)
        train = [model.forward(sample, train_mode=True, aug_seed=s).probs.data for s in range(4)]
        assert any(not np.array_equal(t, model.forward(sample).probs.data) for t in train)

    def test_cva_disabled(self, tiny_config):
        config = tiny_config.model_copy(update={"use_cva": False})
        result = PANetModel(config, seed=0).forward(make_sample(config, 3))
        assert result.cva_weights is None

    def test_resolution_mismatch(self, tiny_config):
        model = PANetModel(tiny_config)
        sample = make_sample(tiny_config.model_copy(update={"resolution": 16}), 2)
        with pytest.raises(DimensionError):
            model.forward(sample)

    def test_gradients_cover_every_parameter(self, tiny_config):
        model = PANetModel(tiny_config, seed=3)
        result, grads = model.loss_and_gradients(make_sample(tiny_config, 3, label=1))
        assert set(grads) == set(model.params)
        assert all(grads[name].shape == model.params[name].shape for name in grads)
        assert any(np.abs(g).sum() > 0 for g in grads.values())
