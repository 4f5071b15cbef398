import numpy as np
import pytest

from acsindy.circuit import (
    EPS,
    FeatureNormState,
    LayerSpec,
    accumulate_norm,
    backward,
    build_model,
    count_active_params,
    count_total_params,
    default_architecture,
    dumps,
    fit_low_rank_quadratic,
    forward,
    freeze_norm,
    init_model,
    load_model,
    model_from_dict,
    model_to_dict,
    norm_frozen,
    predict,
    renormalize,
    reset_norm,
    save_model,
    vjp,
)
from acsindy.errors import ArgumentError

from helpers import assert_grad_close, central_difference, random_model


def xy_product_model():
    """(x + 1)(y + 2) as a one-layer circuit without skip."""
    spec = LayerSpec(2, 2, 2)
    return build_model([(spec, [[1.0, 0.0, 1.0], [0.0, 1.0, 2.0]])], [[1.0, 0.0]])


class TestConstruction:
    def test_single_layer_shapes(self):
        model = init_model([LayerSpec(2, 4, 2)], 1, seed=0)
        assert model.layers[0].weights.shape == (4, 3)
        assert model.head_weights.shape == (1, 3)

    def test_seeded(self):
        a = init_model([LayerSpec(2, 4, 2)], 1, seed=5)
        b = init_model([LayerSpec(2, 4, 2)], 1, seed=5)
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p, q)

    def test_group_size_must_divide(self):
        with pytest.raises(ArgumentError):
            LayerSpec(2, 4, 3)

    def test_layer_chain_checked(self):
        with pytest.raises(ArgumentError):
            init_model([LayerSpec(2, 4, 2), LayerSpec(3, 2, 2)], 2)

    def test_skip_widens_head(self):
        model = init_model([LayerSpec(3, 8, 2)], 3, seed=0, skip=True)
        assert model.head_weights.shape == (3, 4 + 3 + 1)

    def test_sin_groups(self):
        spec = LayerSpec(2, 5, 2, ("product", "product", "sin"))
        assert spec.out_dim == 3
        assert spec.groups() == [("product", (0, 1)), ("product", (2, 3)), ("sin", (4,))]
        with pytest.raises(ArgumentError):
            LayerSpec(2, 4, 2, ("product", "sin"))

    def test_default_architecture(self):
        specs = default_architecture(3)
        assert [(s.in_dim, s.linear_out_dim, s.out_dim) for s in specs] == [(3, 24, 12)]
        deep = default_architecture(2, terms_per_dim=2, depth=2)
        assert [(s.in_dim, s.out_dim) for s in deep] == [(2, 4), (4, 4)]

    def test_spec_round_trip(self):
        spec = LayerSpec(2, 5, 2, ("product", "product", "sin"))
        assert LayerSpec.from_dict(spec.to_dict()) == spec


class TestForward:
    def test_hand_built_product(self):
        y, _ = forward(xy_product_model(), [3.0, 4.0], "off")
        np.testing.assert_allclose(y, [24.0], rtol=0, atol=1e-12)

    def test_zero_weights(self):
        model = init_model([LayerSpec(2, 4, 2)], 2, seed=0, skip=True)
        for p in model.params():
            p[...] = 0.0
        y, _ = forward(model, np.random.default_rng(0).normal(size=(5, 2)), "off")
        np.testing.assert_array_equal(y, 0.0)

    def test_frozen_normalization(self):
        model = xy_product_model()
        st = model.layers[0].norm
        st.sigma = np.array([2.0, 3.0])
        freeze_norm(model)
        y, _ = forward(model, [3.0, 4.0], "frozen")
        assert abs(y[0] - 4.0) < 1e-6
        expected = (4.0 / (2.0 + EPS)) * (6.0 / (3.0 + EPS)) / (1.0 + EPS)
        assert y[0] == pytest.approx(expected, rel=1e-15)

    def test_batch_and_single_agree(self):
        rng = np.random.default_rng(2)
        model = random_model(rng, 3, 2, skip=True)
        X = rng.normal(size=(6, 3))
        batch = predict(model, X, "off")
        for x, row in zip(X, batch):
            np.testing.assert_allclose(predict(model, x, "off"), row, rtol=1e-14)

    def test_bad_input_shape(self):
        with pytest.raises(ArgumentError):
            forward(xy_product_model(), [1.0, 2.0, 3.0])

    def test_bad_norm_mode(self):
        with pytest.raises(ArgumentError):
            forward(xy_product_model(), [1.0, 2.0], "sometimes")

    def test_sin_primitive(self):
        spec = LayerSpec(1, 3, 2, ("product", "sin"))
        w = [[1.0, 0.0], [1.0, 1.0], [2.0, 0.5]]
        model = build_model([(spec, w)], [[1.0, 3.0, 0.0]])
        x = 0.3
        y = predict(model, [x], "off")[0]
        assert y == pytest.approx(x * (x + 1) + 3 * np.sin(2 * x + 0.5), rel=1e-14)


class TestBackward:
    def test_bias_gradient_by_hand(self):
        model = xy_product_model()
        _, trace = forward(model, [3.0, 4.0], "off")
        grads = backward(model, trace, [1.0])
        assert grads.layers[0][0, 2] == pytest.approx(6.0)
        assert grads.layers[0][1, 2] == pytest.approx(4.0)
        np.testing.assert_allclose(grads.head, [[24.0, 1.0]])

    def test_masked_entries_get_zero(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, 2, 2, skip=True)
        model.layers[0].mask[1, 0] = 0.0
        model.head_mask[0, 1] = 0.0
        _, trace = forward(model, rng.normal(size=(4, 2)), "off")
        grads = backward(model, trace, np.ones((4, 2)))
        assert grads.layers[0][1, 0] == 0.0
        assert grads.head[0, 1] == 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        model = random_model(rng, 3, 2, skip=True, width=2)
        accumulate_norm(model, rng.normal(size=(64, 3)))
        X = rng.normal(size=(5, 3))
        G = rng.normal(size=(5, 3))
        _, trace = forward(model, X, "frozen")
        grads, xgrad = vjp(model, trace, G)

        def f():
            return float(np.sum(G * forward(model, X, "frozen")[0]))

        numeric = central_difference(f, model.params())
        flat_a = np.concatenate([g.ravel() for g in grads.arrays])
        flat_n = np.concatenate([g.ravel() for g in numeric])
        pick = rng.choice(flat_a.size, size=20, replace=False)
        assert_grad_close(flat_a[pick], flat_n[pick])
        assert_grad_close(xgrad, central_difference(
            lambda: float(np.sum(G * forward(model, X, "frozen")[0])), [X])[0])

    def test_sigma_is_a_constant(self):
        """Gradients depend on sigma only, not on how many samples produced it."""
        rng = np.random.default_rng(3)
        model = random_model(rng, 2, 1, skip=False)
        accumulate_norm(model, rng.normal(size=(40, 2)))
        X = rng.normal(size=(3, 2))
        _, trace = forward(model, X, "frozen")
        before = backward(model, trace, np.ones((3, 2))).flat()
        for st in model.norms():
            st.count *= 1000
        _, trace = forward(model, X, "frozen")
        np.testing.assert_array_equal(backward(model, trace, np.ones((3, 2))).flat(), before)

    def test_trace_must_match_model(self):
        a = xy_product_model()
        b = init_model([LayerSpec(2, 4, 2)], 1, seed=0)
        _, trace = forward(b, [1.0, 2.0])
        with pytest.raises(ArgumentError):
            backward(a, trace, [1.0])


class TestNormalization:
    def test_frozen_ignores_accumulate(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, 2, 1, skip=True)
        accumulate_norm(model, rng.normal(size=(30, 2)))
        sig = [st.sigma.copy() for st in model.norms()]
        forward(model, 10 * rng.normal(size=(30, 2)), "accumulate")
        for s, st in zip(sig, model.norms()):
            np.testing.assert_array_equal(st.sigma, s)

    def test_reset(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, 2, 2, skip=True)
        accumulate_norm(model, rng.normal(size=(30, 2)))
        reset_norm(model)
        for st in model.norms():
            np.testing.assert_array_equal(st.sigma, 1.0)
        assert not norm_frozen(model)

    def test_constant_zero_feature(self):
        st = FeatureNormState.fresh(2)
        st.update(np.column_stack([np.zeros(10), np.arange(10.0)]))
        assert st.sigma[0] == 0.0
        assert 0.0 / st.divisor()[0] == 0.0

    def test_near_constant_feature_passes_through(self):
        st = FeatureNormState.fresh(1)
        st.update(np.full((5, 1), 3.0))
        assert st.divisor()[0] == 1.0

    def test_chunked_updates_match_population_std(self):
        rng = np.random.default_rng(4)
        data = rng.normal(2.0, 3.0, size=(1000, 3))
        st = FeatureNormState.fresh(3)
        for chunk in np.array_split(data, 7):
            st.update(chunk)
        np.testing.assert_allclose(st.sigma, data.std(axis=0), rtol=1e-12)
        assert st.count == 1000

    def test_row_scale_invariance(self):
        rng = np.random.default_rng(5)
        model = random_model(rng, 2, 1, skip=False, width=2)
        X = rng.normal(size=(200, 2))
        accumulate_norm(model, X)
        before = forward(model, X, "frozen")[1].normed[0].copy()
        model.layers[0].weights[1] *= 7.5
        accumulate_norm(model, X)
        after = forward(model, X, "frozen")[1].normed[0]
        np.testing.assert_allclose(after, before, atol=1e-10)

    def test_renormalize_preserves_function(self):
        rng = np.random.default_rng(6)
        model = random_model(rng, 3, 2, skip=True, width=2)
        X = rng.normal(size=(300, 3))
        accumulate_norm(model, X)
        model.layers[0].mask[0, 1] = 0.0
        model.layers[0].weights[0, 1] = 0.0
        before = predict(model, X, "frozen")
        renormalize(model, X)
        np.testing.assert_allclose(predict(model, X, "frozen"), before, rtol=1e-10, atol=1e-10)
        h = forward(model, X, "frozen")[1].pre[0]
        np.testing.assert_allclose(model.layers[0].norm.sigma, h.std(axis=0), rtol=1e-10)


class TestCounts:
    def test_fresh_model(self):
        model = init_model(default_architecture(2), 2, seed=0, skip=True)
        assert count_active_params(model) == count_total_params(model) == 8 * 2 * 3 + 2 * (8 + 2 + 1)

    def test_after_masking(self):
        model = init_model(default_architecture(2), 2, seed=0)
        model.layers[0].mask[:2, 0] = 0.0
        model.head_mask[1, 3] = 0.0
        assert count_active_params(model) == count_total_params(model) - 3

    def test_fully_masked(self):
        model = init_model(default_architecture(2), 2, seed=0, skip=True)
        for m in model.masks():
            m[...] = 0.0
        assert count_active_params(model) == 0
        np.testing.assert_array_equal(predict(model, np.ones((3, 2)), "off"), 0.0)

    def test_mask_equals_zero_weight(self):
        rng = np.random.default_rng(8)
        a = random_model(rng, 2, 2, skip=True)
        b = a.copy()
        a.layers[1].mask[0, 2] = 0.0
        b.layers[1].weights[0, 2] = 0.0
        X = rng.normal(size=(10, 2))
        np.testing.assert_array_equal(predict(a, X, "off"), predict(b, X, "off"))


class TestLowRankQuadratic:
    def test_identity(self):
        model = fit_low_rank_quadratic(np.eye(2), 2)
        X = np.random.default_rng(0).uniform(-2, 2, size=(100, 2))
        np.testing.assert_allclose(predict(model, X, "off")[:, 0], (X**2).sum(axis=1), atol=1e-9)

    def test_rank_one(self):
        v = np.array([0.5, -1.5, 2.0])
        model = fit_low_rank_quadratic(np.outer(v, v), 1)
        X = np.random.default_rng(1).uniform(-2, 2, size=(100, 3))
        np.testing.assert_allclose(predict(model, X, "off")[:, 0], (X @ v) ** 2, atol=1e-9)

    def test_truncation_matches_svd(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(4, 4))
        Q = (A + A.T) / 2
        U, s, Vt = np.linalg.svd(Q)
        Q2 = U[:, :2] * s[:2] @ Vt[:2]
        model = fit_low_rank_quadratic(Q, 2)
        X = rng.uniform(-2, 2, size=(100, 4))
        expected = np.einsum("bi,ij,bj->b", X, Q2, X)
        np.testing.assert_allclose(predict(model, X, "off")[:, 0], expected, atol=1e-8)

    @pytest.mark.parametrize("Q,rank", [(np.array([[1.0, 2.0], [0.0, 1.0]]), 1), (np.eye(2), 3), (np.eye(2), 0)])
    def test_rejects_bad_input(self, Q, rank):
        with pytest.raises(ArgumentError):
            fit_low_rank_quadratic(Q, rank)


class TestCheckpoint:
    def _trained_like(self):
        rng = np.random.default_rng(9)
        model = random_model(rng, 3, 2, skip=True)
        accumulate_norm(model, rng.normal(size=(50, 3)))
        model.layers[0].mask[0, 0] = 0.0
        return model

    def test_dict_round_trip_is_exact(self):
        model = self._trained_like()
        back = model_from_dict(model_to_dict(model))
        for p, q in zip(model.params(), back.params()):
            np.testing.assert_array_equal(p, q)
        for p, q in zip(model.masks(), back.masks()):
            np.testing.assert_array_equal(p, q)
        for s, t in zip(model.norms(), back.norms()):
            np.testing.assert_array_equal(s.sigma, t.sigma)
            assert s.frozen == t.frozen
        X = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(predict(model, X), predict(back, X))

    def test_file_round_trip_keeps_extras(self, tmp_path):
        model = self._trained_like()
        save_model(model, tmp_path / "m.json", extra={"meta": {"round": 3}})
        back, payload = load_model(tmp_path / "m.json")
        assert payload["meta"] == {"round": 3}
        assert payload["format_version"] == 1
        assert dumps(model_to_dict(back)) == dumps(model_to_dict(model))

    def test_unknown_version(self):
        d = model_to_dict(self._trained_like())
        d["format_version"] = 99
        with pytest.raises(ArgumentError):
            model_from_dict(d)

    def test_dumps_is_canonical(self):
        text = dumps({"b": 0.1, "a": [1.0 / 3.0]})
        assert text.index('"a"') < text.index('"b"')
        assert "0.3333333333333333" in text
        with pytest.raises(ValueError):
            dumps({"x": float("nan")})
