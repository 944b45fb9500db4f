import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from selectenc import autodiff as ad
from selectenc.encryption import top_s_mask
from selectenc.models import Activation, Dense, ModelSpec, build, dense_spec, lenet_small, onehot
from selectenc.significance import (
    FREE_METRICS,
    BudgetExceeded,
    SignificanceScores,
    central_sensitivity,
    compute,
    export_binary,
    export_csv,
    grad_magnitude,
    layer_slice,
    load_binary,
    mixed_sensitivity,
    one_fifth,
    param_magnitude,
    prodsig,
    sensitivity_discrete,
    sensitivity_exact,
    timed,
)


def bilinear(power):
    """L = theta * x**power for a single parameter and a single input."""

    def loss_fn(blocks, x):
        return ad.tsum(ad.mul(blocks[0], ad.power(x, power)))

    def grad_fn(theta):
        return lambda x: np.array([float(np.asarray(x).reshape(-1)[0]) ** power])

    return loss_fn, grad_fn


@pytest.fixture(scope="module")
def tiny_dense():
    spec = dense_spec([16, 12, 10], activation="tanh")
    params = build(spec, 4)
    rng = np.random.default_rng(8)
    return params, rng.uniform(size=16), onehot(3, 10)


class TestElementwiseMetrics:
    def test_prodsig_formula(self):
        np.testing.assert_array_equal(prodsig([1, -2, 0], [3, 1, 5]).scores, [3, 2, 0])

    def test_prodsig_zero_theta(self):
        np.testing.assert_array_equal(prodsig([1.0, 2.0, 3.0], np.zeros(3)).scores, 0.0)

    def test_prodsig_loop_oracle(self):
        rng = np.random.default_rng(0)
        g, th = rng.normal(size=10), rng.normal(size=10)
        expect = [abs(g[i] * th[i]) for i in range(10)]
        np.testing.assert_array_equal(prodsig(g, th).scores, expect)

    def test_prodsig_length_mismatch(self):
        with pytest.raises(ValueError):
            prodsig([1.0, 2.0], [1.0])

    def test_grad_magnitude(self):
        np.testing.assert_array_equal(grad_magnitude([-3, 0, 2]).scores, [3, 0, 2])
        assert len(set(grad_magnitude([-1.5, 1.5, 1.5]).scores)) == 1
        g = np.random.default_rng(1).normal(size=20)
        np.testing.assert_array_equal(grad_magnitude(g).scores, [abs(v) for v in g])

    def test_param_magnitude(self):
        np.testing.assert_array_equal(param_magnitude([-1, 4]).scores, [1, 4])
        p = build(lenet_small((8, 8, 1)), 0).scaled(0.0)
        assert np.all(param_magnitude(p).scores == 0)
        th = np.random.default_rng(2).normal(size=20)
        np.testing.assert_array_equal(param_magnitude(th).scores, [abs(v) for v in th])

    def test_scores_validated(self):
        with pytest.raises(ValueError):
            SignificanceScores(np.array([1.0, -1.0]), "Grad")
        with pytest.raises(ValueError):
            SignificanceScores(np.array([np.nan]), "Grad")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100) | st.floats(-100, -0.01), st.floats(0.05, 0.95))
    def test_scale_equivariance_and_mask_invariance(self, seed, c, ratio):
        rng = np.random.default_rng(seed)
        g, th = rng.normal(size=40), rng.normal(size=40)
        np.testing.assert_allclose(prodsig(c * g, th).scores, abs(c) * prodsig(g, th).scores, rtol=1e-14)
        np.testing.assert_allclose(grad_magnitude(c * g).scores, abs(c) * grad_magnitude(g).scores, rtol=1e-14)
        assert top_s_mask(grad_magnitude(c * g), ratio) == top_s_mask(grad_magnitude(g), ratio)
        assert top_s_mask(prodsig(c * g, th), ratio) == top_s_mask(prodsig(g, th), ratio)


class TestSensitivity:
    def test_bilinear_exact(self):
        loss_fn, _ = bilinear(1.0)
        np.testing.assert_allclose(mixed_sensitivity(loss_fn, [np.array([0.7])], np.array([2.0])), [1.0], rtol=1e-15)

    def test_quadratic_exact(self):
        loss_fn, _ = bilinear(2.0)
        np.testing.assert_allclose(mixed_sensitivity(loss_fn, [np.array([0.7])], np.array([3.0])), [6.0], rtol=1e-15)

    def test_bilinear_discrete(self):
        _, grad_fn = bilinear(1.0)
        np.testing.assert_allclose(central_sensitivity(grad_fn(0.7), np.array([2.0]), 0.01), [1.0], rtol=1e-12)

    def test_quadratic_discrete(self):
        _, grad_fn = bilinear(2.0)
        assert abs(central_sensitivity(grad_fn(0.7), np.array([3.0]), 1e-3)[0] - 6.0) < 1e-5

    def test_discrete_uses_2n_gradient_calls(self):
        calls = []

        def grad_fn(x):
            calls.append(1)
            return np.asarray(x).reshape(-1) ** 2

        central_sensitivity(grad_fn, np.ones((2, 3)), 1e-3)
        assert len(calls) == 12

    def test_step_must_be_positive(self, tiny_dense):
        params, x, y = tiny_dense
        with pytest.raises(ValueError):
            sensitivity_discrete(params, x, y, step=0.0)

    def test_exact_matches_discrete_on_tiny_net(self, tiny_dense):
        params, x, y = tiny_dense
        exact = sensitivity_exact(params, x, y).scores
        disc = sensitivity_discrete(params, x, y, step=1e-4).scores
        assert np.linalg.norm(exact - disc) / np.linalg.norm(exact) < 1e-3
        assert spearmanr(exact, disc).statistic >= 0.99

    def test_discrete_converges_at_second_order(self, tiny_dense):
        params, x, y = tiny_dense
        exact = sensitivity_exact(params, x, y).scores
        errs = [np.linalg.norm(sensitivity_discrete(params, x, y, step=h).scores - exact) for h in (0.04, 0.02, 0.01)]
        assert errs[0] > errs[1] > errs[2]
        order = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
        assert min(order) > 1.8

    def test_budget_exceeded_is_explicit(self):
        params = build(lenet_small((8, 8, 1)), 0)
        with pytest.raises(BudgetExceeded):
            sensitivity_exact(params, np.zeros((8, 8, 1)), onehot(0, 10), budget=1000)

    def test_metrics_are_pure(self, tiny_dense):
        params, x, y = tiny_dense
        for metric in ("Sens", "SensDiscrete", "ProdSig", "Grad", "Param"):
            a, b = compute(metric, params, x, y), compute(metric, params, x, y)
            assert a.scores.tobytes() == b.scores.tobytes()
            assert a.metric_id == metric


class TestLayerSlice:
    def test_first_layer_of_two(self):
        spec = ModelSpec([Dense(4, 3), Activation("tanh"), Dense(3, 2)], (4,), 2)
        s = layer_slice(build(spec, 0), [0]).scores
        np.testing.assert_array_equal(s, [1.0] * 15 + [0.0] * 8)

    def test_all_layers(self):
        p = build(dense_spec([4, 3, 2]), 0)
        np.testing.assert_array_equal(layer_slice(p, p.layer_ids).scores, 1.0)

    def test_empty_selection(self):
        p = build(dense_spec([4, 3, 2]), 0)
        with pytest.raises(ValueError):
            layer_slice(p, [])

    def test_one_fifth_on_ten_layers(self):
        p = build(dense_spec([3] * 11), 0)
        layers = p.layer_ids
        assert len(layers) == 10
        s = layer_slice(p, one_fifth(2))
        chosen = {b.layer for b in p.layer_index if s.scores[b.start] == 1}
        assert chosen == {layers[2], layers[3]}
        assert s.label == "OneFifth-2"

    def test_one_fifth_partition_oracle(self):
        # earlier groups take the remainder; groups cover every layer once
        for n in range(5, 23):
            layers = list(range(n))
            groups = [sorted(one_fifth(i)(layers)) for i in range(1, 6)]
            assert sum(groups, []) == layers
            sizes = [len(g) for g in groups]
            assert sizes == sorted(sizes, reverse=True) and max(sizes) - min(sizes) <= 1

    def test_one_fifth_via_compute(self):
        p = build(lenet_small((8, 8, 1)), 0)
        s = compute("OneFifth-1", p, np.zeros((8, 8, 1)), onehot(0, 10))
        assert s.metric_id == "LayerSlice" and s.scores[0] == 1 and s.scores[-1] == 0


class TestTimingAndExport:
    def test_timed_fills_seconds(self):
        s = timed(grad_magnitude, np.ones(10))
        assert s.compute_seconds > 0

    def test_prodsig_is_cheap_at_1e5(self):
        rng = np.random.default_rng(0)
        g, th = rng.normal(size=100_000), rng.normal(size=100_000)
        assert timed(prodsig, g, th).compute_seconds < 0.1

    def test_free_metrics(self):
        assert FREE_METRICS == {"Grad", "Param"}

    def test_binary_round_trip(self, tmp_path):
        s = grad_magnitude(np.random.default_rng(3).normal(size=33))
        export_binary(s, tmp_path / "s.bin")
        back = load_binary(tmp_path / "s.bin", "Grad")
        assert back.scores.tobytes() == s.scores.tobytes()

    def test_csv_dump(self, tmp_path):
        s = grad_magnitude([0.5, 0.25])
        export_csv(s, tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text().splitlines() == ["index,score", "0,0.5", "1,0.25"]

    def test_unknown_metric(self):
        p = build(dense_spec([4, 2]), 0)
        with pytest.raises(ValueError):
            compute("Hessian", p, np.zeros(4), onehot(0, 2))
