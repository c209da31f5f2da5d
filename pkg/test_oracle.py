import numpy as np
import pytest
from scipy.special import expit

from builtin_graphs import BUILTINS, builtin, get_builtin
from constants import DEFAULTS, TOLERANCES
from errors import ShapeError, SupportTooLarge, UnsupportedContinuous
from estimator import BaselineSpec, ConstantBaseline, FunctionBaseline, parse_baseline
from graph_model import GraphBuilder
from oracle import (check_support, describe_support, enumerate_configurations, exact_estimator_moments,
                    exact_expectation, exact_gradient, gauss_hermite, optimal_baseline, variance_report)
from tensor_ops import finite_difference

REFERENCE_EXAMPLES = sorted(name for name, example in BUILTINS.items() if example.reference)
QUICK_EXAMPLES = ["fig1-1", "fig1-2", "fig1-3", "fig1-4", "fig1-5", "bernoulli-chain", "nn2layer",
                  "gauss-reparam", "vae-toy"]
SLOW_EXAMPLES = ["nvil-toy", "mdp-toy", "pomdp-toy"]


def _shifted_bernoulli(shift):
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    x = b.add_stoch("bernoulli_logit", [theta], name="x")
    b.add_cost(f"shift:{shift}", [x], name="f")
    g = b.freeze()
    return g, {theta: 0.0}


class TestExpectation:
    @pytest.mark.parametrize("name", REFERENCE_EXAMPLES)
    def test_closed_form_references(self, name):
        example = get_builtin(name)
        graph, inputs = example.load()
        assert exact_expectation(graph, inputs) == pytest.approx(example.reference["expectation"], abs=1e-10)
        assert float(exact_gradient(graph, inputs)) == pytest.approx(example.reference["gradient"], abs=1e-10)

    @pytest.mark.parametrize("name", ["mdp-toy", "fig1-3", "vae-toy"])
    def test_probabilities_sum_to_one(self, name):
        graph, inputs = builtin(name)
        total = sum(c.probability for c in enumerate_configurations(graph, inputs))
        assert total == pytest.approx(1.0, abs=TOLERANCES["normalization"])

    def test_zero_probability_branches_pruned(self):
        graph, inputs = builtin("mdp-toy")
        assert all(c.probability > 0 for c in enumerate_configurations(graph, inputs))

    def test_markov_chain_expectation(self):
        graph, inputs = builtin("fig1-5")
        p1 = expit(0.2)
        expected = p1 + 2 * (p1 * expit(1.2) + (1 - p1) * expit(0.2))
        assert exact_expectation(graph, inputs) == pytest.approx(expected, abs=1e-12)


def _check_gradient(name):
    graph, inputs = builtin(name)
    for theta in graph.params:
        def f(z, theta=theta):
            return exact_expectation(graph, {**inputs, theta: z})

        expected = finite_difference(f, inputs[theta])
        np.testing.assert_allclose(exact_gradient(graph, inputs, theta), expected, rtol=1e-6, atol=1e-8)


class TestExactGradient:
    @pytest.mark.parametrize("name", QUICK_EXAMPLES)
    def test_matches_finite_differences(self, name):
        _check_gradient(name)

    @pytest.mark.slow
    @pytest.mark.parametrize("name", SLOW_EXAMPLES)
    def test_matches_finite_differences_large(self, name):
        _check_gradient(name)


class TestSupportLimits:
    def test_descriptor(self):
        graph, _ = builtin("vae-toy")
        supports = describe_support(graph, quadrature_order=10)
        (z,) = supports.values()
        assert z.continuous and z.dims == 1 and z.outcomes == 10

    def test_too_many_gaussian_dimensions(self):
        b = GraphBuilder()
        mu = b.add_input((3,), param=True)
        sigma = b.add_input((3,))
        x = b.add_stoch("gaussian", [mu, sigma])
        b.add_cost("sum", [x])
        graph = b.freeze()
        with pytest.raises(UnsupportedContinuous):
            check_support(graph)
        with pytest.raises(UnsupportedContinuous):
            exact_expectation(graph, {mu: np.zeros(3), sigma: np.ones(3)})

    def test_configuration_limit(self):
        graph, inputs = builtin("mdp-toy")
        with pytest.raises(SupportTooLarge):
            list(enumerate_configurations(graph, inputs, max_configurations=10))

    def test_quadrature_rule_integrates_moments(self):
        points, weights = gauss_hermite(10)
        assert np.sum(weights) == pytest.approx(1.0)
        assert np.sum(weights * points ** 2) == pytest.approx(1.0)
        assert np.sum(weights * points ** 4) == pytest.approx(3.0)

    def test_quadrature_converges(self):
        graph, inputs = builtin("vae-toy")
        coarse = exact_expectation(graph, inputs, quadrature_order=30)
        fine = exact_expectation(graph, inputs, quadrature_order=40)
        assert coarse == pytest.approx(fine, abs=TOLERANCES["quadrature_convergence"])

    def test_order_below_two_rejected(self):
        graph, inputs = builtin("gauss-reparam")
        with pytest.raises(ValueError):
            exact_expectation(graph, inputs, quadrature_order=1)


class TestEstimatorMoments:
    @pytest.mark.parametrize("name", ["fig1-1", "fig1-2", "fig1-3", "fig1-4", "fig1-5", "bernoulli-chain"])
    @pytest.mark.parametrize("method", ["surrogate", "algorithm1"])
    def test_unbiased(self, name, method):
        graph, inputs = builtin(name)
        for baselines in (None, parse_baseline("const:0.7")):
            mean, _ = exact_estimator_moments(graph, inputs, None, baselines, method)
            np.testing.assert_allclose(mean, exact_gradient(graph, inputs), atol=TOLERANCES["unbiasedness"])

    @pytest.mark.slow
    @pytest.mark.parametrize("name", SLOW_EXAMPLES)
    def test_unbiased_with_example_baselines(self, name):
        example = get_builtin(name)
        graph, inputs = example.load()
        baselines = example.default_baselines(graph)
        for theta in graph.params:
            mean, _ = exact_estimator_moments(graph, inputs, theta, baselines)
            np.testing.assert_allclose(mean, exact_gradient(graph, inputs, theta), atol=TOLERANCES["unbiasedness"])

    @pytest.mark.parametrize("name", ["fig1-5", "bernoulli-chain"])
    def test_baselines_leave_the_mean_unchanged(self, name):
        graph, inputs = builtin(name)
        first, last = graph.stochastic[0], graph.stochastic[-1]
        grid = [parse_baseline(f"const:{c}") for c in (-2.0, -0.5, 0.0, 0.7, 3.0)]
        grid.append(parse_baseline("avg:0.9"))
        grid.append(BaselineSpec(per_node={last: FunctionBaseline([first], lambda x: 0.5 + float(np.sum(x)))}))
        exact = exact_gradient(graph, inputs)
        for baselines in grid:
            mean, _ = exact_estimator_moments(graph, inputs, None, baselines)
            np.testing.assert_allclose(mean, exact, atol=TOLERANCES["unbiasedness"])

    def test_shifted_costs_inflate_variance(self):
        plain, plain_inputs = _shifted_bernoulli(0)
        shifted, shifted_inputs = _shifted_bernoulli(100)
        _, base_var = exact_estimator_moments(plain, plain_inputs)
        _, shifted_var = exact_estimator_moments(shifted, shifted_inputs)
        assert float(shifted_var) / float(base_var) > 1e3
        _, corrected = exact_estimator_moments(shifted, shifted_inputs, baselines=BaselineSpec(ConstantBaseline(100)))
        assert float(corrected) == pytest.approx(float(base_var), rel=1e-9)

    def test_continuous_graph_refused(self):
        graph, inputs = builtin("gauss-reparam")
        with pytest.raises(UnsupportedContinuous):
            exact_estimator_moments(graph, inputs)


class TestOptimalBaseline:
    def test_single_bernoulli(self):
        graph, inputs = builtin("fig1-1")
        b = optimal_baseline(graph, inputs, None, "x")
        assert b == pytest.approx(0.5)
        _, variance = exact_estimator_moments(graph, inputs, baselines=BaselineSpec(ConstantBaseline(b)))
        assert float(variance) == pytest.approx(0.0, abs=1e-15)

    def test_minimizes_variance(self):
        graph, _ = _shifted_bernoulli(2)
        inputs = {0: -0.6}
        b = optimal_baseline(graph, inputs, None, "x")
        _, best = exact_estimator_moments(graph, inputs, baselines=BaselineSpec(ConstantBaseline(b)))
        for delta in (-0.3, 0.3):
            other = BaselineSpec(ConstantBaseline(b + delta))
            _, variance = exact_estimator_moments(graph, inputs, baselines=other)
            assert float(best) <= float(variance)

    def test_vector_parameter_refused(self):
        graph, inputs = builtin("bernoulli-chain")
        with pytest.raises(ShapeError):
            optimal_baseline(graph, inputs, None, "x0")


class TestVarianceReport:
    def test_finite_graph_is_exact(self):
        graph, inputs = builtin("fig1-1")
        report = variance_report(graph, inputs, baselines=parse_baseline("const:0.5"))
        assert set(report["baselines"]) == {"none", "const:0.5"}
        assert report["baselines"]["none"]["exact"]
        assert report["baselines"]["const:0.5"]["variance"] == pytest.approx(0.0, abs=1e-15)
        assert "sf_vs_pd" not in report

    def test_pathwise_has_lower_variance(self):
        graph, inputs = builtin("gauss-reparam")
        report = variance_report(graph, inputs, n_samples=2000, seed=3, threads=1)
        sf, pd = report["sf_vs_pd"]["sf"], report["sf_vs_pd"]["pd"]
        assert report["sf_vs_pd"]["nodes"] == ["x"]
        assert not sf["exact"] and not pd["exact"]
        assert pd["variance"] < sf["variance"]
        assert abs(pd["mean"] - 2.0) < 4 * pd["stderr"]

    @pytest.mark.slow
    def test_score_function_and_pathwise_agree_with_exact_gradient(self):
        graph, inputs = builtin("gauss-reparam")
        report = variance_report(graph, inputs, n_samples=100_000, seed=5)
        sf, pd = report["sf_vs_pd"]["sf"], report["sf_vs_pd"]["pd"]
        for moments in (sf, pd):
            assert abs(moments["mean"] - 2.0) <= DEFAULTS["z_band"] * moments["stderr"]
        assert pd["variance"] < sf["variance"]
