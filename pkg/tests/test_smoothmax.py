import math

import numpy as np
import pytest

from conftest import central_difference, relative_error
from polarmil.smoothmax import (
    RadialWeights,
    SmoothMaxConfig,
    bag_prediction,
    hard_max,
    radial_weights,
    weighted_quasimax,
    weighted_softmax,
)

# reference values computed with 50-digit arithmetic for
# p = [0.2, 0.9], w = [1, 0.8], alpha = 4
REF_P = np.array([0.2, 0.9])
REF_W = np.array([1.0, 0.8])
REF_ALPHA = 4.0
REF_SOFTMAX = 0.66225089731006806311
REF_QUASIMAX = 0.576143454892753665
REF_SOFTMAX_GRAD = np.array([-0.094286914344533222239, 0.87542953147562657779])
REF_QUASIMAX_GRAD = np.array([0.11105596671140757094, 0.71115522663087394325])

# w_15 for N_r=30, w_min=0.5: exp(-225/(2*sigma^2)), sigma = 29/sqrt(2 ln 2)
REF_W15 = 0.83073564031263369438


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SmoothMaxConfig(alpha=0.0)
        with pytest.raises(ValueError):
            SmoothMaxConfig(w_min=0.0)
        with pytest.raises(ValueError):
            SmoothMaxConfig(w_min=1.5)
        with pytest.raises(ValueError):
            SmoothMaxConfig(variant="softmax")
        with pytest.raises(ValueError):
            SmoothMaxConfig(n_r=0)


class TestRadialWeights:
    def test_wmin_one_gives_all_ones(self):
        w = radial_weights(SmoothMaxConfig(w_min=1.0, n_r=30))
        assert np.all(w.weights == 1.0)

    def test_endpoints(self):
        for w_min in (0.3, 0.5, 0.7, 0.99):
            w = radial_weights(SmoothMaxConfig(w_min=w_min, n_r=30)).weights
            assert w[0] == 1.0
            assert w[-1] == pytest.approx(w_min, rel=1e-12)

    def test_monotone_decay(self):
        w = radial_weights(SmoothMaxConfig(w_min=0.3, n_r=20)).weights
        assert np.all(np.diff(w) < 0)

    def test_midpoint_against_high_precision_reference(self):
        w = radial_weights(SmoothMaxConfig(w_min=0.5, n_r=30)).weights
        assert w[15] == pytest.approx(REF_W15, rel=1e-14)

    def test_single_sample(self):
        assert radial_weights(SmoothMaxConfig(w_min=0.5, n_r=1)).weights.tolist() == [1.0]

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            RadialWeights(np.array([0.9, 0.5]))  # w_0 != 1
        with pytest.raises(ValueError):
            RadialWeights(np.array([1.0, 0.5, 0.7]))  # increasing


class TestWeightedSoftmax:
    def test_single_element(self):
        value, grad = weighted_softmax([0.37], np.ones(1), alpha=3.0)
        assert value == pytest.approx(0.37)
        assert grad == pytest.approx([1.0])

    def test_constant_sequence(self):
        value, _ = weighted_softmax([0.4, 0.4, 0.4], np.ones(3), alpha=2.0)
        assert value == pytest.approx(0.4)

    def test_reference_value_and_gradient(self):
        value, grad = weighted_softmax(REF_P, REF_W, REF_ALPHA)
        assert value == pytest.approx(REF_SOFTMAX, rel=1e-14)
        assert grad == pytest.approx(REF_SOFTMAX_GRAD, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        value, grad = weighted_softmax(REF_P, REF_W, REF_ALPHA)
        fd = central_difference(
            lambda p: weighted_softmax(p, REF_W, REF_ALPHA)[0], REF_P, h=1e-5
        )
        assert relative_error(grad, fd) <= 1e-6

    def test_empty_bag_rejected(self):
        with pytest.raises(ValueError):
            weighted_softmax([], np.ones(1), 1.0)

    def test_too_few_weights_rejected(self):
        with pytest.raises(ValueError):
            weighted_softmax([0.1, 0.2], np.ones(1), 1.0)


class TestWeightedQuasimax:
    def test_single_element_exact(self):
        value, grad = weighted_quasimax([0.81], np.ones(1), alpha=5.0)
        assert value == 0.81
        assert grad == pytest.approx([1.0])

    def test_constant_sequence(self):
        value, _ = weighted_quasimax([0.6] * 5, np.ones(5), alpha=3.0)
        assert value == pytest.approx(0.6)

    def test_reference_value_and_gradient(self):
        value, grad = weighted_quasimax(REF_P, REF_W, REF_ALPHA)
        assert value == pytest.approx(REF_QUASIMAX, rel=1e-14)
        assert grad == pytest.approx(REF_QUASIMAX_GRAD, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        _, grad = weighted_quasimax(REF_P, REF_W, REF_ALPHA)
        fd = central_difference(
            lambda p: weighted_quasimax(p, REF_W, REF_ALPHA)[0], REF_P, h=1e-5
        )
        assert relative_error(grad, fd) <= 1e-6


class TestHardMax:
    def test_examples(self):
        value, grad = hard_max([0.1, 0.7, 0.3])
        assert value == 0.7
        assert grad.tolist() == [0.0, 1.0, 0.0]
        assert hard_max([0.5])[0] == 0.5

    def test_first_argmax_on_ties(self):
        _, grad = hard_max([0.4, 0.9, 0.9])
        assert grad.tolist() == [0.0, 1.0, 0.0]

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            p = rng.uniform(0, 1, rng.integers(1, 20))
            value, _ = hard_max(p)
            best = p[0]
            for x in p:
                if x > best:
                    best = x
            assert value == best


class TestProperties:
    def test_quasimax_bounds(self):
        rng = np.random.default_rng(10)
        for _ in range(500):
            n = int(rng.integers(1, 30))
            p = rng.uniform(0, 1, n)
            w = np.sort(rng.uniform(0.1, 1.0, n))[::-1]
            w[0] = 1.0
            alpha = float(rng.uniform(0.5, 16.0))
            value, _ = weighted_quasimax(p, w, alpha)
            top = np.max(w * p)
            assert top - math.log(n) / alpha - 1e-12 <= value <= top + 1e-12

    def test_softmax_within_bag_range(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            n = int(rng.integers(1, 30))
            p = rng.uniform(0, 1, n)
            w = np.sort(rng.uniform(0.1, 1.0, n))[::-1]
            w[0] = 1.0
            value, _ = weighted_softmax(p, w, float(rng.uniform(0.5, 16.0)))
            z = w * p
            assert z.min() - 1e-12 <= value <= z.max() + 1e-12

    def test_monotone_convergence_in_alpha(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            p = rng.uniform(0, 1, n)
            w = np.sort(rng.uniform(0.2, 1.0, n))[::-1]
            w[0] = 1.0
            top = np.max(w * p)
            for fn in (weighted_softmax, weighted_quasimax):
                errs = [abs(fn(p, w, float(a))[0] - top) for a in (1, 2, 4, 8, 16, 32, 64, 128, 256)]
                for lo, hi in zip(errs[1:], errs[:-1]):
                    assert lo <= hi + 1e-12
                assert errs[-1] < errs[0] or errs[0] < 1e-12

    def test_wmin_one_recovers_unweighted(self):
        rng = np.random.default_rng(13)
        ones = radial_weights(SmoothMaxConfig(w_min=1.0, n_r=30))
        for _ in range(50):
            p = rng.uniform(0, 1, int(rng.integers(1, 30)))
            alpha = float(rng.uniform(0.5, 8.0))
            sv, sg = weighted_softmax(p, ones, alpha)
            z = p  # unweighted
            e = np.exp(alpha * (z - z.max()))
            assert sv == pytest.approx(float((z * e).sum() / e.sum()), rel=1e-14)
            qv, _ = weighted_quasimax(p, ones, alpha)
            want_q = z.max() + math.log(e.sum()) / alpha - math.log(p.size) / alpha
            assert qv == pytest.approx(want_q, rel=1e-13)

    def test_gradient_suite_random_cases(self):
        rng = np.random.default_rng(14)
        for trial in range(100):
            n = int(rng.integers(1, 31))
            p = rng.uniform(0.02, 0.98, n)
            w = np.sort(rng.uniform(0.2, 1.0, n))[::-1]
            w[0] = 1.0
            alpha = float(rng.uniform(0.5, 8.0))
            for fn in (weighted_softmax, weighted_quasimax):
                _, grad = fn(p, w, alpha)
                fd = central_difference(lambda x: fn(x, w, alpha)[0], p, h=1e-5)
                assert relative_error(grad, fd) <= 1e-4, f"{fn.__name__} trial {trial}"

    def test_numerical_stability_alpha_700(self):
        # alpha * max(w p) = 700: survives thanks to max subtraction
        p = np.array([1.0, 0.999, 0.2])
        w = np.ones(3)
        for fn in (weighted_softmax, weighted_quasimax):
            value, grad = fn(p, w, 700.0)
            assert np.isfinite(value) and np.all(np.isfinite(grad))
            assert value == pytest.approx(1.0, abs=1e-2)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(15)
        p = rng.uniform(0, 1, 8)
        w = np.sort(rng.uniform(0.3, 1.0, 8))[::-1]
        w[0] = 1.0
        perm = rng.permutation(8)
        for fn in (weighted_softmax, weighted_quasimax):
            v0, g0 = fn(p, w, 3.0)
            v1, g1 = fn(p[perm], w[perm], 3.0)
            assert v1 == pytest.approx(v0, rel=1e-12)
            assert g1 == pytest.approx(g0[perm], rel=1e-12)


def test_bag_prediction_dispatch():
    cfg = SmoothMaxConfig(alpha=2.0, w_min=1.0, variant="weighted_quasimax", n_r=4)
    v, _ = bag_prediction([0.5, 0.5], np.ones(2), cfg)
    assert v == pytest.approx(0.5)
    cfg = SmoothMaxConfig(alpha=2.0, w_min=1.0, variant="hard_max", n_r=4)
    v, g = bag_prediction([0.2, 0.8], np.ones(2), cfg)
    assert (v, g.tolist()) == (0.8, [0.0, 1.0])
