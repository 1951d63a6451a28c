import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvpf.data import empirical_joint, gen_discrete
from dvpf.errors import DomainError, ValidationError
from dvpf.info_measures import (
    classifier_mi_bound,
    entropy,
    joint_entropy,
    kl_divergence,
    marginals,
    mutual_information,
)


def _double_sum_mi(t):
    ps, px = t.sum(1), t.sum(0)
    total = 0.0
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            if t[i, j] > 0:
                total += t[i, j] * (math.log2(t[i, j]) - math.log2(ps[i]) - math.log2(px[j]))
    return total


@st.composite
def distributions(draw, min_size=1, max_size=8):
    k = draw(st.integers(min_size, max_size))
    w = np.array(draw(st.lists(st.floats(0, 1), min_size=k, max_size=k)))
    if w.sum() == 0:
        w[0] = 1.0
    return w / w.sum()


@st.composite
def joints(draw, max_side=8):
    a = draw(st.integers(1, max_side))
    b = draw(st.integers(1, max_side))
    w = np.array(draw(st.lists(st.floats(0, 1), min_size=a * b, max_size=a * b))).reshape(a, b)
    if w.sum() == 0:
        w[0, 0] = 1.0
    return w / w.sum()


class TestEntropy:
    def test_uniform_two(self):
        assert entropy([0.5, 0.5]) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_six(self):
        assert entropy(np.full(6, 1 / 6)) == pytest.approx(2.585, abs=1e-3)

    def test_point_mass(self):
        assert entropy([1.0, 0.0, 0.0]) == 0.0

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [], [np.nan, 1.0]])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            entropy(bad)

    @given(distributions())
    def test_range(self, p):
        h = entropy(p)
        assert 0.0 <= h <= math.log2(p.size) + 1e-12


class TestKL:
    def test_identity(self):
        assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_two_term(self):
        # 0.5*log2(0.5/0.25) + 0.5*log2(0.5/0.75)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.20751874963942185, abs=1e-4)

    def test_single_term(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(1.0, abs=1e-12)

    def test_support_violation_names_index(self):
        with pytest.raises(DomainError) as err:
            kl_divergence([0.2, 0.3, 0.5], [0.5, 0.5, 0.0])
        assert err.value.index == 2
        assert "q[2]" in str(err.value)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])

    @given(distributions(2, 8), st.data())
    def test_nonnegative(self, p, data):
        w = np.array(data.draw(st.lists(st.floats(0.01, 1), min_size=p.size, max_size=p.size)))
        q = w / w.sum()
        assert kl_divergence(p, q) >= 0.0

    @given(distributions(2, 8))
    def test_zero_iff_equal(self, p):
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


class TestMutualInformation:
    def test_product(self):
        t = np.outer([0.3, 0.7], [0.2, 0.5, 0.3])
        assert mutual_information(t) == pytest.approx(0.0, abs=1e-12)

    def test_copy(self):
        assert mutual_information([[0.5, 0.0], [0.0, 0.5]]) == pytest.approx(1.0, abs=1e-12)

    def test_fixed_joint(self):
        # frozen from a separate double loop over the four cells
        assert mutual_information([[0.4, 0.1], [0.1, 0.4]]) == pytest.approx(0.27807190511263774, abs=1e-12)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            mutual_information([[0.5, 0.6]])

    @given(joints())
    def test_double_sum(self, t):
        assert mutual_information(t) == pytest.approx(_double_sum_mi(t), abs=1e-9)

    @given(joints())
    def test_ceiling(self, t):
        ps, px = marginals(t)
        assert mutual_information(t) <= min(entropy(ps), entropy(px)) + 1e-9
        assert mutual_information(t) >= 0.0

    def test_joint_entropy(self):
        assert joint_entropy(np.full((2, 2), 0.25)) == pytest.approx(2.0)


class TestClassifierBound:
    def test_oracle_predictor(self):
        s = np.array([0, 1] * 50)
        q = np.eye(2)[s]
        assert classifier_mi_bound(s, q) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_predictor(self):
        s = np.array([0, 1, 1, 0, 1])
        assert classifier_mi_bound(s, np.full((5, 2), 0.5)) == 0.0

    def test_zero_probability_floored_with_warning(self):
        s = np.array([0, 1])
        with pytest.warns(RuntimeWarning, match="1 realized label"):
            v = classifier_mi_bound(s, np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert v == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            classifier_mi_bound(np.array([0, 1]), np.full((3, 2), 0.5))

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            classifier_mi_bound(np.array([0, 2]), np.full((2, 2), 0.5))

    def test_bounded_by_plugin_mi(self):
        # Bayes predictor on samples from a known joint: the bound stays below
        # the joint's MI up to sampling error.
        joint = np.array([[0.3, 0.1, 0.05, 0.05], [0.05, 0.1, 0.15, 0.2]])
        batch, _, index = gen_discrete(joint, 4, 20_000, seed=3, noise=0.0)
        post = (joint / joint.sum(0)).T
        q = post[index]
        v = classifier_mi_bound(batch.s, q)
        ref = mutual_information(joint)
        per = np.log2(q[np.arange(len(batch)), batch.s])
        sigma = per.std() / math.sqrt(len(batch))
        assert v <= ref + 3 * sigma
        assert v == pytest.approx(ref, abs=0.02)

    def test_logistic_on_discretizable_set(self):
        from sklearn.linear_model import LogisticRegression

        joint = np.array([[0.35, 0.05, 0.1], [0.05, 0.3, 0.15]])
        batch, _, index = gen_discrete(joint, 3, 6000, seed=5, noise=0.05)
        clf = LogisticRegression().fit(batch.x[:3000], batch.s[:3000])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            v = classifier_mi_bound(batch.s[3000:], clf.predict_proba(batch.x[3000:]))
        ref = mutual_information(empirical_joint(batch.s[3000:], index[3000:], 2, 3))
        assert 0.0 < v <= ref + 0.02
