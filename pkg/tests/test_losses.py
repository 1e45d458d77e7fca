import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msaes import losses as L
from msaes.losses import LossWeights
from msaes.tensor import Tape, backward, numerical_grad, parameter, precision, relative_error
from oracles import brute_mr, brute_mse, brute_sim


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


class TestMse:
    def test_equal(self):
        assert L.mse([0.3, 0.7], [0.3, 0.7]).item() == 0.0

    def test_hand_value(self):
        assert L.mse([0.5, 0.5], [0.0, 1.0]).item() == pytest.approx(0.25, abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        y, t = rng.random(8), rng.random(8)
        p = rng.permutation(8)
        assert L.mse(y, t).item() == pytest.approx(L.mse(y[p], t[p]).item(), abs=1e-15)

    def test_empty(self):
        with pytest.raises(L.DegenerateBatchError):
            L.mse([], [])


class TestSim:
    def test_identical(self):
        assert L.sim([0.2, 0.9, 0.4], [0.2, 0.9, 0.4]).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        assert L.sim([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariant(self):
        t = np.array([0.1, 0.5, 0.3])
        assert L.sim(2 * t, t).item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_vector_is_constant_one(self):
        y = parameter([0.0, 0.0])
        with Tape() as tape:
            loss = L.sim(y, [0.5, 0.2])
        assert loss.item() == 1.0
        assert not loss.requires_grad
        assert len(tape) == 0

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        y, t = rng.random(6), rng.random(6)
        assert L.sim(y, t).item() == pytest.approx(brute_sim(y, t), abs=1e-12)


class TestMr:
    def test_wrong_order_pair(self):
        assert brute_mr([0.8, 0.3], [0.7, 0.9]) == pytest.approx(0.5)
        assert L.mr([0.8, 0.3], [0.7, 0.9]).item() == pytest.approx(0.5, abs=1e-12)

    def test_tie(self):
        assert L.mr([0.4, 0.1], [0.5, 0.5]).item() == pytest.approx(0.3, abs=1e-12)

    def test_ordered_batch_zero(self):
        assert L.mr([0.1, 0.5, 0.9], [0.0, 0.4, 1.0]).item() == 0.0

    def test_exact_tie_predicted_exactly(self):
        assert L.mr([0.3, 0.3], [0.5, 0.5]).item() == 0.0

    def test_single_essay(self):
        with pytest.raises(L.DegenerateBatchError):
            L.mr([0.1], [0.2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])),
                    min_size=2, max_size=12),
           st.floats(-0.2, 0.2))
    def test_matches_oracle(self, rows, margin):
        y, t = map(np.array, zip(*rows))
        assert L.mr(y, t, margin).item() == pytest.approx(brute_mr(y, t, margin), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1), min_size=3, max_size=10, unique=True), st.floats(0.1, 10))
    def test_scale_equivariant(self, y, c):
        y = np.array(y)
        t = np.random.default_rng(len(y)).integers(0, 3, len(y)).astype(float)
        assert L.mr(c * y, t).item() == pytest.approx(c * L.mr(y, t).item(), rel=1e-9, abs=1e-12)


class TestCombined:
    def test_reduces_to_mse(self):
        w = LossWeights(alpha=2.0)
        assert L.combined([0.5, 0.5], [0.0, 1.0], w).item() == pytest.approx(0.5, abs=1e-12)

    def test_composes_term_by_term(self):
        y, t = [0.5, 0.5], [0.0, 1.0]
        w = LossWeights(1.0, 1.0, 1.0)
        expected = brute_mse(y, t) + brute_mr(y, t) + brute_sim(y, t)
        assert L.combined(y, t, w).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.25 + 0.0 + (1 - 0.5 / (np.sqrt(0.5) * 1.0)))

    def test_perfect_prediction_zero(self):
        y = [0.1, 0.4, 0.8]
        for w in (LossWeights(1, 0, 0), LossWeights(0.3, 2, 5), LossWeights(0, 1, 0)):
            assert L.combined(y, y, w).item() == pytest.approx(0.0, abs=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0, 0, 0)
        with pytest.raises(ValueError):
            LossWeights(1, -1, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        n = 6
        # distinct predictions spaced apart keep every hinge off its kink
        y = parameter(np.sort(rng.random(n)) + np.arange(n) * 0.1)
        rng.shuffle(y.data)
        t = rng.integers(0, 3, n) / 2.0
        w = LossWeights(1.0, 0.7, 0.4)
        f = lambda: L.combined(y, t, w)
        with Tape() as tape:
            loss = f()
        backward(loss, tape)
        assert relative_error(y.grad, numerical_grad(f, y, eps=1e-3)) < 1e-4


class TestRDrop:
    def test_identical(self):
        assert L.rdrop_consistency([0.3, 0.2], [0.3, 0.2]).item() == 0.0

    def test_value(self):
        assert L.rdrop_consistency([0.2], [0.6]).item() == pytest.approx(0.16, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            L.rdrop_consistency([0.1], [0.1, 0.2])

    def test_total_collapses_when_passes_agree(self):
        y, t = np.array([0.2, 0.7, 0.4]), np.array([0.0, 1.0, 0.5])
        w = LossWeights(1.0, 0.5, 0.5, rdrop_coeff=9.0)
        single = L.combined(y, t, w).item()
        assert L.rdrop_total(y, y.copy(), t, w).item() == single


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1), st.floats(0.01, 1)), min_size=2, max_size=10))
def test_all_losses_non_negative_and_permutation_invariant(rows):
    y, t = map(np.array, zip(*rows))
    p = np.random.default_rng(len(y)).permutation(len(y))
    for fn in (L.mse, L.sim, L.mr):
        v = fn(y, t).item()
        assert v >= -1e-12
        assert v == pytest.approx(fn(y[p], t[p]).item(), abs=1e-12)
