import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from easter import ctc
from easter.ctc import LogProbLattice, Vocabulary
from easter.errors import InfeasibleAlignmentError, InvalidArgumentError
from easter.tensor import Tensor

from conftest import brute_force_ctc, numeric_grad, random_log_probs, rel_error


def lattice(logp, requires_grad=False):
    return LogProbLattice(Tensor(logp, requires_grad=requires_grad, dtype=np.float64))


def naive_collapse(path, blank):
    out = []
    prev = None
    for k in path:
        if k != prev:
            out.append(k)
        prev = k
    return [k for k in out if k != blank]


class TestVocabulary:
    def test_blank_last(self):
        v = Vocabulary.alnum()
        assert len(v) == 62 and v.blank_index == 62 and v.num_classes == 63

    def test_unique(self):
        with pytest.raises(InvalidArgumentError):
            Vocabulary("aba")

    def test_round_trip(self):
        v = Vocabulary.printed()
        assert v.decode(v.encode("Main St. $1,200.50")) == "Main St. $1,200.50"

    def test_oov(self):
        with pytest.raises(InvalidArgumentError):
            Vocabulary.alnum().encode("a!")


class TestCollapse:
    V = Vocabulary("1ab")
    E = V.blank_index

    def _path(self, s):
        return [self.E if c == "e" else self.V.encode(c)[0] for c in s]

    def test_worked_example(self):
        assert self.V.decode(ctc.collapse(self._path("1ebbeea"), self.E)) == "1ba"

    def test_all_blank(self):
        assert ctc.collapse([self.E] * 5, self.E) == []

    def test_blank_separates_repeats(self):
        assert self.V.decode(ctc.collapse(self._path("aea"), self.E)) == "aa"
        assert self.V.decode(ctc.collapse(self._path("aa"), self.E)) == "a"

    @settings(max_examples=200)
    @given(st.lists(st.integers(0, 3), max_size=20))
    def test_matches_naive(self, path):
        assert ctc.collapse(path, 3) == naive_collapse(path, 3)

    @settings(max_examples=200)
    @given(st.lists(st.integers(0, 3), max_size=20))
    def test_idempotent_on_blank_free_output(self, path):
        once = ctc.collapse(path, 3)
        # re-embed with blanks between symbols so repeats survive
        embedded = [x for k in once for x in (k, 3)]
        assert ctc.collapse(embedded, 3) == once


class TestCtcLoss:
    def test_single_frame(self):
        logp = np.log([[0.7, 0.3]])  # class 0 = 'a', class 1 = blank
        assert ctc.ctc_loss(lattice(logp), [0]).item() == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_empty_label(self, rng):
        logp = random_log_probs(rng, 6, 4)
        assert ctc.ctc_loss(lattice(logp), []).item() == pytest.approx(-logp[:, 3].sum(), abs=1e-10)

    def test_three_frames_exhaustive(self, rng):
        for label in ([], [0], [1], [0, 1], [1, 1], [0, 0]):
            logp = random_log_probs(rng, 3, 3)
            got = ctc.ctc_loss(lattice(logp), label).item()
            assert got == pytest.approx(brute_force_ctc(np.exp(logp), label, 2), abs=1e-6)

    def test_oracle_equivalence_random(self, rng):
        for _ in range(200):
            T = int(rng.integers(1, 6))
            L = int(rng.integers(1, 4))
            s = int(rng.integers(0, 4))
            label = rng.integers(0, L, size=s).tolist()
            if not ctc.is_feasible(label, T):
                continue
            logp = random_log_probs(rng, T, L + 1)
            got = ctc.ctc_loss(lattice(logp), label).item()
            assert got == pytest.approx(brute_force_ctc(np.exp(logp), label, L), abs=1e-6)

    def test_infeasible(self, rng):
        with pytest.raises(InfeasibleAlignmentError):
            ctc.ctc_loss(lattice(random_log_probs(rng, 2, 3)), [0, 0])
        with pytest.raises(InfeasibleAlignmentError):
            ctc.ctc_loss(lattice(random_log_probs(rng, 2, 3)), [0, 1, 0])

    def test_empty_lattice(self):
        with pytest.raises(InvalidArgumentError):
            ctc.ctc_loss(lattice(np.zeros((0, 3))), [])

    def test_valid_length_ignores_padding(self, rng):
        logp = random_log_probs(rng, 8, 4)
        short = ctc.ctc_loss(lattice(logp[:5]), [0, 2]).item()
        padded = ctc.ctc_loss(LogProbLattice(Tensor(logp, dtype=np.float64), 5), [0, 2]).item()
        assert short == padded

    def test_occupancy_rows_sum_to_one(self, rng):
        logp = random_log_probs(rng, 9, 5)
        _, occ = ctc.forward_backward(logp, [1, 1, 3], 4)
        np.testing.assert_allclose(occ.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_finite_difference(self, seed):
        r = np.random.default_rng(seed)
        T, L = int(r.integers(2, 7)), int(r.integers(1, 4))
        label = r.integers(0, L, size=int(r.integers(0, 3))).tolist()
        while not ctc.is_feasible(label, T):
            label = label[:-1]
        logp = random_log_probs(r, T, L + 1)
        lat = lattice(logp.copy(), requires_grad=True)
        ctc.ctc_loss(lat, label).backward()
        x = lat.values.data
        num = numeric_grad(lambda: ctc.ctc_loss(LogProbLattice(Tensor(x, dtype=np.float64)), label).data, x)
        assert rel_error(lat.values.grad, num) < 1e-3

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 2), max_size=6), st.integers(0, 12))
    def test_feasibility_monotone(self, label, T):
        if ctc.is_feasible(label, T):
            assert ctc.is_feasible(label, T + 1)

    def test_feasibility_matches_enumeration(self):
        # a label is feasible for T iff some length-T path collapses to it
        for T in range(1, 5):
            reachable = {tuple(ctc.collapse(p, 2)) for p in itertools.product(range(3), repeat=T)}
            for s in range(0, 5):
                for label in itertools.product(range(2), repeat=s):
                    assert ctc.is_feasible(label, T) == (label in reachable)


class TestWeightedCtc:
    def test_half_alpha_is_half_loss(self, rng):
        for _ in range(100):
            T, L = int(rng.integers(1, 10)), int(rng.integers(1, 6))
            label = rng.integers(0, L, size=int(rng.integers(0, 4))).tolist()
            if not ctc.is_feasible(label, T):
                continue
            lat = lattice(random_log_probs(rng, T, L + 1))
            assert abs(ctc.weighted_ctc_loss(lat, label, 0.5).item() - 0.5 * ctc.ctc_loss(lat, label).item()) <= 1e-9

    def test_half_alpha_gradient_is_half(self, rng):
        logp = random_log_probs(rng, 6, 4)
        a, b = lattice(logp.copy(), True), lattice(logp.copy(), True)
        ctc.weighted_ctc_loss(a, [0, 2], 0.5).backward()
        ctc.ctc_loss(b, [0, 2]).backward()
        np.testing.assert_allclose(a.values.grad, 0.5 * b.values.grad, atol=1e-12)

    def test_empty_label(self, rng):
        lat = lattice(random_log_probs(rng, 7, 3))
        assert ctc.weighted_ctc_loss(lat, [], 0.9).item() == pytest.approx(0.1 * ctc.ctc_loss(lat, []).item(), abs=1e-10)

    def test_alpha_shifts_gradient_to_characters(self, rng):
        logp = random_log_probs(rng, 8, 4)
        share = {}
        for alpha in (0.3, 0.7):
            lat = lattice(logp.copy(), True)
            ctc.weighted_ctc_loss(lat, [0, 1, 2], alpha).backward()
            g = lat.values.grad
            chars, blank = np.linalg.norm(g[:, :3]), np.linalg.norm(g[:, 3])
            share[alpha] = chars / (chars + blank)
        assert share[0.7] > share[0.3]

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.5])
    def test_alpha_range(self, rng, alpha):
        with pytest.raises(InvalidArgumentError):
            ctc.weighted_ctc_loss(lattice(random_log_probs(rng, 3, 3)), [0], alpha)


class TestGreedyDecode:
    V = Vocabulary("1ab")

    def _onehot(self, path):
        logp = np.full((len(path), 4), -10.0)
        logp[np.arange(len(path)), path] = 0.0
        return lattice(logp)

    def test_all_blank(self):
        assert ctc.greedy_decode(self._onehot([3, 3, 3]), self.V) == ""

    def test_worked_example(self):
        path = [0, 3, 2, 2, 3, 3, 1]  # 1 e b b e e a
        assert ctc.greedy_decode(self._onehot(path), self.V) == "1ba"

    def test_ties_to_lowest_index(self):
        assert ctc.greedy_decode(lattice(np.zeros((3, 4))), self.V) == "1"
        lat = np.log(np.array([[0.1, 0.4, 0.4, 0.1]]))
        assert ctc.greedy_decode(lattice(lat), self.V) == "a"

    def test_random_paths(self, rng):
        v = Vocabulary("xyz")
        for _ in range(1000):
            path = rng.integers(0, 4, size=int(rng.integers(0, 15))).tolist()
            out = ctc.greedy_decode(self._onehot(path) if path else lattice(np.zeros((0, 4))), v)
            assert out == v.decode(naive_collapse(path, 3))
            assert set(out) <= {v.chars[k] for k in path if k != 3}
