import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from nlucompress import crf
from nlucompress import numerics as nx
from nlucompress.errors import DimensionError, LabelError


def brute(E, A):
    L, T = E.shape
    paths = list(itertools.product(range(T), repeat=L))
    scores = [crf.path_score(E, A, p) for p in paths]
    best = max(scores)
    first = next(p for p, s in zip(paths, scores) if s == best)
    return logsumexp(scores), list(first)


def instance(L, T, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(L, T)), rng.normal(size=(T + 2, T + 2))


class TestSingle:
    def test_single_token_hand(self):
        E = np.array([[1.0, 2.0]])
        A = np.zeros((4, 4))
        assert crf.crf_log_partition(E, A) == pytest.approx(np.log(np.e + np.e ** 2))
        assert crf.viterbi(E, A) == [1]

    def test_tie_breaks_low(self):
        assert crf.viterbi(np.zeros((3, 3)), np.zeros((5, 5))) == [0, 0, 0]

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            crf.crf_log_partition(np.zeros((2, 3)), np.zeros((4, 4)))
        with pytest.raises(DimensionError):
            crf.crf_log_partition(np.zeros((0, 3)), np.zeros((5, 5)))
        with pytest.raises(LabelError):
            crf.crf_nll(np.zeros((2, 3)), np.zeros((5, 5)), [0, 3])

    def test_nll_non_negative(self):
        E, A = instance(3, 3, 1)
        for p in itertools.product(range(3), repeat=3):
            assert crf.crf_nll(E, A, p) >= -1e-12

    def test_exhaustive_oracle_all_small_shapes(self):
        seed = 0
        for L in range(1, 5):
            for T in range(1, 5):
                for _ in range(13):
                    E, A = instance(L, T, seed)
                    seed += 1
                    z, best = brute(E, A)
                    assert abs(crf.crf_log_partition(E, A) - z) <= 1e-9
                    assert crf.viterbi(E, A) == best


class TestBatch:
    def test_matches_single(self):
        rng = np.random.default_rng(4)
        B, L, T = 4, 5, 3
        E = rng.normal(size=(B, L, T))
        A = rng.normal(size=(T + 2, T + 2))
        lengths = [5, 3, 1, 4]
        mask = np.array([[t < n for t in range(L)] for n in lengths])
        tags = rng.integers(0, T, size=(B, L))
        nll, _, _ = crf.crf_nll_batch(E, mask, tags, A)
        for b, n in enumerate(lengths):
            assert nll[b] == pytest.approx(crf.crf_nll(E[b, :n], A, tags[b, :n]), abs=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        B, L, T = 3, 4, 3
        E = nx.Parameter("E", rng.normal(size=(B, L, T)))
        A = nx.Parameter("A", rng.normal(size=(T + 2, T + 2)))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=bool)
        tags = rng.integers(0, T, size=(B, L))

        def loss():
            nll, gE, gA = crf.crf_nll_batch(E.value, mask, tags, A.value)
            E.grad[...] = gE
            A.grad[...] = gA
            return float(nll.sum())

        rep = nx.grad_check(loss, [E, A], h=1e-4, tol=1e-3)
        assert rep.passed, rep.failures

    def test_empty_sequence_rejected(self):
        with pytest.raises(DimensionError):
            crf.crf_nll_batch(np.zeros((1, 2, 2)), np.zeros((1, 2), bool), np.zeros((1, 2), int), np.zeros((4, 4)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_partition_bounds_path_scores(self, L, T, seed):
        E, A = instance(L, T, seed)
        z = crf.crf_log_partition(E, A)
        best = crf.viterbi(E, A)
        assert crf.path_score(E, A, best) <= z + 1e-12
