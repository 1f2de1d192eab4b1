import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlucompress import svdcomp
from nlucompress.errors import DimensionError, FormatError, ParameterError
from nlucompress.svdcomp import LowRankFactors


def rand(V, D, seed=0):
    return np.random.default_rng(seed).normal(size=(V, D))


class TestRank:
    @pytest.mark.parametrize("n,V,D,r", [(1.0, 10, 4, 4), (0.5, 10, 4, 2), (0.01, 100, 50, 1),
                                         (0.08, 2000, 50, 4), (0.1, 2000, 50, 5)])
    def test_values(self, n, V, D, r):
        assert svdcomp.retained_rank(n, V, D) == r

    @pytest.mark.parametrize("n", [0.0, -0.1, 1.01])
    def test_out_of_range(self, n):
        with pytest.raises(ParameterError):
            svdcomp.retained_rank(n, 10, 10)


class TestTruncate:
    def test_full_rank_is_exact(self):
        W = rand(30, 8)
        f = svdcomp.svd_truncate(W, 1.0)
        assert np.abs(f.reconstruction() - W).max() <= 1e-9

    def test_spectrum_matches_gram_eigenvalues(self):
        W = rand(40, 6, 3)
        eig = np.sort(np.linalg.eigvalsh(W.T @ W))[::-1]
        np.testing.assert_allclose(svdcomp.svd_spectrum(W), np.sqrt(eig), rtol=1e-10)

    def test_rank_one_hand(self):
        W = np.outer([1.0, 2.0, 2.0], [3.0, 4.0])
        f = svdcomp.svd_truncate(W, 0.5)
        assert f.r == 1
        assert f.S[0] == pytest.approx(15.0)
        np.testing.assert_allclose(f.reconstruction(), W, atol=1e-12)

    def test_frobenius_identity(self):
        W = rand(50, 10, 7)
        s = svdcomp.svd_spectrum(W)
        for n in (0.1, 0.3, 0.5, 0.8):
            f = svdcomp.svd_truncate(W, n)
            err2 = np.sum((W - f.reconstruction()) ** 2)
            assert err2 == pytest.approx(np.sum(s[f.r:] ** 2), abs=1e-9)

    def test_monotone_in_n(self):
        W = rand(60, 20, 9)
        errs = [np.linalg.norm(W - svdcomp.svd_truncate(W, n).reconstruction()) for n in (0.1, 0.3, 0.5, 0.7, 1.0)]
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))

    def test_factorized_layer(self):
        W = rand(20, 6, 2)
        f = svdcomp.svd_truncate(W, 0.5)
        small, proj = svdcomp.make_factorized_layer(f)
        assert small.shape == (20, 3) and proj.shape == (3, 6)
        np.testing.assert_allclose(small @ proj, f.reconstruction(), atol=1e-12)

    def test_bad_factor_shapes(self):
        with pytest.raises(DimensionError):
            LowRankFactors(np.zeros((4, 2)), np.ones(3), np.zeros((3, 5)), 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 12), st.floats(0.05, 1.0), st.integers(0, 2 ** 31))
    def test_eckart_young_property(self, V, D, n, seed):
        W = rand(V, D, seed)
        f = svdcomp.svd_truncate(W, n)
        s = svdcomp.svd_spectrum(W)
        err2 = np.sum((W - f.reconstruction()) ** 2)
        assert abs(err2 - np.sum(s[f.r:] ** 2)) <= 1e-9 * max(1.0, np.sum(s ** 2))


class TestSerialization:
    def test_round_trip(self, tmp_path):
        f = svdcomp.svd_truncate(rand(25, 7), 0.5)
        svdcomp.write_factors(tmp_path / "f.svdf", f)
        back = svdcomp.read_factors(tmp_path / "f.svdf")
        assert back.n == 0.5 and back.r == f.r
        for a, b in ((f.U, back.U), (f.S, back.S), (f.Vt, back.Vt)):
            np.testing.assert_array_equal(a.astype(np.float32), b)

    def test_size(self):
        f = svdcomp.svd_truncate(rand(25, 7), 0.5)
        data = svdcomp.factors_to_bytes(f)
        assert len(data) == 36 + f.payload_nbytes()

    def test_bad_magic_and_length(self):
        data = svdcomp.factors_to_bytes(svdcomp.svd_truncate(rand(5, 3), 1.0))
        with pytest.raises(FormatError):
            svdcomp.factors_from_bytes(b"NOPE" + data[4:])
        with pytest.raises(FormatError):
            svdcomp.factors_from_bytes(data[:-1])
        with pytest.raises(FormatError):
            svdcomp.factors_from_bytes(data[:10])
