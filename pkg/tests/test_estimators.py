import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nlucompress import datagen, validation
from nlucompress.errors import CodeError, DimensionError, ParameterError
from nlucompress.estimators import DCCLCompressor, LinearQuantizer, NLUEstimator, SVDCompressor


def X(seed=0, shape=(40, 6)):
    return np.random.default_rng(seed).normal(size=shape)


class TestValidation:
    def test_check_matrix(self):
        assert validation.check_matrix([[1, 2], [3, 4]]).dtype == np.float64
        with pytest.raises(DimensionError):
            validation.check_matrix([1, 2, 3])
        with pytest.raises(DimensionError):
            validation.check_matrix([[np.nan]])
        with pytest.raises(DimensionError):
            validation.check_matrix([[1.0, 2.0]], n_cols=3)

    def test_check_codes(self):
        assert validation.check_codes([[0, 3]], 4, 2).dtype == np.int64
        with pytest.raises(CodeError):
            validation.check_codes([[0, 4]], 4)
        with pytest.raises(CodeError):
            validation.check_codes([[0.5, 1.0]], 4)
        with pytest.raises(DimensionError):
            validation.check_codes([0, 1], 4)

    def test_scalars(self):
        assert validation.check_fraction(1.0, "n") == 1.0
        with pytest.raises(ParameterError):
            validation.check_fraction(0.0, "n")
        assert validation.check_fraction(0.0, "p", low_open=False) == 0.0
        with pytest.raises(ParameterError):
            validation.check_positive(2.5, "M", integer=True)
        with pytest.raises(ParameterError):
            validation.check_range(300, "B", 2, 256)


class TestDCCLCompressor:
    def test_fit_transform_inverse(self):
        est = DCCLCompressor(M=2, K=4, epochs=3, learning_rate=1e-2)
        codes = est.fit_transform(X())
        assert codes.shape == (40, 2) and codes.max() < 4
        rec = est.inverse_transform(codes)
        assert rec.shape == (40, 6)
        assert est.score(X()) == pytest.approx(-np.mean(np.sum((rec - X()) ** 2, axis=1)))
        assert est.codebooks().books.shape == (2, 4, 6)

    def test_clone_and_params(self):
        est = DCCLCompressor(M=3, K=8)
        assert clone(est).get_params() == est.get_params()
        assert est.set_params(M=4).M == 4

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            DCCLCompressor().transform(X())

    def test_bad_params_and_input(self):
        with pytest.raises(ParameterError):
            DCCLCompressor(K=1, epochs=1).fit(X())
        est = DCCLCompressor(M=2, K=4, epochs=1).fit(X())
        with pytest.raises(DimensionError):
            est.transform(X(shape=(5, 3)))
        with pytest.raises(CodeError):
            est.inverse_transform(np.array([[0, 9]]))


class TestSVDCompressor:
    def test_full_rank_round_trip(self):
        est = SVDCompressor(n=1.0).fit(X())
        np.testing.assert_allclose(est.inverse_transform(est.transform(X())), X(), atol=1e-10)

    def test_rank_and_bad_n(self):
        assert SVDCompressor(n=0.5).fit(X()).transform(X()).shape == (40, 3)
        with pytest.raises(ParameterError):
            SVDCompressor(n=1.5).fit(X())


class TestLinearQuantizer:
    def test_matches_quantize(self):
        est = LinearQuantizer().fit(X())
        idx = est.transform(X())
        np.testing.assert_array_equal(idx, est.quantized_.data)
        err = np.abs(est.inverse_transform(idx) - X())
        assert err.max() <= est.quantized_.bin_width / 2 + 1e-12

    def test_constant(self):
        est = LinearQuantizer(bins=4).fit(np.ones((2, 2)))
        assert not est.transform(np.full((1, 2), 5.0)).any()


class TestNLUEstimator:
    def test_fit_predict_score(self):
        spec = datagen.CorpusSpec(n_train=120, n_validation=30, n_test=30, vocab_size=300)
        tr, va, te = datagen.generate(spec)
        emb = datagen.pretrained_embeddings(spec, dim=8)
        est = NLUEstimator(embeddings=emb, hidden=6, epochs=1, learning_rate=1e-2)
        est.fit(tr, validation=va)
        preds = est.predict(te)
        assert len(preds) == len(te)
        assert 0.0 <= est.score(te) <= 1.0
        assert clone(est).get_params()["hidden"] == 6

    def test_requires_embeddings(self):
        spec = datagen.CorpusSpec(n_train=20, n_validation=5, n_test=5, vocab_size=300)
        tr, _, _ = datagen.generate(spec)
        with pytest.raises(ValueError):
            NLUEstimator().fit(tr)
        with pytest.raises(ValueError):
            NLUEstimator(embeddings=np.zeros((10, 4))).fit(tr)
