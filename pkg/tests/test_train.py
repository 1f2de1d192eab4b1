import numpy as np
import pytest
from sklearn.cluster import KMeans

from nlucompress import datagen, dccl, svdcomp
from nlucompress import train as T
from nlucompress.errors import ParameterError, TrainingError
from nlucompress.nlu import CodeEmbedding, EncoderEmbedding, FactorizedEmbedding

SPEC = datagen.CorpusSpec(n_train=240, n_validation=60, n_test=60, vocab_size=300)


@pytest.fixture(scope="module")
def data():
    tr, va, te = datagen.generate(SPEC)
    emb = datagen.pretrained_embeddings(SPEC, dim=12)
    return tr, va, te, emb


@pytest.fixture(scope="module")
def baseline(data):
    tr, va, _, emb = data
    return T.train_nlu_baseline(tr, va, emb, T.TrainConfig(epochs=3, learning_rate=1e-2, hidden=8))


def cfg(regime, **kw):
    kw.setdefault("hidden", 8)
    return T.TrainConfig(regime=regime, **kw)


class TestConfig:
    def test_defaults_resolved(self):
        c = T.TrainConfig(regime="taskaware_svd").resolved()
        assert (c.epochs, c.learning_rate, c.optimizer, c.batch_size) == (5, 1e-3, "sgd", 32)
        c = T.TrainConfig().resolved()
        assert (c.epochs, c.learning_rate, c.optimizer) == (25, 1e-4, "adam")
        assert T.TrainConfig(regime="dccl_autoencoder").resolved().epochs == 300

    @pytest.mark.parametrize("kw", [dict(regime="bogus"), dict(learning_rate=0.0), dict(epochs=-1),
                                    dict(dropout=1.0), dict(tau=0.0), dict(K=1), dict(patience=0)])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            T.TrainConfig(**kw)

    def test_with_regime(self):
        c = T.TrainConfig(epochs=3, learning_rate=0.5, seed=9)
        d = c.with_regime("taskaware_dccl")
        assert d.seed == 9 and d.resolved().epochs == 5 and d.resolved().learning_rate == 1e-4
        e = c.with_regime("taskaware_svd", epochs=2)
        assert e.resolved().epochs == 2 and e.resolved().optimizer == "sgd"


class TestBaseline:
    def test_descent(self, data):
        tr, va, _, emb = data
        small = datagen.Corpus(tr.utterances[:50], tr.schema, tr.vocab)
        _, rep = T.train_nlu_baseline(small, None, emb, cfg("nlu_baseline", epochs=2, learning_rate=1e-2))
        assert rep.train_losses[1] < rep.train_losses[0]

    def test_reproducible(self, data, baseline):
        tr, va, _, emb = data
        model, rep = T.train_nlu_baseline(tr, va, emb, T.TrainConfig(epochs=3, learning_rate=1e-2, hidden=8))
        assert rep == baseline[1]
        assert model.to_bytes() == baseline[0].to_bytes()

    def test_early_stopping_restores_best(self, data):
        tr, va, _, emb = data
        model, rep = T.train_nlu_baseline(tr, va, emb, cfg("nlu_baseline", epochs=6, learning_rate=0.3,
                                                           optimizer="sgd", patience=2))
        best = min(rep.valid_losses)
        assert rep.valid_losses[rep.best_epoch - 1] == best
        assert rep.best_epoch <= rep.epochs_run
        # parameters are snapped to float32 after restoring
        assert model.mean_loss(va.utterances) == pytest.approx(best, rel=1e-4)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, data):
        tr, va, _, emb = data
        with pytest.raises(TrainingError):
            T.train_nlu_baseline(tr, va, emb.weights * 1e200, cfg("nlu_baseline", epochs=1))

    def test_report_lines(self, baseline):
        rep = baseline[1]
        lines = rep.to_lines().splitlines()
        assert len(lines) == rep.epochs_run + 1
        assert '"regime": "nlu_baseline"' in lines[-1]
        assert "best epoch" in rep.summary()


class TestAutoencoder:
    def test_capacity_saturation(self):
        W = np.random.default_rng(0).normal(size=(8, 4))
        ae, rep = T.train_dccl_autoencoder(W, cfg("dccl_autoencoder", M=1, K=8, epochs=400, learning_rate=1e-2,
                                                  batch_size=8))
        assert rep.metrics["final_mse"] <= 0.1 * rep.metrics["initial_mse"]

    def test_kmeans_oracle(self):
        rng = np.random.default_rng(1)
        centres = rng.normal(size=(16, 16)) * 2
        W = centres[rng.integers(0, 16, 256)] + 0.3 * rng.normal(size=(256, 16))
        # small batches give enough steps to leave the dead-codeword plateaus
        ae, rep = T.train_dccl_autoencoder(W, cfg("dccl_autoencoder", M=1, K=16, epochs=2000, learning_rate=1e-2,
                                                  batch_size=16))
        km = KMeans(16, n_init=10, random_state=0).fit(W)
        kmeans_mse = km.inertia_ / 256
        assert rep.metrics["final_mse"] <= 1.25 * kmeans_mse

    def test_deterministic_loss_twice(self):
        W = np.random.default_rng(2).normal(size=(20, 5))
        ae, _ = T.train_dccl_autoencoder(W, cfg("dccl_autoencoder", M=2, K=4, epochs=2))
        a = ae.loss_and_grad(W, np.arange(20), compute_grad=False)
        assert a == ae.loss_and_grad(W, np.arange(20), compute_grad=False)

    def test_reproducible_and_float32(self):
        W = np.random.default_rng(3).normal(size=(30, 5))
        c = cfg("dccl_autoencoder", M=2, K=4, epochs=3)
        a, ra = T.train_dccl_autoencoder(W, c)
        b, rb = T.train_dccl_autoencoder(W, c)
        assert ra == rb and dccl.autoencoder_to_bytes(a) == dccl.autoencoder_to_bytes(b)
        for p in a.parameters():
            assert np.array_equal(p.value, p.value.astype(np.float32))


@pytest.fixture(scope="module")
def compressed(data, baseline):
    W = baseline[0].source.matrix()
    ae, _ = T.train_dccl_autoencoder(W, cfg("dccl_autoencoder", M=4, K=8, epochs=5, learning_rate=1e-2))
    codes = dccl.compress_all(ae.encoder, ae.books.value, W)
    return ae, codes, ae.codebook_set()


class TestFinetune:
    def test_frozen_codebooks_and_improvement(self, data, baseline, compressed):
        tr, va, _, _ = data
        _, codes, books = compressed
        before = T.compressed_model(baseline[0], codes, books)
        model, rep = T.finetune_nlu_frozen_codes(baseline[0], codes, books, tr, va,
                                                 cfg("dccl_finetune_nlu", epochs=2, learning_rate=1e-2))
        assert isinstance(model.source, CodeEmbedding)
        assert model.source.books.value.astype(np.float32).tobytes() == books.books.tobytes()
        assert np.array_equal(model.source.codes.codes, codes.codes)
        assert model.mean_loss(va.utterances) <= before.mean_loss(va.utterances) + 1e-6

    def test_zero_epochs_is_noop(self, data, baseline, compressed):
        tr, va, _, _ = data
        _, codes, books = compressed
        before = T.compressed_model(baseline[0], codes, books)
        model, _ = T.finetune_nlu_frozen_codes(baseline[0], codes, books, tr, va, cfg("dccl_finetune_nlu", epochs=0))
        assert model.to_bytes() == before.to_bytes()

    def test_input_model_untouched(self, data, baseline, compressed):
        tr, va, _, _ = data
        _, codes, books = compressed
        ref = baseline[0].to_bytes()
        T.finetune_nlu_frozen_codes(baseline[0], codes, books, tr, va, cfg("dccl_finetune_nlu", epochs=1))
        assert baseline[0].to_bytes() == ref


class TestTaskAware:
    def test_pretrained_regime(self, data, baseline, compressed):
        tr, va, _, _ = data
        ae, _, _ = compressed
        W = baseline[0].source.matrix()
        ref_books = ae.books.value.copy()
        model, rep = T.train_taskaware_dccl(tr, va, W, cfg("taskaware_dccl", epochs=1, learning_rate=1e-2),
                                            baseline[0], ae)
        assert isinstance(model.source, EncoderEmbedding)
        assert np.array_equal(ae.books.value, ref_books)
        assert not np.array_equal(model.source.ae.books.value, ref_books)
        assert rep.epochs_run == 1

    def test_scratch_ignores_initializers(self, data, baseline, compressed):
        tr, va, _, _ = data
        ae, _, _ = compressed
        W = baseline[0].source.matrix()
        c = cfg("taskaware_dccl_scratch", epochs=1, M=4, K=8)
        a, _ = T.train_taskaware_dccl(tr, va, W, c, baseline[0], ae)
        b, _ = T.train_taskaware_dccl(tr, va, W, c)
        assert a.to_bytes() == b.to_bytes()

    def test_wrong_regime(self, data):
        tr, va, _, emb = data
        with pytest.raises(ParameterError):
            T.train_taskaware_dccl(tr, va, emb.weights, cfg("taskaware_svd"))

    def test_reproducible(self, data, baseline, compressed):
        tr, va, _, _ = data
        ae, _, _ = compressed
        W = baseline[0].source.matrix()
        c = cfg("taskaware_dccl_no_recon", epochs=1)
        a, ra = T.train_taskaware_dccl(tr, va, W, c, baseline[0], ae)
        b, rb = T.train_taskaware_dccl(tr, va, W, c, baseline[0], ae)
        assert ra == rb and a.to_bytes() == b.to_bytes()


class TestTaskAwareSvd:
    def test_init_equality(self, data, baseline):
        tr, va, _, _ = data
        f = svdcomp.svd_truncate(baseline[0].source.matrix(), 0.5)
        trainable = T.svd_model(baseline[0], f, trainable=True)
        frozen = T.svd_model(baseline[0], f, trainable=False)
        assert abs(trainable.mean_loss(va.utterances) - frozen.mean_loss(va.utterances)) <= 1e-9

    def test_descent_and_factors_train(self, data, baseline):
        tr, va, _, _ = data
        f = svdcomp.svd_truncate(baseline[0].source.matrix(), 0.5)
        model, rep = T.train_taskaware_svd(tr, None, f, baseline[0], cfg("taskaware_svd", epochs=3, learning_rate=0.05))
        assert rep.train_losses[0] > rep.train_losses[1] > rep.train_losses[2]
        assert isinstance(model.source, FactorizedEmbedding)
        small, proj = svdcomp.make_factorized_layer(f)
        assert not np.allclose(model.source.proj.value, proj)

    def test_full_rank_matches_baseline(self, data, baseline):
        tr, va, te, _ = data
        from nlucompress.metrics import evaluate
        f = svdcomp.svd_truncate(baseline[0].source.matrix(), 1.0)
        model, _ = T.train_taskaware_svd(tr, va, f, baseline[0], cfg("taskaware_svd", epochs=1))
        a, b = evaluate(model, te).irer, evaluate(baseline[0], te).irer
        assert abs(a - b) <= 0.02
