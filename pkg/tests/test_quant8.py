import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from nlucompress import container, quant8
from nlucompress.errors import ParameterError
from nlucompress.nlu import NLU_MAGIC, NluModel


class TestQuantize:
    def test_constant_matrix(self):
        q = quant8.quantize(np.full((3, 4), 2.5))
        assert q.bin_width == 0.0 and not q.data.any()
        np.testing.assert_array_equal(quant8.dequantize(q), np.full((3, 4), 2.5))

    def test_zero_matrix(self):
        np.testing.assert_array_equal(quant8.dequantize(quant8.quantize(np.zeros((2, 2)))), np.zeros((2, 2)))

    def test_half_point(self):
        q = quant8.quantize(np.array([[0.0, 0.5, 1.0]]))
        assert q.data.tolist() == [[0, 128, 255]]
        assert quant8.dequantize(q)[0, 1] == pytest.approx(128 / 255)
        assert round(quant8.dequantize(q)[0, 1], 6) == 0.501961

    @pytest.mark.parametrize("B", [1, 257, 0])
    def test_bin_range(self, B):
        with pytest.raises(ParameterError):
            quant8.quantize(np.ones((2, 2)), B)

    def test_non_finite(self):
        with pytest.raises(ParameterError):
            quant8.quantize(np.array([[np.nan]]))

    def test_payload_quarter(self):
        m = np.random.default_rng(0).normal(size=(50, 256)).astype(np.float32)
        q = quant8.quantize(m)
        assert 4 * q.payload_nbytes() == m.nbytes

    def test_integer_path(self):
        rng = np.random.default_rng(1)
        W = rng.normal(size=(8, 5))
        x = rng.normal(size=(3, 8))
        q = quant8.quantize(W)
        np.testing.assert_allclose(q.matmul_left(x), x @ quant8.dequantize(q), atol=1e-3)

    @settings(max_examples=300, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                      elements=st.floats(-1e3, 1e3)), st.integers(2, 256))
    def test_error_bound(self, m, B):
        q = quant8.quantize(m, B)
        err = np.abs(quant8.dequantize(q) - m)
        assert np.all(err <= q.bin_width / 2 + 1e-9 * max(1.0, np.abs(m).max()))
        assert q.data.max(initial=0) < B

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-10, 10)), st.integers(2, 256))
    def test_requantize_fixed_point(self, m, B):
        q = quant8.quantize(m, B)
        q2 = quant8.quantize(quant8.dequantize(q), B)
        if q.bin_width > 0 and q.data.max() == B - 1 and q.data.min() == 0:
            np.testing.assert_array_equal(q.data, q2.data)

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, (3, 5), elements=st.integers(-50, 50).map(float)), st.sampled_from([0.5, 2.0, 8.0]))
    def test_scale_covariance(self, m, alpha):
        # powers of two keep the scaled arithmetic exact
        a, b = quant8.quantize(m), quant8.quantize(alpha * m)
        np.testing.assert_array_equal(a.data, b.data)
        assert b.min == alpha * a.min and b.bin_width == alpha * a.bin_width


class TestQuantizeModel:
    def test_recurrent_only_by_default(self, tiny_model):
        q, rep = quant8.quantize_model(tiny_model)
        assert set(q.quantized) == set(quant8.RECURRENT_WEIGHTS)
        assert rep.ratio == 4.0
        assert "lstm.f.b" not in q.quantized and "crf.trans" not in q.quantized

    def test_heads_flag(self, tiny_model):
        q, _ = quant8.quantize_model(tiny_model, include_heads=True)
        assert set(q.quantized) == set(quant8.RECURRENT_WEIGHTS) | set(quant8.HEAD_WEIGHTS)

    def test_original_untouched(self, tiny_model):
        before = tiny_model.to_bytes()
        quant8.quantize_model(tiny_model)
        assert tiny_model.to_bytes() == before

    def test_serialized_sizes_exact(self, tiny_model):
        tiny_model.round_to_float32()
        q, rep = quant8.quantize_model(tiny_model)
        _, full = container.section_sizes(tiny_model.to_bytes(), NLU_MAGIC)
        _, small = container.section_sizes(q.to_bytes(), NLU_MAGIC)
        for name in quant8.RECURRENT_WEIGHTS:
            assert full[name] == 4 * rep.tensors[name]
            # one byte per entry plus the two float64 scale constants
            assert small[name] == rep.tensors[name] + 16
        assert sum(full[n] for n in rep.tensors) == 4 * rep.quantized_payload_bytes
        back = NluModel.from_bytes(q.to_bytes())
        for name, qm in q.quantized.items():
            np.testing.assert_array_equal(back.quantized[name].data, qm.data)
