import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlucompress import embio
from nlucompress.embio import UNK, EmbeddingMatrix, Vocabulary
from nlucompress.errors import FormatError, ParseError


def write(tmp_path, text, name="e.txt"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestVocabulary:
    def test_unk_first(self):
        v = Vocabulary(["a", "b"])
        assert v.tokens == [UNK, "a", "b"]
        assert v.index("zzz") == 0

    def test_duplicates_rejected(self):
        with pytest.raises(FormatError):
            Vocabulary(["a", "a"])

    def test_unk_elsewhere_rejected(self):
        with pytest.raises(FormatError):
            Vocabulary(["a", UNK])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.text(min_size=1, max_size=6).filter(lambda s: s != UNK), unique=True, max_size=30))
    def test_index_token_inverse(self, tokens):
        v = Vocabulary(tokens)
        for i in range(len(v)):
            assert v.index(v.token(i)) == i


class TestText:
    def test_basic_read(self, tmp_path):
        emb = embio.load_text_embeddings(write(tmp_path, "2 3\na 1 2 3\nb 4 5 6\n"))
        assert emb.V == 3 and emb.dim == 3
        np.testing.assert_array_equal(emb.vector("a"), [1, 2, 3])
        np.testing.assert_allclose(emb.vector(UNK), [2.5, 3.5, 4.5])

    def test_empty_file(self, tmp_path):
        with pytest.raises(FormatError):
            embio.load_text_embeddings(write(tmp_path, ""))

    def test_bad_value_has_line_number(self, tmp_path):
        with pytest.raises(ParseError) as exc:
            embio.load_text_embeddings(write(tmp_path, "2 2\na 1 2\nb 3 x\n"))
        assert exc.value.line == 3

    def test_dimension_mismatch(self, tmp_path):
        with pytest.raises(FormatError):
            embio.load_text_embeddings(write(tmp_path, "2 2\na 1 2\nb 3 4 5\n"))

    def test_row_count_mismatch(self, tmp_path):
        with pytest.raises(FormatError):
            embio.load_text_embeddings(write(tmp_path, "3 2\na 1 2\n"))

    def test_round_trip_nine_digits(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = EmbeddingMatrix(Vocabulary([f"t{i}" for i in range(20)]), rng.normal(size=(21, 7)))
        p = tmp_path / "rt.txt"
        embio.save_text_embeddings(emb, p)
        back = embio.load_text_embeddings(p)
        assert back.vocab == emb.vocab
        np.testing.assert_allclose(back.weights, emb.weights, rtol=1e-8, atol=0)


class TestBinary:
    def test_zero_case(self, tmp_path):
        emb = EmbeddingMatrix(Vocabulary([]), np.zeros((1, 1)))
        embio.save_binary(emb, tmp_path / "z.emb1")
        back = embio.load_binary(tmp_path / "z.emb1")
        assert back.weights.tolist() == [[0.0]]

    def test_random_100x50(self, tmp_path):
        rng = np.random.default_rng(1)
        emb = EmbeddingMatrix(Vocabulary([f"w{i}" for i in range(99)]), rng.normal(size=(100, 50)))
        embio.save_binary(emb, tmp_path / "r.emb1")
        back = embio.load_binary(tmp_path / "r.emb1")
        assert back.weights.tobytes() == emb.weights.tobytes()
        assert back.vocab == emb.vocab

    def test_layout(self):
        emb = EmbeddingMatrix(Vocabulary(["a"]), np.array([[1.0], [2.0]]))
        data = embio.embeddings_to_bytes(emb)
        assert data[:4] == b"EMB1"
        assert int.from_bytes(data[4:12], "little") == 2 and int.from_bytes(data[12:20], "little") == 1
        assert np.frombuffer(data[20:28], "<f4").tolist() == [1.0, 2.0]

    def test_bad_magic_and_truncation(self):
        emb = EmbeddingMatrix(Vocabulary(["a"]), np.ones((2, 3)))
        data = embio.embeddings_to_bytes(emb)
        with pytest.raises(FormatError):
            embio.embeddings_from_bytes(b"XXXX" + data[4:])
        with pytest.raises(FormatError):
            embio.embeddings_from_bytes(data[:25])

    def test_non_finite_rejected(self):
        with pytest.raises(FormatError):
            EmbeddingMatrix(Vocabulary([]), np.array([[np.inf]]))
