"""Compositional codes: encoder, codebooks, reconstruction and the ``DCCL`` file.

A word vector ``w`` is encoded as ``M`` integers in ``[0, K)``; it is
reconstructed as the sum of one codeword from each of the ``M`` codebooks.

``DCCL`` file layout (little-endian)::

    header   b"DCCL" | version u32 | V u64 | M u32 | K u32 | D u32 | bits u32   (32 bytes)
    books    M*K*D float32, book-major then codeword-major
    codes    ceil(V*M*bits / 8) bytes; code (i, m) occupies stream bits
             [(i*M + m)*bits, (i*M + m + 1)*bits), least significant bit first,
             stream bit j living in bit (j % 8) of byte j // 8
    vocab    V x (u32 length, UTF-8 token)
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .embio import EmbeddingMatrix, Vocabulary, atomic_write, read_tokens, tokens_nbytes, write_tokens
from .errors import CodeError, DimensionError, FormatError, ParameterError

DCCL_MAGIC = b"DCCL"
DCCL_VERSION = 1
_HEADER = struct.Struct("<4sIQIIII")
HEADER_NBYTES = _HEADER.size


def bits_per_code(K: int) -> int:
    if K < 2:
        raise ParameterError(f"K must be at least 2, got {K}")
    return (int(K) - 1).bit_length()


@dataclass(eq=False)
class CodebookSet:
    """``M`` codebooks of ``K`` codewords each, stored as float32 ``(M, K, D)``."""

    books: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.books, dtype=np.float32)
        if b.ndim != 3:
            raise DimensionError(f"codebooks must be (M, K, D), got shape {b.shape}")
        if b.shape[0] < 1 or b.shape[1] < 2:
            raise ParameterError(f"need M >= 1 and K >= 2, got M={b.shape[0]}, K={b.shape[1]}")
        if not np.all(np.isfinite(b)):
            raise ParameterError("codebooks must be finite")
        self.books = b

    M = property(lambda self: self.books.shape[0])
    K = property(lambda self: self.books.shape[1])
    D = property(lambda self: self.books.shape[2])

    def payload_nbytes(self) -> int:
        return self.books.size * 4


@dataclass(eq=False)
class CodeMatrix:
    """``V x M`` integer codes over an alphabet of size ``K``."""

    codes: np.ndarray
    K: int

    def __post_init__(self):
        c = np.asarray(self.codes)
        if c.ndim != 2:
            raise DimensionError(f"codes must be (V, M), got shape {c.shape}")
        if c.size and not np.issubdtype(c.dtype, np.integer):
            raise CodeError("codes must be integers")
        c = c.astype(np.int64)
        if c.size and (c.min() < 0 or c.max() >= self.K):
            raise CodeError(f"codes must lie in [0, {self.K})")
        self.codes = c
        bits_per_code(self.K)

    V = property(lambda self: self.codes.shape[0])
    M = property(lambda self: self.codes.shape[1])

    def payload_nbytes(self) -> int:
        return math.ceil(self.V * self.M * bits_per_code(self.K) / 8)


class DcclEncoder:
    """Two linear maps with a tanh between them, emitting ``M`` blocks of ``K`` logits.

    ``x (N, D) -> tanh(x A1 + b1) (N, H) -> (.) A2 + b2 (N, M*K)``.
    """

    def __init__(self, D: int, M: int, K: int, H: int | None = None, rng: np.random.Generator | None = None):
        if M < 1 or K < 2 or D < 1:
            raise ParameterError(f"invalid encoder shape D={D}, M={M}, K={K}")
        self.D, self.M, self.K = int(D), int(M), int(K)
        self.H = int(H) if H else max(1, self.M * self.K // 2)
        rng = rng or nx.make_rng(0)
        self.A1 = nx.Parameter("enc.A1", rng.normal(0.0, 1.0 / math.sqrt(self.D), (self.D, self.H)))
        self.b1 = nx.Parameter("enc.b1", np.zeros(self.H))
        self.A2 = nx.Parameter("enc.A2", rng.normal(0.0, 1.0 / math.sqrt(self.H), (self.H, self.M * self.K)))
        self.b2 = nx.Parameter("enc.b2", np.zeros(self.M * self.K))

    def parameters(self) -> list[nx.Parameter]:
        return [self.A1, self.b1, self.A2, self.b2]

    def logits(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(logits (N, M, K), hidden (N, H))``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.D:
            raise DimensionError(f"encoder expects (N, {self.D}) input, got {x.shape}")
        hidden = np.tanh(x @ self.A1.value + self.b1.value)
        z = hidden @ self.A2.value + self.b2.value
        return z.reshape(-1, self.M, self.K), hidden

    def encode(self, x, tau: float = 1.0, rng=None, mode: str = nx.DETERMINISTIC, hard: bool = True):
        """Encode rows of ``x``; returns an :class:`EncoderPass` holding the code vectors."""
        z, hidden = self.logits(x)
        soft = nx.gumbel_softmax(z, tau, rng, mode)
        r = nx.one_hot_argmax(soft) if hard else soft
        return EncoderPass(np.asarray(x, dtype=np.float64), hidden, soft, r, tau)

    def backward(self, enc_pass: "EncoderPass", grad_r: np.ndarray, need_input_grad: bool = False):
        """Accumulate parameter gradients given ``dL/dr``.

        For hard passes this is the straight-through estimator: ``dL/dr`` is
        routed through the soft vector's Jacobian.
        """
        n = grad_r.shape[0]
        dz = nx.softmax_backward(enc_pass.soft, grad_r, enc_pass.tau).reshape(n, self.M * self.K)
        h = enc_pass.hidden
        self.A2.grad += h.T @ dz
        self.b2.grad += dz.sum(axis=0)
        da = (dz @ self.A2.value.T) * (1.0 - h * h)
        self.A1.grad += enc_pass.x.T @ da
        self.b1.grad += da.sum(axis=0)
        if need_input_grad:
            return da @ self.A1.value.T
        return None

    def codes(self, x) -> np.ndarray:
        """Deterministic argmax codes ``(N, M)``; ties go to the lowest index."""
        z, _ = self.logits(x)
        return np.argmax(z, axis=-1)

    def state(self) -> dict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict):
        for p in self.parameters():
            p.value[...] = state[p.name]


@dataclass
class EncoderPass:
    x: np.ndarray
    hidden: np.ndarray
    soft: np.ndarray
    r: np.ndarray
    tau: float


def reconstruct(codes_or_onehots, books) -> np.ndarray:
    """Sum the selected codeword of every codebook.

    Accepts integer codes ``(N, M)`` or code vectors ``(N, M, K)`` (one-hot or
    soft); ``books`` is a :class:`CodebookSet` or an ``(M, K, D)`` array.
    Single words may be passed without the leading ``N`` axis.
    """
    C = books.books if isinstance(books, CodebookSet) else np.asarray(books)
    C = C.astype(np.float64, copy=False)
    M, K, _ = C.shape
    arr = np.asarray(codes_or_onehots)
    if np.issubdtype(arr.dtype, np.integer):
        single = arr.ndim == 1
        codes = arr.reshape(-1, arr.shape[-1]) if arr.size else arr.reshape(0, M)
        if codes.shape[1] != M:
            raise DimensionError(f"expected {M} codes per word, got {codes.shape[1]}")
        if codes.size and (codes.min() < 0 or codes.max() >= K):
            raise CodeError(f"code index outside [0, {K})")
        out = np.zeros((codes.shape[0], C.shape[2]))
        for m in range(M):
            out += C[m, codes[:, m]]
        return out[0] if single else out
    single = arr.ndim == 2
    r = arr[None] if single else arr
    if r.shape[1:] != (M, K):
        raise DimensionError(f"code vectors must be (N, {M}, {K}), got {arr.shape}")
    out = np.einsum("nmk,mkd->nd", r.astype(np.float64), C)
    return out[0] if single else out


def reconstruct_backward(r: np.ndarray, grad_out: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dL/dr, dL/dC)`` for ``out = reconstruct(r, C)``."""
    grad_r = np.einsum("nd,mkd->nmk", grad_out, C)
    grad_C = np.einsum("nmk,nd->mkd", r, grad_out)
    return grad_r, grad_C


class DcclAutoencoder:
    """Encoder plus trainable codebooks; the unit trained by the autoencoding task."""

    def __init__(self, D: int, M: int, K: int, H: int | None = None, rng: np.random.Generator | None = None):
        rng = rng or nx.make_rng(0)
        self.encoder = DcclEncoder(D, M, K, H, rng)
        self.books = nx.Parameter("books", rng.normal(0.0, 1.0 / math.sqrt(M), (M, K, D)))

    M = property(lambda self: self.encoder.M)
    K = property(lambda self: self.encoder.K)
    D = property(lambda self: self.encoder.D)

    def parameters(self) -> list[nx.Parameter]:
        return self.encoder.parameters() + [self.books]

    def codebook_set(self) -> CodebookSet:
        return CodebookSet(self.books.value)

    def forward(self, x, tau=1.0, rng=None, mode=nx.DETERMINISTIC, hard=True):
        enc_pass = self.encoder.encode(x, tau, rng, mode, hard)
        return enc_pass, reconstruct(enc_pass.r, self.books.value)

    def backward(self, enc_pass, grad_out, need_input_grad=False):
        grad_r, grad_C = reconstruct_backward(enc_pass.r, grad_out, self.books.value)
        self.books.grad += grad_C
        return self.encoder.backward(enc_pass, grad_r, need_input_grad)

    def loss_and_grad(self, W, word_ids, tau=1.0, rng=None, mode=nx.DETERMINISTIC, hard=True,
                      compute_grad=True) -> float:
        """Mean squared reconstruction error over ``word_ids``; fills ``.grad``."""
        word_ids = np.asarray(word_ids, dtype=np.int64)
        if word_ids.size == 0:
            raise ParameterError("word_ids must be non-empty")
        x = np.asarray(W, dtype=np.float64)[word_ids]
        enc_pass, recon = self.forward(x, tau, rng, mode, hard)
        diff = recon - x
        n = x.shape[0]
        loss = float((diff * diff).sum() / n)
        if compute_grad:
            self.backward(enc_pass, 2.0 * diff / n)
        return loss

    def state(self) -> dict:
        state = self.encoder.state()
        state["books"] = self.books.value.copy()
        return state

    def load_state(self, state: dict):
        self.encoder.load_state(state)
        self.books.value[...] = state["books"]


def encode_word(enc: DcclEncoder, w, tau=1.0, rng=None, mode=nx.DETERMINISTIC, hard=True):
    """Encode one vector; returns ``(r (M, K), soft (M, K))``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ParameterError("word vector must be finite")
    enc_pass = enc.encode(w[None], tau, rng, mode, hard)
    return enc_pass.r[0], enc_pass.soft[0]


def _as_books(books) -> np.ndarray:
    return books.books if isinstance(books, CodebookSet) else np.asarray(books)


def _weights(emb) -> np.ndarray:
    return emb.weights if isinstance(emb, EmbeddingMatrix) else np.asarray(emb)


def reconstruction_loss(emb, enc: DcclEncoder, books, word_ids, tau=1.0, rng=None,
                        mode=nx.DETERMINISTIC, hard=True) -> float:
    """Mean over ``word_ids`` (duplicates counted) of ``||w - w'||^2``."""
    word_ids = np.asarray(word_ids, dtype=np.int64)
    if word_ids.size == 0:
        raise ParameterError("word_ids must be non-empty")
    x = np.asarray(_weights(emb), dtype=np.float64)[word_ids]
    enc_pass = enc.encode(x, tau, rng, mode, hard)
    diff = reconstruct(enc_pass.r, _as_books(books)) - x
    return float((diff * diff).sum() / x.shape[0])


def compress_all(enc: DcclEncoder, books, emb, batch_size: int = 1024) -> CodeMatrix:
    """Deterministic argmax codes for every vocabulary row."""
    W = _weights(emb)
    parts = [enc.codes(W[i:i + batch_size]) for i in range(0, W.shape[0], batch_size)]
    codes = np.concatenate(parts) if parts else np.zeros((0, enc.M), dtype=np.int64)
    return CodeMatrix(codes, enc.K)


def pack_codes(codes: CodeMatrix) -> bytes:
    b = bits_per_code(codes.K)
    flat = codes.codes.reshape(-1).astype(np.uint64)
    bits = ((flat[:, None] >> np.arange(b, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, V: int, M: int, K: int) -> CodeMatrix:
    b = bits_per_code(K)
    nbits = V * M * b
    need = math.ceil(nbits / 8)
    if len(data) < need:
        raise FormatError(f"code stream truncated: need {need} bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(bytes(data[:need]), dtype=np.uint8), count=nbits, bitorder="little")
    weights = (np.uint64(1) << np.arange(b, dtype=np.uint64))
    flat = (bits.reshape(-1, b).astype(np.uint64) * weights).sum(axis=1)
    codes = flat.astype(np.int64).reshape(V, M)
    if codes.size and codes.max() >= K:
        raise FormatError(f"decoded code {codes.max()} outside alphabet of size {K}")
    return CodeMatrix(codes, K)


def compressed_to_bytes(codes: CodeMatrix, books: CodebookSet, vocab: Vocabulary) -> bytes:
    if codes.M != books.M or codes.K != books.K:
        raise DimensionError(f"codes (M={codes.M}, K={codes.K}) do not match books (M={books.M}, K={books.K})")
    if codes.V != len(vocab):
        raise DimensionError(f"{codes.V} code rows for a vocabulary of {len(vocab)}")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(DCCL_MAGIC, DCCL_VERSION, codes.V, codes.M, codes.K, books.D, bits_per_code(codes.K)))
    buf.write(books.books.astype("<f4").tobytes())
    buf.write(pack_codes(codes))
    write_tokens(buf, vocab)
    return buf.getvalue()


def compressed_from_bytes(data: bytes) -> tuple[CodeMatrix, CodebookSet, Vocabulary]:
    if len(data) < HEADER_NBYTES:
        raise FormatError("truncated DCCL header")
    magic, version, V, M, K, D, bits = _HEADER.unpack_from(data, 0)
    if magic != DCCL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DCCL_MAGIC!r}")
    if version != DCCL_VERSION:
        raise FormatError(f"unsupported DCCL version {version}")
    if K < 2 or bits != bits_per_code(K):
        raise FormatError(f"inconsistent header: K={K}, bits={bits}")
    off = HEADER_NBYTES
    nbook = M * K * D * 4
    if len(data) < off + nbook:
        raise FormatError("truncated codebooks")
    books = np.frombuffer(data, dtype="<f4", count=M * K * D, offset=off).astype(np.float32).reshape(M, K, D)
    off += nbook
    ncode = math.ceil(V * M * bits / 8)
    if len(data) < off + ncode:
        raise FormatError("truncated code stream")
    codes = unpack_codes(data[off:off + ncode], V, M, K)
    off += ncode
    stream = io.BytesIO(data[off:])
    vocab = Vocabulary(read_tokens(stream, V))
    if stream.read(1):
        raise FormatError("trailing bytes after DCCL vocabulary")
    return codes, CodebookSet(books), vocab


def write_compressed(path, codes: CodeMatrix, books: CodebookSet, vocab: Vocabulary):
    atomic_write(path, compressed_to_bytes(codes, books, vocab))


def read_compressed(path) -> tuple[CodeMatrix, CodebookSet, Vocabulary]:
    with open(path, "rb") as fh:
        return compressed_from_bytes(fh.read())


def compressed_nbytes(V: int, M: int, K: int, D: int, vocab_nbytes: int = 0) -> int:
    """Exact size of a DCCL file with the given shape."""
    return HEADER_NBYTES + M * K * D * 4 + math.ceil(V * M * bits_per_code(K) / 8) + vocab_nbytes


def vocab_nbytes(vocab: Vocabulary) -> int:
    return tokens_nbytes(vocab)


def compression_rate(original_bytes: float, compressed_bytes: float) -> float:
    if not compressed_bytes > 0:
        raise ParameterError(f"compressed size must be positive, got {compressed_bytes}")
    return float(original_bytes) / float(compressed_bytes)


# ---------------------------------------------------------------------------
# autoencoder checkpoints
# ---------------------------------------------------------------------------

AE_MAGIC = b"DAE1"


def autoencoder_to_bytes(ae: DcclAutoencoder) -> bytes:
    from . import container
    header = {"format": "DAE1", "D": ae.D, "M": ae.M, "K": ae.K, "H": ae.encoder.H}
    return container.pack(AE_MAGIC, header,
                          [({"name": p.name, "enc": "f32", "shape": list(p.shape)}, p.value) for p in ae.parameters()])


def autoencoder_from_bytes(data: bytes) -> DcclAutoencoder:
    from . import container
    header, tensors = container.unpack(data, AE_MAGIC)
    ae = DcclAutoencoder(header["D"], header["M"], header["K"], header["H"])
    for p in ae.parameters():
        if p.name not in tensors or tuple(tensors[p.name].shape) != p.shape:
            raise FormatError(f"autoencoder checkpoint lacks a valid {p.name!r} tensor")
        p.value[...] = tensors[p.name]
    return ae


def save_autoencoder(path, ae: DcclAutoencoder):
    atomic_write(path, autoencoder_to_bytes(ae))


def load_autoencoder(path) -> DcclAutoencoder:
    with open(path, "rb") as fh:
        return autoencoder_from_bytes(fh.read())
