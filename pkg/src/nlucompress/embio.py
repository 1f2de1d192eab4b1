"""Vocabularies and embedding matrices, with text and ``EMB1`` binary I/O.

Binary layout (all little-endian)::

    b"EMB1" | V: u64 | D: u64 | V*D float32, row-major | V x (u32 length, UTF-8 token)
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ParseError

UNK = "<unk>"
EMB_MAGIC = b"EMB1"


class Vocabulary:
    """Ordered unique tokens with ``<unk>`` pinned at index 0."""

    def __init__(self, tokens=()):
        tokens = list(tokens)
        if UNK in tokens and tokens[0] != UNK:
            raise FormatError(f"{UNK} must be the first token")
        if not tokens or tokens[0] != UNK:
            tokens.insert(0, UNK)
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise FormatError(f"duplicate token {tok!r}")
            index[tok] = i
        self._tokens = tokens
        self._index = index

    def __len__(self):
        return len(self._tokens)

    def __iter__(self):
        return iter(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __repr__(self):
        return f"Vocabulary(V={len(self)})"

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def index(self, token: str) -> int:
        """Index of ``token``; unknown tokens map to ``<unk>`` (0)."""
        return self._index.get(token, 0)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens) -> list[int]:
        return [self._index.get(t, 0) for t in tokens]


def write_tokens(stream, tokens):
    for tok in tokens:
        data = tok.encode("utf-8")
        stream.write(struct.pack("<I", len(data)))
        stream.write(data)


def read_tokens(stream, count: int) -> list[str]:
    tokens = []
    for _ in range(count):
        raw = stream.read(4)
        if len(raw) < 4:
            raise FormatError("truncated vocabulary section")
        (n,) = struct.unpack("<I", raw)
        data = stream.read(n)
        if len(data) < n:
            raise FormatError("truncated vocabulary section")
        tokens.append(data.decode("utf-8"))
    return tokens


def tokens_nbytes(tokens) -> int:
    return sum(4 + len(t.encode("utf-8")) for t in tokens)


@dataclass(eq=False)
class EmbeddingMatrix:
    """V x D float32 weights paired with their vocabulary."""

    vocab: Vocabulary
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 2:
            raise DimensionError(f"weights must be 2-d, got shape {w.shape}")
        if w.shape[0] != len(self.vocab):
            raise DimensionError(f"{w.shape[0]} rows for a vocabulary of {len(self.vocab)}")
        if not np.all(np.isfinite(w)):
            raise FormatError("embedding weights must be finite")
        self.weights = w

    @property
    def V(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def vector(self, token: str) -> np.ndarray:
        return self.weights[self.vocab.index(token)]

    def payload_nbytes(self) -> int:
        return self.weights.size * 4


def load_text_embeddings(path) -> EmbeddingMatrix:
    """Read the "V D" header + "token v1 .. vD" per line format.

    ``<unk>`` is prepended with the mean vector when the file lacks it.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise FormatError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 2:
        raise ParseError("header must be 'V D'", line=1)
    try:
        n_rows, dim = int(header[0]), int(header[1])
    except ValueError:
        raise ParseError("header must be 'V D'", line=1) from None
    tokens, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.rstrip().split(" ")
        if len(parts) != dim + 1:
            raise FormatError(f"{path}: line {lineno}: expected {dim} values, got {len(parts) - 1}")
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError:
            raise ParseError(f"non-numeric value in {path}", line=lineno) from None
        tokens.append(parts[0])
    if len(rows) != n_rows:
        raise FormatError(f"{path}: header declares {n_rows} rows, found {len(rows)}")
    weights = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    if UNK not in tokens:
        mean = weights.mean(axis=0, keepdims=True) if len(rows) else np.zeros((1, dim))
        tokens.insert(0, UNK)
        weights = np.vstack([mean, weights])
    elif tokens[0] != UNK:
        i = tokens.index(UNK)
        order = [i] + [j for j in range(len(tokens)) if j != i]
        tokens = [tokens[j] for j in order]
        weights = weights[order]
    return EmbeddingMatrix(Vocabulary(tokens), weights)


def save_text_embeddings(emb: EmbeddingMatrix, path):
    lines = [f"{emb.V} {emb.dim}"]
    for tok, row in zip(emb.vocab, emb.weights):
        lines.append(tok + " " + " ".join(f"{float(x):.9g}" for x in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def embeddings_to_bytes(emb: EmbeddingMatrix) -> bytes:
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(struct.pack("<QQ", emb.V, emb.dim))
    buf.write(emb.weights.astype("<f4").tobytes())
    write_tokens(buf, emb.vocab)
    return buf.getvalue()


def embeddings_from_bytes(data: bytes) -> EmbeddingMatrix:
    stream = io.BytesIO(data)
    if stream.read(4) != EMB_MAGIC:
        raise FormatError("bad magic, expected EMB1")
    head = stream.read(16)
    if len(head) < 16:
        raise FormatError("truncated EMB1 header")
    n_rows, dim = struct.unpack("<QQ", head)
    raw = stream.read(n_rows * dim * 4)
    if len(raw) < n_rows * dim * 4:
        raise FormatError("truncated EMB1 weights")
    weights = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n_rows, dim)
    tokens = read_tokens(stream, n_rows)
    if stream.read(1):
        raise FormatError("trailing bytes after EMB1 vocabulary")
    return EmbeddingMatrix(Vocabulary(tokens), weights)


def save_binary(emb: EmbeddingMatrix, path):
    atomic_write(path, embeddings_to_bytes(emb))


def load_binary(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        return embeddings_from_bytes(fh.read())


def atomic_write(path, data: bytes):
    """Write to a sibling temp file, then rename over ``path``."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
