"""Multi-task recurrent NLU model: shared BiLSTM, domain/intent heads, CRF tagger.

Every sub-layer has a hand-written backward pass; ``tests/test_nlu.py``
checks them all against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import numerics as nx
from .crf import crf_nll_batch, viterbi
from .dccl import CodebookSet, CodeMatrix, DcclAutoencoder, reconstruct
from .embio import Vocabulary, atomic_write
from .errors import DimensionError, FormatError, LabelError, ParameterError

NLU_MAGIC = b"NLU1"
OOD, OOD_INTENT, OTHER = "OOD", "OODIntent", "Other"


@dataclass(frozen=True)
class TagSchema:
    domains: tuple
    intents: tuple
    tags: tuple

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "intents", tuple(self.intents))
        object.__setattr__(self, "tags", tuple(self.tags))
        for name, labels, required in (("domains", self.domains, OOD), ("intents", self.intents, OOD_INTENT),
                                       ("tags", self.tags, OTHER)):
            if required not in labels:
                raise LabelError(f"schema {name} must include {required!r}")
            if len(set(labels)) != len(labels):
                raise LabelError(f"duplicate labels in schema {name}")

    @property
    def ood_domain(self) -> int:
        return self.domains.index(OOD)

    @property
    def ood_intent(self) -> int:
        return self.intents.index(OOD_INTENT)

    @property
    def other_tag(self) -> int:
        return self.tags.index(OTHER)

    def to_dict(self) -> dict:
        return {"domains": list(self.domains), "intents": list(self.intents), "tags": list(self.tags)}

    @classmethod
    def from_dict(cls, d) -> "TagSchema":
        return cls(d["domains"], d["intents"], d["tags"])


@dataclass(frozen=True)
class Utterance:
    tokens: tuple
    domain: int
    intent: int
    slots: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "slots", tuple(int(s) for s in self.slots))
        if len(self.tokens) != len(self.slots):
            raise DimensionError(f"{len(self.tokens)} tokens but {len(self.slots)} slot tags")
        if not self.tokens:
            raise DimensionError("utterance must have at least one token")


@dataclass
class Batch:
    ids: np.ndarray      # (B, L) token ids, 0 on padding
    mask: np.ndarray     # (B, L) bool, right padded
    domains: np.ndarray  # (B,)
    intents: np.ndarray  # (B,)
    tags: np.ndarray     # (B, L), 0 on padding

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(utterances) -> Batch:
    utterances = list(utterances)
    if not utterances:
        raise ParameterError("batch must be non-empty")
    B = len(utterances)
    L = max(len(u.tokens) for u in utterances)
    ids = np.zeros((B, L), dtype=np.int64)
    tags = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, u in enumerate(utterances):
        n = len(u.tokens)
        ids[b, :n] = u.tokens
        tags[b, :n] = u.slots
        mask[b, :n] = True
    return Batch(ids, mask, np.array([u.domain for u in utterances], dtype=np.int64),
                 np.array([u.intent for u in utterances], dtype=np.int64), tags)


# ---------------------------------------------------------------------------
# embedding sources
# ---------------------------------------------------------------------------

class RawEmbedding:
    kind = "raw"

    def __init__(self, table, trainable=True):
        self.table = nx.Parameter("emb.table", np.asarray(table, dtype=np.float64), trainable=trainable)

    V = property(lambda self: self.table.value.shape[0])
    D = property(lambda self: self.table.value.shape[1])

    def parameters(self):
        return [self.table]

    def lookup(self, ids, ctx):
        return self.table.value[ids], ids

    def backward(self, cache, grad):
        if self.table.trainable:
            np.add.at(self.table.grad, cache, grad)

    def matrix(self) -> np.ndarray:
        return self.table.value

    def tensors(self):
        return [({"name": "emb.table", "enc": "f32", "shape": list(self.table.shape)}, self.table.value)]

    def describe(self) -> dict:
        return {"kind": self.kind}


class CodeEmbedding:
    """Frozen integer codes; the lookup is the additive reconstruction."""

    kind = "dccl_codes"

    def __init__(self, codes: CodeMatrix, books, trainable_books=False):
        self.codes = codes
        C = books.books if isinstance(books, CodebookSet) else books
        self.books = nx.Parameter("books", np.asarray(C, dtype=np.float64), trainable=trainable_books)

    V = property(lambda self: self.codes.V)
    D = property(lambda self: self.books.value.shape[2])

    def parameters(self):
        return [self.books]

    def lookup(self, ids, ctx):
        return reconstruct(self.codes.codes[ids], self.books.value), ids

    def backward(self, cache, grad):
        if self.books.trainable:
            codes = self.codes.codes[cache]
            for m in range(codes.shape[1]):
                np.add.at(self.books.grad[m], codes[:, m], grad)

    def matrix(self) -> np.ndarray:
        return reconstruct(self.codes.codes, self.books.value)

    def codebook_set(self) -> CodebookSet:
        return CodebookSet(self.books.value)

    def tensors(self):
        return [({"name": "codes", "enc": "codes", "shape": [self.codes.V, self.codes.M], "K": self.codes.K},
                 self.codes),
                ({"name": "books", "enc": "f32", "shape": list(self.books.shape)}, self.books.value)]

    def describe(self) -> dict:
        return {"kind": self.kind, "M": self.codes.M, "K": self.codes.K}


class EncoderEmbedding:
    """Compression layers in the lookup path: frozen base vectors -> encoder -> codebooks.

    Used for task-aware training. ``ctx`` carries the Gumbel settings; when
    ``ctx.recon_weight`` is set, the batch reconstruction loss over the
    looked-up token occurrences is added to the objective.
    """

    kind = "dccl_encoder"

    def __init__(self, base, autoencoder: DcclAutoencoder):
        self.base = np.asarray(base, dtype=np.float64)
        self.ae = autoencoder
        if self.base.shape[1] != autoencoder.D:
            raise DimensionError(f"base vectors have dim {self.base.shape[1]}, encoder expects {autoencoder.D}")

    V = property(lambda self: self.base.shape[0])
    D = property(lambda self: self.base.shape[1])

    def parameters(self):
        return self.ae.parameters()

    def lookup(self, ids, ctx):
        x = self.base[ids]
        enc_pass, recon = self.ae.forward(x, ctx.tau, ctx.rng, ctx.mode, ctx.hard)
        diff = recon - x
        ctx.recon_loss = float((diff * diff).sum() / max(len(ids), 1))
        return recon, (enc_pass, diff)

    def backward(self, cache, grad):
        enc_pass, diff = cache
        self.ae.backward(enc_pass, grad)

    def recon_grad(self, cache, weight):
        enc_pass, diff = cache
        return weight * 2.0 * diff / diff.shape[0]

    def matrix(self) -> np.ndarray:
        return reconstruct(self.ae.encoder.codes(self.base), self.ae.books.value)

    def export(self) -> CodeEmbedding:
        """Deployable form: deterministic codes plus float32 codebooks."""
        codes = CodeMatrix(self.ae.encoder.codes(self.base), self.ae.K)
        return CodeEmbedding(codes, CodebookSet(self.ae.books.value))

    def tensors(self):
        out = [({"name": "base", "enc": "f32", "shape": list(self.base.shape)}, self.base)]
        for p in self.ae.parameters():
            out.append(({"name": p.name, "enc": "f32", "shape": list(p.shape)}, p.value))
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "M": self.ae.M, "K": self.ae.K, "H": self.ae.encoder.H}


class FactorizedEmbedding:
    """Small ``V x r`` table followed by an ``r x D`` projection."""

    kind = "svd_factorized"

    def __init__(self, small, proj, trainable=True):
        self.small = nx.Parameter("svd.small", np.asarray(small, dtype=np.float64), trainable=trainable)
        self.proj = nx.Parameter("svd.proj", np.asarray(proj, dtype=np.float64), trainable=trainable)

    V = property(lambda self: self.small.value.shape[0])
    D = property(lambda self: self.proj.value.shape[1])

    def parameters(self):
        return [self.small, self.proj]

    def lookup(self, ids, ctx):
        s = self.small.value[ids]
        return s @ self.proj.value, (ids, s)

    def backward(self, cache, grad):
        ids, s = cache
        if self.proj.trainable:
            self.proj.grad += s.T @ grad
        if self.small.trainable:
            np.add.at(self.small.grad, ids, grad @ self.proj.value.T)

    def matrix(self) -> np.ndarray:
        return self.small.value @ self.proj.value

    def tensors(self):
        return [({"name": p.name, "enc": "f32", "shape": list(p.shape)}, p.value) for p in (self.small, self.proj)]

    def describe(self) -> dict:
        return {"kind": self.kind, "r": int(self.small.shape[1])}


@dataclass
class ForwardContext:
    tau: float = 1.0
    rng: np.random.Generator | None = None
    mode: str = nx.DETERMINISTIC
    hard: bool = True
    recon_weight: float | None = None
    dropout: float = 0.0
    recon_loss: float = 0.0


# ---------------------------------------------------------------------------
# BiLSTM
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(xproj, mask, Wh, reverse=False):
    """Run one direction. ``xproj`` is ``X @ Wx + b`` with shape ``(B, L, 4h)``.

    Padded steps leave the state untouched, so with right padding the final
    forward state is the state at the last real token and the backward pass
    starts from zeros at the first real token it meets.
    """
    B, L, four_h = xproj.shape
    h_dim = four_h // 4
    h = np.zeros((B, h_dim))
    c = np.zeros((B, h_dim))
    outputs = np.zeros((B, L, h_dim))
    steps = []
    order = range(L - 1, -1, -1) if reverse else range(L)
    for t in order:
        z = xproj[:, t] + h @ Wh
        i = _sigmoid(z[:, :h_dim])
        f = _sigmoid(z[:, h_dim:2 * h_dim])
        g = np.tanh(z[:, 2 * h_dim:3 * h_dim])
        o = _sigmoid(z[:, 3 * h_dim:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[:, t, None]
        steps.append((t, h, c, i, f, g, o, tc))
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
        outputs[:, t] = h
    return outputs, h, steps


def lstm_backward(steps, mask, Wh, d_outputs, d_final):
    """Back-propagate through one direction.

    Returns ``(d xproj (B, L, 4h), d Wh)``.
    """
    B, L, h_dim = d_outputs.shape
    dxproj = np.zeros((B, L, 4 * h_dim))
    dWh = np.zeros_like(Wh)
    dh_next = d_final.copy()
    dc_next = np.zeros((B, h_dim))
    for t, h_prev, c_prev, i, f, g, o, tc in reversed(steps):
        m = mask[:, t, None]
        dh = dh_next + d_outputs[:, t]
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1)
        dz *= m
        dxproj[:, t] = dz
        dWh += h_prev.T @ dz
        dh_next = np.where(m, dz @ Wh.T, dh)
        dc_next = np.where(m, dc * f, dc_next)
    return dxproj, dWh


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class LossBreakdown:
    total: float
    dc: float
    ic: float
    ner: float
    recon: float = 0.0

    @property
    def nlu(self) -> float:
        return self.dc + self.ic + self.ner


@dataclass
class ForwardResult:
    dc_logits: np.ndarray
    ic_logits: np.ndarray
    emissions: np.ndarray
    cache: dict = field(default=None, repr=False)


class NluModel:
    """Embedding source + shared BiLSTM + DC/IC softmax heads + CRF tagger."""

    def __init__(self, schema: TagSchema, vocab: Vocabulary, source, hidden: int = 64,
                 rng: np.random.Generator | None = None):
        if len(vocab) != source.V:
            raise DimensionError(f"vocabulary has {len(vocab)} tokens, embedding source has {source.V} rows")
        rng = rng or nx.make_rng(0)
        self.schema = schema
        self.vocab = vocab
        self.source = source
        self.hidden = int(hidden)
        D, h = source.D, self.hidden
        T = len(schema.tags)
        P = nx.Parameter

        def init(shape, fan_in):
            return rng.uniform(-1.0, 1.0, shape) / math.sqrt(fan_in)

        lstm_bias = np.zeros(4 * h)
        lstm_bias[h:2 * h] = 1.0  # forget gate starts open
        self.lstm = {}
        for d in ("f", "b"):
            self.lstm[d] = {"Wx": P(f"lstm.{d}.Wx", init((D, 4 * h), h)),
                            "Wh": P(f"lstm.{d}.Wh", init((h, 4 * h), h)),
                            "b": P(f"lstm.{d}.b", lstm_bias.copy())}
        self.dc_W = P("dc.W", init((2 * h, len(schema.domains)), 2 * h))
        self.dc_b = P("dc.b", np.zeros(len(schema.domains)))
        self.ic_W = P("ic.W", init((2 * h, len(schema.intents)), 2 * h))
        self.ic_b = P("ic.b", np.zeros(len(schema.intents)))
        self.tag_W = P("tag.W", init((2 * h, T), 2 * h))
        self.tag_b = P("tag.b", np.zeros(T))
        self.crf = P("crf.trans", np.zeros((T + 2, T + 2)))
        self.quantized = {}
        self.extra = {}

    @property
    def T(self) -> int:
        return len(self.schema.tags)

    def task_parameters(self) -> list[nx.Parameter]:
        out = []
        for d in ("f", "b"):
            out += [self.lstm[d]["Wx"], self.lstm[d]["Wh"], self.lstm[d]["b"]]
        return out + [self.dc_W, self.dc_b, self.ic_W, self.ic_b, self.tag_W, self.tag_b, self.crf]

    def parameters(self) -> list[nx.Parameter]:
        return self.source.parameters() + self.task_parameters()

    def param_dict(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def set_source(self, source):
        if source.V != len(self.vocab) or source.D != self.source.D:
            raise DimensionError("replacement source must keep V and D")
        self.source = source

    # -- forward / backward ------------------------------------------------

    def forward(self, batch: Batch, ctx: ForwardContext | None = None) -> ForwardResult:
        ctx = ctx or ForwardContext()
        ids = np.where((batch.ids >= 0) & (batch.ids < len(self.vocab)), batch.ids, 0)
        mask = batch.mask
        B, L = ids.shape
        flat_ids = ids[mask]
        emb_flat, emb_cache = self.source.lookup(flat_ids, ctx)
        X = np.zeros((B, L, self.source.D))
        X[mask] = emb_flat
        drop = None
        if ctx.dropout > 0.0 and ctx.rng is not None:
            keep = 1.0 - ctx.dropout
            drop = (ctx.rng.random(X.shape) < keep) / keep
            X = X * drop

        outs, finals, steps = {}, {}, {}
        for d, rev in (("f", False), ("b", True)):
            lp = self.lstm[d]
            xproj = X @ lp["Wx"].value + lp["b"].value
            outs[d], finals[d], steps[d] = lstm_forward(xproj, mask, lp["Wh"].value, reverse=rev)
        sent = np.concatenate([finals["f"], finals["b"]], axis=1)
        feats = np.concatenate([outs["f"], outs["b"]], axis=2)
        dc = sent @ self.dc_W.value + self.dc_b.value
        ic = sent @ self.ic_W.value + self.ic_b.value
        em = feats @ self.tag_W.value + self.tag_b.value
        cache = dict(ids=ids, mask=mask, X=X, drop=drop, emb_cache=emb_cache, steps=steps,
                     sent=sent, feats=feats, ctx=ctx)
        return ForwardResult(dc, ic, em, cache)

    def loss(self, batch: Batch, ctx: ForwardContext | None = None, compute_grad: bool = True) -> LossBreakdown:
        """Joint loss ``L_DC + L_IC + L_NER`` (+ weighted reconstruction term).

        Each task term is a mean over the batch. With ``compute_grad`` the
        gradients of the total are accumulated into every trainable parameter.
        """
        if batch.size == 0:
            raise ParameterError("batch must be non-empty")
        ctx = ctx or ForwardContext()
        res = self.forward(batch, ctx)
        B = batch.size
        rows = np.arange(B)
        self._check_labels(batch)
        lp_dc = _log_softmax(res.dc_logits)
        lp_ic = _log_softmax(res.ic_logits)
        l_dc = float(-lp_dc[rows, batch.domains].mean())
        l_ic = float(-lp_ic[rows, batch.intents].mean())
        nll, gE, gA = crf_nll_batch(res.emissions, batch.mask, batch.tags, self.crf.value)
        l_ner = float(nll.mean())
        recon = ctx.recon_loss if ctx.recon_weight is not None else 0.0
        weight = ctx.recon_weight or 0.0
        total = l_dc + l_ic + l_ner + weight * recon
        if compute_grad:
            g_dc = np.exp(lp_dc)
            g_dc[rows, batch.domains] -= 1.0
            g_ic = np.exp(lp_ic)
            g_ic[rows, batch.intents] -= 1.0
            self._backward(res, g_dc / B, g_ic / B, gE / B, gA / B, weight)
        return LossBreakdown(total=total, dc=l_dc, ic=l_ic, ner=l_ner, recon=recon)

    def _check_labels(self, batch):
        if batch.domains.min() < 0 or batch.domains.max() >= len(self.schema.domains):
            raise LabelError("domain id outside schema")
        if batch.intents.min() < 0 or batch.intents.max() >= len(self.schema.intents):
            raise LabelError("intent id outside schema")

    def _backward(self, res, g_dc, g_ic, g_em, g_trans, recon_weight):
        c = res.cache
        h = self.hidden
        sent, feats, mask = c["sent"], c["feats"], c["mask"]
        self.crf.grad += g_trans
        self.dc_W.grad += sent.T @ g_dc
        self.dc_b.grad += g_dc.sum(axis=0)
        self.ic_W.grad += sent.T @ g_ic
        self.ic_b.grad += g_ic.sum(axis=0)
        B, L, _ = feats.shape
        self.tag_W.grad += feats.reshape(B * L, -1).T @ g_em.reshape(B * L, -1)
        self.tag_b.grad += g_em.sum(axis=(0, 1))
        d_sent = g_dc @ self.dc_W.value.T + g_ic @ self.ic_W.value.T
        d_feats = g_em @ self.tag_W.value.T
        dX = np.zeros_like(c["X"])
        for d, sl in (("f", slice(0, h)), ("b", slice(h, 2 * h))):
            lp = self.lstm[d]
            dxproj, dWh = lstm_backward(c["steps"][d], mask, lp["Wh"].value, d_feats[:, :, sl], d_sent[:, sl])
            lp["Wh"].grad += dWh
            lp["Wx"].grad += c["X"].reshape(B * L, -1).T @ dxproj.reshape(B * L, -1)
            lp["b"].grad += dxproj.sum(axis=(0, 1))
            dX += dxproj @ lp["Wx"].value.T
        if c["drop"] is not None:
            dX *= c["drop"]
        d_emb = dX[mask]
        if recon_weight and isinstance(self.source, EncoderEmbedding):
            d_emb = d_emb + self.source.recon_grad(c["emb_cache"], recon_weight)
        self.source.backward(c["emb_cache"], d_emb)

    # -- inference ---------------------------------------------------------

    def predict_batch(self, utterances, batch_size: int = 256) -> list[tuple[int, int, list[int]]]:
        """Argmax domain, argmax intent and Viterbi slots for each utterance.

        Deterministic: no Gumbel noise, hard codes, no dropout.
        """
        utterances = list(utterances)
        # canonical batching so results do not depend on input order
        order = sorted(range(len(utterances)), key=lambda i: (len(utterances[i].tokens), utterances[i].tokens))
        out = [None] * len(utterances)
        trans = self.crf.value
        for s in range(0, len(order), batch_size):
            chunk = order[s:s + batch_size]
            batch = make_batch([utterances[i] for i in chunk])
            res = self.forward(batch)
            for j, i in enumerate(chunk):
                n = len(utterances[i].tokens)
                out[i] = (int(np.argmax(res.dc_logits[j])), int(np.argmax(res.ic_logits[j])),
                          viterbi(res.emissions[j, :n], trans))
        return out

    def predict(self, tokens) -> tuple[int, int, list[int]]:
        tokens = list(tokens)
        utt = Utterance(tokens, 0, 0, [0] * len(tokens))
        return self.predict_batch([utt])[0]

    def mean_loss(self, utterances, batch_size: int = 256) -> float:
        """Deterministic joint NLU loss averaged over utterances."""
        utterances = list(utterances)
        total = 0.0
        for s in range(0, len(utterances), batch_size):
            chunk = utterances[s:s + batch_size]
            total += self.loss(make_batch(chunk), compute_grad=False).nlu * len(chunk)
        return total / len(utterances)

    # -- state -------------------------------------------------------------

    def state(self) -> dict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict):
        for p in self.parameters():
            p.value[...] = state[p.name]

    def round_to_float32(self):
        """Snap every parameter to float32 precision so checkpoints round-trip exactly."""
        for p in self.parameters():
            p.value[...] = p.value.astype(np.float32)
        if isinstance(self.source, EncoderEmbedding):
            self.source.base = self.source.base.astype(np.float32).astype(np.float64)

    def tensor_entries(self):
        entries = list(self.source.tensors())
        for p in self.task_parameters():
            if p.name in self.quantized:
                q = self.quantized[p.name]
                entries.append(({"name": p.name, "enc": "q8", "shape": list(q.shape), "bins": q.bins}, q))
            else:
                entries.append(({"name": p.name, "enc": "f32", "shape": list(p.shape)}, p.value))
        return entries

    def to_bytes(self, extra: dict | None = None) -> bytes:
        header = {"format": "NLU1", "schema": self.schema.to_dict(), "vocab": self.vocab.tokens,
                  "hidden": self.hidden, "dim": int(self.source.D), "source": self.source.describe(),
                  "extra": self.extra if extra is None else extra}
        return container.pack(NLU_MAGIC, header, self.tensor_entries())

    @classmethod
    def from_bytes(cls, data: bytes) -> "NluModel":
        header, tensors = container.unpack(data, NLU_MAGIC)
        schema = TagSchema.from_dict(header["schema"])
        vocab = Vocabulary(header["vocab"])
        src = header["source"]
        kind = src["kind"]
        if kind == "raw":
            source = RawEmbedding(tensors["emb.table"])
        elif kind == "dccl_codes":
            source = CodeEmbedding(tensors["codes"], tensors["books"].astype(np.float32))
        elif kind == "svd_factorized":
            source = FactorizedEmbedding(tensors["svd.small"], tensors["svd.proj"])
        elif kind == "dccl_encoder":
            books = tensors["books"]
            ae = DcclAutoencoder(header["dim"], src["M"], src["K"], src["H"])
            for p in ae.parameters():
                p.value[...] = tensors[p.name]
            source = EncoderEmbedding(tensors["base"], ae)
            ae.books.value[...] = books
        else:
            raise FormatError(f"unknown embedding source kind {kind!r}")
        model = cls(schema, vocab, source, hidden=header["hidden"])
        for p in model.task_parameters():
            value = tensors[p.name]
            if not isinstance(value, np.ndarray):
                from .quant8 import dequantize
                model.quantized[p.name] = value
                value = dequantize(value)
            p.value[...] = value
        model.extra = header.get("extra", {})
        return model

    def save(self, path, extra: dict | None = None):
        atomic_write(path, self.to_bytes(extra))

    @classmethod
    def load(cls, path) -> "NluModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
