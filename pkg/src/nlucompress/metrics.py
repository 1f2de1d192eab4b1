"""Error metrics, relative-change tables, size accounting and frequency-bucket reports."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import section_sizes
from .dccl import compression_rate, reconstruct
from .errors import LabelError
from .nlu import NLU_MAGIC

METRICS = ("irer", "icer", "dcer", "ser", "far")


@dataclass
class MetricsReport:
    """Five error ratios with the counts behind each.

    ``counts[name] = (errors, denominator)``; a ratio with an empty
    denominator is ``None`` rather than 0.
    """

    irer: float | None
    icer: float | None
    dcer: float | None
    ser: float | None
    far: float | None
    counts: dict = field(default_factory=dict)
    name: str = ""

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}

    def to_json(self) -> str:
        return json.dumps({"name": self.name, **self.as_dict(),
                           "counts": {k: list(v) for k, v in self.counts.items()}}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(**{m: d.get(m) for m in METRICS}, counts={k: tuple(v) for k, v in d.get("counts", {}).items()},
                   name=d.get("name", ""))


def _ratio(num, den):
    return num / den if den > 0 else None


def score(predictions, utterances, schema) -> MetricsReport:
    """Metrics from ``(domain, intent, slots)`` predictions against gold utterances."""
    ood_d = schema.ood_domain
    ir = [0, 0]
    ic = [0, 0]
    dc = [0, 0]
    se = [0, 0]
    fa = [0, 0]
    for (pd, pi, ps), u in zip(predictions, utterances):
        if len(ps) != len(u.slots):
            raise LabelError("prediction and utterance lengths differ")
        slot_err = sum(int(a != b) for a, b in zip(ps, u.slots))
        dc[0] += int(pd != u.domain)
        dc[1] += 1
        ic[0] += int(pi != u.intent)
        ic[1] += 1
        se[0] += slot_err
        se[1] += len(u.slots)
        if u.domain == ood_d:
            fa[0] += int(pd != ood_d)
            fa[1] += 1
        else:
            ir[0] += int(pd != u.domain or pi != u.intent or slot_err > 0)
            ir[1] += 1
    counts = {"irer": tuple(ir), "icer": tuple(ic), "dcer": tuple(dc), "ser": tuple(se), "far": tuple(fa)}
    return MetricsReport(*(_ratio(*counts[m]) for m in METRICS), counts=counts)


def evaluate(model, corpus, name: str = "") -> MetricsReport:
    """Run ``model`` on every utterance of ``corpus`` and score it."""
    utts = corpus.utterances if hasattr(corpus, "utterances") else list(corpus)
    schema = corpus.schema if hasattr(corpus, "schema") else model.schema
    if tuple(schema.domains) != tuple(model.schema.domains) or tuple(schema.intents) != tuple(model.schema.intents) \
            or tuple(schema.tags) != tuple(model.schema.tags):
        raise LabelError("corpus schema does not match the model schema")
    report = score(model.predict_batch(utts), utts, schema)
    report.name = name
    return report


def relative_change(candidate: MetricsReport, baseline: MetricsReport) -> dict:
    """``100 * (candidate - baseline) / baseline`` per metric; ``None`` where undefined."""
    out = {}
    for m in METRICS:
        c, b = getattr(candidate, m), getattr(baseline, m)
        out[m] = None if c is None or b is None or b == 0 else 100.0 * (c - b) / b
    return out


def relative_change_notes(candidate: MetricsReport, baseline: MetricsReport) -> list[str]:
    notes = []
    for m in METRICS:
        b = getattr(baseline, m)
        if b is None:
            notes.append(f"{m}: baseline undefined (empty denominator)")
        elif b == 0:
            notes.append(f"{m}: baseline is 0, relative change undefined")
    return notes


# ---------------------------------------------------------------------------
# frequency deciles
# ---------------------------------------------------------------------------

@dataclass
class BucketReport:
    sizes: list
    mean_mse: list
    counts_range: list  # (min count, max count) per bucket

    @property
    def top_bottom_ratio(self) -> float:
        return self.mean_mse[0] / self.mean_mse[-1] if self.mean_mse[-1] > 0 else float("inf")

    def global_mean(self) -> float:
        s = np.asarray(self.sizes, dtype=np.float64)
        return float((s * np.asarray(self.mean_mse)).sum() / s.sum())


def frequency_deciles(counts, n_buckets: int = 10) -> list[np.ndarray]:
    """Word ids split into ``n_buckets`` by descending corpus frequency (bucket 0 = most frequent).

    Present words are ranked (ties by id) and cut into equal parts; words
    absent from the corpus all go to the last bucket.
    """
    counts = np.asarray(counts)
    present = np.flatnonzero(counts > 0)
    absent = np.flatnonzero(counts == 0)
    ranked = present[np.lexsort((present, -counts[present]))]
    parts = [p.copy() for p in np.array_split(ranked, n_buckets)]
    parts[-1] = np.concatenate([parts[-1], absent])
    return parts


def per_word_mse(W, W_rec) -> np.ndarray:
    d = np.asarray(W, dtype=np.float64) - np.asarray(W_rec, dtype=np.float64)
    return (d * d).sum(axis=1)


def frequency_bucket_recon_report(emb, enc, books, corpus, n_buckets: int = 10) -> BucketReport:
    """Mean per-word squared reconstruction error per frequency decile of ``corpus``."""
    W = np.asarray(emb.weights if hasattr(emb, "weights") else emb, dtype=np.float64)
    C = books.books if hasattr(books, "books") else books
    codes = enc.codes(W) if enc is not None else None
    err = per_word_mse(W, reconstruct(codes, np.asarray(C, dtype=np.float64)))
    return bucket_report(err, corpus.token_counts(), n_buckets)


def bucket_report(err, counts, n_buckets: int = 10) -> BucketReport:
    parts = frequency_deciles(counts, n_buckets)
    counts = np.asarray(counts)
    return BucketReport(sizes=[len(p) for p in parts],
                        mean_mse=[float(err[p].mean()) if len(p) else 0.0 for p in parts],
                        counts_range=[(int(counts[p].min()), int(counts[p].max())) if len(p) else (0, 0)
                                      for p in parts])


# ---------------------------------------------------------------------------
# sizes
# ---------------------------------------------------------------------------

EMBEDDING_TENSORS = ("emb.table", "codes", "books", "svd.small", "svd.proj", "base")


@dataclass
class SizeReport:
    file_bytes: int
    header_bytes: int
    tensors: dict
    embedding_bytes: int

    @property
    def model_bytes(self) -> int:
        return self.file_bytes


def checkpoint_sizes(data: bytes) -> SizeReport:
    head, tensors = section_sizes(data, NLU_MAGIC)
    emb = sum(v for k, v in tensors.items() if k in EMBEDDING_TENSORS)
    return SizeReport(file_bytes=len(data), header_bytes=head, tensors=tensors, embedding_bytes=emb)


def size_report(baseline, candidate) -> dict:
    """Byte counts and rates of ``candidate`` against ``baseline``.

    Arguments are checkpoint paths or serialized bytes. The model rate
    compares whole files; the WE rate compares embedding tensor payloads.
    """
    def load(x):
        if isinstance(x, (bytes, bytearray)):
            return bytes(x)
        if not os.path.exists(x):
            raise FileNotFoundError(f"missing artifact: {x}")
        with open(x, "rb") as fh:
            return fh.read()

    b = checkpoint_sizes(load(baseline))
    c = checkpoint_sizes(load(candidate))
    return {"baseline_bytes": b.file_bytes, "candidate_bytes": c.file_bytes,
            "baseline_embedding_bytes": b.embedding_bytes, "candidate_embedding_bytes": c.embedding_bytes,
            "model_rate": compression_rate(b.file_bytes, c.file_bytes),
            "we_rate": compression_rate(b.embedding_bytes, c.embedding_bytes),
            "tensors": c.tensors}


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def format_table(header: list[str], rows: list[list]) -> str:
    """Aligned plain-text table; floats printed signed with two decimals, ``None`` as ``-``."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:+.2f}"
        return str(v)

    text = [[str(h) for h in header]] + [[cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in text) for i in range(len(header))]
    out = []
    for i, r in enumerate(text):
        out.append("  ".join(s.ljust(w) if j == 0 else s.rjust(w) for j, (s, w) in enumerate(zip(r, widths))))
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def relative_change_table(candidates: dict, baseline: MetricsReport) -> str:
    rows = []
    for name, rep in candidates.items():
        ch = relative_change(rep, baseline)
        rows.append([name] + [ch[m] for m in METRICS])
    return format_table(["model"] + [m.upper() for m in METRICS], rows)
