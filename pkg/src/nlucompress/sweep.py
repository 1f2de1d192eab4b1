"""Reproduction driver: train every requested regime per seed and tabulate medians.

Reports carry no timings, so two runs with the same configuration produce
byte-identical text.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datagen
from . import metrics as mx
from .dccl import compress_all
from .embio import atomic_write
from .errors import ParameterError
from .nlu import EncoderEmbedding
from .quant8 import quantize_model
from .svdcomp import retained_rank, svd_truncate
from .train import (TrainConfig, compressed_model, finetune_nlu_frozen_codes, svd_model, train_dccl_autoencoder,
                    train_nlu_baseline, train_taskaware_dccl, train_taskaware_svd)

SWEEP_REGIMES = ("baseline", "baseline-q8", "tag-svd", "taw-svd", "tag-dccl", "tag-dccl-ft", "taw-dccl",
                 "taw-dccl-norecon", "taw-dccl-scratch", "taw-dccl-q8")
DEFAULT_REGIMES = ("baseline", "tag-svd", "taw-svd", "tag-dccl", "tag-dccl-ft", "taw-dccl", "taw-dccl-norecon",
                   "taw-dccl-q8")
LABELS = {
    "baseline": "Baseline (uncompressed)",
    "baseline-q8": "Baseline + LSTM quantization",
    "tag-svd": "TAg. SVD",
    "taw-svd": "TAw. SVD",
    "tag-dccl": "TAg. DCCL",
    "tag-dccl-ft": "TAg. DCCL + NLU fine-tuning",
    "taw-dccl": "TAw. DCCL",
    "taw-dccl-norecon": "TAw. DCCL w/o recon. loss",
    "taw-dccl-scratch": "TAw. DCCL from scratch",
    "taw-dccl-q8": "TAw. DCCL + LSTM quantization",
}


@dataclass
class SweepConfig:
    regimes: tuple = DEFAULT_REGIMES
    seeds: int = 3
    seed: int = 0
    M: int = 8
    K: int = 16
    n: float | None = None
    dim: int = 50
    hidden: int = 64
    tau: float = 1.0
    recon_weight: float = 1.0
    baseline_epochs: int | None = None
    autoencoder_epochs: int | None = None
    finetune_epochs: int | None = None
    taskaware_epochs: int | None = None
    scratch_epochs: int | None = None
    svd_epochs: int | None = None
    baseline_lr: float | None = None
    taskaware_lr: float | None = None

    def __post_init__(self):
        if isinstance(self.regimes, str):
            self.regimes = tuple(r.strip() for r in self.regimes.split(",") if r.strip())
        self.regimes = tuple(self.regimes)
        unknown = [r for r in self.regimes if r not in SWEEP_REGIMES]
        if unknown:
            raise ParameterError(f"unknown sweep regimes: {', '.join(unknown)}; "
                                 f"expected some of {', '.join(SWEEP_REGIMES)}")
        if "baseline" not in self.regimes:
            self.regimes = ("baseline",) + self.regimes
        if self.seeds < 1:
            raise ParameterError("need at least one seed")


@dataclass
class RunResult:
    regime: str
    seed: int
    metrics: mx.MetricsReport
    model_bytes: int
    embedding_bytes: int
    extra: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    config: SweepConfig
    corpus_spec: datagen.CorpusSpec
    runs: list = field(default_factory=list)
    buckets: dict = field(default_factory=dict)   # (regime, seed) -> BucketReport
    models: dict = field(default_factory=dict)    # (regime, seed) -> NluModel, only with keep_models

    def by_regime(self, regime: str) -> list:
        return [r for r in self.runs if r.regime == regime]

    def median_metric(self, regime: str, metric: str = "irer") -> float | None:
        vals = [getattr(r.metrics, metric) for r in self.by_regime(regime)]
        vals = [v for v in vals if v is not None]
        return float(np.median(vals)) if vals else None

    def median_relative(self, regime: str, metric: str = "irer") -> float | None:
        """Median over seeds of the per-seed relative change against that seed's baseline."""
        base = {r.seed: r.metrics for r in self.by_regime("baseline")}
        vals = [mx.relative_change(r.metrics, base[r.seed])[metric] for r in self.by_regime(regime)]
        vals = [v for v in vals if v is not None]
        return float(np.median(vals)) if vals else None

    def median_rates(self, regime: str) -> tuple[float, float]:
        base = {r.seed: r for r in self.by_regime("baseline")}
        model = [base[r.seed].model_bytes / r.model_bytes for r in self.by_regime(regime)]
        emb = [base[r.seed].embedding_bytes / r.embedding_bytes for r in self.by_regime(regime)]
        return float(np.median(model)), float(np.median(emb))

    def bucket_ratio(self, regime: str) -> float | None:
        vals = [b.top_bottom_ratio for (g, _), b in self.buckets.items() if g == regime]
        return float(np.median(vals)) if vals else None


def matched_svd_fraction(V: int, D: int, M: int, K: int) -> float:
    """Fraction ``n`` whose factorized layer is closest in bytes to the DCCL codes + codebooks."""
    target = math.ceil(V * M * ((K - 1).bit_length()) / 8) + 4 * M * K * D
    r = max(1, int(round(target / (4.0 * (V + D)))))
    r = min(r, min(V, D))
    n = r / min(V, D)
    assert retained_rank(n, V, D) == r
    return n


def _evaluate(model, test, regime, seed):
    data = model.to_bytes()
    sizes = mx.checkpoint_sizes(data)
    return RunResult(regime, seed, mx.evaluate(model, test, name=regime), sizes.file_bytes, sizes.embedding_bytes)


def _export(model):
    """Deployable copy of a task-aware model: encoder replaced by its codes."""
    if isinstance(model.source, EncoderEmbedding):
        exported = model.source.export()
        return compressed_model(model, exported.codes, exported.books.value)
    return model


def run_sweep(config: SweepConfig, spec: datagen.CorpusSpec | None = None, log=None,
              keep_models: bool = False) -> SweepResult:
    spec = spec or datagen.CorpusSpec()
    train, valid, test = datagen.generate(spec)
    emb = datagen.pretrained_embeddings(spec, dim=config.dim)
    result = SweepResult(config, spec)
    want = set(config.regimes)
    say = log or (lambda msg: None)
    for k in range(config.seeds):
        seed = config.seed + k
        base_cfg = TrainConfig(seed=seed, M=config.M, K=config.K, hidden=config.hidden, tau=config.tau,
                               recon_weight=config.recon_weight)

        def cfg_for(regime, epochs=None, lr=None):
            return base_cfg.with_regime(regime, epochs=epochs, learning_rate=lr)

        say(f"seed {seed}: baseline")
        baseline, _ = train_nlu_baseline(train, valid, emb,
                                         cfg_for("nlu_baseline", config.baseline_epochs, config.baseline_lr))
        result.runs.append(_evaluate(baseline, test, "baseline", seed))
        if keep_models:
            result.models[("baseline", seed)] = baseline
        W = baseline.source.matrix().copy()

        if "baseline-q8" in want:
            result.runs.append(_evaluate(quantize_model(baseline)[0], test, "baseline-q8", seed))

        if want & {"tag-svd", "taw-svd"}:
            n = config.n if config.n is not None else matched_svd_fraction(W.shape[0], W.shape[1], config.M, config.K)
            factors = svd_truncate(W, n)
            if "tag-svd" in want:
                say(f"seed {seed}: tag-svd (n={n:g})")
                result.runs.append(_evaluate(svd_model(baseline, factors, trainable=False), test, "tag-svd", seed))
            if "taw-svd" in want:
                say(f"seed {seed}: taw-svd (n={n:g})")
                m, _ = train_taskaware_svd(train, valid, factors, baseline, cfg_for("taskaware_svd", config.svd_epochs))
                result.runs.append(_evaluate(m, test, "taw-svd", seed))

        dccl_wanted = want & {"tag-dccl", "tag-dccl-ft", "taw-dccl", "taw-dccl-norecon", "taw-dccl-q8"}
        if dccl_wanted:
            say(f"seed {seed}: autoencoder")
            ae, _ = train_dccl_autoencoder(W, cfg_for("dccl_autoencoder", config.autoencoder_epochs))
            result.buckets[("tag-dccl", seed)] = mx.frequency_bucket_recon_report(W, ae.encoder, ae.books.value,
                                                                                  train)
            codes = compress_all(ae.encoder, ae.books.value, W)
            books = ae.codebook_set()
            tag = compressed_model(baseline, codes, books)
            if "tag-dccl" in want:
                result.runs.append(_evaluate(tag, test, "tag-dccl", seed))
            if "tag-dccl-ft" in want:
                say(f"seed {seed}: tag-dccl-ft")
                ft, _ = finetune_nlu_frozen_codes(baseline, codes, books, train, valid,
                                                  cfg_for("dccl_finetune_nlu", config.finetune_epochs))
                result.runs.append(_evaluate(ft, test, "tag-dccl-ft", seed))
            for regime, tregime in (("taw-dccl", "taskaware_dccl"), ("taw-dccl-norecon", "taskaware_dccl_no_recon")):
                if regime in want or (regime == "taw-dccl" and "taw-dccl-q8" in want):
                    say(f"seed {seed}: {regime}")
                    m, _ = train_taskaware_dccl(train, valid, W, cfg_for(tregime, config.taskaware_epochs,
                                                                         config.taskaware_lr),
                                                init_model=baseline, init_autoencoder=ae)
                    enc, C = m.source.ae.encoder, m.source.ae.books.value
                    result.buckets[(regime, seed)] = mx.frequency_bucket_recon_report(W, enc, C, train)
                    deployed = _export(m)
                    if regime in want:
                        result.runs.append(_evaluate(deployed, test, regime, seed))
                    if keep_models:
                        result.models[(regime, seed)] = deployed
                    if regime == "taw-dccl" and "taw-dccl-q8" in want:
                        result.runs.append(_evaluate(quantize_model(deployed)[0], test, "taw-dccl-q8", seed))

        if "taw-dccl-scratch" in want:
            say(f"seed {seed}: taw-dccl-scratch")
            m, _ = train_taskaware_dccl(train, valid, emb.weights, cfg_for("taskaware_dccl_scratch",
                                                                           config.scratch_epochs))
            result.runs.append(_evaluate(_export(m), test, "taw-dccl-scratch", seed))
    return result


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(v, signed=True):
    if v is None:
        return "-"
    return f"{v:+.2f}" if signed else f"{v:.2f}"


def table1(result: SweepResult) -> str:
    """Relative change (%) of every metric against the baseline, median over seeds."""
    rows = []
    for regime in result.config.regimes:
        if regime == "baseline":
            continue
        rows.append([LABELS[regime]] + [result.median_relative(regime, m) for m in mx.METRICS])
    return mx.format_table(["Model"] + [m.upper() for m in mx.METRICS], rows)


def table2(result: SweepResult) -> str:
    """Compression rates plus relative metric changes, median over seeds."""
    rows = []
    for regime in result.config.regimes:
        if regime == "baseline":
            continue
        model_rate, we_rate = result.median_rates(regime)
        rows.append([LABELS[regime], f"{model_rate:.1f}x", f"{we_rate:.1f}x"]
                    + [result.median_relative(regime, m) for m in mx.METRICS])
    return mx.format_table(["Model", "Model Rate", "WE Rate"] + [m.upper() for m in mx.METRICS], rows)


def bucket_table(result: SweepResult) -> str:
    regimes = sorted({g for g, _ in result.buckets})
    rows = []
    for g in regimes:
        reps = [b for (r, _), b in sorted(result.buckets.items()) if r == g]
        med = np.median(np.array([b.mean_mse for b in reps]), axis=0)
        rows.append([LABELS[g]] + [f"{v:.4f}" for v in med] + [f"{result.bucket_ratio(g):.3f}"])
    n = len(rows[0]) - 2 if rows else 10
    return mx.format_table(["Model"] + [f"D{i + 1}" for i in range(n)] + ["top/bottom"], rows)


def render_report(result: SweepResult) -> str:
    cfg = result.config
    base = result.median_metric("baseline", "irer")
    lines = ["# sweep configuration",
             json.dumps({"sweep": asdict(cfg), "corpus": asdict(result.corpus_spec)}, sort_keys=True), "",
             f"# baseline median IRER {'-' if base is None else f'{base:.4f}'} over {cfg.seeds} seed(s)", "",
             "# Table 1 shape: relative change (%) vs uncompressed baseline, median over seeds",
             table1(result),
             "# Table 2 shape: compression rates and relative change (%), median over seeds",
             table2(result)]
    if result.buckets:
        lines += ["# mean squared reconstruction error by training-frequency decile (D1 = most frequent)",
                  bucket_table(result)]
    return "\n".join(lines)


def records(result: SweepResult) -> str:
    """Line-delimited per-run records."""
    out = []
    for r in result.runs:
        out.append(json.dumps({"regime": r.regime, "seed": r.seed, "metrics": r.metrics.as_dict(),
                               "counts": {k: list(v) for k, v in r.metrics.counts.items()},
                               "model_bytes": r.model_bytes, "embedding_bytes": r.embedding_bytes},
                              sort_keys=True))
    return "\n".join(out) + "\n"


def write_report(result: SweepResult, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "report.txt"), render_report(result).encode("utf-8"))
    atomic_write(os.path.join(out_dir, "runs.jsonl"), records(result).encode("utf-8"))
