"""Training regimes: NLU baseline, DCCL autoencoder, frozen-code fine-tuning,
task-aware DCCL (with or without the reconstruction term, pretrained or from
scratch) and task-aware SVD.

Every regime draws all randomness from ``config.seed`` and finishes by
snapping parameters to float32, so a (config, seed) pair fixes the
checkpoint bytes.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .dccl import DcclAutoencoder
from .errors import ParameterError, TrainingError
from .nlu import (CodeEmbedding, EncoderEmbedding, FactorizedEmbedding, ForwardContext, NluModel,
                  RawEmbedding, make_batch)
from .svdcomp import LowRankFactors, make_factorized_layer

REGIMES = ("nlu_baseline", "dccl_autoencoder", "dccl_finetune_nlu", "taskaware_dccl",
           "taskaware_dccl_no_recon", "taskaware_dccl_scratch", "taskaware_svd")

# regime -> (epochs, learning rate, optimizer, batch size)
REGIME_DEFAULTS = {
    "nlu_baseline": (25, 1e-4, "adam", 32),
    "dccl_autoencoder": (300, 1e-4, "adam", 64),
    "dccl_finetune_nlu": (5, 1e-4, "adam", 32),
    "taskaware_dccl": (5, 1e-4, "adam", 32),
    "taskaware_dccl_no_recon": (5, 1e-4, "adam", 32),
    "taskaware_dccl_scratch": (25, 1e-4, "adam", 32),
    "taskaware_svd": (5, 1e-3, "sgd", 32),
}


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``epochs``, ``learning_rate``, ``optimizer`` and ``batch_size`` left as
    ``None`` take the regime's default (see :data:`REGIME_DEFAULTS`).
    """

    regime: str = "nlu_baseline"
    epochs: int | None = None
    learning_rate: float | None = None
    optimizer: str | None = None
    batch_size: int | None = None
    patience: int = 3
    seed: int = 0
    tau: float = 1.0
    hard: bool = True
    M: int = 8
    K: int = 16
    H: int | None = None
    n: float = 0.1
    hidden: int = 64
    dropout: float = 0.0
    recon_weight: float = 1.0
    init_model: str | None = None
    init_autoencoder: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ParameterError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs is not None and self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")
        if self.M < 1 or self.K < 2:
            raise ParameterError("need M >= 1 and K >= 2")
        if self.patience < 1:
            raise ParameterError("patience must be at least 1")

    def resolved(self) -> "TrainConfig":
        epochs, lr, opt, bs = REGIME_DEFAULTS[self.regime]
        return replace(self,
                       epochs=epochs if self.epochs is None else self.epochs,
                       learning_rate=lr if self.learning_rate is None else self.learning_rate,
                       optimizer=opt if self.optimizer is None else self.optimizer,
                       batch_size=bs if self.batch_size is None else self.batch_size)

    def with_regime(self, regime: str, **overrides) -> "TrainConfig":
        """Same shared settings, new regime; per-regime defaults re-applied."""
        values = dict(epochs=None, learning_rate=None, optimizer=None, batch_size=None)
        values.update(overrides)
        return replace(self, regime=regime, **values)


@dataclass
class TrainReport:
    regime: str
    train_losses: list = field(default_factory=list)
    valid_losses: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)

    def to_lines(self) -> str:
        """Line-delimited JSON: one record per epoch, then a summary record."""
        out = []
        for e, tr in enumerate(self.train_losses, start=1):
            va = self.valid_losses[e - 1] if e - 1 < len(self.valid_losses) else None
            out.append(json.dumps({"epoch": e, "train_loss": tr, "valid_loss": va}, sort_keys=True))
        out.append(json.dumps({"regime": self.regime, "best_epoch": self.best_epoch,
                               "epochs_run": self.epochs_run, "metrics": self.metrics,
                               "config": self.config, "wall_time": round(self.wall_time, 3)}, sort_keys=True))
        return "\n".join(out) + "\n"

    def summary(self) -> str:
        lines = [f"regime {self.regime}: {self.epochs_run} epochs, best epoch {self.best_epoch}"]
        for e, tr in enumerate(self.train_losses, start=1):
            va = self.valid_losses[e - 1] if e - 1 < len(self.valid_losses) else float("nan")
            lines.append(f"  epoch {e:3d}  train {tr:.5f}  valid {va:.5f}")
        for k, v in sorted(self.metrics.items()):
            lines.append(f"  {k} = {v}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared loop machinery
# ---------------------------------------------------------------------------

def length_buckets(utterances, batch_size: int, rng) -> list[list]:
    """Shuffle, group by length inside windows of 50 batches, then shuffle batches."""
    order = rng.permutation(len(utterances))
    window = batch_size * 50
    batches = []
    for s in range(0, len(order), window):
        chunk = sorted(order[s:s + window], key=lambda i: len(utterances[i].tokens))
        for b in range(0, len(chunk), batch_size):
            batches.append([utterances[i] for i in chunk[b:b + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def _check_loss(value, what="loss"):
    if not math.isfinite(value):
        raise TrainingError(f"training diverged: non-finite {what} ({value})")


def _nlu_loop(model: NluModel, train, valid, cfg: TrainConfig, rng, ctx_factory) -> TrainReport:
    """Minibatch loop with early stopping on validation NLU loss.

    The best-validation parameters are restored at the end; with zero
    epochs the model is left untouched.
    """
    opt = nx.make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = model.parameters()
    nx.zero_grads(params)
    report = TrainReport(regime=cfg.regime, config=asdict(cfg))
    if cfg.epochs == 0:
        return report
    best = model.mean_loss(valid.utterances) if valid is not None else math.inf
    best_state = model.state()
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for chunk in length_buckets(train.utterances, cfg.batch_size, rng):
            br = model.loss(make_batch(chunk), ctx_factory())
            _check_loss(br.total)
            opt.step(params)
            total += br.total * len(chunk)
            count += len(chunk)
        report.train_losses.append(total / count)
        report.epochs_run = epoch
        if valid is None:
            best_state, report.best_epoch = model.state(), epoch
            continue
        v = model.mean_loss(valid.utterances)
        _check_loss(v, "validation loss")
        report.valid_losses.append(v)
        if v < best:
            best, best_state, report.best_epoch, bad = v, model.state(), epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_state(best_state)
    return report


def _finish(model, report, t0):
    model.round_to_float32()
    report.wall_time = time.perf_counter() - t0
    return model, report


def _model_rng(cfg, salt):
    return nx.make_rng(cfg.seed * 1000003 + salt)


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

def train_nlu_baseline(train, valid, emb, config: TrainConfig):
    """Uncompressed baseline: embeddings initialized from ``emb`` and fine-tuned."""
    cfg = config.resolved()
    t0 = time.perf_counter()
    W = emb.weights if hasattr(emb, "weights") else emb
    model = NluModel(train.schema, train.vocab, RawEmbedding(W), hidden=cfg.hidden, rng=_model_rng(cfg, 1))
    rng = _model_rng(cfg, 2)
    report = _nlu_loop(model, train, valid, cfg, rng, lambda: ForwardContext(rng=rng, dropout=cfg.dropout))
    return _finish(model, report, t0)


def train_dccl_autoencoder(emb, config: TrainConfig):
    """Fit encoder and codebooks to reconstruct every row of ``emb``.

    Training draws Gumbel noise per forward pass; the per-epoch loss
    recorded (and used to pick the returned parameters) is the deterministic
    full-vocabulary loss.
    """
    cfg = config.resolved()
    t0 = time.perf_counter()
    W = np.asarray(emb.weights if hasattr(emb, "weights") else emb, dtype=np.float64)
    V, D = W.shape
    ae = DcclAutoencoder(D, cfg.M, cfg.K, cfg.H, rng=_model_rng(cfg, 3))
    rng = _model_rng(cfg, 4)
    opt = nx.make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = ae.parameters()
    report = TrainReport(regime=cfg.regime, config=asdict(cfg))
    all_ids = np.arange(V)
    best = ae.loss_and_grad(W, all_ids, compute_grad=False)
    best_state = ae.state()
    report.metrics["initial_mse"] = best
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(V)
        total = 0.0
        for s in range(0, V, cfg.batch_size):
            ids = order[s:s + cfg.batch_size]
            loss = ae.loss_and_grad(W, ids, cfg.tau, rng, nx.SAMPLE, cfg.hard)
            _check_loss(loss)
            opt.step(params)
            total += loss * len(ids)
        report.train_losses.append(total / V)
        det = ae.loss_and_grad(W, all_ids, compute_grad=False)
        _check_loss(det, "reconstruction loss")
        report.valid_losses.append(det)
        report.epochs_run = epoch
        if det < best:
            best, best_state, report.best_epoch = det, ae.state(), epoch
    ae.load_state(best_state)
    for p in ae.parameters():
        p.value[...] = p.value.astype(np.float32)
    report.metrics["final_mse"] = ae.loss_and_grad(W, all_ids, compute_grad=False)
    report.wall_time = time.perf_counter() - t0
    return ae, report


def compressed_model(model: NluModel, codes, books) -> NluModel:
    """Copy of ``model`` whose embedding lookup is the frozen code reconstruction."""
    out = copy.deepcopy(model)
    out.quantized = {}
    out.set_source(CodeEmbedding(codes, books))
    return out


def finetune_nlu_frozen_codes(model: NluModel, codes, books, train, valid, config: TrainConfig):
    """Swap in frozen codes/codebooks and fine-tune only the task layers."""
    cfg = replace(config, regime="dccl_finetune_nlu").resolved() if config.regime != "dccl_finetune_nlu" \
        else config.resolved()
    t0 = time.perf_counter()
    out = compressed_model(model, codes, books)
    rng = _model_rng(cfg, 5)
    report = _nlu_loop(out, train, valid, cfg, rng, lambda: ForwardContext(rng=rng, dropout=cfg.dropout))
    if cfg.epochs == 0:
        report.wall_time = time.perf_counter() - t0
        return out, report
    return _finish(out, report, t0)


def taskaware_model(base, ae: DcclAutoencoder, init_model: NluModel | None, train, cfg: TrainConfig) -> NluModel:
    source = EncoderEmbedding(base, ae)
    if init_model is not None:
        model = copy.deepcopy(init_model)
        model.quantized = {}
        model.set_source(source)
        return model
    return NluModel(train.schema, train.vocab, source, hidden=cfg.hidden, rng=_model_rng(cfg, 1))


def train_taskaware_dccl(train, valid, base, config: TrainConfig, init_model: NluModel | None = None,
                         init_autoencoder: DcclAutoencoder | None = None):
    """End-to-end training through the encoder and codebooks.

    ``base`` is the frozen matrix fed to the encoder (the baseline model's
    embeddings in the pretrained regimes). The joint objective is
    ``L_NLU + recon_weight * L_e`` where ``L_e`` averages over the batch's
    token occurrences; the ``no_recon`` and ``scratch`` regimes drop ``L_e``.
    The scratch regime ignores both initializers.
    """
    cfg = config.resolved()
    if not cfg.regime.startswith("taskaware_dccl"):
        raise ParameterError(f"regime {cfg.regime!r} is not a task-aware DCCL regime")
    t0 = time.perf_counter()
    W = np.asarray(base.weights if hasattr(base, "weights") else base, dtype=np.float64)
    scratch = cfg.regime == "taskaware_dccl_scratch"
    if scratch or init_autoencoder is None:
        ae = DcclAutoencoder(W.shape[1], cfg.M, cfg.K, cfg.H, rng=_model_rng(cfg, 3))
    else:
        ae = copy.deepcopy(init_autoencoder)
    model = taskaware_model(W, ae, None if scratch else init_model, train, cfg)
    weight = cfg.recon_weight if cfg.regime == "taskaware_dccl" else None
    rng = _model_rng(cfg, 6)

    def ctx():
        return ForwardContext(tau=cfg.tau, rng=rng, mode=nx.SAMPLE, hard=cfg.hard,
                              recon_weight=weight, dropout=cfg.dropout)

    report = _nlu_loop(model, train, valid, cfg, rng, ctx)
    return _finish(model, report, t0)


def svd_model(model: NluModel, factors: LowRankFactors, trainable: bool = True) -> NluModel:
    small, proj = make_factorized_layer(factors)
    out = copy.deepcopy(model)
    out.quantized = {}
    out.set_source(FactorizedEmbedding(small, proj, trainable=trainable))
    return out


def train_taskaware_svd(train, valid, factors: LowRankFactors, model: NluModel, config: TrainConfig):
    """Factorized embedding layer initialized from ``factors``, tuned jointly with the task layers."""
    cfg = replace(config, regime="taskaware_svd").resolved() if config.regime != "taskaware_svd" \
        else config.resolved()
    t0 = time.perf_counter()
    out = svd_model(model, factors)
    rng = _model_rng(cfg, 7)
    report = _nlu_loop(out, train, valid, cfg, rng, lambda: ForwardContext(rng=rng, dropout=cfg.dropout))
    return _finish(out, report, t0)


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
