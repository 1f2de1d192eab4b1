"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training divergence.
Settings resolve as built-in defaults < ``--config`` file < explicit flags,
and every command prints its resolved settings before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing

import numpy as np

from . import config as cfgio
from . import datagen
from . import metrics as mx
from .dccl import (AE_MAGIC, DCCL_MAGIC, compress_all, compressed_from_bytes, load_autoencoder,
                   read_compressed, save_autoencoder, write_compressed)
from .embio import EMB_MAGIC, EmbeddingMatrix, atomic_write, load_binary, load_text_embeddings, save_binary, \
    save_text_embeddings
from .errors import NluCompressError, ParameterError, TrainingError
from .nlu import NLU_MAGIC, NluModel
from .quant8 import quantize_model
from .svdcomp import SVDF_MAGIC, factors_from_bytes, read_factors, svd_truncate, write_factors
from .sweep import SweepConfig, render_report, run_sweep, write_report
from .train import (TrainConfig, compressed_model, finetune_nlu_frozen_codes, svd_model, train_dccl_autoencoder,
                    train_nlu_baseline, train_taskaware_dccl, train_taskaware_svd)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# dataclass-backed flags
# ---------------------------------------------------------------------------

def _flag_type(hint):
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    base = args[0] if args else hint
    if base is bool:
        return lambda s: cfgio._coerce(s, bool)
    if base in (int, float):
        return base
    return str


def add_dataclass_flags(parser, cls, skip=()):
    """One ``--field-name`` flag per dataclass field; absent flags stay absent."""
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, tuple):
            default = ",".join(default)
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_flag_type(hints[f.name]),
                            default=argparse.SUPPRESS, help=f"(default: {default})")


def resolve(cls, ns, config_path=None, fixed=None):
    """Defaults < config file < explicit flags < ``fixed``."""
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    if config_path:
        values.update(cfgio.read_flat_config(config_path))
    values.update({k: v for k, v in vars(ns).items() if k in names})
    values.update(fixed or {})
    return cfgio.build(cls, values)


def echo(title, obj, out=None):
    out = out or sys.stdout
    d = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj
    out.write(f"# {title}: " + json.dumps(d, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def _magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


def load_embeddings(path) -> EmbeddingMatrix:
    """EMB1 binary, an NLU1 checkpoint (its embedding table), or the text format."""
    magic = _magic(path)
    if magic == EMB_MAGIC:
        return load_binary(path)
    if magic == NLU_MAGIC:
        model = NluModel.load(path)
        return EmbeddingMatrix(model.vocab, model.source.matrix())
    return load_text_embeddings(path)


def _report_path(args, default_out):
    return getattr(args, "report", None) or (os.path.splitext(default_out)[0] + ".report.jsonl")


def _write_train_report(args, report, out_path):
    path = _report_path(args, out_path)
    atomic_write(path, report.to_lines().encode("utf-8"))
    sys.stdout.write(report.summary())
    print(f"wrote {out_path} and {path}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    spec = resolve(datagen.CorpusSpec, args, args.config)
    echo("corpus spec", spec)
    print(f"# dim: {args.dim}")
    os.makedirs(args.out, exist_ok=True)
    for corpus in datagen.generate(spec):
        datagen.write_corpus(os.path.join(args.out, f"{corpus.split}.txt"), corpus)
    emb = datagen.pretrained_embeddings(spec, dim=args.dim)
    save_binary(emb, os.path.join(args.out, "embeddings.emb1"))
    save_text_embeddings(emb, os.path.join(args.out, "embeddings.txt"))
    atomic_write(os.path.join(args.out, "corpus.cfg"), cfgio.write_flat_config(spec).encode("utf-8"))
    print(f"wrote train/validation/test corpora and embeddings to {args.out}")
    return EXIT_OK


def _train_cfg(args, regime):
    fixed = {"regime": regime} if regime else None
    cfg = resolve(TrainConfig, args, args.config, fixed).resolved()
    echo("train config", cfg)
    return cfg


def _corpora(args):
    train = datagen.read_corpus(args.train)
    valid = datagen.read_corpus(args.valid, train.vocab) if args.valid else None
    return train, valid


def cmd_train_nlu(args):
    cfg = _train_cfg(args, "nlu_baseline")
    train, valid = _corpora(args)
    emb = load_embeddings(args.embeddings)
    if emb.vocab != train.vocab:
        emb = _align(emb, train.vocab)
    model, report = train_nlu_baseline(train, valid, emb, cfg)
    model.save(args.out, extra={"regime": cfg.regime, "seed": cfg.seed})
    _write_train_report(args, report, args.out)
    return EXIT_OK


def _align(emb: EmbeddingMatrix, vocab) -> EmbeddingMatrix:
    """Rows reordered to ``vocab``; tokens missing from ``emb`` get its ``<unk>`` row."""
    W = np.asarray(emb.weights, dtype=np.float64)
    rows = [W[emb.vocab.index(t)] for t in vocab.tokens]
    return EmbeddingMatrix(vocab, np.stack(rows))


def cmd_train_ae(args):
    cfg = _train_cfg(args, "dccl_autoencoder")
    emb = load_embeddings(args.embeddings)
    ae, report = train_dccl_autoencoder(emb, cfg)
    save_autoencoder(args.out, ae)
    _write_train_report(args, report, args.out)
    return EXIT_OK


def cmd_compress_dccl(args):
    echo("settings", {"autoencoder": args.autoencoder, "embeddings": args.embeddings, "out": args.out,
                      "out_model": args.out_model})
    ae = load_autoencoder(args.autoencoder)
    emb = load_embeddings(args.embeddings)
    codes = compress_all(ae.encoder, ae.books.value, emb)
    write_compressed(args.out, codes, ae.codebook_set(), emb.vocab)
    print(f"wrote {args.out}: {os.path.getsize(args.out)} bytes "
          f"(codes {codes.payload_nbytes()} B, codebooks {ae.codebook_set().payload_nbytes()} B)")
    if args.out_model:
        if _magic(args.embeddings) != NLU_MAGIC:
            raise UsageError("--out-model needs --embeddings to be an NLU1 checkpoint")
        model = compressed_model(NluModel.load(args.embeddings), codes, ae.codebook_set())
        model.save(args.out_model, extra={"regime": "tag-dccl"})
        print(f"wrote {args.out_model}")
    return EXIT_OK


def cmd_compress_svd(args):
    echo("settings", {"n": args.n, "embeddings": args.embeddings, "out": args.out, "out_model": args.out_model})
    emb = load_embeddings(args.embeddings)
    factors = svd_truncate(emb, args.n)
    write_factors(args.out, factors)
    print(f"wrote {args.out}: rank {factors.r}, payload {factors.payload_nbytes()} B")
    if args.out_model:
        if _magic(args.embeddings) != NLU_MAGIC:
            raise UsageError("--out-model needs --embeddings to be an NLU1 checkpoint")
        svd_model(NluModel.load(args.embeddings), factors, trainable=False).save(args.out_model,
                                                                                 extra={"regime": "tag-svd"})
        print(f"wrote {args.out_model}")
    return EXIT_OK


def cmd_train_taskaware(args):
    cfg = _train_cfg(args, None)
    if not cfg.regime.startswith("taskaware_dccl"):
        raise UsageError("--regime must be taskaware_dccl, taskaware_dccl_no_recon or taskaware_dccl_scratch")
    train, valid = _corpora(args)
    scratch = cfg.regime == "taskaware_dccl_scratch"
    init_model = None if scratch else NluModel.load(args.model) if args.model else None
    ae = None if scratch or not args.autoencoder else load_autoencoder(args.autoencoder)
    if args.embeddings:
        base = _align(load_embeddings(args.embeddings), train.vocab)
    elif init_model is not None:
        base = EmbeddingMatrix(train.vocab, init_model.source.matrix())
    else:
        raise UsageError("need --embeddings or --model to supply the encoder input vectors")
    if not scratch and (init_model is None or ae is None):
        raise UsageError(f"regime {cfg.regime} needs --model and --autoencoder")
    model, report = train_taskaware_dccl(train, valid, base, cfg, init_model=init_model, init_autoencoder=ae)
    exported = model.source.export()
    deployed = compressed_model(model, exported.codes, exported.books.value)
    deployed.save(args.out, extra={"regime": cfg.regime, "seed": cfg.seed})
    if args.out_encoder:
        save_autoencoder(args.out_encoder, model.source.ae)
    _write_train_report(args, report, args.out)
    return EXIT_OK


def cmd_finetune(args):
    train, valid = _corpora(args)
    model = NluModel.load(args.model)
    if bool(args.compressed) == bool(args.factors):
        raise UsageError("give exactly one of --compressed (DCCL file) or --factors (SVDF file)")
    if args.compressed:
        cfg = _train_cfg(args, "dccl_finetune_nlu")
        codes, books, _ = read_compressed(args.compressed)
        out, report = finetune_nlu_frozen_codes(model, codes, books, train, valid, cfg)
    else:
        cfg = _train_cfg(args, "taskaware_svd")
        out, report = train_taskaware_svd(train, valid, read_factors(args.factors), model, cfg)
    out.save(args.out, extra={"regime": cfg.regime, "seed": cfg.seed})
    _write_train_report(args, report, args.out)
    return EXIT_OK


def cmd_quantize(args):
    echo("settings", {"model": args.model, "out": args.out, "bins": args.bins, "include_heads": args.include_heads})
    model = NluModel.load(args.model)
    q, rep = quantize_model(model, args.bins, include_heads=args.include_heads)
    q.save(args.out, extra=dict(model.extra, quantized=sorted(q.quantized)))
    print(f"quantized {len(rep.tensors)} tensors: {rep.float_payload_bytes} B -> {rep.quantized_payload_bytes} B "
          f"({rep.ratio:.2f}x)")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    echo("settings", {"model": args.model, "corpus": args.corpus, "baseline_report": args.baseline_report,
                      "baseline_model": args.baseline_model, "out": args.out})
    model = NluModel.load(args.model)
    corpus = datagen.read_corpus(args.corpus, model.vocab)
    rep = mx.evaluate(model, corpus, name=os.path.basename(args.model))
    rows = [[m.upper(), "-" if getattr(rep, m) is None else f"{getattr(rep, m):.4f}",
             f"{rep.counts[m][0]}/{rep.counts[m][1]}"] for m in mx.METRICS]
    sys.stdout.write(mx.format_table(["metric", "value", "count"], rows))
    if args.baseline_report:
        with open(args.baseline_report, encoding="utf-8") as fh:
            base = mx.MetricsReport.from_json(fh.read())
        sys.stdout.write("\nrelative change (%) vs " + (base.name or args.baseline_report) + "\n")
        sys.stdout.write(mx.relative_change_table({rep.name: rep}, base))
        for note in mx.relative_change_notes(rep, base):
            print("note: " + note)
    if args.baseline_model:
        sizes = mx.size_report(args.baseline_model, args.model)
        print(f"model rate {sizes['model_rate']:.2f}x, WE rate {sizes['we_rate']:.2f}x")
    if args.out:
        atomic_write(args.out, (rep.to_json() + "\n").encode("utf-8"))
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args):
    path = args.path
    magic = _magic(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        data = fh.read()
    print(f"{path}: {size} bytes, format {magic.decode('ascii', 'replace')}")
    if magic == NLU_MAGIC:
        model = NluModel.from_bytes(data)
        sizes = mx.checkpoint_sizes(data)
        print(f"embedding source: {json.dumps(model.source.describe(), sort_keys=True)}")
        print(f"vocab {len(model.vocab)}, dim {model.source.D}, hidden {model.hidden}, "
              f"domains {len(model.schema.domains)}, intents {len(model.schema.intents)}, tags {model.T}")
        rows = [["header", sizes.header_bytes, ""]]
        for name, n in sizes.tensors.items():
            rows.append([name, n, "q8" if name in model.quantized else ""])
        rows.append(["total", sizes.file_bytes, f"embedding {sizes.embedding_bytes}"])
        sys.stdout.write(mx.format_table(["component", "bytes", "note"], rows))
    elif magic == DCCL_MAGIC:
        codes, books, vocab = compressed_from_bytes(data)
        print(f"V {codes.V}, M {codes.M}, K {codes.K}, D {books.D}: codes {codes.payload_nbytes()} B, "
              f"codebooks {books.payload_nbytes()} B")
    elif magic == SVDF_MAGIC:
        f = factors_from_bytes(data)
        print(f"V {f.V}, D {f.D}, rank {f.r}, n {f.n:g}: payload {f.payload_nbytes()} B")
    elif magic == EMB_MAGIC:
        emb = load_binary(path)
        print(f"V {emb.V}, D {emb.dim}: payload {emb.payload_nbytes()} B")
    elif magic == AE_MAGIC:
        ae = load_autoencoder(path)
        print(f"autoencoder D {ae.D}, M {ae.M}, K {ae.K}, H {ae.encoder.H}")
    else:
        raise NluCompressError(f"{path}: unrecognized file format")
    return EXIT_OK


def cmd_sweep(args):
    cfg = resolve(SweepConfig, args, args.config)
    spec = resolve(datagen.CorpusSpec, argparse.Namespace(), args.corpus_config)
    echo("sweep config", cfg)
    echo("corpus spec", spec)
    log = (lambda msg: print(msg, file=sys.stderr, flush=True)) if args.verbose else None
    result = run_sweep(cfg, spec, log=log)
    text = render_report(result)
    sys.stdout.write(text)
    if args.out:
        write_report(result, args.out)
        print(f"wrote {args.out}/report.txt and {args.out}/runs.jsonl")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nlucompress", description="Word-embedding compression for multi-task NLU models.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = command("gen-data", cmd_gen_data, "Generate a synthetic corpus and stand-in pretrained embeddings.")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--config", help="flat key = value corpus spec")
    sp.add_argument("--dim", type=int, default=50, help="embedding dimension (default: 50)")
    add_dataclass_flags(sp, datagen.CorpusSpec)

    def train_flags(sp, skip=("regime",)):
        sp.add_argument("--config", help="flat key = value training config")
        sp.add_argument("--report", help="training report path (default: next to --out)")
        add_dataclass_flags(sp, TrainConfig, skip=skip + ("init_model", "init_autoencoder"))

    def corpus_flags(sp):
        sp.add_argument("--train", required=True, help="training corpus")
        sp.add_argument("--valid", help="validation corpus for early stopping")

    sp = command("train-nlu", cmd_train_nlu, "Train the uncompressed baseline NLU model.")
    corpus_flags(sp)
    sp.add_argument("--embeddings", required=True, help="pretrained embeddings (EMB1 or text)")
    sp.add_argument("--out", required=True, help="output NLU1 checkpoint")
    train_flags(sp)

    sp = command("train-ae", cmd_train_ae, "Train a task-agnostic DCCL autoencoder on an embedding matrix.")
    sp.add_argument("--embeddings", required=True, help="EMB1, text embeddings, or an NLU1 checkpoint")
    sp.add_argument("--out", required=True, help="output DAE1 autoencoder checkpoint")
    train_flags(sp)

    sp = command("compress-dccl", cmd_compress_dccl, "Encode every word with a trained autoencoder.")
    sp.add_argument("--autoencoder", required=True)
    sp.add_argument("--embeddings", required=True, help="EMB1, text embeddings, or an NLU1 checkpoint")
    sp.add_argument("--out", required=True, help="output DCCL file")
    sp.add_argument("--out-model", help="also write the NLU1 model with the compressed embeddings swapped in")

    sp = command("compress-svd", cmd_compress_svd, "Truncated-SVD compression of an embedding matrix.")
    sp.add_argument("--embeddings", required=True, help="EMB1, text embeddings, or an NLU1 checkpoint")
    sp.add_argument("--n", type=float, required=True, help="fraction of components retained")
    sp.add_argument("--out", required=True, help="output SVDF file")
    sp.add_argument("--out-model", help="also write the NLU1 model with the frozen factorized layer")

    sp = command("train-taskaware", cmd_train_taskaware, "Task-aware end-to-end DCCL training.")
    corpus_flags(sp)
    sp.add_argument("--model", help="pretrained NLU1 model (initializes task layers and encoder input)")
    sp.add_argument("--autoencoder", help="pretrained DAE1 autoencoder")
    sp.add_argument("--embeddings", help="encoder input vectors (default: the --model embeddings)")
    sp.add_argument("--out", required=True, help="output NLU1 checkpoint with frozen codes")
    sp.add_argument("--out-encoder", help="also save the trained encoder and codebooks as DAE1")
    sp.add_argument("--regime", default=argparse.SUPPRESS,
                    choices=["taskaware_dccl", "taskaware_dccl_no_recon", "taskaware_dccl_scratch"])
    train_flags(sp)

    sp = command("finetune", cmd_finetune,
                 "Fine-tune task layers on frozen DCCL codes, or jointly tune an SVD factorized layer.")
    corpus_flags(sp)
    sp.add_argument("--model", required=True, help="trained NLU1 model")
    sp.add_argument("--compressed", help="DCCL file (frozen codes and codebooks)")
    sp.add_argument("--factors", help="SVDF file (task-aware SVD)")
    sp.add_argument("--out", required=True)
    train_flags(sp)

    sp = command("quantize", cmd_quantize, "Post-training linear quantization of the LSTM weights.")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=256)
    sp.add_argument("--include-heads", action="store_true", help="also quantize the dense heads")

    sp = command("evaluate", cmd_evaluate, "Compute IRER, ICER, DCER, SER and FAR on a corpus.")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--baseline-report", help="metrics JSON of a baseline, for a relative-change table")
    sp.add_argument("--baseline-model", help="baseline NLU1 checkpoint, for compression rates")
    sp.add_argument("--out", help="write this model's metrics as JSON")

    sp = command("inspect", cmd_inspect, "Describe a checkpoint or compressed file.")
    sp.add_argument("path")

    sp = command("sweep", cmd_sweep, "Train all regimes over several seeds and print comparison tables.")
    sp.add_argument("--config", help="flat key = value sweep config")
    sp.add_argument("--corpus-config", help="flat key = value corpus spec")
    sp.add_argument("--out", help="directory for report.txt and runs.jsonl")
    sp.add_argument("--verbose", action="store_true", help="progress on stderr")
    add_dataclass_flags(sp, SweepConfig)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NluCompressError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
