import json
import os

import pytest

from nlucompress import cli
from nlucompress.nlu import NluModel


def run(*argv):
    return cli.run([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", d / "data", "--n-train", 160, "--n-validation", 40, "--n-test", 40,
               "--vocab-size", 300, "--dim", 8) == 0
    assert run("train-nlu", "--train", d / "data/train.txt", "--valid", d / "data/validation.txt",
               "--embeddings", d / "data/embeddings.emb1", "--out", d / "base.nlu1",
               "--epochs", 2, "--hidden", 8, "--learning-rate", 0.01) == 0
    assert run("train-ae", "--embeddings", d / "base.nlu1", "--out", d / "ae.dae1", "--epochs", 3,
               "--M", 2, "--K", 4, "--learning-rate", 0.01) == 0
    return d


def test_gen_data_outputs(work):
    names = set(os.listdir(work / "data"))
    assert {"train.txt", "validation.txt", "test.txt", "embeddings.emb1", "embeddings.txt", "corpus.cfg"} <= names


def test_config_echo(work, capsys):
    assert run("train-nlu", "--train", work / "data/train.txt", "--embeddings", work / "data/embeddings.txt",
               "--out", work / "b2.nlu1", "--epochs", 1, "--hidden", 4, "--seed", 7) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.startswith("# train config: "))
    cfg = json.loads(line[len("# train config: "):])
    assert cfg["seed"] == 7 and cfg["learning_rate"] == 1e-4 and cfg["batch_size"] == 32 and cfg["patience"] == 3


def test_config_file_and_flag_precedence(work, capsys):
    cfg = work / "t.cfg"
    cfg.write_text("epochs = 1\nhidden = 4\nseed = 3\n")
    assert run("train-nlu", "--train", work / "data/train.txt", "--embeddings", work / "data/embeddings.emb1",
               "--out", work / "b3.nlu1", "--config", cfg, "--seed", 5) == 0
    out = capsys.readouterr().out
    cfg = json.loads(next(l for l in out.splitlines() if l.startswith("# train config: ")).split(": ", 1)[1])
    assert cfg["seed"] == 5 and cfg["hidden"] == 4 and cfg["epochs"] == 1


def test_rerun_is_identical(work):
    args = ["train-nlu", "--train", work / "data/train.txt", "--embeddings", work / "data/embeddings.emb1",
            "--epochs", 1, "--hidden", 4]
    assert run(*args, "--out", work / "r1.nlu1") == 0
    assert run(*args, "--out", work / "r2.nlu1") == 0
    assert (work / "r1.nlu1").read_bytes() == (work / "r2.nlu1").read_bytes()


def test_compress_finetune_evaluate(work, capsys):
    d = work
    assert run("compress-dccl", "--autoencoder", d / "ae.dae1", "--embeddings", d / "base.nlu1",
               "--out", d / "c.dccl", "--out-model", d / "tag.nlu1") == 0
    assert run("compress-svd", "--embeddings", d / "base.nlu1", "--n", 0.5, "--out", d / "f.svdf",
               "--out-model", d / "tagsvd.nlu1") == 0
    assert run("finetune", "--train", d / "data/train.txt", "--valid", d / "data/validation.txt",
               "--model", d / "base.nlu1", "--compressed", d / "c.dccl", "--out", d / "ft.nlu1", "--epochs", 1) == 0
    assert run("finetune", "--train", d / "data/train.txt", "--model", d / "base.nlu1",
               "--factors", d / "f.svdf", "--out", d / "tawsvd.nlu1", "--epochs", 1) == 0
    assert run("train-taskaware", "--train", d / "data/train.txt", "--valid", d / "data/validation.txt",
               "--model", d / "base.nlu1", "--autoencoder", d / "ae.dae1", "--regime", "taskaware_dccl",
               "--epochs", 1, "--out", d / "taw.nlu1", "--out-encoder", d / "taw.dae1") == 0
    assert NluModel.load(d / "taw.nlu1").source.kind == "dccl_codes"
    assert run("quantize", "--model", d / "taw.nlu1", "--out", d / "tawq.nlu1") == 0
    assert run("evaluate", "--model", d / "base.nlu1", "--corpus", d / "data/test.txt", "--out", d / "base.json") == 0
    capsys.readouterr()
    assert run("evaluate", "--model", d / "tawq.nlu1", "--corpus", d / "data/test.txt",
               "--baseline-report", d / "base.json", "--baseline-model", d / "base.nlu1") == 0
    out = capsys.readouterr().out
    assert "relative change (%)" in out and "IRER" in out and "model rate" in out


@pytest.mark.parametrize("name,expect", [("base.nlu1", "embedding source"), ("ae.dae1", "autoencoder"),
                                         ("data/embeddings.emb1", "V 300")])
def test_inspect(work, capsys, name, expect):
    assert run("inspect", work / name) == 0
    out = capsys.readouterr().out
    assert expect in out
    if name.endswith(".nlu1"):
        assert '"kind": "raw"' in out and "emb.table" in out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(work, tmp_path):
    assert run() == 1
    assert run("train-nlu", "--bogus") == 1
    assert run("compress-svd", "--embeddings", work / "base.nlu1", "--n", 2.0, "--out", tmp_path / "x") == 1
    assert run("inspect", tmp_path / "missing") == 2
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"JUNKJUNK")
    assert run("inspect", junk) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("not a corpus\n")
    assert run("train-nlu", "--train", bad, "--embeddings", work / "data/embeddings.emb1",
               "--out", tmp_path / "m.nlu1") == 2
    assert not (tmp_path / "m.nlu1").exists()
    assert run("train-nlu", "--train", work / "data/train.txt", "--embeddings", work / "data/embeddings.emb1",
               "--out", tmp_path / "m.nlu1", "--learning-rate", 1e30, "--optimizer", "sgd", "--epochs", 1) == 3
    assert run("finetune", "--train", work / "data/train.txt", "--model", work / "base.nlu1",
               "--out", tmp_path / "x.nlu1") == 1


def test_sweep_command(work, tmp_path, capsys):
    corpus = tmp_path / "corpus.cfg"
    corpus.write_text("n_train = 120\nn_validation = 30\nn_test = 30\nvocab_size = 300\n")
    args = ["sweep", "--corpus-config", corpus, "--regimes", "tag-dccl,taw-dccl", "--M", 2, "--K", 4, "--seeds", 2,
            "--dim", 8, "--hidden", 4, "--baseline-epochs", 1, "--autoencoder-epochs", 2, "--taskaware-epochs", 1]
    assert run(*args, "--out", tmp_path / "s1") == 0
    out = capsys.readouterr().out
    assert "Table 1 shape" in out and "TAw. DCCL" in out
    assert run(*args, "--out", tmp_path / "s2") == 0
    assert (tmp_path / "s1/report.txt").read_bytes() == (tmp_path / "s2/report.txt").read_bytes()
    runs = (tmp_path / "s1/runs.jsonl").read_text().splitlines()
    assert len(runs) == 2 * 3
