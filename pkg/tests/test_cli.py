import json

import pytest

from gacr.cli import main
from gacr.retrieval import CandidateIndex


@pytest.fixture
def run(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(f"""
[paths]
work_dir = {tmp_path / "work"}
[synth]
n_pairs = 48
n_test = 16
[training]
epochs = 1
batch_size = 8
[encoder]
model_dim = 16
num_heads = 2
ffn_dim = 32
num_layers = 1
max_seq_len = 128
""")

    def invoke(*args):
        return main([args[0], "--config", str(config), *args[1:]])

    invoke.work = tmp_path / "work"
    return invoke


def test_pipeline(run, capsys):
    assert run("synth") == 0
    assert run("ingest") == 0
    assert "train: 32 pairs, 0 skipped" in capsys.readouterr().out
    assert run("gen") == 0
    cache_lines = (run.work / "snippets.jsonl").read_text()
    assert len(cache_lines.splitlines()) == 48 * 3
    assert run("gen") == 0
    assert (run.work / "snippets.jsonl").read_text() == cache_lines

    assert run("train") == 0
    assert (run.work / "loss.log").read_text().startswith("epoch 1 loss ")
    ckpt = (run.work / "model.ckpt").read_bytes()
    assert run("train") == 0
    assert (run.work / "model.ckpt").read_bytes() == ckpt

    assert run("index") == 0
    assert len(CandidateIndex.load(run.work / "index.npz")) == 16
    capsys.readouterr()
    assert run("search", "--query", "cache data", "--top-k", "4") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split("\t")[0] for line in lines] == ["1", "2", "3", "4"]

    assert run("eval", "--variants", "doc_only,gacr_s,gen_name") == 0
    out = capsys.readouterr().out
    assert "superior queries:" in out
    reports = run.work / "reports"
    records = [json.loads(x) for x in (reports / "eval.jsonl").read_text().splitlines()]
    assert {r["variant"] for r in records} == {"doc_only", "gacr_s", "gen_name"}

    assert run("sweep", "--axis", "mask", "--fixed") == 0
    rows = (reports / "sweep_mask.txt").read_text().splitlines()[1:]
    assert [r.split()[0] for r in rows] == ["A", "B", "C", "D"]


def test_seed_override_changes_artifacts(run):
    run("synth")
    run("train")
    first = (run.work / "model.ckpt").read_bytes()
    assert run("train", "--seed", "3") == 0
    assert (run.work / "model.ckpt").read_bytes() != first


def test_stale_index_rejected(run, capsys):
    run("synth")
    run("train")
    run("index")
    run("train", "--seed", "5")
    assert run("eval") == 1
    assert "different checkpoint" in capsys.readouterr().err


def test_eval_without_index(run, capsys):
    run("synth")
    run("train")
    assert run("eval") == 1
    assert "index not found" in capsys.readouterr().err


def test_empty_query_is_usage_error(run, capsys):
    assert run("search", "--query", "   ") == 2
    assert "must not be empty" in capsys.readouterr().err


def test_missing_corpus_is_operational(run, capsys):
    assert run("train") == 1
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--nope"], ["train", "--mask", "Z"], [],
                                  ["sweep", "--axis", "lr"]])
def test_usage_errors(argv):
    assert main(argv) == 2


def test_bad_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[encoder]\nwidth = 4\n")
    assert main(["ingest", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_gradcheck(capsys):
    assert main(["gradcheck", "--probes", "50"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max relative error") and "ok" in out
