from pathlib import Path

import pytest

from gacr.config import RunConfig, apply_overrides, load_config, parse_config
from gacr.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.encoder.mask_type == "A" and cfg.encoder.max_seq_len == 256
    assert cfg.training.batch_size == 16 and cfg.training.learning_rate == 1e-3
    assert cfg.generation.k == 3 and cfg.generation.backend == "stub"


def test_sections_parsed_and_typed():
    cfg = parse_config("""
[encoder]
model_dim = 32
num_heads = 2
mask_type = D
[training]
learning_rate = 0.01
mode = gacr_m
[generation]
backend = remote
endpoint_url = http://x/gen
temperature = 0.2
[retrieval]
variants = doc_only, gen_name
[paths]
work_dir = runs/a
cache = shared/snips.jsonl
""")
    assert cfg.encoder.model_dim == 32 and cfg.encoder.mask_type == "D"
    assert cfg.training.learning_rate == 0.01 and cfg.training.mode == "gacr_m"
    assert cfg.generation.backend == "remote" and cfg.generation.temperature == 0.2
    assert cfg.retrieval.variants == ("doc_only", "gen_name")
    assert cfg.paths.resolve("cache") == Path("shared/snips.jsonl")
    assert cfg.paths.resolve("checkpoint") == Path("runs/a/model.ckpt")


def test_run_seed_reaches_every_component():
    cfg = parse_config("[run]\nseed = 9\njobs = 3\n[training]\nseed = 2\n")
    assert (cfg.seed, cfg.jobs) == (9, 3)
    assert cfg.encoder.seed == 9 and cfg.generation.seed == 9
    assert cfg.training.seed == 2


@pytest.mark.parametrize("text,match", [
    ("[encoder]\nwidth = 3\n", "unknown key"),
    ("[optimizer]\nlr = 1\n", "unknown section"),
    ("[run]\ncolour = red\n", "unknown key"),
    ("[encoder]\nnum_heads = three\n", "cannot parse"),
    ("[encoder]\nmodel_dim = 10\nnum_heads = 4\n", "divisible"),
    ("[training]\nmode = bm25\n", "mode"),
    ("[retrieval]\nvariants = doc_only, bm25\n", "variants"),
    ("no section header\n", "config"),
])
def test_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")
    assert load_config(None) == RunConfig()


def test_overrides():
    cfg = apply_overrides(RunConfig(), seed=4, mode="doc_only", mask="C", cap=32, k=5, jobs=2, top_k=7)
    assert cfg.seed == 4 and cfg.encoder.seed == 4 and cfg.training.seed == 4 and cfg.generation.seed == 4
    assert cfg.training.mode == "doc_only" and cfg.training.snippet_cap == 32 and cfg.training.k == 5
    assert cfg.generation.k == 5 and cfg.encoder.mask_type == "C"
    assert cfg.jobs == 2 and cfg.retrieval.top_k == 7


def test_override_validation():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), cap=0)
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), jobs=0)


def test_inline_comments():
    cfg = parse_config("[training]\nloss_form = literal   ; or log\n[retrieval]\npool_size = 0  # full pool\n")
    assert cfg.training.loss_form == "literal" and cfg.retrieval.pool_size == 0
