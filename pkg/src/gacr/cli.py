"""``gacr`` command-line entry point.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

from gacr.checkpoint import file_fingerprint, load_checkpoint, save_checkpoint
from gacr.config import RunConfig, apply_overrides, load_config
from gacr.corpus import CorpusSplit, DocCodePair, build_vocab, load_corpus, tokenize_raw, write_corpus
from gacr.encoder import MASK_TYPES
from gacr.errors import ConfigError, GacrError
from gacr.generation import SnippetCache, generate, generate_all
from gacr.gradcheck import DEFAULT_CONFIG, grad_check
from gacr.retrieval import (
    CandidateIndex,
    VARIANTS,
    build_index,
    compare_superior,
    encode_queries,
    eval_variants,
    format_table,
    search,
    sweep,
    write_report,
)
from gacr.synth import make_synthetic_corpus
from gacr.training import MODES, build_query_input, train

logger = logging.getLogger("gacr")

GRADCHECK_TOLERANCE = 1e-4
COMMANDS = ("ingest", "gen", "synth", "train", "index", "search", "eval", "sweep", "gradcheck")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--mask", choices=MASK_TYPES)
    common.add_argument("--cap", type=int, help="per-snippet token cap")
    common.add_argument("--k", type=int, help="generated snippets per query")
    common.add_argument("--jobs", type=int, help="maximum concurrent workers")
    common.add_argument("--top-k", type=int, dest="top_k")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="gacr", description="Generation-augmented code retrieval.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("ingest", parents=[common], help="validate corpora and print statistics")
    sub.add_parser("gen", parents=[common], help="fill the generated-snippet cache")
    sub.add_parser("synth", parents=[common], help="write the seeded synthetic corpus")
    sub.add_parser("train", parents=[common], help="train the encoder and save a checkpoint")
    sub.add_parser("index", parents=[common], help="encode the candidate pool")
    p = sub.add_parser("search", parents=[common], help="rank candidates for a free-text query")
    p.add_argument("--query", required=True)
    p = sub.add_parser("eval", parents=[common], help="MRR report on the test split")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p = sub.add_parser("sweep", parents=[common], help="ablation table over one axis")
    p.add_argument("--axis", choices=("cap", "mask"), required=True)
    p.add_argument("--fixed", action="store_true",
                   help="evaluate the saved checkpoint instead of retraining per value")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--probes", type=int, default=200)
    return parser


# --- shared plumbing --------------------------------------------------------

def _load_split(cfg: RunConfig, name: str, required: bool = True) -> CorpusSplit | None:
    path = cfg.paths.resolve(name)
    if not path.is_file() and not required:
        return None
    return load_corpus(path, name)


def _splits(cfg: RunConfig) -> list[CorpusSplit]:
    splits = [_load_split(cfg, "train")]
    test = _load_split(cfg, "test", required=False)
    return splits + ([test] if test is not None else [])


def _cache(cfg: RunConfig) -> SnippetCache:
    return SnippetCache(cfg.paths.resolve("cache"))


def _fill_stub_cache(cfg: RunConfig, splits, cache: SnippetCache) -> None:
    if cfg.generation.backend == "stub":
        generate_all([p for s in splits for p in s.pairs], cfg.generation, cache)


def _build_vocab(cfg: RunConfig, splits, cache: SnippetCache):
    extra = []
    for split in splits:
        for pair in split.pairs:
            for snip in cache.snippets_for(pair.id, cfg.generation.k) or ():
                extra.append(snip.tokens)
    return build_vocab(splits, extra, cfg.corpus.max_vocab, cfg.corpus.min_freq)


def _load_model(cfg: RunConfig):
    path = cfg.paths.resolve("checkpoint")
    ckpt = load_checkpoint(path)
    if ckpt.vocab is None:
        raise GacrError(f"checkpoint {path} carries no vocabulary")
    return ckpt, path


# --- subcommands ------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    splits = _splits(cfg)
    for split in splits:
        n = len(split.pairs)
        langs = sorted({p.language for p in split.pairs})
        doc_len = sum(len(p.doc_tokens) for p in split.pairs) / n
        code_len = sum(len(p.code_tokens) for p in split.pairs) / n
        print(f"{split.name}: {n} pairs, {split.skipped} skipped, languages {','.join(langs)}, "
              f"mean doc {doc_len:.1f} tokens, mean code {code_len:.1f} tokens")
    vocab = build_vocab(splits, (), cfg.corpus.max_vocab, cfg.corpus.min_freq)
    print(f"vocabulary (corpus only): {vocab.size} tokens")
    return 0


def cmd_gen(cfg: RunConfig, args) -> int:
    cache = _cache(cfg)
    pairs = [p for s in _splits(cfg) for p in s.pairs]
    before = len(cache)
    generate_all(pairs, cfg.generation, cache, jobs=cfg.jobs)
    print(f"{len(pairs)} prompts, {len(cache) - before} new snippets, cache {cfg.paths.resolve('cache')}")
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    train_pairs, test_pairs = make_synthetic_corpus(cfg.synth.n_pairs, cfg.synth.n_test, cfg.seed)
    write_corpus(cfg.paths.resolve("train"), train_pairs)
    write_corpus(cfg.paths.resolve("test"), test_pairs)
    print(f"wrote {len(train_pairs)} train and {len(test_pairs)} test pairs "
          f"to {cfg.paths.resolve('train').parent}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    splits = _splits(cfg)
    cache = _cache(cfg)
    _fill_stub_cache(cfg, splits, cache)
    vocab = _build_vocab(cfg, splits, cache)
    enc = replace(cfg.encoder, vocab_size=vocab.size)
    log_path = cfg.paths.resolve("loss_log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    result = train(splits[0], cache, vocab, cfg.training, enc, cfg.generation, log_path=log_path)
    path = cfg.paths.resolve("checkpoint")
    save_checkpoint(path, result.params, result.optimizer, cfg.training, vocab)
    print(f"final loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.6f}; "
          f"checkpoint {path}")
    return 0


def cmd_index(cfg: RunConfig, args) -> int:
    ckpt, ckpt_path = _load_model(cfg)
    pool = _load_split(cfg, "test")
    index = build_index(pool.pairs, ckpt.params, ckpt.vocab, file_fingerprint(ckpt_path))
    path = cfg.paths.resolve("index")
    path.parent.mkdir(parents=True, exist_ok=True)
    index.save(path)
    print(f"indexed {len(index)} candidates to {path}")
    return 0


def _load_index(cfg: RunConfig, ckpt_path: Path) -> CandidateIndex:
    path = cfg.paths.resolve("index")
    if not path.is_file():
        raise GacrError(f"index not found: {path}")
    index = CandidateIndex.load(path)
    if index.fingerprint != file_fingerprint(ckpt_path):
        raise GacrError(f"index {path} was built from a different checkpoint; rerun index")
    return index


def cmd_search(cfg: RunConfig, args) -> int:
    ckpt, ckpt_path = _load_model(cfg)
    index = _load_index(cfg, ckpt_path)
    tokens = tuple(tokenize_raw(args.query))
    qid = "query:" + hashlib.sha256(args.query.encode("utf-8")).hexdigest()[:16]
    pair = DocCodePair(qid, "unknown", tokens, ())
    snippets = generate(pair, replace(cfg.generation, k=1), _cache(cfg))
    enc = ckpt.config
    inp = build_query_input(pair, "gacr_s", ckpt.vocab, snippets, enc.max_seq_len,
                            cfg.training.snippet_cap, 1, cfg.encoder.mask_type)
    query = encode_queries(ckpt.params, [inp])[0]
    ranked = search(query, index, cfg.retrieval.top_k, query_id=qid)
    for rank, (cid, score) in enumerate(zip(ranked.candidate_ids, ranked.scores), 1):
        print(f"{rank}\t{cid}\t{score:.6f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt, ckpt_path = _load_model(cfg)
    index = _load_index(cfg, ckpt_path)
    variants = (tuple(v.strip() for v in args.variants.split(",") if v.strip())
                if args.variants else cfg.retrieval.variants)
    test = _load_split(cfg, "test")
    tcfg = cfg.training
    reports = eval_variants(test, _cache(cfg), ckpt.params, ckpt.vocab, variants,
                            mode=ckpt.train_config.mode if ckpt.train_config else "",
                            cap=tcfg.snippet_cap, k=tcfg.k, mask=cfg.encoder.mask_type,
                            pool_size=cfg.retrieval.pool_size, seed=cfg.seed,
                            generation=cfg.generation, index=index)
    out = cfg.paths.resolve("reports")
    ordered = [reports[v] for v in variants]
    write_report(ordered, out, "eval")
    print(format_table(ordered))
    if "doc_only" in reports and "gacr_s" in reports:
        a, b, ties = compare_superior(reports["gacr_s"].ranks, reports["doc_only"].ranks)
        line = f"superior queries: gacr_s {a}, doc_only {b}, ties {ties}"
        (out / "eval.superior.txt").write_text(line + "\n", encoding="utf-8")
        print(line)
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    splits = _splits(cfg)
    if len(splits) < 2:
        raise GacrError(f"sweep needs a test split at {cfg.paths.resolve('test')}")
    cache = _cache(cfg)
    params = None
    if args.fixed:
        ckpt, _ = _load_model(cfg)
        vocab, params = ckpt.vocab, ckpt.params
        enc = ckpt.config
    else:
        _fill_stub_cache(cfg, splits, cache)
        vocab = _build_vocab(cfg, splits, cache)
        enc = replace(cfg.encoder, vocab_size=vocab.size)
    rows = sweep(splits[0], splits[1], cache, vocab, cfg.training, enc, args.axis,
                 generation=cfg.generation, params=params, pool_size=cfg.retrieval.pool_size)
    reports = [r.report for r in rows]
    labels = [r.value for r in rows]
    write_report(reports, cfg.paths.resolve("reports"), f"sweep_{args.axis}", args.axis, labels)
    print(format_table(reports, args.axis, labels))
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    config = replace(DEFAULT_CONFIG, mask_type=cfg.encoder.mask_type, seed=cfg.seed)
    err = grad_check(config, seed=cfg.seed, num_probes=args.probes,
                     loss_form=cfg.training.loss_form)
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "search" and not args.query.strip():
            parser.error("--query must not be empty")
        if args.command == "gradcheck" and args.probes < 1:
            parser.error("--probes must be >= 1")
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), seed=args.seed, mode=args.mode,
                              mask=args.mask, cap=args.cap, k=args.k, jobs=args.jobs,
                              top_k=args.top_k)
    except ConfigError as exc:
        print(f"gacr: usage error: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](cfg, args)
    except GacrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
