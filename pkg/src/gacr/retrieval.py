"""Dense candidate index, dot-product ranking, MRR and the evaluation harnesses."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gacr.corpus import CorpusSplit, DocCodePair, Vocabulary, encode_tokens
from gacr.encoder import (
    EncoderConfig,
    EncoderParams,
    DualQueryVector,
    FusedInput,
    Segment,
    assemble_segment,
    assemble_target,
    forward_batch,
    stack_inputs,
    with_mask_type,
)
from gacr.errors import ConfigError, ContractError
from gacr.generation import GenerationConfig, SnippetCache, split_name_body
from gacr.training import TrainConfig, build_query_input, snippets_for_pairs, train

logger = logging.getLogger(__name__)

VARIANTS = ("doc_only", "gen_full", "gen_name", "gen_body", "gacr_s", "gacr_m")
CAP_AXIS = (32, 64, 128)
MASK_AXIS = ("A", "B", "C", "D")
ENCODE_CHUNK = 16


@dataclass(frozen=True)
class CandidateIndex:
    ids: tuple[str, ...]
    vectors: np.ndarray
    fingerprint: str = ""
    languages: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("candidate ids must be unique")
        if self.vectors.shape[0] != len(self.ids):
            raise ContractError("one vector row per candidate id required")
        if not np.isfinite(self.vectors).all():
            raise ContractError("candidate vectors must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, ids=np.array(self.ids), vectors=self.vectors,
                     languages=np.array(self.languages), fingerprint=np.array(self.fingerprint))

    @classmethod
    def load(cls, path: str | Path) -> CandidateIndex:
        with np.load(path, allow_pickle=False) as data:
            return cls(tuple(str(s) for s in data["ids"]), data["vectors"].copy(),
                       str(data["fingerprint"]), tuple(str(s) for s in data["languages"]))


@dataclass(frozen=True)
class RankedList:
    query_id: str
    candidate_ids: tuple[str, ...]
    scores: tuple[float, ...]

    def rank_of(self, candidate_id: str) -> int | None:
        try:
            return self.candidate_ids.index(candidate_id) + 1
        except ValueError:
            return None


@dataclass
class EvalReport:
    variant: str
    mode: str
    mask: str
    cap: int
    k: int
    mrr_by_language: dict[str, float]
    overall: float
    ranks: dict[str, int] = field(repr=False)
    truth_scores: dict[str, float] = field(repr=False, default_factory=dict)

    def records(self) -> list[dict]:
        return [{"variant": self.variant, "language": lang, "mrr": mrr, "mask": self.mask,
                 "cap": self.cap, "k": self.k, "mode": self.mode}
                for lang, mrr in [*sorted(self.mrr_by_language.items()), ("overall", self.overall)]]


# --- encoding ---------------------------------------------------------------

def encode_hidden(params: EncoderParams, inputs: Sequence[FusedInput],
                  chunk: int = ENCODE_CHUNK) -> Iterable[tuple[int, np.ndarray]]:
    """Yield ``(offset, hidden)`` per fixed-size chunk.

    The last chunk is padded by repeating its final input, so every forward
    call has the same shape and a sequence's encoding does not depend on
    which batch it landed in.
    """
    for start in range(0, len(inputs), chunk):
        part = list(inputs[start:start + chunk])
        n = len(part)
        part += [part[-1]] * (chunk - n)
        ids, masks = stack_inputs(part)
        hidden, _ = forward_batch(params, ids, masks)
        yield start, hidden[:n]


def encode_targets(params: EncoderParams, inputs: Sequence[FusedInput],
                   chunk: int = ENCODE_CHUNK) -> np.ndarray:
    out = np.empty((len(inputs), params.config.model_dim))
    for start, hidden in encode_hidden(params, inputs, chunk):
        out[start:start + len(hidden)] = hidden[:, 0]
    return out


def encode_queries(params: EncoderParams, inputs: Sequence[FusedInput],
                   chunk: int = ENCODE_CHUNK) -> list[DualQueryVector]:
    out = []
    for start, hidden in encode_hidden(params, inputs, chunk):
        for j, h in enumerate(hidden):
            p0, p1 = inputs[start + j].query_rows()
            out.append(DualQueryVector(h[p0].copy(), h[p1].copy()))
    return out


def build_index(pairs: Sequence[DocCodePair], params: EncoderParams, vocab: Vocabulary,
                fingerprint: str = "", chunk: int = ENCODE_CHUNK) -> CandidateIndex:
    if params.config.vocab_size != vocab.size:
        raise ConfigError(
            f"checkpoint vocab size {params.config.vocab_size} != corpus vocab size {vocab.size}")
    L = params.config.max_seq_len
    inputs = [assemble_target(encode_tokens(vocab, p.code_tokens), L) for p in pairs]
    vectors = encode_targets(params, inputs, chunk)
    return CandidateIndex(tuple(p.id for p in pairs), vectors, fingerprint,
                          tuple(p.language for p in pairs))


# --- ranking ----------------------------------------------------------------

def search(query_vec: DualQueryVector, index: CandidateIndex, top_k: int,
           rows: Sequence[int] | None = None, query_id: str = "") -> RankedList:
    """Rank candidates by ``(v_doc + v_gen) . z``, descending, ties by pool position.

    ``rows`` restricts the pool to a subset of index rows (kept in ascending order).
    """
    if top_k <= 0:
        return RankedList(query_id, (), ())
    q = query_vec.summed
    if q.shape[0] != index.vectors.shape[1]:
        raise ContractError(f"query dim {q.shape[0]} != index dim {index.vectors.shape[1]}")
    pool = np.arange(len(index)) if rows is None else np.sort(np.asarray(rows, dtype=np.int64))
    scores = index.vectors[pool] @ q
    order = np.argsort(-scores, kind="stable")[:top_k]
    return RankedList(query_id, tuple(index.ids[pool[i]] for i in order),
                      tuple(float(scores[i]) for i in order))


def mrr(ranked: Sequence[RankedList], truth: Mapping[str, str]) -> float:
    if not ranked:
        raise ContractError("mrr over an empty query set")
    total = 0.0
    for rl in ranked:
        rank = rl.rank_of(truth[rl.query_id])
        if rank is None:
            raise ContractError(f"ground truth for query {rl.query_id} is not in its ranked list")
        total += 1.0 / rank
    return total / len(ranked)


def compare_superior(ranks_a: Mapping[str, int], ranks_b: Mapping[str, int]) -> tuple[int, int, int]:
    """Count queries where system a (resp. b) ranks the truth strictly higher, and ties."""
    if set(ranks_a) != set(ranks_b):
        raise ContractError("rank comparisons need identical query sets")
    a_better = sum(ranks_a[q] < ranks_b[q] for q in ranks_a)
    b_better = sum(ranks_b[q] < ranks_a[q] for q in ranks_a)
    return a_better, b_better, len(ranks_a) - a_better - b_better


# --- evaluation harnesses ---------------------------------------------------

def variant_input(pair: DocCodePair, variant: str, vocab: Vocabulary, snippets, L: int,
                  cap: int, k: int, mask_type: str) -> FusedInput:
    if variant in ("doc_only", "gacr_s", "gacr_m"):
        return build_query_input(pair, variant, vocab, snippets, L, cap, k, mask_type)
    if not snippets:
        raise ContractError(f"variant {variant} needs generated snippets for pair {pair.id}")
    snip = snippets[0]
    if variant == "gen_full":
        tokens = list(snip.tokens)
    elif variant == "gen_name":
        tokens = split_name_body(snip)[0]
    elif variant == "gen_body":
        tokens = split_name_body(snip)[1]
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return assemble_segment(encode_tokens(vocab, tokens), L, Segment.DOC, mask_type)


def candidate_pools(index: CandidateIndex, query_ids: Sequence[str], pool_size: int = 0,
                    seed: int = 0) -> dict[str, np.ndarray]:
    """Per-query candidate rows: the query's language pool, optionally subsampled.

    With ``pool_size > 0`` each pool is the ground truth plus ``pool_size - 1``
    seeded same-language distractors.
    """
    pos = {cid: i for i, cid in enumerate(index.ids)}
    langs = index.languages or ("unknown",) * len(index)
    by_lang: dict[str, list[int]] = defaultdict(list)
    for i, lang in enumerate(langs):
        by_lang[lang].append(i)
    rng = np.random.default_rng(seed)
    pools = {}
    for qid in query_ids:
        if qid not in pos:
            raise ContractError(f"ground truth for query {qid} is not in the candidate index")
        truth = pos[qid]
        rows = np.array(by_lang[langs[truth]])
        if 0 < pool_size < len(rows):
            others = rows[rows != truth]
            picked = rng.choice(others, pool_size - 1, replace=False)
            rows = np.sort(np.append(picked, truth))
        pools[qid] = rows
    return pools


def evaluate_queries(variant: str, queries: Sequence[DualQueryVector], pairs: Sequence[DocCodePair],
                     index: CandidateIndex, pools: Mapping[str, np.ndarray], *, mode: str, mask: str,
                     cap: int, k: int) -> tuple[EvalReport, list[RankedList]]:
    ranked = [search(q, index, len(pools[p.id]), pools[p.id], p.id) for q, p in zip(queries, pairs)]
    truth = {p.id: p.id for p in pairs}
    ranks = {rl.query_id: rl.rank_of(rl.query_id) for rl in ranked}
    if any(r is None for r in ranks.values()):
        raise ContractError("ground truth missing from a ranked list")
    scores = {rl.query_id: rl.scores[ranks[rl.query_id] - 1] for rl in ranked}
    by_lang: dict[str, list[RankedList]] = defaultdict(list)
    for p, rl in zip(pairs, ranked):
        by_lang[p.language].append(rl)
    report = EvalReport(variant, mode, mask, cap, k,
                        {lang: mrr(rls, truth) for lang, rls in sorted(by_lang.items())},
                        mrr(ranked, truth), ranks, scores)
    return report, ranked


def eval_variants(split: CorpusSplit, cache: SnippetCache | None, params: EncoderParams,
                  vocab: Vocabulary, variants: Iterable[str], *, mode: str = "", cap: int = 64,
                  k: int = 3, mask: str | None = None, pool_size: int = 0, seed: int = 0,
                  generation: GenerationConfig | None = None, fingerprint: str = "",
                  index: CandidateIndex | None = None) -> dict[str, EvalReport]:
    """Rank the split's code pool with each query variant against one shared index."""
    variants = list(variants)
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}")
    pairs = list(split.pairs)
    mask = mask or params.config.mask_type
    L = params.config.max_seq_len
    if index is None:
        index = build_index(pairs, params, vocab, fingerprint)
    pools = candidate_pools(index, [p.id for p in pairs], pool_size, seed)

    needs_gen = [v for v in variants if v != "doc_only"]
    n_snip = k if "gacr_m" in variants else 1
    snippets = snippets_for_pairs(pairs, cache, n_snip, generation) if needs_gen else {}

    reports = {}
    for variant in variants:
        inputs = [variant_input(p, variant, vocab, snippets.get(p.id), L, cap, k, mask)
                  for p in pairs]
        queries = encode_queries(params, inputs)
        reports[variant], _ = evaluate_queries(
            variant, queries, pairs, index, pools,
            mode=mode or variant, mask=mask, cap=cap, k=k if variant == "gacr_m" else 1)
    return reports


@dataclass(frozen=True)
class SweepRow:
    value: str
    report: EvalReport


def sweep(train_split: CorpusSplit, test_split: CorpusSplit, cache: SnippetCache | None,
          vocab: Vocabulary, train_config: TrainConfig, encoder_config: EncoderConfig, axis: str,
          *, generation: GenerationConfig | None = None, params: EncoderParams | None = None,
          pool_size: int = 0) -> list[SweepRow]:
    """One row per axis value with everything else fixed.

    Trains a fresh model per value unless ``params`` is given, in which case
    that fixed checkpoint is evaluated under each setting.
    """
    if axis == "cap":
        values: Sequence = CAP_AXIS
    elif axis == "mask":
        values = MASK_AXIS
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    rows = []
    for value in values:
        tcfg, ecfg = train_config, encoder_config
        if axis == "cap":
            tcfg = replace(tcfg, snippet_cap=value)
        else:
            ecfg = replace(ecfg, mask_type=value)
        model = params
        if model is None:
            model = train(train_split, cache, vocab, tcfg, ecfg, generation).params
        report = eval_variants(test_split, cache, model, vocab, [tcfg.mode], mode=tcfg.mode,
                               cap=tcfg.snippet_cap, k=tcfg.k, mask=ecfg.mask_type,
                               pool_size=pool_size, seed=tcfg.seed, generation=generation)[tcfg.mode]
        logger.info("sweep %s=%s mrr %.4f", axis, value, report.overall)
        rows.append(SweepRow(str(value), report))
    return rows


# --- report output ----------------------------------------------------------

def format_table(reports: Sequence[EvalReport], label: str = "variant",
                 labels: Sequence[str] | None = None) -> str:
    langs = sorted({lang for r in reports for lang in r.mrr_by_language})
    head = [label, "mode", "mask", "cap", "k", *langs, "overall"]
    body = []
    for i, r in enumerate(reports):
        name = labels[i] if labels is not None else r.variant
        body.append([name, r.mode, r.mask, str(r.cap), str(r.k),
                     *(f"{r.mrr_by_language.get(lang, float('nan')):.4f}" for lang in langs),
                     f"{r.overall:.4f}"])
    widths = [max(len(row[c]) for row in [head, *body]) for c in range(len(head))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in [head, *body]]
    return "\n".join(lines)


def write_report(reports: Sequence[EvalReport], out_dir: str | Path, stem: str = "eval",
                 label: str = "variant", labels: Sequence[str] | None = None) -> None:
    """Write ``stem.txt`` (table), ``stem.jsonl`` (records) and one rank dump per row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(format_table(reports, label, labels) + "\n", encoding="utf-8")
    with (out / f"{stem}.jsonl").open("w", encoding="utf-8") as fh:
        for r in reports:
            for rec in r.records():
                fh.write(json.dumps(rec) + "\n")
    for i, r in enumerate(reports):
        name = labels[i] if labels is not None else r.variant
        write_rank_dump(r, out / f"{stem}.{name}.ranks")


def write_rank_dump(report: EvalReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for qid, rank in report.ranks.items():
            fh.write(f"{qid} {rank} {report.truth_scores.get(qid, float('nan')):.12g}\n")
