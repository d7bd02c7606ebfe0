"""In-batch contrastive training of the shared query/target encoder."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gacr.corpus import CorpusSplit, DocCodePair, Vocabulary, encode_tokens
from gacr.encoder import (
    DualQueryVector,
    EncoderConfig,
    EncoderParams,
    FusedInput,
    TargetVector,
    assemble_multi,
    assemble_segment,
    assemble_single,
    assemble_target,
    backward_batch,
    forward_batch,
    init_params,
    stack_inputs,
)
from gacr.errors import ConfigError, ContractError, GacrError, NumericFault
from gacr.generation import GeneratedSnippet, GenerationConfig, SnippetCache, generate, truncate_snippet

logger = logging.getLogger(__name__)

MODES = ("doc_only", "gacr_s", "gacr_m")
LOSS_FORMS = ("log", "literal")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "gacr_s"
    snippet_cap: int = 64
    k: int = 3
    seed: int = 0
    loss_form: str = "log"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.snippet_cap < 1 or self.k < 1:
            raise ConfigError("snippet_cap and k must be >= 1")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"loss_form must be one of {LOSS_FORMS}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> OptimizerState:
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


@dataclass
class TrainResult:
    params: EncoderParams
    optimizer: OptimizerState
    epoch_losses: list[float] = field(default_factory=list)


# --- scoring and loss -------------------------------------------------------

def batch_scores(queries: Sequence[DualQueryVector], targets: Sequence[TargetVector]) -> np.ndarray:
    """``S[b, j] = [y1_b, y2_b] . [z_j, z_j] = (y1_b + y2_b) . z_j``."""
    if len(queries) != len(targets):
        raise ContractError(f"{len(queries)} queries vs {len(targets)} targets")
    q = np.stack([qv.summed for qv in queries])
    z = np.stack([t.v for t in targets])
    return q @ z.T


def batch_loss(scores: np.ndarray, form: str = "log") -> tuple[float, np.ndarray]:
    """In-batch softmax loss over a square score matrix and its exact gradient.

    ``form="log"`` is the negative mean log-softmax of the diagonal;
    ``form="literal"`` drops the log (negative mean diagonal probability).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ContractError(f"score matrix must be square, got {scores.shape}")
    if not np.isfinite(scores).all():
        raise NumericFault("non-finite score in batch")
    n = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    prob = np.exp(log_p)
    eye = np.eye(n)
    if form == "log":
        loss = 0.0 - float(np.trace(log_p)) / n
        grad = (prob - eye) / n
    elif form == "literal":
        diag = np.diag(prob)
        loss = -float(diag.sum()) / n
        grad = -diag[:, None] * (eye - prob) / n
    else:
        raise ConfigError(f"unknown loss form {form!r}")
    return loss, grad


# --- query construction -----------------------------------------------------

def build_query_input(pair: DocCodePair, mode: str, vocab: Vocabulary,
                      snippets: Sequence[GeneratedSnippet] | None, L: int, cap: int,
                      k: int = 1, mask_type: str = "A") -> FusedInput:
    doc = encode_tokens(vocab, pair.doc_tokens)
    if mode == "doc_only":
        return assemble_segment(doc, L, mask_type=mask_type)
    if not snippets:
        raise ContractError(f"mode {mode} needs generated snippets for pair {pair.id}")
    if mode == "gacr_s":
        gen = truncate_snippet(encode_tokens(vocab, snippets[0].tokens), cap)
        return assemble_single(doc, gen, L, mask_type)
    if mode == "gacr_m":
        gens = [encode_tokens(vocab, s.tokens) for s in snippets[:k]]
        return assemble_multi(doc, gens, cap, L, mask_type)
    raise ConfigError(f"unknown mode {mode!r}")


def snippets_for_pairs(pairs: Sequence[DocCodePair], cache: SnippetCache | None, k: int,
                       generation: GenerationConfig | None = None) -> dict[str, list[GeneratedSnippet]]:
    """Look up ``k`` snippets per pair, filling gaps only when a stub backend is configured."""
    out = {}
    for pair in pairs:
        found = cache.snippets_for(pair.id, k) if cache is not None else None
        if found is None:
            if generation is None or generation.backend != "stub":
                raise GacrError(f"missing generated snippets for pair {pair.id}")
            if cache is None:
                cache = SnippetCache()
            gen_cfg = generation if generation.k >= k else replace(generation, k=k)
            found = generate(pair, gen_cfg, cache)[:k]
        out[pair.id] = found
    return out


# --- one optimisation step --------------------------------------------------

def loss_and_grads(params: EncoderParams, queries: Sequence[FusedInput],
                   targets: Sequence[FusedInput], loss_form: str = "log"
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Forward both towers, score in-batch, and backpropagate to every parameter."""
    q_ids, q_masks = stack_inputs(queries)
    t_ids, t_masks = stack_inputs(targets)
    hq, q_trace = forward_batch(params, q_ids, q_masks, trim=True)
    ht, t_trace = forward_batch(params, t_ids, t_masks, trim=True)

    rows = np.arange(len(queries))
    p0 = np.array([q.query_rows()[0] for q in queries])
    p1 = np.array([q.query_rows()[1] for q in queries])
    qsum = hq[rows, p0] + hq[rows, p1]
    z = ht[:, 0]
    loss, g_scores = batch_loss(qsum @ z.T, loss_form)

    dq = g_scores @ z
    dz = g_scores.T @ qsum
    d_hq = np.zeros_like(hq)
    d_hq[rows, p0] += dq
    d_hq[rows, p1] += dq  # single-CLS queries read row 0 twice
    d_ht = np.zeros_like(ht)
    d_ht[:, 0] = dz

    grads = backward_batch(params, q_trace, d_hq)
    for name, g in backward_batch(params, t_trace, d_ht).items():
        grads[name] += g
    return loss, grads


def adam_step(params: EncoderParams, grads: dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig) -> None:
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params.names():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def train(corpus: CorpusSplit, cache: SnippetCache | None, vocab: Vocabulary, config: TrainConfig,
          encoder_config: EncoderConfig, generation: GenerationConfig | None = None,
          log_path: str | Path | None = None,
          on_epoch: Callable[[int, float, EncoderParams], None] | None = None) -> TrainResult:
    """Train from a seeded init; trailing partial batches are dropped each epoch."""
    pairs = list(corpus.pairs)
    if config.batch_size > len(pairs):
        raise ConfigError(f"batch_size {config.batch_size} exceeds corpus size {len(pairs)}")
    if encoder_config.vocab_size != vocab.size:
        raise ConfigError(f"encoder vocab_size {encoder_config.vocab_size} != vocabulary size {vocab.size}")
    L = encoder_config.max_seq_len
    k = config.k if config.mode == "gacr_m" else 1
    snippets = (snippets_for_pairs(pairs, cache, k, generation)
                if config.mode != "doc_only" else {})

    queries = [build_query_input(p, config.mode, vocab, snippets.get(p.id), L,
                                 config.snippet_cap, k, encoder_config.mask_type) for p in pairs]
    targets = [assemble_target(encode_tokens(vocab, p.code_tokens), L) for p in pairs]

    params = init_params(encoder_config)
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    n_batches = len(pairs) // config.batch_size
    losses: list[float] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(pairs))
            total = 0.0
            for bi in range(n_batches):
                idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
                loss, grads = loss_and_grads(params, [queries[i] for i in idx],
                                             [targets[i] for i in idx], config.loss_form)
                adam_step(params, grads, state, config)
                total += loss
            mean = total / n_batches
            losses.append(mean)
            logger.info("epoch %d loss %.6f", epoch, mean)
            if log_fh is not None:
                log_fh.write(format_loss_line(epoch, mean) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(epoch, mean, params)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(params, state, losses)


def format_loss_line(epoch: int, loss: float) -> str:
    return f"epoch {epoch} loss {loss:.12g}"
