"""Masked multi-head self-attention encoder with exact reverse-mode gradients.

Sequences fuse a documentation segment with one or more generated-code
segments; the attention mask controls how information flows between them.
Everything runs in float64 numpy.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from gacr.corpus import CLS, PAD, SEP
from gacr.errors import ConfigError, ContractError, NumericFault

MASK_TYPES = ("A", "B", "C", "D")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Segment(IntEnum):
    DOC = 0
    GEN = 1
    TGT = 2
    PAD = 3


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int | None = None
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    max_seq_len: int = 256
    mask_type: str = "A"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size is not None and self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        for name in ("num_layers", "num_heads", "model_dim", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        if self.max_seq_len < 4:
            raise ConfigError("max_seq_len must be >= 4")
        if self.mask_type not in MASK_TYPES:
            raise ConfigError(f"mask_type must be one of {MASK_TYPES}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass(frozen=True)
class FusedInput:
    ids: np.ndarray
    segments: np.ndarray
    cls_positions: tuple[int, ...]
    true_len: int
    mask_type: str = "A"

    def __post_init__(self):
        for name in ("ids", "segments"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "cls_positions", tuple(int(c) for c in self.cls_positions))

    @property
    def length(self) -> int:
        return len(self.ids)

    def query_rows(self) -> tuple[int, int]:
        """Rows read for the dual query vector; single-segment inputs reuse the first CLS."""
        if len(self.cls_positions) >= 2:
            return self.cls_positions[0], self.cls_positions[1]
        return self.cls_positions[0], self.cls_positions[0]


@dataclass(frozen=True)
class DualQueryVector:
    v_doc: np.ndarray
    v_gen: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.v_doc, self.v_gen])

    @property
    def summed(self) -> np.ndarray:
        return self.v_doc + self.v_gen


@dataclass(frozen=True)
class TargetVector:
    v: np.ndarray

    def replicated(self) -> np.ndarray:
        return np.concatenate([self.v, self.v])


# --- sequence assembly ------------------------------------------------------

def _pad(ids: list[int], segs: list[int], L: int) -> tuple[list[int], list[int]]:
    n = L - len(ids)
    return ids + [PAD] * n, segs + [Segment.PAD] * n


def _fit_single(m: int, p: int, L: int) -> tuple[int, int]:
    if L < 4:
        raise ConfigError("sequence length L must be >= 4")
    over = m + p + 4 - L
    if over > 0:
        cut = min(p, over)
        p -= cut
        over -= cut
        m -= over if over > 0 else 0
    return m, p


def assemble_single(doc_ids: Sequence[int], gen_ids: Sequence[int], L: int,
                    mask_type: str = "A") -> FusedInput:
    """``[CLS] doc [SEP] [CLS] gen [SEP]`` padded to ``L``.

    Overflow is cut from the generated tail first, then the doc tail.
    """
    m, p = _fit_single(len(doc_ids), len(gen_ids), L)
    doc, gen = list(doc_ids[:m]), list(gen_ids[:p])
    ids = [CLS, *doc, SEP, CLS, *gen, SEP]
    segs = [Segment.DOC] * (m + 2) + [Segment.GEN] * (p + 2)
    ids, segs = _pad(ids, segs, L)
    return FusedInput(ids, segs, (0, m + 2), m + p + 4, mask_type)


def assemble_multi(doc_ids: Sequence[int], snippets: Sequence[Sequence[int]], cap: int, L: int,
                   mask_type: str = "A") -> FusedInput:
    """``[CLS] doc [SEP]`` followed by one ``[CLS] G_i [SEP]`` block per snippet.

    Each snippet is cut to ``cap`` tokens. The first block is always kept
    (shortened like :func:`assemble_single` if needed) so the layout has two
    CLS tokens; later blocks that do not fit whole are dropped.
    """
    if not snippets:
        raise ContractError("assemble_multi needs at least one snippet")
    if cap < 1:
        raise ConfigError("snippet cap must be >= 1")
    blocks = [list(s[:cap]) for s in snippets]
    m, p = _fit_single(len(doc_ids), len(blocks[0]), L)
    ids = [CLS, *doc_ids[:m], SEP, CLS, *blocks[0][:p], SEP]
    segs = [Segment.DOC] * (m + 2) + [Segment.GEN] * (p + 2)
    cls_positions = [0, m + 2]
    for block in blocks[1:]:
        if len(ids) + len(block) + 2 > L:
            break
        cls_positions.append(len(ids))
        ids += [CLS, *block, SEP]
        segs += [Segment.GEN] * (len(block) + 2)
    true_len = len(ids)
    ids, segs = _pad(ids, segs, L)
    return FusedInput(ids, segs, tuple(cls_positions), true_len, mask_type)


def assemble_segment(ids: Sequence[int], L: int, segment: Segment = Segment.DOC,
                     mask_type: str = "A") -> FusedInput:
    """Single-segment ``[CLS] ids [SEP]`` with the tail cut to ``L - 2``."""
    if L < 4:
        raise ConfigError("sequence length L must be >= 4")
    body = list(ids[: L - 2])
    seq = [CLS, *body, SEP]
    padded, segs = _pad(seq, [segment] * len(seq), L)
    return FusedInput(padded, segs, (0,), len(seq), mask_type)


def assemble_target(code_ids: Sequence[int], L: int) -> FusedInput:
    return assemble_segment(code_ids, L, Segment.TGT)


# --- attention masks --------------------------------------------------------

def build_mask(inp: FusedInput) -> np.ndarray:
    """Boolean ``(L, L)`` matrix; entry ``(i, j)`` is true iff row i may attend to column j."""
    seg = inp.segments
    real = seg != Segment.PAD
    gen = seg == Segment.GEN
    doc = real & ~gen
    t = inp.mask_type
    if t == "A":
        rows_doc, rows_gen = real, real
    elif t == "B":
        rows_doc, rows_gen = doc, real
    elif t == "C":
        rows_doc, rows_gen = real, gen
    elif t == "D":
        rows_doc, rows_gen = doc, gen
    else:
        raise ConfigError(f"unknown mask type {t!r}")
    return (doc[:, None] & rows_doc[None, :]) | (gen[:, None] & rows_gen[None, :])


def with_mask_type(inp: FusedInput, mask_type: str) -> FusedInput:
    return FusedInput(inp.ids, inp.segments, inp.cls_positions, inp.true_len, mask_type)


# --- parameters -------------------------------------------------------------

_LAYER_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


def param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (and checkpoint) order."""
    if config.vocab_size is None:
        raise ConfigError("vocab_size is not set")
    d, f = config.model_dim, config.ffn_dim
    shapes = [("tok_emb", (config.vocab_size, d)), ("pos_emb", (config.max_seq_len, d))]
    per_layer = {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "ln1_g": (d,), "ln1_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,), "ln2_g": (d,), "ln2_b": (d,),
    }
    for layer in range(config.num_layers):
        shapes += [(f"layers.{layer}.{n}", per_layer[n]) for n in _LAYER_PARAMS]
    return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return [n for n, _ in param_shapes(self.config)]

    def copy(self) -> EncoderParams:
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def layer(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{i}."
        return {n: self.arrays[prefix + n] for n in _LAYER_PARAMS}


def init_params(config: EncoderConfig) -> EncoderParams:
    """Seeded Xavier-uniform weights, zero biases, unit layer-norm scales."""
    rng = np.random.default_rng(config.seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        short = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        elif short.endswith("_g"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return EncoderParams(config, arrays)


# --- forward / backward -----------------------------------------------------

@dataclass
class ForwardTrace:
    """Activations kept for the backward pass.

    ``head`` covers positions ``[0, split)`` where attention runs; ``tail``
    covers the all-PAD positions beyond, which attend to nothing.
    """
    ids: np.ndarray
    split: int
    head: list[dict[str, np.ndarray]]
    tail: list[dict[str, np.ndarray]]
    output_shape: tuple[int, ...]
    batched: bool = True


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _layer_norm_grad(dy, xhat, inv, g):
    n = xhat.shape[-1]
    dxhat = dy * g
    dx = (inv / n) * (n * dxhat - dxhat.sum(-1, keepdims=True)
                      - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    return dx, dg, db


def _split_heads(x, h):
    B, L, d = x.shape
    return x.reshape(B, L, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def _masked_softmax(scores, mask):
    s = np.where(mask, scores, -np.inf)
    mx = s.max(-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(s - mx)
    denom = e.sum(-1, keepdims=True)
    # fully masked (PAD) rows attend to nothing and yield zero context
    return e / np.where(denom > 0, denom, 1.0)


def stack_inputs(inputs: Sequence[FusedInput]) -> tuple[np.ndarray, np.ndarray]:
    if not inputs:
        raise ContractError("empty input batch")
    L = inputs[0].length
    if any(inp.length != L for inp in inputs):
        raise ContractError("all inputs in a batch must share one length")
    ids = np.stack([inp.ids for inp in inputs])
    masks = np.stack([build_mask(inp) for inp in inputs])
    return ids, masks


def _forward_layers(params: EncoderParams, ids, masks, offset: int):
    """Run all layers over a block of positions; ``masks=None`` means no row attends anywhere."""
    cfg = params.config
    h = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)
    n = ids.shape[1]
    x = params["tok_emb"][ids] + params["pos_emb"][None, offset:offset + n]
    traces = []
    for li in range(cfg.num_layers):
        p = params.layer(li)
        t = {"x": x}
        if masks is not None:
            q = _split_heads(x @ p["wq"] + p["bq"], h)
            k = _split_heads(x @ p["wk"] + p["bk"], h)
            v = _split_heads(x @ p["wv"] + p["bv"], h)
            attn = _masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, masks[:, None])
            ctx = _merge_heads(attn @ v)
            t.update(q=q, k=k, v=v, attn=attn, ctx=ctx)
            r1 = x + (ctx @ p["wo"] + p["bo"])
        else:
            r1 = x + p["bo"]
        x1, t["xhat1"], t["inv1"] = _layer_norm(r1, p["ln1_g"], p["ln1_b"])
        pre = x1 @ p["w1"] + p["b1"]
        act, t["tanh_pre"] = _gelu(pre)
        r2 = x1 + (act @ p["w2"] + p["b2"])
        x, t["xhat2"], t["inv2"] = _layer_norm(r2, p["ln2_g"], p["ln2_b"])
        t.update(x1=x1, pre=pre, act=act)
        if not np.isfinite(x).all():
            raise NumericFault(f"non-finite activation in layer {li}")
        traces.append(t)
    return x, traces


def forward_batch(params: EncoderParams, ids: np.ndarray, masks: np.ndarray, trim: bool = False):
    """Encode ``(B, L)`` token ids under ``(B, L, L)`` masks.

    Returns ``(hidden, trace)`` with ``hidden`` of shape ``(B, L, d)``. With
    ``trim`` the attention block stops at the last non-PAD position in the
    batch. PAD columns are masked for every row, so this is the same
    function, only cheaper; results agree to rounding (softmax sums run over
    fewer terms), not bitwise.
    """
    cfg = params.config
    B, L = ids.shape
    if L > cfg.max_seq_len:
        raise ContractError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractError("token id outside vocabulary")
    split = L
    if trim:
        live = masks.any(axis=(0, 1))
        split = int(np.flatnonzero(live)[-1]) + 1 if live.any() else 0
    head, head_tr = _forward_layers(params, ids[:, :split], masks[:, :split, :split], 0)
    tail_tr: list = []
    if split < L:
        tail, tail_tr = _forward_layers(params, ids[:, split:], None, split)
        head = np.concatenate([head, tail], axis=1)
    return head, ForwardTrace(ids, split, head_tr, tail_tr, head.shape)


def _backward_layers(params: EncoderParams, traces, dx, grads) -> np.ndarray:
    cfg = params.config
    h = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)

    def wgrad(inp, dout):
        return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])

    for li in reversed(range(cfg.num_layers)):
        p = params.layer(li)
        t = traces[li]
        g = {}
        dr2, g["ln2_g"], g["ln2_b"] = _layer_norm_grad(dx, t["xhat2"], t["inv2"], p["ln2_g"])
        g["w2"] = wgrad(t["act"], dr2)
        g["b2"] = dr2.sum(axis=(0, 1))
        dpre = (dr2 @ p["w2"].T) * _gelu_grad(t["pre"], t["tanh_pre"])
        g["w1"] = wgrad(t["x1"], dpre)
        g["b1"] = dpre.sum(axis=(0, 1))
        dx1 = dr2 + dpre @ p["w1"].T

        dr1, g["ln1_g"], g["ln1_b"] = _layer_norm_grad(dx1, t["xhat1"], t["inv1"], p["ln1_g"])
        g["bo"] = dr1.sum(axis=(0, 1))
        dx = dr1
        if "attn" in t:
            g["wo"] = wgrad(t["ctx"], dr1)
            dctx = _split_heads(dr1 @ p["wo"].T, h)
            attn = t["attn"]
            dattn = dctx @ t["v"].transpose(0, 1, 3, 2)
            dv = attn.transpose(0, 1, 3, 2) @ dctx
            ds = attn * (dattn - (dattn * attn).sum(-1, keepdims=True))
            ds *= scale
            dq = ds @ t["k"]
            dk = ds.transpose(0, 1, 3, 2) @ t["q"]
            x = t["x"]
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                dm = _merge_heads(dproj)
                g[f"w{name}"] = wgrad(x, dm)
                g[f"b{name}"] = dm.sum(axis=(0, 1))
                dx = dx + dm @ p[f"w{name}"].T
        for name, val in g.items():
            grads[f"layers.{li}.{name}"] += val
    return dx


def backward_batch(params: EncoderParams, trace: ForwardTrace, grad_hidden: np.ndarray
                   ) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dLoss/dhidden."""
    if grad_hidden.shape != trace.output_shape:
        raise ContractError(
            f"grad_hidden shape {grad_hidden.shape} != hidden shape {trace.output_shape}")
    grads = {name: np.zeros(shape) for name, shape in param_shapes(params.config)}
    d = grad_hidden.shape[-1]
    blocks = [(0, trace.split, trace.head)]
    if trace.tail:
        blocks.append((trace.split, grad_hidden.shape[1], trace.tail))
    for start, stop, traces in blocks:
        dx0 = _backward_layers(params, traces, grad_hidden[:, start:stop], grads)
        np.add.at(grads["tok_emb"], trace.ids[:, start:stop].reshape(-1), dx0.reshape(-1, d))
        grads["pos_emb"][start:stop] += dx0.sum(axis=0)
    return grads


def forward(params: EncoderParams, inp: FusedInput) -> tuple[np.ndarray, ForwardTrace]:
    """Encode one fused input; returns the ``(L, d)`` hidden matrix and its trace."""
    ids, masks = stack_inputs([inp])
    hidden, trace = forward_batch(params, ids, masks)
    trace.batched = False
    return hidden[0], trace


def backward(params: EncoderParams, trace: ForwardTrace, grad_hidden: np.ndarray
             ) -> dict[str, np.ndarray]:
    if not trace.batched:
        if grad_hidden.shape != trace.output_shape[1:]:
            raise ContractError(
                f"grad_hidden shape {grad_hidden.shape} != hidden shape {trace.output_shape[1:]}")
        grad_hidden = grad_hidden[None]
    return backward_batch(params, trace, grad_hidden)


def extract_query(hidden: np.ndarray, cls_positions: Sequence[int]) -> DualQueryVector:
    if len(cls_positions) < 2:
        raise ContractError("dual query extraction needs at least two CLS positions")
    return DualQueryVector(hidden[cls_positions[0]].copy(), hidden[cls_positions[1]].copy())


def extract_target(hidden: np.ndarray) -> TargetVector:
    return TargetVector(hidden[0].copy())
