"""CodeSearchNet-style corpus loading, vocabulary and tokenization."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from gacr.errors import CorpusError

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

_PUNCT = r"()\[\]{}:,.=+\-*/<>"
_TOKEN_RE = re.compile(rf"[{_PUNCT}]|[^\s{_PUNCT}]+")

SPLIT_NAMES = ("train", "valid", "test")


@dataclass(frozen=True)
class DocCodePair:
    id: str
    language: str
    doc_tokens: tuple[str, ...]
    code_tokens: tuple[str, ...]


@dataclass(frozen=True)
class CorpusSplit:
    name: str
    pairs: tuple[DocCodePair, ...]
    candidate_pool_size: int = 0
    skipped: int = 0

    def __post_init__(self):
        if self.candidate_pool_size == 0:
            object.__setattr__(self, "candidate_pool_size", len(self.pairs))
        if not 1 <= self.candidate_pool_size <= max(len(self.pairs), 1):
            raise CorpusError(
                f"candidate_pool_size {self.candidate_pool_size} outside [1, {len(self.pairs)}]"
            )

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...] = field(init=False, repr=False)

    def __post_init__(self):
        inverse = [""] * len(self.token_to_id)
        for tok, idx in self.token_to_id.items():
            inverse[idx] = tok
        object.__setattr__(self, "id_to_token", tuple(inverse))

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def __len__(self) -> int:
        return self.size

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.id_to_token)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> Vocabulary:
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise CorpusError("vocabulary does not start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        return cls({tok: i for i, tok in enumerate(tokens)})


def tokenize_raw(text: str) -> list[str]:
    """Split raw code on whitespace, isolating ``()[]{}:,.=+-*/<>``.

    Case is preserved since identifiers are case-significant.
    """
    return _TOKEN_RE.findall(text)


def _parse_record(line: str) -> DocCodePair:
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    url = rec["url"]
    doc = rec["docstring_tokens"]
    code = rec["code_tokens"]
    if not isinstance(url, str) or not url:
        raise ValueError("url must be a non-empty string")
    for name, toks in (("docstring_tokens", doc), ("code_tokens", code)):
        if not isinstance(toks, list) or not all(isinstance(t, str) for t in toks):
            raise ValueError(f"{name} must be a list of strings")
        if not toks:
            raise ValueError(f"{name} is empty")
    language = rec.get("language", "unknown")
    if not isinstance(language, str):
        language = "unknown"
    return DocCodePair(url, language, tuple(doc), tuple(code))


def load_corpus(path: str | Path, split_name: str, candidate_pool_size: int = 0) -> CorpusSplit:
    """Read one line-delimited JSON split.

    Malformed or invariant-violating lines are skipped with a warning and
    counted in ``CorpusSplit.skipped``.

    Raises:
        CorpusError: If the file is missing or yields no usable pairs.
    """
    path = Path(path)
    if split_name not in SPLIT_NAMES:
        raise CorpusError(f"unknown split name {split_name!r}")
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")

    pairs: list[DocCodePair] = []
    seen: set[str] = set()
    skipped = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pair = _parse_record(line)
                if pair.id in seen:
                    raise ValueError(f"duplicate id {pair.id!r}")
            except (ValueError, KeyError, TypeError) as exc:
                skipped += 1
                logger.warning("%s:%d skipped: %s", path, lineno, exc)
                continue
            seen.add(pair.id)
            pairs.append(pair)

    if skipped:
        logger.warning("%s: %d malformed line(s) skipped", path, skipped)
    if not pairs:
        raise CorpusError(f"no usable records in {path}")
    return CorpusSplit(split_name, tuple(pairs), candidate_pool_size, skipped)


def build_vocab(
    splits: Iterable[CorpusSplit],
    extra_texts: Iterable[Sequence[str]] = (),
    max_size: int = 50_000,
    min_freq: int = 1,
) -> Vocabulary:
    """Word-level vocabulary over doc and code tokens plus any extra token lists.

    Tokens are ranked by descending frequency, ties broken lexicographically,
    so the result does not depend on input order.
    """
    if max_size < 5:
        raise CorpusError("max_size must leave room for the 4 special tokens and 1 token")
    counts: Counter[str] = Counter()
    for split in splits:
        for pair in split.pairs:
            counts.update(pair.doc_tokens)
            counts.update(pair.code_tokens)
    for toks in extra_texts:
        counts.update(toks)
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)

    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    tokens = list(SPECIAL_TOKENS) + ranked[: max_size - len(SPECIAL_TOKENS)]
    return Vocabulary({tok: i for i, tok in enumerate(tokens)})


def encode_tokens(vocab: Vocabulary, tokens: Iterable[str]) -> list[int]:
    lookup = vocab.token_to_id
    return [lookup.get(tok, UNK) for tok in tokens]


def write_corpus(path: str | Path, pairs: Iterable[DocCodePair]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {
                "url": p.id,
                "language": p.language,
                "docstring_tokens": list(p.doc_tokens),
                "code_tokens": list(p.code_tokens),
            }
            fh.write(json.dumps(rec) + "\n")
