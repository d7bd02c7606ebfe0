"""Seeded synthetic doc/code corpus where generation recovers lost identifiers.

Each code snippet is built from a set of keywords but only ever spells
them as compound identifiers ``a_b`` (every sorted keyword pair), so bare
documentation words never occur verbatim in code. The documentation keeps
a lossy 30% sample of the keywords. The stub generator rebuilds the
compounds from the documentation words, giving the expanded query exact
token overlap with the ground truth that the bare documentation lacks.
"""

from __future__ import annotations

import numpy as np

from gacr.corpus import DocCodePair

KEYWORDS = (
    "account", "buffer", "cache", "channel", "config", "count", "cursor", "data",
    "date", "dict", "entry", "event", "field", "file", "filter", "frame",
    "graph", "hash", "header", "image", "index", "item", "key", "label",
    "layer", "list", "lock", "map", "matrix", "node", "number", "offset",
    "order", "packet", "path", "point", "query", "queue", "record", "row",
    "score", "session", "shape", "stack", "state", "string", "table", "token",
)
VERBS = ("get", "build", "update", "load", "merge", "parse", "compute", "find")

KEYWORDS_PER_PAIR = 9
DOC_FRACTION = 0.3


def make_pair(index: int, rng: np.random.Generator, language: str = "python") -> DocCodePair:
    chosen = [KEYWORDS[i] for i in rng.choice(len(KEYWORDS), KEYWORDS_PER_PAIR, replace=False)]
    n_doc = max(1, round(DOC_FRACTION * len(chosen)))
    doc = [chosen[i] for i in rng.choice(len(chosen), n_doc, replace=False)]

    verb = VERBS[int(rng.integers(len(VERBS)))]
    ordered = sorted(chosen)
    code = ["def", f"{verb}_{chosen[0]}", "(", "self", ")", ":", "return", "["]
    for i, a in enumerate(ordered):
        for b in ordered[i + 1:]:
            code += [f"{a}_{b}", ","]
    code[-1] = "]"
    return DocCodePair(f"synth://{language}/{index}", language, tuple(doc), tuple(code))


def make_synthetic_corpus(n_pairs: int = 600, n_test: int = 100, seed: int = 0
                          ) -> tuple[list[DocCodePair], list[DocCodePair]]:
    """Return ``(train_pairs, test_pairs)``; the last ``n_test`` pairs are held out."""
    if not 0 < n_test < n_pairs:
        raise ValueError("need 0 < n_test < n_pairs")
    rng = np.random.default_rng(seed)
    pairs = [make_pair(i, rng) for i in range(n_pairs)]
    return pairs[: n_pairs - n_test], pairs[n_pairs - n_test:]
