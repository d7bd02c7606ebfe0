"""Code generation for query expansion: remote completion backend, offline stub, cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from gacr.corpus import DocCodePair, tokenize_raw
from gacr.errors import BackendError, ConfigError

logger = logging.getLogger(__name__)

API_KEY_ENV = "GACR_GEN_API_KEY"
ENDPOINT_ENV = "GACR_GEN_ENDPOINT"
RETRY_DELAYS = (1.0, 2.0, 4.0)

_IDENT_RE = re.compile(r"\w+")


@dataclass(frozen=True)
class GeneratedSnippet:
    source_id: str
    sample_index: int
    raw_text: str
    tokens: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(tokenize_raw(self.raw_text)))


@dataclass(frozen=True)
class GenerationConfig:
    backend: str = "stub"
    k: int = 3
    max_generated_tokens: int = 128
    temperature: float = 0.8
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env: str = API_KEY_ENV
    seed: int = 0
    timeout: float = 60.0

    def __post_init__(self):
        if self.backend not in ("remote", "stub"):
            raise ConfigError(f"unknown generation backend {self.backend!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_generated_tokens < 1:
            raise ConfigError("max_generated_tokens must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


class SnippetCache:
    """Append-only on-disk store of generated snippets keyed by (source_id, sample_index).

    Appends are serialized through a lock so the cache can be shared by
    concurrent generation workers.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: dict[tuple[str, int], GeneratedSnippet] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    snip = GeneratedSnippet(
                        str(rec["source_id"]), int(rec["sample_index"]), str(rec["raw_text"])
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    logger.warning("%s:%d bad cache record skipped: %s", self.path, lineno, exc)
                    continue
                # first write wins; later duplicates can only come from concurrent writers
                self.entries.setdefault((snip.source_id, snip.sample_index), snip)

    def get(self, source_id: str, sample_index: int) -> GeneratedSnippet | None:
        return self.entries.get((source_id, sample_index))

    def snippets_for(self, source_id: str, k: int) -> list[GeneratedSnippet] | None:
        out = [self.entries.get((source_id, i)) for i in range(k)]
        if any(s is None for s in out):
            return None
        return out

    def add(self, snippet: GeneratedSnippet) -> None:
        key = (snippet.source_id, snippet.sample_index)
        with self._lock:
            if key in self.entries:
                return
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                rec = {
                    "source_id": snippet.source_id,
                    "sample_index": snippet.sample_index,
                    "raw_text": snippet.raw_text,
                }
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")
            self.entries[key] = snippet

    def __len__(self) -> int:
        return len(self.entries)


# --- offline stub -----------------------------------------------------------

def _stub_rng(doc_tokens: Sequence[str], sample_index: int, seed: int) -> random.Random:
    # sha256 rather than hash(): str hashing is salted per process
    payload = json.dumps([list(doc_tokens), sample_index, seed]).encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(payload).digest()[:8], "little"))


def _identifiers(doc_tokens: Sequence[str]) -> list[str]:
    idents: list[str] = []
    for tok in doc_tokens:
        for frag in _IDENT_RE.findall(tok):
            if frag not in idents:
                idents.append(frag)
    return idents or ["arg"]


def stub_text(doc_tokens: Sequence[str], sample_index: int, seed: int) -> str:
    """Deterministic stand-in for a code generator.

    Emits a function named after the documentation words, suffixed with the
    sample index so the k samples of one prompt are pairwise distinct. The
    body uses every documentation word as an identifier and combines them
    pairwise into compound identifiers ``a_b`` (sorted order). One of four
    body templates is picked with a seeded RNG.
    """
    idents = _identifiers(doc_tokens)
    rng = _stub_rng(doc_tokens, sample_index, seed)
    name = "_".join(idents) + f"_{sample_index}"
    ordered = sorted(idents)
    pairs = [(a, b) for i, a in enumerate(ordered) for b in ordered[i + 1:]]
    compounds = [f"{a}_{b}" for a, b in pairs]
    args = ", ".join(idents)

    template = rng.randrange(4)
    lines = [f"def {name}({args}):"]
    if template == 0:
        lines += [f"    {a}_{b} = {a} + {b}" for a, b in pairs]
        lines.append(f"    return {compounds[0] if compounds else idents[0]}")
    elif template == 1:
        lines += [f"    {a}_{b} = {a} * {b}" for a, b in pairs]
        lines.append(f"    result = [{', '.join(compounds or idents)}]")
        lines.append("    return result")
    elif template == 2:
        lines.append("    result = {}")
        for tok in idents:
            lines.append(f"    result[{tok}] = {tok}")
        lines += [f"    {c} = result.get({a}, {b})" for c, (a, b) in zip(compounds, pairs)]
        lines.append("    return result")
    else:
        lines.append(f"    for item in {idents[0]}:")
        lines += [f"        {a}_{b} = {a} - {b}" for a, b in pairs]
        for tok in idents[1:]:
            lines.append(f"        item = item + {tok}")
        lines.append("    return item")
    return "\n".join(lines)


# --- remote backend ---------------------------------------------------------

def build_prompt(pair: DocCodePair) -> str:
    return f"# {pair.language}\n" + " ".join(pair.doc_tokens)


def _resolve_endpoint(config: GenerationConfig) -> str:
    url = os.environ.get(ENDPOINT_ENV) or config.endpoint_url
    if not url:
        raise ConfigError(f"remote backend needs endpoint_url or ${ENDPOINT_ENV}")
    return url


def _api_key(config: GenerationConfig) -> str:
    key = os.environ.get(config.api_key_env)
    if not key:
        raise ConfigError(f"api key not found in environment variable {config.api_key_env}")
    return key


def remote_complete(
    prompt: str,
    config: GenerationConfig,
    client: httpx.Client,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """POST one completion request, retrying with exponential backoff.

    Raises:
        BackendError: After the initial attempt and every retry failed.
    """
    url = _resolve_endpoint(config)
    headers = {"Authorization": f"Bearer {_api_key(config)}"}
    body = {
        "model": config.model_name,
        "prompt": prompt,
        "max_tokens": config.max_generated_tokens,
        "temperature": config.temperature,
        "n": 1,
    }
    status: int | None = None
    last_error = ""
    for attempt in range(len(RETRY_DELAYS) + 1):
        if attempt:
            sleep(RETRY_DELAYS[attempt - 1])
        try:
            resp = client.post(url, json=body, headers=headers, timeout=config.timeout)
        except httpx.HTTPError as exc:
            status, last_error = None, str(exc)
            logger.warning("generation request failed (attempt %d): %s", attempt + 1, exc)
            continue
        if resp.status_code == 200:
            try:
                return str(resp.json()["choices"][0]["text"])
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                status, last_error = resp.status_code, f"malformed response: {exc}"
                continue
        status, last_error = resp.status_code, resp.text[:200]
        logger.warning("generation endpoint returned %d (attempt %d)", status, attempt + 1)
    raise BackendError(f"generation failed after retries: {last_error}", status=status)


def generate(
    prompt: DocCodePair,
    config: GenerationConfig,
    cache: SnippetCache,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[GeneratedSnippet]:
    """Return ``config.k`` snippets for one documentation prompt, filling cache gaps."""
    cached = cache.snippets_for(prompt.id, config.k)
    if cached is not None:
        return cached

    fresh: dict[int, GeneratedSnippet] = {}
    missing = [i for i in range(config.k) if cache.get(prompt.id, i) is None]
    if config.backend == "stub":
        for i in missing:
            fresh[i] = GeneratedSnippet(prompt.id, i, stub_text(prompt.doc_tokens, i, config.seed))
    else:
        own_client = client is None
        client = client or httpx.Client()
        try:
            text = build_prompt(prompt)
            for i in missing:
                fresh[i] = GeneratedSnippet(prompt.id, i, remote_complete(text, config, client, sleep))
        finally:
            if own_client:
                client.close()
    # all samples fetched before any append: a failed prompt leaves the cache untouched
    for i in missing:
        cache.add(fresh[i])
    return [cache.get(prompt.id, i) for i in range(config.k)]


def generate_all(
    pairs: Iterable[DocCodePair],
    config: GenerationConfig,
    cache: SnippetCache,
    jobs: int = 1,
    client: httpx.Client | None = None,
) -> dict[str, list[GeneratedSnippet]]:
    """Fill the cache for many prompts with up to ``jobs`` requests in flight."""
    pairs = list(pairs)
    if config.backend == "stub" or jobs <= 1:
        return {p.id: generate(p, config, cache, client) for p in pairs}
    own_client = client is None
    client = client or httpx.Client()
    try:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda p: generate(p, config, cache, client), pairs))
    finally:
        if own_client:
            client.close()
    return {p.id: r for p, r in zip(pairs, results)}


def split_name_body(snippet: GeneratedSnippet) -> tuple[list[str], list[str]]:
    """Split into the first non-empty line (function signature) and the rest."""
    lines = snippet.raw_text.split("\n")
    for i, line in enumerate(lines):
        name = tokenize_raw(line)
        if name:
            body = tokenize_raw("\n".join(lines[i + 1:]))
            return name, body
    return [], []


def truncate_snippet(tokens: Sequence, cap: int) -> list:
    if cap < 1:
        raise ConfigError("snippet cap must be >= 1")
    return list(tokens[:cap])
