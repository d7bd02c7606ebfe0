"""Run configuration: one INI file with a section per module, plus flag overrides."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from gacr.encoder import EncoderConfig
from gacr.errors import ConfigError, GacrError
from gacr.generation import GenerationConfig
from gacr.retrieval import VARIANTS
from gacr.training import TrainConfig


@dataclass(frozen=True)
class CorpusConfig:
    max_vocab: int = 50000
    min_freq: int = 1

    def __post_init__(self):
        if self.max_vocab < 5 or self.min_freq < 1:
            raise ConfigError("max_vocab must be >= 5 and min_freq >= 1")


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = 10
    pool_size: int = 0
    variants: tuple[str, ...] = ("doc_only", "gacr_s")

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.pool_size < 0:
            raise ConfigError("pool_size must be >= 0")
        bad = set(self.variants) - set(VARIANTS)
        if bad or not self.variants:
            raise ConfigError(f"variants must be a non-empty subset of {VARIANTS}")


@dataclass(frozen=True)
class SynthConfig:
    n_pairs: int = 600
    n_test: int = 100

    def __post_init__(self):
        if not 0 < self.n_test < self.n_pairs:
            raise ConfigError("synth needs 0 < n_test < n_pairs")


@dataclass(frozen=True)
class PathsConfig:
    """Artifact locations; empty entries fall back to files under ``work_dir``."""
    work_dir: str = "gacr_run"
    train: str = ""
    test: str = ""
    cache: str = ""
    checkpoint: str = ""
    index: str = ""
    loss_log: str = ""
    reports: str = ""

    def resolve(self, name: str) -> Path:
        defaults = {"train": "train.jsonl", "test": "test.jsonl", "cache": "snippets.jsonl",
                    "checkpoint": "model.ckpt", "index": "index.npz", "loss_log": "loss.log",
                    "reports": "reports"}
        value = getattr(self, name)
        return Path(value) if value else Path(self.work_dir) / defaults[name]


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    jobs: int = 1

    def with_seed(self, seed: int) -> RunConfig:
        """Propagate one seed to every seeded component."""
        return replace(self, seed=seed,
                       encoder=replace(self.encoder, seed=seed),
                       training=replace(self.training, seed=seed),
                       generation=replace(self.generation, seed=seed))


_SECTIONS = {f.name: f for f in fields(RunConfig) if f.name not in ("seed", "jobs")}
_TOP_KEYS = ("seed", "jobs")


def _coerce(raw: str, default: Any, where: str) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int) or (default is None and raw.strip().lstrip("-").isdigit()):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _default_instance(f: dataclasses.Field):
    return f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse INI text. Unknown sections or keys raise :class:`ConfigError`.

    A ``[run]`` section holds ``seed`` and ``jobs``; a seed given there is
    applied to every seeded component unless a section sets its own.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    top: dict[str, Any] = {}
    sections: dict[str, Any] = {}
    for name in parser.sections():
        values = dict(parser[name])
        if name == "run":
            for key, raw in values.items():
                if key not in _TOP_KEYS:
                    raise ConfigError(f"{source}: unknown key [run] {key}")
                top[key] = _coerce(raw, 0, f"[run] {key}")
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        base = _default_instance(_SECTIONS[name])
        known = {f.name for f in fields(base)}
        updates = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key [{name}] {key}")
            updates[key] = _coerce(raw, getattr(base, key), f"[{name}] {key}")
        try:
            sections[name] = replace(base, **updates)
        except GacrError as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc

    cfg = RunConfig(**sections)
    if "jobs" in top:
        if top["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
        cfg = replace(cfg, jobs=top["jobs"])
    if "seed" in top:
        seed = top["seed"]
        cfg = replace(cfg, seed=seed)
        for name in ("encoder", "training", "generation"):
            if name not in sections or "seed" not in parser[name]:
                cfg = replace(cfg, **{name: replace(getattr(cfg, name), seed=seed)})
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def apply_overrides(cfg: RunConfig, *, seed: int | None = None, mode: str | None = None,
                    mask: str | None = None, cap: int | None = None, k: int | None = None,
                    jobs: int | None = None, top_k: int | None = None) -> RunConfig:
    """Apply command-line flags on top of a loaded config; values are revalidated."""
    if seed is not None:
        cfg = cfg.with_seed(seed)
    train_updates = {key: val for key, val in (("mode", mode), ("snippet_cap", cap), ("k", k))
                     if val is not None}
    if train_updates:
        cfg = replace(cfg, training=replace(cfg.training, **train_updates))
    if k is not None:
        cfg = replace(cfg, generation=replace(cfg.generation, k=max(k, cfg.generation.k)))
    if mask is not None:
        cfg = replace(cfg, encoder=replace(cfg.encoder, mask_type=mask))
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = replace(cfg, jobs=jobs)
    if top_k is not None:
        cfg = replace(cfg, retrieval=replace(cfg.retrieval, top_k=top_k))
    return cfg
