"""Binary checkpoint format.

Layout::

    GACR1\\n
    <one-line JSON header: encoder config, train config, vocabulary, array table>\\n
    PARAMS\\n
    <parameter arrays, declaration order, row-major little-endian float64>
    [OPTIM\\n
     <one-line JSON: {"step": n}>\\n
     <first-moment arrays><second-moment arrays>]
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from gacr.corpus import Vocabulary
from gacr.encoder import EncoderConfig, EncoderParams, param_shapes
from gacr.errors import CheckpointError, GacrError
from gacr.training import OptimizerState, TrainConfig

MAGIC = b"GACR1\n"
PARAMS_TAG = b"PARAMS\n"
OPTIM_TAG = b"OPTIM\n"
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    params: EncoderParams
    optimizer: OptimizerState | None = None
    train_config: TrainConfig | None = None
    vocab: Vocabulary | None = None

    @property
    def config(self) -> EncoderConfig:
        return self.params.config


def _arrays_bytes(arrays: dict[str, np.ndarray], names: list[str]) -> bytes:
    return b"".join(np.ascontiguousarray(arrays[n], dtype=_DTYPE).tobytes() for n in names)


def save_checkpoint(path: str | Path, params: EncoderParams, optimizer: OptimizerState | None = None,
                    train_config: TrainConfig | None = None, vocab: Vocabulary | None = None) -> None:
    cfg = params.config
    shapes = param_shapes(cfg)
    for name, shape in shapes:
        if params[name].shape != shape:
            raise CheckpointError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    header = {
        "encoder": asdict(cfg),
        "vocab_size": cfg.vocab_size,
        "mask_type": cfg.mask_type,
        "seed": cfg.seed,
        "train": asdict(train_config) if train_config is not None else None,
        "vocab": vocab.to_list() if vocab is not None else None,
        "arrays": [[n, list(s)] for n, s in shapes],
        "optimizer": optimizer is not None,
    }
    names = [n for n, _ in shapes]
    parts = [MAGIC, json.dumps(header).encode("utf-8"), b"\n", PARAMS_TAG,
             _arrays_bytes(params.arrays, names)]
    if optimizer is not None:
        parts += [OPTIM_TAG, json.dumps({"step": optimizer.step}).encode("utf-8"), b"\n",
                  _arrays_bytes(optimizer.m, names), _arrays_bytes(optimizer.v, names)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def line(self, what: str) -> bytes:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointError(f"truncated file while reading {what}")
        out = self.data[self.pos:end + 1]
        self.pos = end + 1
        return out

    def arrays(self, shapes, what: str) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in shapes:
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * _DTYPE.itemsize
            if self.pos + nbytes > len(self.data):
                raise CheckpointError(f"truncated file while reading {what} {name}")
            arr = np.frombuffer(self.data, dtype=_DTYPE, count=count, offset=self.pos)
            out[name] = arr.reshape(shape).astype(np.float64)
            self.pos += nbytes
        return out


def load_checkpoint(path: str | Path, expected: EncoderConfig | None = None) -> Checkpoint:
    """Read a checkpoint, optionally checking it against an expected encoder config.

    Raises:
        CheckpointError: Bad magic, truncation, malformed header or shape mismatch.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError("bad magic: not a GACR1 checkpoint")
    rd = _Reader(data)
    rd.pos = len(MAGIC)
    try:
        header = json.loads(rd.line("header"))
        enc_fields = {f.name for f in fields(EncoderConfig)}
        cfg = EncoderConfig(**{k: v for k, v in header["encoder"].items() if k in enc_fields})
        stored = [(n, tuple(s)) for n, s in header["arrays"]]
        tcfg = TrainConfig(**header["train"]) if header.get("train") else None
        vocab = Vocabulary.from_list(header["vocab"]) if header.get("vocab") else None
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, GacrError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc

    declared = param_shapes(cfg)
    if [n for n, _ in stored] != [n for n, _ in declared]:
        raise CheckpointError("array table does not match the encoder config")
    for (name, got), (_, want) in zip(stored, declared):
        if got != want:
            raise CheckpointError(f"shape mismatch for {name}: header {got} vs config {want}")
    if expected is not None:
        for (name, got), (_, want) in zip(stored, param_shapes(expected)):
            if got != want:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {got} vs expected {want}")
        if len(param_shapes(expected)) != len(stored):
            raise CheckpointError("shape mismatch: layer count differs from expected config")

    if rd.line("params tag") != PARAMS_TAG:
        raise CheckpointError("missing PARAMS section tag")
    params = EncoderParams(cfg, rd.arrays(declared, "parameter"))
    optimizer = None
    if header.get("optimizer"):
        if rd.line("optimizer tag") != OPTIM_TAG:
            raise CheckpointError("missing OPTIM section tag")
        try:
            step = int(json.loads(rd.line("optimizer header"))["step"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed optimizer header: {exc}") from exc
        m = rd.arrays(declared, "first moment")
        v = rd.arrays(declared, "second moment")
        optimizer = OptimizerState(m, v, step)
    if rd.pos != len(data):
        raise CheckpointError(f"{len(data) - rd.pos} unexpected trailing bytes")
    for name, arr in params.arrays.items():
        if not np.isfinite(arr).all():
            raise CheckpointError(f"non-finite values in {name}")
    return Checkpoint(params, optimizer, tcfg, vocab)


def file_fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
