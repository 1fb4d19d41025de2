"""Run configuration with a published JSON schema, plus the checkpoint container."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from .adapter import AdapterConfig
from .encoder import EncoderConfig
from .lm import LMConfig, Vocabulary
from .model import ModelConfig
from .moe import MoEConfig
from .tensor import read_tensor, write_tensor
from .train import TrainConfig

SECTIONS = {
    "encoder": EncoderConfig,
    "moe": MoEConfig,
    "adapter": AdapterConfig,
    "lm": LMConfig,
    "train": TrainConfig,
}


@dataclass
class DataConfig:
    dir: str = "data"
    split: str = "test"  # split scored after training and by eval


SECTIONS["data"] = DataConfig


def _schema_for(value) -> dict:
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, list):
        return {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                           "minItems": 2, "maxItems": 2}}
    raise TypeError(f"no schema mapping for {type(value).__name__}")


def build_schema() -> dict:
    props = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        props[name] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _schema_for(getattr(defaults, f.name)) for f in fields(cls)},
        }
    props["single_view"] = {"type": "boolean"}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "minidrive run configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": props,
    }


SCHEMA = build_schema()


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    source: dict = field(default_factory=dict)  # the document as given, for echoing

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        try:
            model = ModelConfig.from_dict(doc)
            train = TrainConfig(**doc.get("train", {}))
            data = DataConfig(**doc.get("data", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config invalid: {exc}") from None
        return cls(model, train, data, copy.deepcopy(doc))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(doc)

    def resolved(self) -> dict:
        """Every field with defaults filled in."""
        out = self.model.to_dict()
        out["train"] = asdict(self.train)
        out["data"] = asdict(self.data)
        return out


# ---------------------------------------------------------------- atomic files


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- checkpoints

WEIGHTS = "weights.mdtn"
MANIFEST = "checkpoint.json"
VOCAB = "vocab.txt"
CONTAINER_MAGIC = b"MDCK"


def git_blob_hash(payload: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def pack_state(state: dict[str, np.ndarray]) -> bytes:
    """``MDCK | u32 count | (u32 name_len, utf8 name, MDTN tensor)*`` in sorted name order."""
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, state[name])
    return buf.getvalue()


def unpack_state(payload: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(payload)
    if buf.read(4) != CONTAINER_MAGIC:
        raise ValueError("not a checkpoint container")
    (count,) = struct.unpack("<I", buf.read(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", buf.read(4))
        name = buf.read(n).decode("utf-8")
        state[name] = read_tensor(buf).data
    return state


def save_checkpoint(directory, state: dict[str, np.ndarray], config: dict, vocab: Vocabulary,
                    step: int) -> str:
    root = Path(directory)
    payload = pack_state(state)
    digest = git_blob_hash(payload)
    atomic_write_bytes(root / WEIGHTS, payload)
    vocab_text = "".join(t + "\n" for t in vocab.tokens)
    atomic_write_text(root / VOCAB, vocab_text)
    manifest = {"config": config, "step": step, "weights_hash": digest, "vocab": vocab.tokens,
                "vocab_hash": git_blob_hash(vocab_text.encode("utf-8")), "vocab_size": len(vocab)}
    atomic_write_text(root / MANIFEST, dump_json(manifest))
    return digest


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict, Vocabulary]:
    root = Path(directory)
    for name in (WEIGHTS, MANIFEST, VOCAB):
        if not (root / name).exists():
            raise FileNotFoundError(f"checkpoint incomplete: missing {root / name}")
    manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    payload = (root / WEIGHTS).read_bytes()
    if git_blob_hash(payload) != manifest["weights_hash"]:
        raise ValueError(f"checkpoint weights hash mismatch in {root}")
    vocab = Vocabulary.load(root / VOCAB)
    if vocab.tokens != manifest.get("vocab", vocab.tokens):
        raise ValueError(f"{root / VOCAB} disagrees with the vocabulary recorded in {MANIFEST}")
    return unpack_state(payload), manifest, vocab
