"""Self-describing checkpoint container.

Layout::

    b"BCASTCKP"                   8-byte magic
    <u8 little-endian>            header length in bytes
    header                        UTF-8 JSON, keys sorted
    data                          raw little-endian float64 blocks

The header lists every tensor with its group, shape and byte offset
into the data section, so a file can be decoded with nothing but the
header. Writing is byte-deterministic: the same content always yields
the same file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lora import AdaptedModel, LoraConfig
from .model import ModelConfig, ModelWeights, params_digest
from .tokenizer import TokenizerSpec

MAGIC = b"BCASTCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Tensor groups plus JSON-able metadata.

    Transformer checkpoints use the ``base`` group (and ``adapters`` for
    PEFT); baseline models keep their arrays under ``params``.
    """

    payload_type: str
    meta: dict = field(default_factory=dict)
    groups: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    # -- transformer helpers --

    @classmethod
    def from_model(cls, weights: ModelWeights, spec: TokenizerSpec, train_run: dict | None = None,
                   adapted: AdaptedModel | None = None) -> Checkpoint:
        meta = {
            "model_config": weights.config.to_dict(),
            "tokenizer": spec.to_dict(),
            "base_hash": weights.digest(),
            "train_run": train_run or {},
        }
        groups = {"base": dict(weights.params)}
        if adapted is not None:
            meta["lora"] = adapted.lora.to_dict()
            groups["adapters"] = dict(adapted.adapters)
        return cls("transformer", meta, groups)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.meta["model_config"])

    @property
    def tokenizer(self) -> TokenizerSpec:
        return TokenizerSpec(**self.meta["tokenizer"])

    @property
    def lora(self) -> LoraConfig | None:
        d = self.meta.get("lora")
        return None if d is None else LoraConfig.from_dict(d)

    def base_weights(self) -> ModelWeights:
        self._expect("transformer")
        w = ModelWeights(self.model_config, {n: a.copy() for n, a in self.groups["base"].items()})
        if w.digest() != self.meta["base_hash"]:
            raise CheckpointError("base weights do not match the recorded hash")
        return w

    def adapted_model(self) -> AdaptedModel:
        if "adapters" not in self.groups:
            raise CheckpointError("checkpoint carries no adapters")
        return AdaptedModel(self.base_weights(), self.lora,
                            {n: a.copy() for n, a in self.groups["adapters"].items()})

    def inference_weights(self) -> ModelWeights:
        """Plain weights for forecasting, with any adapters folded in."""
        if "adapters" in self.groups:
            from .lora import merged_view

            return merged_view(self.adapted_model())
        return self.base_weights()

    def _expect(self, payload_type: str) -> None:
        if self.payload_type != payload_type:
            raise CheckpointError(f"expected a {payload_type} checkpoint, got {self.payload_type}")

    # -- serialisation --

    def to_bytes(self) -> bytes:
        tensors = []
        blobs = []
        offset = 0
        for group in sorted(self.groups):
            for name in sorted(self.groups[group]):
                arr = np.ascontiguousarray(self.groups[group][name], dtype="<f8")
                raw = arr.tobytes()
                tensors.append({"group": group, "name": name, "shape": list(arr.shape),
                                "offset": offset, "nbytes": len(raw)})
                blobs.append(raw)
                offset += len(raw)
        header = {
            "format_version": self.format_version,
            "payload_type": self.payload_type,
            "meta": self.meta,
            "tensors": tensors,
            "data_bytes": offset,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", buf[8:16])
        try:
            header = json.loads(buf[16:16 + n].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header: {exc}") from exc
        if header["format_version"] > FORMAT_VERSION:
            raise CheckpointError(f"format version {header['format_version']} is newer than supported")
        data = memoryview(buf)[16 + n:]
        if len(data) != header["data_bytes"]:
            raise CheckpointError("data section is truncated or padded")
        groups: dict[str, dict[str, np.ndarray]] = {}
        for t in header["tensors"]:
            raw = data[t["offset"]:t["offset"] + t["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
            groups.setdefault(t["group"], {})[t["name"]] = arr
        return cls(header["payload_type"], header["meta"], groups, header["format_version"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())


def adapters_digest(adapters: dict[str, np.ndarray]) -> str:
    return params_digest(adapters)
