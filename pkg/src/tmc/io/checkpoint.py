"""Checkpoint files for base and tangent models.

Layout::

    TMC-CHECKPOINT\\n
    <one line of JSON header>\\n
    <payload: little-endian float64 values, header["count"] of them>

The header records the format version, model kind, network spec, payload
blocks, metadata and a SHA-256 checksum over the header (without the checksum
field) followed by the payload.  Nothing time-dependent is written, so equal
models produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..network import BaseModel, NetworkSpec
from ..params import ParamVector
from ..tangent import ComponentRecord, TangentModel

MAGIC = b"TMC-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


class WrongKind(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    spec: NetworkSpec
    blocks: List[Tuple[str, np.ndarray]]
    anchor_fingerprint: Optional[str] = None
    metadata: Dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def block(self, name: str) -> np.ndarray:
        for n, arr in self.blocks:
            if n == name:
                return arr
        raise CorruptCheckpoint(f"checkpoint has no block {name!r}")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _checksum(header: dict, payload: bytes) -> str:
    h = hashlib.sha256()
    h.update(_canonical({k: v for k, v in header.items() if k != "checksum"}))
    h.update(payload)
    return h.hexdigest()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    arrays = [np.ascontiguousarray(a, dtype="<f8").reshape(-1) for _, a in ckpt.blocks]
    payload = b"".join(a.tobytes() for a in arrays)
    header = {
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "spec": ckpt.spec.to_dict(),
        "anchor_fingerprint": ckpt.anchor_fingerprint,
        "blocks": [[name, int(a.size)] for (name, _), a in zip(ckpt.blocks, arrays)],
        "count": int(sum(a.size for a in arrays)),
        "metadata": ckpt.metadata,
    }
    header["checksum"] = _checksum(header, payload)
    return MAGIC + _canonical(header) + b"\n" + payload


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if not raw.startswith(MAGIC):
        raise CorruptCheckpoint("not a checkpoint file (bad magic)")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(raw[len(MAGIC):end])
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint(f"unreadable header: {e}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version!r} is not supported (expected {FORMAT_VERSION})")
    payload = raw[end + 1:]
    count = header.get("count")
    if not isinstance(count, int) or len(payload) != 8 * count:
        raise CorruptCheckpoint(f"payload holds {len(payload)} bytes, header promises {count} float64 values")
    if header.get("checksum") != _checksum(header, payload):
        raise CorruptCheckpoint("checksum mismatch: header or payload was modified")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    blocks, pos = [], 0
    for name, n in header["blocks"]:
        blocks.append((name, values[pos:pos + n].copy()))
        pos += n
    return Checkpoint(
        kind=header["kind"],
        spec=NetworkSpec.from_dict(header["spec"]),
        blocks=blocks,
        anchor_fingerprint=header.get("anchor_fingerprint"),
        metadata=header.get("metadata", {}),
        format_version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    data = encode_checkpoint(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def base_checkpoint(model: BaseModel, metadata: Optional[dict] = None) -> Checkpoint:
    return Checkpoint("base", model.spec, [("weights", model.weights.values)], None, dict(metadata or {}))


def tangent_checkpoint(tm: TangentModel, metadata: Optional[dict] = None) -> Checkpoint:
    meta = dict(metadata or {})
    meta["task_count"] = tm.task_count
    blocks = [("delta", tm.delta.values)]
    if tm.component_log is not None:
        meta["component_log"] = [{"task_id": r.task_id, "coefficient": r.coefficient} for r in tm.component_log]
        blocks += [(f"component:{i}", r.delta.values) for i, r in enumerate(tm.component_log)]
    else:
        meta["component_log"] = None
    return Checkpoint("tangent", tm.base.spec, blocks, tm.base.fingerprint, meta)


def to_base(ckpt: Checkpoint) -> BaseModel:
    if ckpt.kind != "base":
        raise WrongKind(f"expected a base checkpoint, got {ckpt.kind!r}")
    return BaseModel(ckpt.spec, ParamVector(ckpt.block("weights")))


def to_tangent(ckpt: Checkpoint, base: BaseModel) -> TangentModel:
    """Rebuild a tangent model, refusing if ``base`` is not the anchor it was trained at."""
    if ckpt.kind != "tangent":
        raise WrongKind(f"expected a tangent checkpoint, got {ckpt.kind!r}")
    if ckpt.anchor_fingerprint != base.fingerprint:
        raise FingerprintMismatch("tangent checkpoint was not built on the supplied base model")
    meta = ckpt.metadata
    log = None
    if meta.get("component_log") is not None:
        log = tuple(
            ComponentRecord(r["task_id"], float(r["coefficient"]), ParamVector(ckpt.block(f"component:{i}")))
            for i, r in enumerate(meta["component_log"])
        )
    return TangentModel(base, ParamVector(ckpt.block("delta")), int(meta.get("task_count", 0)), log)


def save_base(path, model: BaseModel, metadata: Optional[dict] = None) -> None:
    save_checkpoint(path, base_checkpoint(model, metadata))


def save_tangent(path, tm: TangentModel, metadata: Optional[dict] = None) -> None:
    save_checkpoint(path, tangent_checkpoint(tm, metadata))


def load_base(path) -> BaseModel:
    return to_base(load_checkpoint(path))


def load_tangent(path, base: BaseModel) -> TangentModel:
    return to_tangent(load_checkpoint(path), base)
