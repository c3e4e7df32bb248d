"""Versioned checkpoint container.

Layout::

    b"PTSGCKPT" | uint32 format version | uint64 manifest length | manifest (JSON) | arrays

The manifest lists every array (name, shape, dtype, byte offset, byte length) in
storage order, the numeric precision, a free-form metadata object, and the
freeze digest: SHA-256 over the concatenated array bytes in manifest order.
Arrays are raw little-endian.
"""
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import torch

from exceptions import CheckpointError
from integrity import buffers_digest

MAGIC = b"PTSGCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<IQ")

_PRECISIONS = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    arrays: "OrderedDict[str, torch.Tensor]"
    metadata: Dict[str, Any] = field(default_factory=dict)
    freeze_digest: str = ""
    precision: str = "float32"

    def namespace(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        """Arrays under ``prefix/`` with the prefix stripped."""
        head = prefix.rstrip("/") + "/"
        return OrderedDict((k[len(head):], v) for k, v in self.arrays.items() if k.startswith(head))

    def __contains__(self, name: str) -> bool:
        return name in self.arrays


def _to_numpy(tensor: torch.Tensor, precision: str) -> np.ndarray:
    array = tensor.detach().cpu().contiguous().numpy()
    if np.issubdtype(array.dtype, np.floating):
        return array.astype(_PRECISIONS[precision])
    if np.issubdtype(array.dtype, np.bool_):
        return array.astype("|u1")
    return array.astype("<i8")


def save_checkpoint(
    path: Path,
    arrays: Mapping[str, torch.Tensor],
    metadata: Optional[Dict[str, Any]] = None,
    precision: str = "float32",
) -> str:
    """Writes the container and returns its freeze digest."""
    if precision not in _PRECISIONS:
        raise CheckpointError(f"unsupported precision '{precision}'")
    path = Path(path)
    converted = [(name, _to_numpy(tensor, precision)) for name, tensor in arrays.items()]
    entries, offset = [], 0
    for name, array in converted:
        entries.append(
            {"name": name, "shape": list(array.shape), "dtype": array.dtype.str, "offset": offset, "nbytes": array.nbytes}
        )
        offset += array.nbytes
    digest = buffers_digest(array for _, array in converted)
    manifest = {
        "format_version": FORMAT_VERSION,
        "precision": precision,
        "entries": entries,
        "freeze_digest": digest,
        "metadata": metadata or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(_HEADER.pack(FORMAT_VERSION, len(blob)))
        handle.write(blob)
        for _, array in converted:
            handle.write(array.tobytes())
    tmp.replace(path)
    return digest


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container")
    version, manifest_len = _HEADER.unpack_from(raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + _HEADER.size
    manifest = json.loads(raw[start : start + manifest_len].decode("utf-8"))
    body = memoryview(raw)[start + manifest_len :]

    arrays: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    buffers = []
    for entry in manifest["entries"]:
        chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated array '{entry['name']}'")
        array = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        buffers.append(array)
        arrays[entry["name"]] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
    if buffers_digest(buffers) != manifest["freeze_digest"]:
        raise CheckpointError(f"{path}: freeze digest mismatch")
    return Checkpoint(
        arrays=arrays,
        metadata=manifest.get("metadata", {}),
        freeze_digest=manifest["freeze_digest"],
        precision=manifest["precision"],
    )


def prefixed(prefix: str, state: Mapping[str, torch.Tensor]) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((f"{prefix}/{name}", tensor) for name, tensor in state.items())
