from typing import Dict, Iterable, Tuple

import numpy as np
import torch
from cryptography.hazmat.primitives import hashes

from exceptions import FrozenParameterError


def sha256_hex(data: bytes) -> str:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize().hex()


def array_bytes(tensor: torch.Tensor) -> bytes:
    """Little-endian raw bytes of a tensor in its own precision."""
    array = tensor.detach().cpu().contiguous().numpy()
    return array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()


def tensors_digest(named: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over the concatenated bytes of the tensors, in the given order."""
    digest = hashes.Hash(hashes.SHA256())
    for _, tensor in named:
        digest.update(array_bytes(tensor))
    return digest.finalize().hex()


def module_digest(module: torch.nn.Module) -> str:
    return tensors_digest(module.state_dict().items())


def buffers_digest(arrays: Iterable[np.ndarray]) -> str:
    digest = hashes.Hash(hashes.SHA256())
    for array in arrays:
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.finalize().hex()


class FreezeGuard:
    """Records digests of frozen parameter groups and verifies them on demand"""

    def __init__(self):
        self._digests: Dict[str, str] = {}

    def record(self, name: str, named: Iterable[Tuple[str, torch.Tensor]]) -> str:
        self._digests[name] = tensors_digest(named)
        return self._digests[name]

    def verify(self, name: str, named: Iterable[Tuple[str, torch.Tensor]]) -> None:
        if name not in self._digests:
            raise FrozenParameterError(f"parameter group '{name}' was never frozen")
        current = tensors_digest(named)
        if current != self._digests[name]:
            raise FrozenParameterError(
                f"parameter group '{name}' changed after freezing "
                f"({self._digests[name][:12]} -> {current[:12]})"
            )

    def verify_all(self, groups: Dict[str, Iterable[Tuple[str, torch.Tensor]]]) -> None:
        for name, named in groups.items():
            self.verify(name, named)

    @property
    def digests(self) -> Dict[str, str]:
        return dict(self._digests)
