from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


class TrainingDivergedError(RuntimeError):
    pass


def derive_seed(seed: int, name: str) -> int:
    """Per-module seed: global seed plus the leading 32 bits of sha256(name)."""
    digest = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")
    return (int(seed) + digest) % 2**63


def stable_hash(obj) -> str:
    if is_dataclass(obj):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_digest(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pad_batch(mels: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([m.shape[0] for m in mels], dtype=torch.long)
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1], dtype=dtype)
    for i, m in enumerate(mels):
        out[i, : m.shape[0]] = torch.as_tensor(m, dtype=dtype)
    return out, lengths


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def as_batch(mel, dtype=None) -> torch.Tensor:
    if hasattr(mel, "data") and isinstance(mel.data, np.ndarray):
        mel = mel.data
    t = torch.as_tensor(mel)
    if dtype is not None:
        t = t.to(dtype)
    return t[None] if t.dim() == 2 else t


def check_finite(loss: torch.Tensor, step: int, what: str):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{what} diverged at step {step}: loss={loss.item()}")


def seeded_init(module_factory, seed: int):
    """Build a module under a private RNG so parameter init depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return module_factory()
