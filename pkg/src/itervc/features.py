"""Waveform to log-mel pipeline, normalization and the on-disk feature cache."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import SAMPLE_RATE, DatasetManifest, Utterance, read_wav

N_MELS = 80


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 1024
    hop: int = 256
    window: int = 1024
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float = 12000.0
    log_floor: float = 1e-5
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 0 < self.hop <= self.window <= self.n_fft:
            raise ValueError("need 0 < hop <= window <= n_fft")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.n_mels != N_MELS:
            raise ValueError(f"n_mels must be {N_MELS}")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MelSpectrogram:
    data: np.ndarray  # (frames, 80)
    frame_hop_s: float = 256 / SAMPLE_RATE
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != N_MELS:
            raise ValueError(f"mel must be (frames, {N_MELS}), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("mel must have at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("mel contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular HTK-scale filters with unit peak, shape (n_mels, n_fft//2 + 1)."""
    fft_freqs = np.linspace(0, config.sample_rate / 2, config.n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_freqs[None] - lower) / (center - lower)
    down = (upper - fft_freqs[None]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def melspectrogram(waveform: np.ndarray, config: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    y = np.asarray(waveform, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("waveform must be one-dimensional")
    if len(y) < config.window:
        raise ValueError(f"waveform of {len(y)} samples is shorter than window {config.window}")
    if not np.all(np.isfinite(y)):
        raise ValueError("waveform contains non-finite samples")
    n_frames = 1 + (len(y) - config.window) // config.hop
    idx = np.arange(config.window)[None, :] + config.hop * np.arange(n_frames)[:, None]
    win = np.hanning(config.window + 1)[:-1]  # periodic Hann
    spec = np.abs(np.fft.rfft(y[idx] * win, n=config.n_fft, axis=1))
    mel = spec @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, config.log_floor)),
                          config.hop / config.sample_rate, config.sample_rate)


# ---------------------------------------------------------------------------
# binary matrix files: b"MEL1", uint32 rows, uint32 cols, row-major float32

_MAGIC = b"MEL1"


def write_matrix(path: Path | str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", *arr.shape))
        f.write(arr.tobytes())
    os.replace(tmp, path)


def read_matrix(path: Path | str) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12 or head[:4] != _MAGIC:
            raise ValueError(f"{path}: not a feature matrix file")
        rows, cols = struct.unpack("<II", head[4:])
        arr = np.frombuffer(f.read(), dtype="<f4")
    if arr.size != rows * cols:
        raise ValueError(f"{path}: truncated matrix ({arr.size} != {rows}x{cols})")
    return arr.reshape(rows, cols).astype(np.float32)


def cache_root() -> Path | None:
    root = os.environ.get("ITERVC_CACHE")
    return Path(root) if root else None


def _cache_path(root: Path, utt: Utterance, config: FeatureConfig) -> Path:
    return root / config.digest() / f"{utt.id}.mel"


def utterance_mel(utt: Utterance, config: FeatureConfig = FeatureConfig(),
                  cache: Path | None = None) -> np.ndarray:
    """Raw (un-normalized) log-mel for an audio- or mel-backed utterance, as float32."""
    if utt.mel_path is not None:
        return read_matrix(utt.mel_path)
    cache = cache if cache is not None else cache_root()
    if cache is not None:
        p = _cache_path(cache, utt, config)
        if p.exists():
            return read_matrix(p)
    mel = melspectrogram(read_wav(utt.audio_path), config).data.astype(np.float32)
    if cache is not None:
        write_matrix(p, mel)
    return mel


def load_mels(manifest: DatasetManifest, config: FeatureConfig = FeatureConfig(),
              cache: Path | None = None) -> dict[str, np.ndarray]:
    return {u.id: utterance_mel(u, config, cache) for u in manifest.utterances}


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ValueError("std must be positive in every bin")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalization_arrays(mels) -> NormalizationStats:
    mels = list(mels)
    if not mels:
        raise ValueError("cannot fit normalization on an empty set")
    stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in mels], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    flat = np.flatnonzero(std <= 1e-12)
    if flat.size:
        raise ValueError(f"mel bin {int(flat[0])} is constant over the corpus (std = 0)")
    return NormalizationStats(mean, std)


def fit_normalization(manifest: DatasetManifest, config: FeatureConfig = FeatureConfig(),
                      cache: Path | None = None) -> NormalizationStats:
    if not len(manifest):
        raise ValueError("cannot fit normalization on an empty manifest")
    return fit_normalization_arrays(load_mels(manifest, config, cache).values())


def _apply(mel, fn):
    if isinstance(mel, MelSpectrogram):
        return MelSpectrogram(fn(mel.data).astype(mel.data.dtype), mel.frame_hop_s, mel.sample_rate_hz)
    return fn(mel).astype(mel.dtype)


def normalize(mel, stats: NormalizationStats):
    """Per-bin standardization; accepts a MelSpectrogram or a raw (frames, 80) array."""
    return _apply(mel, lambda x: (x - stats.mean) / stats.std)


def denormalize(mel, stats: NormalizationStats):
    return _apply(mel, lambda x: x * stats.std + stats.mean)
