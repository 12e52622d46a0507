"""Speaker embeddings (unit-norm, 64-d) and the cosine identity metric."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest
from .features import FeatureConfig, NormalizationStats, load_mels
from .utils import check_finite, derive_seed, length_mask, pad_batch, seeded_init, state_checksum

log = logging.getLogger(__name__)

MIN_FRAMES = 10


@dataclass
class SpeakerTrainConfig:
    embedding_dim: int = 64
    channels: int = 128
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.1
    logit_scale: float = 10.0
    # train a second encoder on a disjoint seed for metric reporting
    separate_metric_encoder: bool = False
    seed: int = 0


class SpeakerEncoder(nn.Module):
    def __init__(self, speakers: Sequence[str], stats: NormalizationStats,
                 config: SpeakerTrainConfig = SpeakerTrainConfig()):
        super().__init__()
        self.speakers = list(speakers)
        self.config = config
        self.accuracy: float | None = None
        c = config.channels
        self.register_buffer("mel_mean", torch.as_tensor(stats.mean, dtype=torch.float32))
        self.register_buffer("mel_std", torch.as_tensor(stats.std, dtype=torch.float32))
        self.convs = nn.ModuleList([nn.Conv1d(80, c, 5, padding=2), nn.Conv1d(c, c, 5, padding=2),
                                    nn.Conv1d(c, c, 3, padding=1)])
        self.proj = nn.Linear(2 * c, config.embedding_dim)
        self.classifier = nn.Parameter(torch.randn(len(self.speakers), config.embedding_dim) * 0.1)

    def embed_batch(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, 80) raw log-mel -> (B, e) unit-norm embeddings; differentiable."""
        B, T, _ = mel.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        mask = length_mask(lengths, T)[:, None, :].to(mel.dtype)
        h = ((mel - self.mel_mean) / self.mel_std).transpose(1, 2)
        for conv in self.convs:
            h = F.gelu(conv(h * mask))
        n = mask.sum(-1)
        mean = (h * mask).sum(-1) / n
        var = (((h - mean[..., None]) * mask) ** 2).sum(-1) / n
        pooled = torch.cat([mean, torch.sqrt(var + 1e-5)], dim=-1)
        return F.normalize(self.proj(pooled), dim=-1)

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        return self.config.logit_scale * emb @ F.normalize(self.classifier, dim=-1).T

    def model_hash(self) -> str:
        return state_checksum(self)[:16]


def _arr(m) -> np.ndarray:
    return m.data if hasattr(m, "data") and isinstance(m.data, np.ndarray) else np.asarray(m)


def train_speaker_encoder(manifest: DatasetManifest, config: SpeakerTrainConfig = SpeakerTrainConfig(),
                          seed: int | None = None, *, stats: NormalizationStats,
                          feature_config: FeatureConfig = FeatureConfig(),
                          mels: dict | None = None) -> SpeakerEncoder:
    """Speaker classifier whose normalized penultimate layer is the embedding.

    A fraction of each speaker's utterances is held out; classification
    accuracy on them is stored in ``encoder.accuracy``.
    """
    speakers = manifest.speakers
    if len(speakers) < 2:
        raise ValueError("speaker encoder needs at least two speakers")
    seed = config.seed if seed is None else seed
    if mels is None:
        mels = load_mels(manifest, feature_config)
    rng = np.random.default_rng(derive_seed(seed, "speaker.data"))
    train_items, held_items = [], []
    for si, spk in enumerate(speakers):
        utts = [u for u in manifest.utterances if u.speaker == spk]
        order = rng.permutation(len(utts))
        n_held = int(round(config.holdout_fraction * len(utts))) if len(utts) > 1 else 0
        for k, j in enumerate(order):
            (held_items if k < n_held else train_items).append((mels[utts[j].id], si))

    enc = seeded_init(lambda: SpeakerEncoder(speakers, stats, config), derive_seed(seed, "speaker.init"))
    opt = torch.optim.Adam(enc.parameters(), lr=config.learning_rate)
    enc.train()
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(train_items), config.batch_size)
        x, lengths = pad_batch([train_items[i][0] for i in idx])
        y = torch.tensor([train_items[i][1] for i in idx])
        loss = F.cross_entropy(enc.logits(enc.embed_batch(x, lengths)), y)
        check_finite(loss, step, "train_speaker_encoder")
        opt.zero_grad()
        loss.backward()
        opt.step()
    enc.eval()
    items = held_items or train_items
    with torch.no_grad():
        correct = 0
        for s in range(0, len(items), 32):
            chunk = items[s:s + 32]
            x, lengths = pad_batch([m for m, _ in chunk])
            pred = enc.logits(enc.embed_batch(x, lengths)).argmax(-1)
            correct += int((pred == torch.tensor([y for _, y in chunk])).sum())
    enc.accuracy = correct / len(items)
    log.info("speaker encoder held-out accuracy %.3f", enc.accuracy)
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


def embed(encoder: SpeakerEncoder, mels) -> np.ndarray:
    """Mean of per-utterance embeddings, renormalized to unit length."""
    if isinstance(mels, np.ndarray) and mels.ndim == 2 or hasattr(mels, "data"):
        mels = [mels]
    arrs = [_arr(m) for m in mels]
    if not arrs:
        raise ValueError("no mels to embed")
    for a in arrs:
        if a.shape[0] < MIN_FRAMES:
            raise ValueError(f"mel of {a.shape[0]} frames is shorter than {MIN_FRAMES}")
    # one utterance per forward pass keeps the result independent of batching
    with torch.no_grad():
        e = torch.cat([encoder.embed_batch(torch.as_tensor(a, dtype=torch.float32)[None]).double()
                       for a in arrs]).mean(0)
    e = e / e.norm()
    return e.numpy()


def identity_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(1.0, max(-1.0, cos))


def utterance_embedding(encoder: SpeakerEncoder, utt_id: str, mel, cache: Path | str | None = None) -> np.ndarray:
    """Single-utterance embedding, stored under ``cache/<encoder hash>/<utt_id>.npy`` when given."""
    if cache is None:
        return embed(encoder, [mel])
    path = Path(cache) / encoder.model_hash() / f"{utt_id}.npy"
    if path.exists():
        return np.load(path)
    e = embed(encoder, [mel])
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npy")
    np.save(tmp, e)
    tmp.replace(path)
    return e


def speaker_centroids(encoder: SpeakerEncoder, manifest: DatasetManifest, mels: dict) -> dict[str, np.ndarray]:
    return {spk: embed(encoder, [mels[u.id] for u in utts]) for spk, utts in manifest.by_speaker().items()}


def save_speaker(encoder: SpeakerEncoder, path: Path | str, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "speaker", "config": asdict(encoder.config), "speakers": encoder.speakers,
                "accuracy": encoder.accuracy, "model_hash": encoder.model_hash(),
                "state_dict": encoder.state_dict(), **extra}, path)


def load_speaker(path: Path | str) -> SpeakerEncoder:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "speaker":
        raise ValueError(f"{path} is not a speaker-encoder checkpoint")
    sd = payload["state_dict"]
    stats = NormalizationStats(sd["mel_mean"].double().numpy(), sd["mel_std"].double().numpy())
    enc = SpeakerEncoder(payload["speakers"], stats, SpeakerTrainConfig(**payload["config"]))
    enc.load_state_dict(sd)
    enc.accuracy = payload["accuracy"]
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc
