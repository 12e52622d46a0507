"""Speaker-conditioned mel-to-mel conversion, the speech consistency loss and
the VC training routine that runs against a frozen recognizer."""

from __future__ import annotations

import contextlib
import copy
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .asr import AsrModel
from .data import DatasetManifest
from .features import FeatureConfig, MelSpectrogram, NormalizationStats, load_mels
from .speaker import SpeakerEncoder, speaker_centroids
from .utils import as_batch, check_finite, derive_seed, length_mask, pad_batch, seeded_init, state_checksum

log = logging.getLogger(__name__)


@dataclass
class VcTrainConfig:
    lambda_asr: float = 100.0
    lambda_recon: float = 10.0
    lambda_spk: float = 1.0
    lambda_adv: float = 0.0
    steps: int = 400
    batch_size: int = 8
    learning_rate: float = 1e-3
    eval_interval: int = 100
    n_val_pairs: int = 32
    channels: int = 128
    bottleneck: int = 32
    embedding_dim: int = 64
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_asr", "lambda_recon", "lambda_spk", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _masked_instance_norm(h: torch.Tensor, mask: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # h: (B, C, T), mask: (B, 1, T)
    n = mask.sum(-1, keepdim=True)
    mean = (h * mask).sum(-1, keepdim=True) / n
    var = (((h - mean) * mask) ** 2).sum(-1, keepdim=True) / n
    return (h - mean) / torch.sqrt(var + eps) * mask


class _EncBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv1d(c, c, 5, padding=2)

    def forward(self, h, mask):
        return h + _masked_instance_norm(F.relu(self.conv(h * mask)), mask)


class _DecBlock(nn.Module):
    def __init__(self, c: int, e: int):
        super().__init__()
        self.conv = nn.Conv1d(c, c, 5, padding=2)
        self.film = nn.Linear(e, 2 * c)

    def forward(self, h, s, mask):
        gamma, beta = self.film(s)[..., None].chunk(2, dim=1)
        return (h + F.relu((1 + gamma) * _masked_instance_norm(self.conv(h * mask), mask) + beta)) * mask


class VcModel(nn.Module):
    """Conv encoder with instance-normalized content code, and a decoder whose
    blocks are modulated per channel by the target speaker embedding."""

    def __init__(self, stats: NormalizationStats, config: VcTrainConfig = VcTrainConfig()):
        super().__init__()
        self.config = config
        self.iteration = 0
        self.provenance: dict = {}
        c, e = config.channels, config.embedding_dim
        self.register_buffer("mel_mean", torch.as_tensor(stats.mean, dtype=torch.float32))
        self.register_buffer("mel_std", torch.as_tensor(stats.std, dtype=torch.float32))
        self.inp = nn.Conv1d(80, c, 5, padding=2)
        self.enc = nn.ModuleList([_EncBlock(c) for _ in range(3)])
        self.squeeze = nn.Conv1d(c, config.bottleneck, 1)
        self.expand = nn.Conv1d(config.bottleneck, c, 1)
        self.dec = nn.ModuleList([_DecBlock(c, e) for _ in range(3)])
        self.out = nn.Conv1d(c, 80, 1)

    def forward(self, mel: torch.Tensor, s: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, 80) raw log-mel, (B, e) embedding -> (B, T, 80) raw log-mel."""
        B, T, _ = mel.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        mask = length_mask(lengths, T)[:, None, :].to(mel.dtype)
        x = ((mel - self.mel_mean) / self.mel_std).transpose(1, 2)
        h = F.relu(self.inp(x * mask))
        for blk in self.enc:
            h = blk(h, mask)
        h = self.expand(_masked_instance_norm(self.squeeze(h), mask))
        for blk in self.dec:
            h = blk(h, s, mask)
        y = self.out(h * mask).transpose(1, 2)
        return (y * self.mel_std + self.mel_mean) * mask.transpose(1, 2)

    def model_hash(self) -> str:
        return state_checksum(self)[:16]


class FrameDiscriminator(nn.Module):
    def __init__(self, stats: NormalizationStats, hidden: int = 128):
        super().__init__()
        self.register_buffer("mel_mean", torch.as_tensor(stats.mean, dtype=torch.float32))
        self.register_buffer("mel_std", torch.as_tensor(stats.std, dtype=torch.float32))
        self.net = nn.Sequential(nn.Conv1d(80, hidden, 3, padding=1), nn.LeakyReLU(0.2),
                                 nn.Conv1d(hidden, hidden, 3, padding=1), nn.LeakyReLU(0.2),
                                 nn.Conv1d(hidden, 1, 1))

    def forward(self, mel, mask):
        x = ((mel - self.mel_mean) / self.mel_std).transpose(1, 2)
        return self.net(x * mask[:, None]).squeeze(1)


# ---------------------------------------------------------------------------
# public operations


def convert(model: VcModel, source_mel, target: np.ndarray):
    if abs(float(np.linalg.norm(target)) - 1.0) > 1e-4:
        raise ValueError("target embedding must be unit norm")
    x = as_batch(source_mel, dtype=torch.float32)
    if x.shape[-1] != 80:
        raise ValueError(f"expected 80 mel bins, got {x.shape[-1]}")
    s = torch.as_tensor(np.asarray(target), dtype=torch.float32)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        y = model(x, s)[0].numpy()
    model.train(was_training)
    if isinstance(source_mel, MelSpectrogram):
        return MelSpectrogram(y, source_mel.frame_hop_s, source_mel.sample_rate_hz)
    return y


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Eval mode and no parameter gradients for the duration of the block."""
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
        module.train(was_training)


def consistency_from_features(src_feats: torch.Tensor, conv_feats: torch.Tensor,
                              lengths: torch.Tensor | None = None) -> torch.Tensor:
    B, T, D = conv_feats.shape
    if lengths is None:
        return (src_feats - conv_feats).abs().mean()
    mask = length_mask(lengths, T)[..., None].to(conv_feats.dtype)
    return ((src_feats - conv_feats).abs() * mask).sum() / (mask.sum() * D)


def speech_consistency_loss(asr: AsrModel, source_mel, converted_mel,
                            lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Mean |enc(source) - enc(converted)| of recognizer encoder features,
    averaged over valid frames and feature dims.

    Accepts single mels (frames x 80) or padded batches with ``lengths``.
    Gradients flow to ``converted_mel`` only; the ASR stays frozen.
    """
    dtype = next(asr.parameters()).dtype
    x = as_batch(source_mel, dtype=dtype)
    y = converted_mel if isinstance(converted_mel, torch.Tensor) else as_batch(converted_mel, dtype)
    if y.dim() == 2:
        y = y[None]
    if x.shape[:2] != y.shape[:2]:
        raise ValueError(f"frame-count mismatch: {tuple(x.shape[:2])} vs {tuple(y.shape[:2])}")
    with frozen(asr):
        with torch.no_grad():
            hx = asr.encoder(x, lengths)
        hy = asr.encoder(y, lengths)
    return consistency_from_features(hx, hy, lengths)


# ---------------------------------------------------------------------------
# training


def _objective(model, asr, spk, x, lengths, s_src, s_tgt, config, disc=None):
    B = x.shape[0]
    out = model(torch.cat([x, x]), torch.cat([s_src, s_tgt]), torch.cat([lengths, lengths]))
    recon, conv = out[:B], out[B:]
    mask = length_mask(lengths, x.shape[1])[..., None].to(x.dtype)
    l_recon = ((recon - x).abs() * mask).sum() / (mask.sum() * 80)
    l_spk = (1 - (spk.embed_batch(conv, lengths) * s_tgt).sum(-1)).mean()
    terms = {"recon": l_recon, "spk": l_spk}
    total = config.lambda_recon * l_recon + config.lambda_spk * l_spk
    if config.lambda_asr > 0:
        with torch.no_grad():
            hx = asr.encoder(x, lengths)
        l_asr = consistency_from_features(hx, asr.encoder(conv, lengths), lengths)
        total = total + config.lambda_asr * l_asr
        terms["asr"] = l_asr
    if disc is not None and config.lambda_adv > 0:
        m = length_mask(lengths, x.shape[1]).to(x.dtype)
        l_adv = -(disc(conv, m) * m).sum() / m.sum()
        total = total + config.lambda_adv * l_adv
        terms["adv"] = l_adv
    terms["total"] = total
    return total, terms, conv


def train_vc(train: DatasetManifest, asr: AsrModel, spk: SpeakerEncoder, config: VcTrainConfig,
             seed: int | None = None, *, stats: NormalizationStats, val: DatasetManifest | None = None,
             feature_config: FeatureConfig = FeatureConfig(), mels: dict | None = None) -> VcModel:
    """Train a VC model from scratch against a frozen ASR and speaker encoder.

    Pairs (utterance, target speaker) are drawn uniformly; the returned
    checkpoint is the one with the lowest objective on a fixed validation
    pair set (``val`` if given, otherwise a held-back tenth of ``train``).
    """
    speakers = train.speakers
    if len(speakers) < 2:
        raise ValueError("VC training needs at least two speakers")
    seed = config.seed if seed is None else seed
    mels = mels if mels is not None else {}
    missing = [u for u in train.utterances if u.id not in mels]
    if val is not None:
        missing += [u for u in val.utterances if u.id not in mels]
    if missing:
        mels.update(load_mels(DatasetManifest(tuple(missing), train.vocabulary, train.tag), feature_config))
    asr_hash_before = asr.model_hash()

    centroids = speaker_centroids(spk, train, mels)
    emb = {k: torch.as_tensor(v, dtype=torch.float32) for k, v in centroids.items()}
    rng = np.random.default_rng(derive_seed(seed, "vc.data"))
    utts = list(train.utterances)
    if val is None:
        order = rng.permutation(len(utts))
        n_val = max(1, len(utts) // 10)
        val_utts = [utts[i] for i in order[:n_val]]
        utts = [utts[i] for i in sorted(order[n_val:])]
    else:
        val_utts = list(val.utterances)
    val_rng = np.random.default_rng(derive_seed(seed, "vc.val"))
    val_pairs = [(val_utts[int(val_rng.integers(len(val_utts)))], speakers[int(val_rng.integers(len(speakers)))])
                 for _ in range(config.n_val_pairs)]

    model = seeded_init(lambda: VcModel(stats, config), derive_seed(seed, "vc.init"))
    disc = None
    if config.lambda_adv > 0:
        disc = seeded_init(lambda: FrameDiscriminator(stats), derive_seed(seed, "vc.disc"))
        d_opt = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=(0.5, 0.9))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    def batch_of(pairs):
        x, lengths = pad_batch([mels[u.id] for u, _ in pairs])
        s_src = torch.stack([emb[u.speaker] for u, _ in pairs])
        s_tgt = torch.stack([emb[t] for _, t in pairs])
        return x, lengths, s_src, s_tgt

    def validate() -> float:
        model.eval()
        total = 0.0
        with torch.no_grad():
            for k in range(0, len(val_pairs), config.batch_size):
                chunk = val_pairs[k:k + config.batch_size]
                v, _, _ = _objective(model, asr, spk, *batch_of(chunk), config, None)[:3]
                total += float(v) * len(chunk)
        model.train()
        return total / len(val_pairs)

    best, best_state, curve = float("inf"), None, []
    with frozen(asr), torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "vc.torch"))
        model.train()
        for step in range(1, config.steps + 1):
            pairs = [(utts[int(rng.integers(len(utts)))], speakers[int(rng.integers(len(speakers)))])
                     for _ in range(config.batch_size)]
            x, lengths, s_src, s_tgt = batch_of(pairs)
            total, terms, conv = _objective(model, asr, spk, x, lengths, s_src, s_tgt, config, disc)
            check_finite(total, step, "train_vc")
            opt.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if disc is not None:
                m = length_mask(lengths, x.shape[1]).to(x.dtype)
                real = disc(x, m)
                fake = disc(conv.detach(), m)
                d_loss = ((F.relu(1 - real) * m).sum() + (F.relu(1 + fake) * m).sum()) / m.sum()
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
            if step % config.eval_interval == 0 or step == config.steps:
                v = validate()
                curve.append({"step": step, "val_objective": v,
                              **{k: t.item() for k, t in terms.items()}})
                log.info("train_vc step %d %s val %.4f", step,
                         " ".join(f"{k}={t.item():.4f}" for k, t in terms.items()), v)
                if v < best:
                    best, best_state = v, copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if asr.model_hash() != asr_hash_before:
        raise RuntimeError("ASR parameters changed during VC training")
    model.provenance = {"routine": "train_vc", "asr_hash": asr_hash_before, "speaker_hash": spk.model_hash(),
                        "seed": seed, "curve": curve, "speakers": speakers}
    return model


def save_vc(model: VcModel, path: Path | str, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "vc", "config": asdict(model.config), "iteration": model.iteration,
                "provenance": model.provenance, "model_hash": model.model_hash(),
                "state_dict": model.state_dict(), **extra}, path)


def load_vc(path: Path | str) -> VcModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "vc":
        raise ValueError(f"{path} is not a VC checkpoint")
    sd = payload["state_dict"]
    stats = NormalizationStats(sd["mel_mean"].double().numpy(), sd["mel_std"].double().numpy())
    model = VcModel(stats, VcTrainConfig(**payload["config"]))
    model.load_state_dict(sd)
    model.iteration = payload["iteration"]
    model.provenance = payload["provenance"]
    model.eval()
    if model.model_hash() != payload["model_hash"]:
        raise ValueError(f"{path}: parameter checksum mismatch")
    return model
