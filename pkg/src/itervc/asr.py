"""Small CTC recognizer: encoder features for the consistency loss, greedy decoding,
and the base-training / fine-tuning routines of the iterative loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, TokenVocabulary, manifest_hash
from .features import FeatureConfig, NormalizationStats, load_mels
from .metrics import WerReport, corpus_wer
from .utils import (TrainingDivergedError, as_batch, check_finite, derive_seed, length_mask,
                    pad_batch, seeded_init, state_checksum)

log = logging.getLogger(__name__)


class CTCLengthError(ValueError):
    pass


@dataclass
class AsrTrainConfig:
    learning_rate: float = 0.0025
    finetune_learning_rate: float = 0.00025
    warmup_steps: int = 100
    max_steps: int = 5000
    finetune_steps: int = 5000
    batch_size: int = 8
    base_to_target_ratio: tuple[int, int] = (1, 3)
    eval_interval: int = 100
    grad_clip: float = 5.0
    d_model: int = 128
    n_heads: int = 4
    ff_dim: int = 256
    kernel_size: int = 5
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.base_to_target_ratio = tuple(self.base_to_target_ratio)
        if min(self.base_to_target_ratio) < 0 or sum(self.base_to_target_ratio) <= 0:
            raise ValueError("ratio components must be non-negative and not both zero")
        if self.batch_size < 1 or self.max_steps < 1 or self.eval_interval < 1:
            raise ValueError("batch_size, max_steps and eval_interval must be positive")


# ---------------------------------------------------------------------------
# model


class ConvBlock(nn.Module):
    def __init__(self, d: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.conv = nn.Conv1d(d, d, kernel, padding=kernel // 2)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.conv(self.norm(x).transpose(1, 2)).transpose(1, 2)
        return (x + self.drop(F.relu(h))) * mask[..., None]


class AttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.ReLU(), nn.Linear(ff, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        B, T, D = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, T, 3, self.heads, D // self.heads).unbind(2)
        q, k, v = (t.transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // self.heads)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        att = (scores.softmax(-1) @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.drop(self.out(att))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x * mask[..., None]


class AsrModel(nn.Module):
    """Conv + self-attention encoder with a linear CTC head.

    The model takes raw log-mels; normalization statistics live in buffers so
    the checkpoint is self-contained.
    """

    def __init__(self, vocabulary: TokenVocabulary, stats: NormalizationStats,
                 config: AsrTrainConfig = AsrTrainConfig()):
        super().__init__()
        self.vocabulary = vocabulary
        self.config = config
        self.iteration = 0
        self.provenance: dict = {}
        d = config.d_model
        self.register_buffer("mel_mean", torch.as_tensor(stats.mean, dtype=torch.float32))
        self.register_buffer("mel_std", torch.as_tensor(stats.std, dtype=torch.float32))
        self.proj = nn.Linear(80, d)
        self.convs = nn.ModuleList([ConvBlock(d, config.kernel_size, config.dropout) for _ in range(2)])
        self.attn = nn.ModuleList([AttentionBlock(d, config.n_heads, config.ff_dim, config.dropout)
                                   for _ in range(2)])
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocabulary.size)

    @property
    def dim(self) -> int:
        return self.config.d_model

    def encoder(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, 80) raw log-mel -> (B, T, d) encoder features, zero on padding."""
        if mel.shape[-1] != 80:
            raise ValueError(f"expected 80 mel bins, got {mel.shape[-1]}")
        B, T, _ = mel.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        mask = length_mask(lengths, T)
        x = (mel - self.mel_mean) / self.mel_std
        h = self.proj(x) * mask[..., None]
        for blk in self.convs:
            h = blk(h, mask)
        for blk in self.attn:
            h = blk(h, mask)
        return self.final_norm(h) * mask[..., None]

    def forward(self, mel, lengths=None):
        feats = self.encoder(mel, lengths)
        return feats, self.head(feats)

    def model_hash(self) -> str:
        return state_checksum(self)[:16]


def build_asr(vocabulary: TokenVocabulary, stats: NormalizationStats, config: AsrTrainConfig,
              seed: int) -> AsrModel:
    return seeded_init(lambda: AsrModel(vocabulary, stats, config), seed)


# ---------------------------------------------------------------------------
# public operations


def encode(model: AsrModel, mel) -> torch.Tensor:
    """Recognizer encoder features for one mel (frames x 80), returned as (frames x d).

    Runs in inference mode but keeps the autograd graph, so the result is
    differentiable with respect to ``mel`` when it is a tensor requiring grad.
    """
    was_training = model.training
    model.eval()
    try:
        x = as_batch(mel, dtype=next(model.parameters()).dtype)
        return model.encoder(x)[0]
    finally:
        model.train(was_training)


def required_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss_from_logits(logits: torch.Tensor, target: Sequence[int], blank: int = 0) -> torch.Tensor:
    """-log p(target | logits) for a single (T, C) logit matrix."""
    T = logits.shape[0]
    target = list(target)
    if len(target) > T:
        raise CTCLengthError(f"transcript of {len(target)} tokens exceeds {T} frames")
    if required_frames(target) > T:
        raise CTCLengthError(f"transcript needs {required_frames(target)} frames "
                             f"(repeated tokens need a blank between them), got {T}")
    if not target:
        return -logits.log_softmax(-1)[:, blank].sum()
    lp = logits.log_softmax(-1)[:, None, :]
    return F.ctc_loss(lp, torch.tensor([target]), torch.tensor([T]), torch.tensor([len(target)]),
                      blank=blank, reduction="sum")


def ctc_loss(model: AsrModel, mel, transcript: Sequence[str]) -> torch.Tensor:
    x = as_batch(mel, dtype=next(model.parameters()).dtype)
    _, logits = model(x)
    return ctc_loss_from_logits(logits[0], model.vocabulary.encode(transcript),
                                model.vocabulary.blank_index)


def collapse_ctc(ids: Sequence[int], blank: int = 0) -> list[int]:
    out, prev = [], None
    for i in ids:
        if i != prev and i != blank:
            out.append(int(i))
        prev = i
    return out


@torch.no_grad()
def greedy_decode(model: AsrModel, mel) -> tuple[str, ...]:
    return transcribe(model, [mel])[0]


@torch.no_grad()
def transcribe(model: AsrModel, mels: Sequence, batch_size: int = 32) -> list[tuple[str, ...]]:
    """Greedy CTC decoding of a list of mels, batched with padding."""
    was_training = model.training
    model.eval()
    out = []
    arrs = [m.data if hasattr(m, "data") and isinstance(m.data, np.ndarray) else np.asarray(m) for m in mels]
    dtype = next(model.parameters()).dtype
    try:
        for s in range(0, len(arrs), batch_size):
            x, lengths = pad_batch(arrs[s:s + batch_size], dtype)
            _, logits = model(x, lengths)
            best = logits.argmax(-1)
            for b in range(x.shape[0]):
                ids = collapse_ctc(best[b, : lengths[b]].tolist(), model.vocabulary.blank_index)
                out.append(model.vocabulary.decode(ids))
    finally:
        model.train(was_training)
    return out


def evaluate_wer(model: AsrModel, manifest: DatasetManifest, mels: dict) -> WerReport:
    hyps = transcribe(model, [mels[u.id] for u in manifest.utterances])
    return corpus_wer([u.transcript for u in manifest.utterances], hyps,
                      [u.id for u in manifest.utterances])


# ---------------------------------------------------------------------------
# training


def warmup_lr(step: int, peak: float, warmup: int) -> float:
    """Inverse-sqrt schedule that peaks at ``peak`` after ``warmup`` steps."""
    step = max(step, 1)
    if warmup <= 0:
        return peak
    return peak * min(step / warmup, math.sqrt(warmup / step))


class RatioBatchSampler:
    """Draws batches whose base : rest item counts follow a fixed ratio.

    The cumulative number of base items after n items is round(n * p), so
    any window of consecutive batches is within one item of the exact ratio.
    """

    def __init__(self, n_base: int, n_rest: int, batch_size: int, ratio: tuple[int, int],
                 rng: np.random.Generator):
        rb, rt = ratio
        if n_rest == 0 and rt > 0:
            raise ValueError("target/augmented pool is empty")
        if n_base == 0:
            rb = 0
        self.p = rb / (rb + rt) if rb + rt else 0.0
        self.n_base, self.n_rest, self.batch_size, self.rng = n_base, n_rest, batch_size, rng
        self.items = 0

    def next_batch(self) -> list[tuple[str, int]]:
        lo, hi = self.items, self.items + self.batch_size
        k = int(math.floor(hi * self.p + 0.5)) - int(math.floor(lo * self.p + 0.5))
        self.items = hi
        base = [("base", int(i)) for i in self.rng.integers(0, self.n_base, k)] if k else []
        rest = [("rest", int(i)) for i in self.rng.integers(0, self.n_rest, self.batch_size - k)]
        return base + rest


@dataclass
class _Pool:
    mels: list[np.ndarray] = field(default_factory=list)
    targets: list[list[int]] = field(default_factory=list)

    def add(self, manifest: DatasetManifest, mels: dict, vocab: TokenVocabulary):
        for u in manifest.utterances:
            self.mels.append(mels[u.id])
            self.targets.append(vocab.encode(u.transcript))

    def __len__(self):
        return len(self.mels)


def _train_loop(model: AsrModel, pools: dict[str, _Pool], sampler, lr_fn, steps: int,
                config: AsrTrainConfig, val: DatasetManifest | None, val_mels: dict | None,
                seed: int, what: str) -> tuple[AsrModel, list[dict]]:
    opt = torch.optim.Adam(model.parameters(), lr=lr_fn(1), betas=(0.9, 0.98), eps=1e-9)
    blank = model.vocabulary.blank_index
    best_wer, best_state, curve = math.inf, None, []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.train()
        for step in range(1, steps + 1):
            batch = sampler.next_batch()
            mels = [pools[p].mels[i] for p, i in batch]
            targets = [pools[p].targets[i] for p, i in batch]
            x, lengths = pad_batch(mels)
            _, logits = model(x, lengths)
            lp = logits.log_softmax(-1).transpose(0, 1)
            flat = torch.tensor([t for tt in targets for t in tt], dtype=torch.long)
            tl = torch.tensor([len(t) for t in targets], dtype=torch.long)
            loss = F.ctc_loss(lp, flat, lengths, tl, blank=blank, reduction="sum",
                              zero_infinity=True) / len(batch)
            check_finite(loss, step, what)
            for g in opt.param_groups:
                g["lr"] = lr_fn(step)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if val is not None and (step % config.eval_interval == 0 or step == steps):
                wer = evaluate_wer(model, val, val_mels).wer
                curve.append({"step": step, "loss": loss.item(), "val_wer": wer})
                log.info("%s step %d loss %.3f val_wer %.4f", what, step, loss.item(), wer)
                if wer < best_wer:
                    best_wer, best_state = wer, copy.deepcopy(model.state_dict())
                model.train()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, curve


def _check_vocab(*manifests: DatasetManifest):
    vocabs = {m.vocabulary for m in manifests if m is not None}
    if len(vocabs) > 1:
        raise ValueError("manifests use different vocabularies")


def train_asr(train: DatasetManifest, val: DatasetManifest | None, config: AsrTrainConfig,
              seed: int | None = None, *, stats: NormalizationStats,
              feature_config: FeatureConfig = FeatureConfig(), mels: dict | None = None) -> AsrModel:
    """Standard CTC training from scratch with warm-up; returns the best-validation checkpoint."""
    if not len(train):
        raise ValueError("training manifest is empty")
    _check_vocab(train, val)
    seed = config.seed if seed is None else seed
    mels = mels if mels is not None else {}
    need = [m for m in (train, val) if m is not None]
    for m in need:
        missing = [u for u in m.utterances if u.id not in mels]
        if missing:
            mels.update(load_mels(DatasetManifest(tuple(missing), m.vocabulary, m.tag), feature_config))
    model = build_asr(train.vocabulary, stats, config, derive_seed(seed, "asr.init"))
    pool = _Pool()
    pool.add(train, mels, train.vocabulary)
    sampler = RatioBatchSampler(0, len(pool), config.batch_size, (0, 1),
                                np.random.default_rng(derive_seed(seed, "asr.data")))
    model, curve = _train_loop(model, {"rest": pool}, sampler,
                               lambda s: warmup_lr(s, config.learning_rate, config.warmup_steps),
                               config.max_steps, config, val, mels, derive_seed(seed, "asr.dropout"),
                               "train_asr")
    model.provenance = {"routine": "train_asr", "train_tag": train.tag, "seed": seed,
                        "curve": curve, "train_ids_hash": manifest_hash(train)}
    return model


def finetune_asr(model: AsrModel, base: DatasetManifest | None, target: DatasetManifest,
                 augmented: DatasetManifest | None, config: AsrTrainConfig,
                 val: DatasetManifest | None = None, seed: int | None = None,
                 *, feature_config: FeatureConfig = FeatureConfig(), mels: dict | None = None,
                 steps: int | None = None) -> AsrModel:
    """Continue training ``model`` with a fresh Adam at the fine-tuning rate.

    Batches mix ``base`` against ``target`` + ``augmented`` at
    ``config.base_to_target_ratio``. The input model is not modified.
    """
    _check_vocab(base, target, augmented, val)
    if model.vocabulary != target.vocabulary:
        raise ValueError("model vocabulary differs from the manifests")
    seed = config.seed if seed is None else seed
    mels = mels if mels is not None else {}
    for m in (base, target, augmented, val):
        if m is None:
            continue
        missing = [u for u in m.utterances if u.id not in mels]
        if missing:
            mels.update(load_mels(DatasetManifest(tuple(missing), m.vocabulary, m.tag), feature_config))
    rest = _Pool()
    rest.add(target, mels, target.vocabulary)
    if augmented is not None:
        rest.add(augmented, mels, target.vocabulary)
    if not len(rest):
        raise ValueError("target and augmented manifests are both empty")
    base_pool = _Pool()
    if base is not None:
        base_pool.add(base, mels, target.vocabulary)
    sampler = RatioBatchSampler(len(base_pool), len(rest), config.batch_size,
                                config.base_to_target_ratio,
                                np.random.default_rng(derive_seed(seed, "asr.finetune.data")))
    tuned = copy.deepcopy(model)
    tuned, curve = _train_loop(tuned, {"base": base_pool, "rest": rest}, sampler,
                               lambda s: config.finetune_learning_rate,
                               steps or config.finetune_steps, config, val, mels,
                               derive_seed(seed, "asr.finetune.dropout"), "finetune_asr")
    tuned.iteration = model.iteration
    tuned.provenance = {"routine": "finetune_asr", "parent_hash": model.model_hash(),
                        "seed": seed, "curve": curve,
                        "augmented_hash": manifest_hash(augmented) if augmented is not None and len(augmented) else None,
                        "target_ids_hash": manifest_hash(target)}
    return tuned


# ---------------------------------------------------------------------------
# checkpoints


def save_asr(model: AsrModel, path: Path | str, **extra):
    payload = {
        "kind": "asr",
        "config": asdict(model.config),
        "vocabulary": {"tokens": list(model.vocabulary.tokens),
                       "blank_index": model.vocabulary.blank_index},
        "iteration": model.iteration,
        "provenance": model.provenance,
        "model_hash": model.model_hash(),
        "state_dict": model.state_dict(),
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_asr(path: Path | str) -> AsrModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "asr":
        raise ValueError(f"{path} is not an ASR checkpoint")
    vocab = TokenVocabulary(tuple(payload["vocabulary"]["tokens"]), payload["vocabulary"]["blank_index"])
    config = AsrTrainConfig(**payload["config"])
    sd = payload["state_dict"]
    stats = NormalizationStats(sd["mel_mean"].double().numpy(), sd["mel_std"].double().numpy())
    model = AsrModel(vocab, stats, config)
    model.load_state_dict(sd)
    model.iteration = payload["iteration"]
    model.provenance = payload["provenance"]
    model.eval()
    if model.model_hash() != payload["model_hash"]:
        raise ValueError(f"{path}: parameter checksum mismatch")
    return model
