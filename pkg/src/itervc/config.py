"""Experiment configuration: a TOML tree validated by pydantic, with
``--section.key=value`` overrides and a stable content hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .asr import AsrTrainConfig
from .augment import AugmentationPolicy
from .data import SyntheticCorpusSpec
from .features import FeatureConfig
from .speaker import SpeakerTrainConfig
from .utils import derive_seed
from .vc import VcTrainConfig


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSpecSection(_Section):
    n_speakers: int = Field(10, ge=2)
    n_utterances_per_speaker: int = Field(40, ge=1)
    vocab_size: int = Field(10, ge=4, le=26)
    tokens_per_utterance: tuple[int, int] = (4, 8)
    seed: int = Field(0, ge=0, lt=2**64)

    def to_spec(self, name: str) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(self.n_speakers, self.n_utterances_per_speaker, self.vocab_size,
                                   tuple(self.tokens_per_utterance), self.seed, name)


class CorpusSection(_Section):
    # either generate synthetic corpora or point at existing manifests
    target: CorpusSpecSection = CorpusSpecSection()
    base: CorpusSpecSection = CorpusSpecSection(n_speakers=8, n_utterances_per_speaker=30, seed=1)
    target_manifest: Optional[str] = None
    base_manifest: Optional[str] = None
    held_out_speakers: list[str] = []
    n_held_out: int = Field(2, ge=1)


class FeatureSection(_Section):
    n_fft: int = 1024
    hop: int = 256
    window: int = 1024
    fmin: float = 0.0
    fmax: float = 12000.0
    log_floor: float = 1e-5

    def build(self) -> FeatureConfig:
        return FeatureConfig(self.n_fft, self.hop, self.window, 80, self.fmin, self.fmax, self.log_floor)


class AsrSection(_Section):
    learning_rate: float = Field(0.0025, gt=0)
    finetune_learning_rate: float = Field(0.00025, gt=0)
    warmup_steps: int = Field(100, ge=0)
    max_steps: int = Field(800, ge=1)
    finetune_steps: int = Field(300, ge=1)
    batch_size: int = Field(8, ge=1)
    base_to_target_ratio: tuple[int, int] = (1, 3)
    eval_interval: int = Field(100, ge=1)
    grad_clip: float = 5.0
    d_model: int = 128
    n_heads: int = 4
    ff_dim: int = 256
    kernel_size: int = 5
    dropout: float = Field(0.1, ge=0, lt=1)

    @field_validator("base_to_target_ratio")
    @classmethod
    def _ratio(cls, v):
        if min(v) < 0 or sum(v) <= 0:
            raise ValueError("ratio components must be non-negative and not both zero")
        return v

    def build(self, seed: int) -> AsrTrainConfig:
        return AsrTrainConfig(**self.model_dump(), seed=seed)


class EvalAsrSection(_Section):
    """Held-out evaluator: trained from scratch on pooled base + target."""
    max_steps: int = Field(800, ge=1)


class SpeakerSection(_Section):
    embedding_dim: int = 64
    channels: int = 128
    steps: int = Field(300, ge=1)
    batch_size: int = 16
    learning_rate: float = 1e-3
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    logit_scale: float = 10.0
    separate_metric_encoder: bool = False

    def build(self, seed: int) -> SpeakerTrainConfig:
        return SpeakerTrainConfig(**self.model_dump(), seed=seed)


class VcSection(_Section):
    lambda_asr: float = Field(100.0, ge=0)
    lambda_recon: float = Field(10.0, ge=0)
    lambda_spk: float = Field(1.0, ge=0)
    lambda_adv: float = Field(0.0, ge=0)
    steps: int = Field(400, ge=1)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = 1e-3
    eval_interval: int = 100
    n_val_pairs: int = 32
    channels: int = 128
    bottleneck: int = 32
    grad_clip: float = 5.0

    def build(self, seed: int, embedding_dim: int) -> VcTrainConfig:
        return VcTrainConfig(**self.model_dump(), embedding_dim=embedding_dim, seed=seed)


class AugmentSection(_Section):
    pairs_per_utterance: int = Field(1, ge=1)

    def build(self, seed: int) -> AugmentationPolicy:
        return AugmentationPolicy(self.pairs_per_utterance, "uniform", seed)


class OrchestratorSection(_Section):
    max_iterations: int = Field(4, ge=0)
    epsilon: float = Field(0.01, ge=0)
    # fine-tune on every past augmented set instead of only the newest
    include_history: bool = False
    eval_pairs_per_utterance: int = Field(1, ge=1)


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**63)
    corpus: CorpusSection = CorpusSection()
    features: FeatureSection = FeatureSection()
    asr: AsrSection = AsrSection()
    eval_asr: EvalAsrSection = EvalAsrSection()
    speaker: SpeakerSection = SpeakerSection()
    vc: VcSection = VcSection()
    augment: AugmentSection = AugmentSection()
    orchestrator: OrchestratorSection = OrchestratorSection()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def module_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)


def _format_errors(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (TOML value syntax, bare strings allowed)."""
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
        node[leaf] = _parse_value(value)
    return tree


def from_tree(tree: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None


def load_config(path: Path | str | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    tree: dict = {}
    if path is not None:
        path = Path(path)
        text = path.read_text()
        try:
            tree = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from None
    return from_tree(apply_overrides(tree, list(overrides)))
