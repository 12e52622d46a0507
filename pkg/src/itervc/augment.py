"""VC data augmentation: convert every training utterance to other training speakers."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, Utterance, save_manifest
from .features import FeatureConfig, load_mels, write_matrix
from .speaker import SpeakerEncoder, speaker_centroids
from .utils import derive_seed
from .vc import VcModel, convert


class PolicyConflictError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationPolicy:
    pairs_per_utterance: int = 1
    reference_sampling: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.pairs_per_utterance < 1:
            raise ValueError("pairs_per_utterance must be >= 1")
        if self.reference_sampling != "uniform":
            raise ValueError(f"unsupported reference_sampling {self.reference_sampling!r}")


def sample_references(speakers: list[str], source_speaker: str, n: int,
                      rng: np.random.Generator) -> list[str]:
    """``n`` reference speakers drawn uniformly from ``speakers`` minus the source."""
    others = [s for s in speakers if s != source_speaker]
    if not others:
        raise ValueError(f"no reference speaker available besides {source_speaker!r}")
    return [others[int(i)] for i in rng.integers(0, len(others), n)]


def _item_rng(seed: int, utt_id: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, f"augment:{utt_id}"))


def _guard_policy(out_dir: Path, policy: AugmentationPolicy):
    path = out_dir / "policy.json"
    if path.exists():
        old = json.loads(path.read_text())
        if old.get("seed") == policy.seed and old != asdict(policy):
            raise PolicyConflictError(
                f"{out_dir} holds augmentation made with seed {policy.seed} under a different "
                f"policy {old}; refusing to mix outputs")
    path.write_text(json.dumps(asdict(policy), sort_keys=True) + "\n")


def augment_dataset(vc: VcModel, train: DatasetManifest, spk: SpeakerEncoder,
                    policy: AugmentationPolicy, out_dir: Path | str, *, iteration: int | None = None,
                    mels: dict | None = None, feature_config: FeatureConfig = FeatureConfig()
                    ) -> DatasetManifest:
    """Build the augmented manifest: source transcripts, reference speaker labels, mel-backed items."""
    out_dir = Path(os.path.abspath(out_dir))
    try:
        (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create augmentation directory {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"augmentation directory {out_dir} is not writable")
    covered = vc.provenance.get("speakers")
    if covered is not None and not set(train.speakers) <= set(covered):
        raise ValueError("VC model was not trained on all speakers of the manifest")
    _guard_policy(out_dir, policy)

    if mels is None:
        mels = load_mels(train, feature_config)
    speakers = train.speakers
    centroids = speaker_centroids(spk, train, mels)
    vc_hash = vc.model_hash()
    items = []
    for u in train.utterances:
        refs = sample_references(speakers, u.speaker, policy.pairs_per_utterance, _item_rng(policy.seed, u.id))
        for k, ref in enumerate(refs):
            aug_id = f"{u.id}~{ref}~{k}" if iteration is None else f"{u.id}~{ref}~{k}@{iteration}"
            mel_path = out_dir / "mels" / f"{aug_id}.mel"
            write_matrix(mel_path, convert(vc, mels[u.id], centroids[ref]))
            items.append(Utterance(
                id=aug_id, transcript=u.transcript, speaker=ref, duration_s=u.duration_s,
                mel_path=mel_path,
                extra={"source_id": u.id, "reference_speaker": ref, "vc_hash": vc_hash,
                       "iteration": iteration},
            ))
    manifest = DatasetManifest(tuple(items), train.vocabulary, "augmented", train.sample_rate_hz)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
