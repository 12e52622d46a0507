"""The alternating ASR / VC loop with on-disk checkpoints and resume.

Experiment directory layout::

    config.json            resolved config snapshot (+ its hash)
    corpus/{target,base}/  generated corpora (unless manifests are given)
    shared/                normalization stats, speaker encoder(s), evaluator ASR, A_base
    iter_000/              asr.pt, vc.pt (initial pair), metrics.json
    iter_00k/augmented/    the augmented set used to fine-tune A_k
    history.jsonl          one IterationRecord per completed iteration
    report.txt             iteration table
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import filelock
import numpy as np

from . import asr as asr_mod
from . import speaker as spk_mod
from . import vc as vc_mod
from .augment import augment_dataset
from .config import ExperimentConfig, from_tree
from .data import (DatasetManifest, generate_synthetic_corpus, load_manifest, manifest_hash,
                   split_by_speaker)
from .features import NormalizationStats, fit_normalization_arrays, load_mels
from .metrics import evaluate_conversion, format_table

log = logging.getLogger(__name__)

HISTORY_FILE = "history.jsonl"


class ExperimentLockedError(RuntimeError):
    pass


@dataclass
class IterationRecord:
    i: int
    asr_checkpoint: str
    asr_hash: str
    vc_checkpoint: str
    vc_hash: str
    augmented_manifest: str | None
    augmented_hash: str | None
    metrics: dict
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        return cls(**d)


@dataclass
class IterationHistory:
    records: list[IterationRecord] = field(default_factory=list)
    convergence_epsilon: float = 0.01
    max_iterations: int = 4

    @property
    def wers(self) -> list[float]:
        return [r.metrics["asr_val_wer"] for r in self.records]

    def __len__(self):
        return len(self.records)

    def validate(self):
        for k, r in enumerate(self.records):
            if r.i != k:
                raise ValueError(f"history indices not contiguous: record {k} has i={r.i}")
            for key, v in r.metrics.items():
                if isinstance(v, float) and not np.isfinite(v):
                    raise ValueError(f"record {k}: metric {key} is not finite")


def has_converged(history, epsilon: float = 0.01) -> bool:
    """True when the latest relative validation-WER improvement is below ``epsilon``.

    Regressions count as converged. ``history`` is an IterationHistory or a
    plain sequence of WERs.
    """
    wers = history.wers if isinstance(history, IterationHistory) else list(history)
    if len(wers) < 2:
        raise ValueError("convergence needs at least two iterations")
    prev, cur = wers[-2], wers[-1]
    if prev <= 0:
        return True
    return (prev - cur) / prev < epsilon


def read_history(exp_dir: Path | str) -> list[IterationRecord]:
    path = Path(exp_dir) / HISTORY_FILE
    if not path.exists():
        return []
    return [IterationRecord.from_dict(json.loads(line))
            for line in path.read_text().splitlines() if line.strip()]


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_snapshot(exp_dir: Path | str) -> ExperimentConfig:
    """Config an experiment directory was created with."""
    path = Path(exp_dir) / "config.json"
    if not path.exists():
        raise FileNotFoundError(f"{exp_dir} has no config.json; is it an experiment directory?")
    snap = json.loads(path.read_text())
    config = from_tree(snap["config"])
    if config.digest() != snap["config_hash"]:
        raise ValueError(f"{path}: stored hash does not match its config")
    return config


def write_history(exp_dir: Path, records: Sequence[IterationRecord]):
    _write_atomic(exp_dir / HISTORY_FILE, "".join(r.to_json() + "\n" for r in records))


class Experiment:
    """State shared by every stage of one run: corpora, features, frozen helpers."""

    def __init__(self, config: ExperimentConfig, out_dir: Path | str):
        self.config = config
        self.dir = Path(out_dir)
        self.config_hash = config.digest()
        self.features = config.features.build()
        self.mels: dict[str, np.ndarray] = {}

    # -- setup -------------------------------------------------------------

    def write_snapshot(self):
        path = self.dir / "config.json"
        snap = {"config": json.loads(self.config.canonical_json()), "config_hash": self.config_hash}
        if path.exists():
            old = json.loads(path.read_text())
            if old.get("config_hash") != self.config_hash:
                raise ValueError(f"{self.dir} was created with config {old.get('config_hash')}, "
                                 f"not {self.config_hash}")
            return
        _write_atomic(path, json.dumps(snap, sort_keys=True, indent=1) + "\n")

    def _corpus(self, name: str) -> DatasetManifest:
        c = self.config.corpus
        given = c.target_manifest if name == "target" else c.base_manifest
        if given:
            return load_manifest(given)
        spec = (c.target if name == "target" else c.base).to_spec(name)
        out = self.dir / "corpus" / name
        marker = out / "spec.json"
        if marker.exists() and json.loads(marker.read_text()) == asdict(spec) and (out / "manifest.jsonl").exists():
            return load_manifest(out / "manifest.jsonl")
        manifest = generate_synthetic_corpus(spec, out)
        marker.write_text(json.dumps(asdict(spec), sort_keys=True))
        return manifest

    def prepare(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        target = self._corpus("target")
        self.base = self._corpus("base")
        held = self.config.corpus.held_out_speakers or target.speakers[-self.config.corpus.n_held_out:]
        self.train, self.val = split_by_speaker(target, held)
        for m in (self.base, self.train, self.val):
            self.mels.update(load_mels(m, self.features))
        stats_path = self.dir / "shared" / "stats.json"
        if stats_path.exists():
            self.stats = NormalizationStats.from_dict(json.loads(stats_path.read_text()))
        else:
            self.stats = fit_normalization_arrays(self.mels[u.id] for u in self.train.utterances)
            stats_path.parent.mkdir(parents=True, exist_ok=True)
            _write_atomic(stats_path, json.dumps(self.stats.to_dict()))
        return self

    # -- cached stages ------------------------------------------------------

    def _cached(self, path: Path, build, save, load):
        if not path.exists():
            model = build()
            save(model, path, config_hash=self.config_hash)
        return load(path)

    def speaker_encoder(self, role: str = "conditioning") -> spk_mod.SpeakerEncoder:
        cfg = self.config.speaker
        if role == "metric" and not cfg.separate_metric_encoder:
            role = "conditioning"
        seed = self.config.module_seed(f"speaker.{role}")
        return self._cached(
            self.dir / "shared" / f"speaker_{role}.pt",
            lambda: spk_mod.train_speaker_encoder(self.train, cfg.build(seed), stats=self.stats, mels=self.mels),
            spk_mod.save_speaker, spk_mod.load_speaker)

    def asr_config(self):
        return self.config.asr.build(self.config.module_seed("asr"))

    def eval_asr(self) -> asr_mod.AsrModel:
        """Evaluator ASR: disjoint seed, pooled base + target mix, trained from scratch."""
        cfg = self.config.asr.build(self.config.module_seed("eval_asr"))
        cfg.max_steps = self.config.eval_asr.max_steps
        pooled = self.base.merged(self.train, tag="target")
        return self._cached(
            self.dir / "shared" / "asr_eval.pt",
            lambda: asr_mod.train_asr(pooled, self.val, cfg, stats=self.stats, mels=self.mels),
            asr_mod.save_asr, asr_mod.load_asr)

    def base_asr(self) -> asr_mod.AsrModel:
        return self._cached(
            self.dir / "shared" / "asr_base.pt",
            lambda: asr_mod.train_asr(self.base, self.val, self.asr_config(), stats=self.stats, mels=self.mels),
            asr_mod.save_asr, asr_mod.load_asr)

    def train_vc(self, asr: asr_mod.AsrModel, spk) -> vc_mod.VcModel:
        cfg = self.config.vc.build(self.config.module_seed("vc"), self.config.speaker.embedding_dim)
        return vc_mod.train_vc(self.train, asr, spk, cfg, stats=self.stats, mels=self.mels)

    def evaluate(self, i: int, asr: asr_mod.AsrModel, vc, asr_eval, spk_metric) -> dict:
        wer = asr_mod.evaluate_wer(asr, self.val, self.mels)
        conv = evaluate_conversion(vc, asr_eval, spk_metric, self.val, self.config.module_seed("evaluate"),
                                   mels=self.mels,
                                   pairs_per_utterance=self.config.orchestrator.eval_pairs_per_utterance)
        report = {
            "asr_report": wer.record(model_id=asr.model_hash(), manifest_tag=self.val.tag),
            "vc_report": {**conv.record(), "model_id": vc.model_hash(), "evaluator_id": asr_eval.model_hash()},
            "config_hash": self.config_hash,
        }
        _write_atomic(self._iter_dir(i) / "metrics.json", json.dumps(report, sort_keys=True, indent=1) + "\n")
        return {"asr_val_wer": wer.wer, "vc_eval_wer": conv.wer, "identity_mean": conv.identity_mean}

    def _iter_dir(self, i: int) -> Path:
        d = self.dir / f"iter_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _rel(self, p: Path) -> str:
        return os.path.relpath(p, self.dir)

    def load_record_models(self, rec: IterationRecord):
        a = asr_mod.load_asr(self.dir / rec.asr_checkpoint)
        v = vc_mod.load_vc(self.dir / rec.vc_checkpoint)
        if a.model_hash() != rec.asr_hash or v.model_hash() != rec.vc_hash:
            raise ValueError(f"checkpoints of iteration {rec.i} do not match the history file")
        return a, v

    def augmented_manifests(self, records: Sequence[IterationRecord]) -> list[DatasetManifest]:
        return [load_manifest(self.dir / r.augmented_manifest) for r in records if r.augmented_manifest]

    # -- one iteration --------------------------------------------------------

    def iteration(self, i: int, prev: tuple | None, records: Sequence[IterationRecord],
                  spk, spk_metric, asr_eval) -> IterationRecord:
        d = self._iter_dir(i)
        cfg = self.asr_config()
        aug_path = aug_hash = None
        if prev is None:
            # first recognizer: base recipe, then fine-tune on the target domain alone
            asr_new = asr_mod.finetune_asr(self.base_asr(), self.base, self.train, None, cfg, self.val,
                                           mels=self.mels)
        else:
            asr_prev, vc_prev = prev
            aug = augment_dataset(vc_prev, self.train, spk,
                                  self.config.augment.build(self.config.module_seed("augment")),
                                  d / "augmented", iteration=i, feature_config=self.features,
                                  mels=self.mels)
            aug = load_manifest(d / "augmented" / "manifest.jsonl")
            self.mels.update(load_mels(aug, self.features))
            aug_path, aug_hash = self._rel(d / "augmented" / "manifest.jsonl"), manifest_hash(aug)
            pool = aug
            if self.config.orchestrator.include_history:
                for older in self.augmented_manifests(records):
                    self.mels.update(load_mels(older, self.features))
                    pool = older.merged(pool, tag="augmented")
            asr_new = asr_mod.finetune_asr(asr_prev, self.base, self.train, pool, cfg, self.val,
                                           mels=self.mels)
            asr_new.provenance["augmented_hash"] = aug_hash
        asr_new.iteration = i
        asr_mod.save_asr(asr_new, d / "asr.pt", config_hash=self.config_hash)
        asr_new = asr_mod.load_asr(d / "asr.pt")

        vc_new = self.train_vc(asr_new, spk)
        vc_new.iteration = i
        vc_mod.save_vc(vc_new, d / "vc.pt", config_hash=self.config_hash)
        vc_new = vc_mod.load_vc(d / "vc.pt")

        metrics = self.evaluate(i, asr_new, vc_new, asr_eval, spk_metric)
        log.info("iteration %d: %s", i, metrics)
        return IterationRecord(i, self._rel(d / "asr.pt"), asr_new.model_hash(), self._rel(d / "vc.pt"),
                               vc_new.model_hash(), aug_path, aug_hash, metrics, self.config_hash)


def run_iterations(config: ExperimentConfig, out_dir: Path | str, resume: bool = True) -> IterationHistory:
    """Run (or continue) the alternating loop until convergence or the iteration cap."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout:
        raise ExperimentLockedError(f"{out_dir} is in use by another run") from None
    try:
        exp = Experiment(config, out_dir)
        exp.write_snapshot()
        records = read_history(out_dir)
        if records and not resume:
            raise ValueError(f"{out_dir} already holds a history; resume it or pick a new directory")
        exp.prepare()
        spk = exp.speaker_encoder("conditioning")
        spk_metric = exp.speaker_encoder("metric")
        asr_eval = exp.eval_asr()
        orch = config.orchestrator
        history = IterationHistory(records, orch.epsilon, orch.max_iterations)
        history.validate()
        prev = exp.load_record_models(records[-1]) if records else None
        while True:
            if records:
                if len(records) - 1 >= orch.max_iterations:
                    break
                if len(records) >= 2 and has_converged(history, orch.epsilon):
                    break
            i = len(records)
            rec = exp.iteration(i, prev, records, spk, spk_metric, asr_eval)
            records.append(rec)
            write_history(out_dir, records)
            prev = exp.load_record_models(rec)
        _write_atomic(out_dir / "report.txt", format_table([{"i": r.i, **r.metrics} for r in records]) + "\n")
        return history
    finally:
        lock.release()


def verify_provenance(exp_dir: Path | str) -> list[str]:
    """Check the checkpoint chain of a finished run; returns a list of problems (empty if sound)."""
    exp_dir = Path(exp_dir)
    problems = []
    records = read_history(exp_dir)
    for r in records:
        a = asr_mod.load_asr(exp_dir / r.asr_checkpoint)
        v = vc_mod.load_vc(exp_dir / r.vc_checkpoint)
        if a.model_hash() != r.asr_hash:
            problems.append(f"iteration {r.i}: ASR checkpoint hash mismatch")
        if v.provenance.get("asr_hash") != r.asr_hash:
            problems.append(f"iteration {r.i}: VC was not trained against A_{r.i}")
        if r.i > 0:
            aug = load_manifest(exp_dir / r.augmented_manifest)
            if manifest_hash(aug) != r.augmented_hash:
                problems.append(f"iteration {r.i}: augmented manifest changed on disk")
            if a.provenance.get("augmented_hash") != r.augmented_hash:
                problems.append(f"iteration {r.i}: A_{r.i} was not fine-tuned on its augmented set")
            prev = records[r.i - 1]
            if a.provenance.get("parent_hash") != prev.asr_hash:
                problems.append(f"iteration {r.i}: A_{r.i} is not fine-tuned from A_{r.i - 1}")
            if {u.extra.get("vc_hash") for u in aug.utterances} != {prev.vc_hash}:
                problems.append(f"iteration {r.i}: augmented set not produced by V_{r.i - 1}")
    return problems
