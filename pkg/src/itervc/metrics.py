"""Word error rate and the VC evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class WerReport:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    n_ref_words: int
    per_utterance: list[dict] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def record(self, **extra) -> dict:
        out = {"wer": self.wer, "substitutions": self.substitutions,
               "insertions": self.insertions, "deletions": self.deletions,
               "n_words": self.n_ref_words, "n_utts": len(self.per_utterance)}
        out.update(extra)
        return out


def word_error_rate(reference: Sequence[str], hypothesis: Sequence[str]) -> tuple[float, int, int, int]:
    """Levenshtein alignment over tokens, returning (wer, S, I, D).

    Among minimum-cost alignments the one with the fewest insertions plus
    deletions (i.e. the most substitutions) is reported.
    """
    ref = list(reference.split() if isinstance(reference, str) else reference)
    hyp = list(hypothesis.split() if isinstance(hypothesis, str) else hypothesis)
    if not ref:
        raise ValueError("reference transcript is empty")
    n, m = len(ref), len(hyp)
    # cost[i][j] = (edits, insertions + deletions) for ref[:i] vs hyp[:j]
    cost = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, i)
    for j in range(1, m + 1):
        cost[0][j] = (j, j)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, g = cost[i - 1][j - 1]
            diag = (e + (ref[i - 1] != hyp[j - 1]), g)
            e, g = cost[i - 1][j]
            up = (e + 1, g + 1)
            e, g = cost[i][j - 1]
            left = (e + 1, g + 1)
            cost[i][j] = min(diag, up, left)

    s = ins = d = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0:
            e, g = cost[i - 1][j - 1]
            miss = ref[i - 1] != hyp[j - 1]
            if (e + miss, g) == here:
                s += miss
                i, j = i - 1, j - 1
                continue
        if i > 0:
            e, g = cost[i - 1][j]
            if (e + 1, g + 1) == here:
                d += 1
                i -= 1
                continue
        ins += 1
        j -= 1
    return (s + ins + d) / n, s, ins, d


def corpus_wer(references: Sequence[Sequence[str]], hypotheses: Sequence[Sequence[str]],
               ids: Sequence[str] | None = None) -> WerReport:
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise ValueError("no utterances to score")
    S = I = D = N = 0
    rows = []
    for k, (r, h) in enumerate(zip(references, hypotheses)):
        w, s, i, d = word_error_rate(r, h)
        S, I, D, N = S + s, I + i, D + d, N + len(r)
        rows.append({"id": ids[k] if ids else k, "wer": w, "S": s, "I": i, "D": d,
                     "ref": " ".join(r), "hyp": " ".join(h)})
    return WerReport((S + I + D) / N, S, I, D, N, rows)


@dataclass
class ConversionReport:
    wer: float
    identity_mean: float
    n_pairs: int
    wer_report: WerReport

    def record(self) -> dict:
        return {"wer": self.wer, "identity_mean": self.identity_mean, "n_pairs": self.n_pairs,
                "substitutions": self.wer_report.substitutions,
                "insertions": self.wer_report.insertions,
                "deletions": self.wer_report.deletions,
                "n_words": self.wer_report.n_ref_words}


def evaluate_conversion(vc, asr_eval, spk, eval_manifest, seed: int, *, mels=None,
                        pairs_per_utterance: int = 1, feature_config=None) -> ConversionReport:
    """Convert held-out utterances to other held-out speakers and score them.

    WER comes from ``asr_eval`` decoding the converted mels against the source
    transcripts; identity is the cosine similarity between the converted
    sample's embedding and the reference speaker's centroid.
    """
    from . import asr as asr_mod
    from . import speaker as spk_mod
    from . import vc as vc_mod
    from .features import FeatureConfig, load_mels

    if asr_eval.model_hash() == vc.provenance.get("asr_hash"):
        raise ValueError("evaluation ASR is the ASR the VC model was trained against")
    if mels is None:
        mels = load_mels(eval_manifest, feature_config or FeatureConfig())
    groups = eval_manifest.by_speaker()
    speakers = sorted(groups)
    if len(speakers) < 2:
        raise ValueError("evaluation manifest needs at least two speakers")
    centroids = {s: spk_mod.embed(spk, [mels[u.id] for u in groups[s]]) for s in speakers}

    rng = np.random.default_rng(seed)
    refs, hyps, ids, sims = [], [], [], []
    converted = []
    for u in eval_manifest.utterances:
        others = [s for s in speakers if s != u.speaker]
        for k in range(pairs_per_utterance):
            tgt = others[int(rng.integers(len(others)))]
            out = vc_mod.convert(vc, mels[u.id], centroids[tgt])
            converted.append(out)
            sims.append(spk_mod.identity_similarity(spk_mod.embed(spk, [out]), centroids[tgt]))
            refs.append(u.transcript)
            ids.append(f"{u.id}->{tgt}#{k}")
    hyps = asr_mod.transcribe(asr_eval, converted)
    report = corpus_wer(refs, hyps, ids)
    return ConversionReport(report.wer, float(np.mean(sims)), len(refs), report)


def format_table(rows: Sequence[dict]) -> str:
    """Plain-text table with one row per iteration."""
    header = f"{'Iteration':>9} | {'ASR val WER':>11} | {'VC WER':>8} | {'Identity':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['i']:>9} | {100 * r['asr_val_wer']:>11.2f} | "
                     f"{100 * r['vc_eval_wer']:>8.2f} | {r['identity_mean']:>8.4f}")
    return "\n".join(lines)


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)
