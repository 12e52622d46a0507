"""Corpus representation, synthetic corpus generation and manifest I/O.

A manifest is a line-delimited JSON file. The first line is a header record
carrying the vocabulary, sample rate and tag; every following line is one
utterance. Audio is 16-bit PCM mono WAV at 24 kHz.
"""

from __future__ import annotations

import hashlib
import json
import os
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SAMPLE_RATE = 24000
TAGS = ("base", "target", "augmented", "validation")
# nominal token unit length in seconds
UNIT_SECONDS = 0.150
HOP_SAMPLES = 256

# unit inventory is shared by every corpus so that base/target corpora speak
# the same "language"; only transcripts and speakers depend on the corpus seed
_LANGUAGE_SEED = 20230601


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class TokenVocabulary:
    tokens: tuple[str, ...]
    blank_index: int = 0

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if "<blank>" in self.tokens:
            raise ValueError("blank symbol must not be a lexical token")
        if not 0 <= self.blank_index <= len(self.tokens):
            raise ValueError(f"blank_index {self.blank_index} out of range")

    @property
    def size(self) -> int:
        """Number of output classes including blank."""
        return len(self.tokens) + 1

    def symbols(self) -> list[str]:
        out = list(self.tokens)
        out.insert(self.blank_index, "<blank>")
        return out

    def encode(self, transcript: Sequence[str]) -> list[int]:
        table = {s: i for i, s in enumerate(self.symbols())}
        try:
            return [table[t] for t in transcript]
        except KeyError as e:
            raise ValueError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        syms = self.symbols()
        return tuple(syms[i] for i in ids if i != self.blank_index)

    @classmethod
    def letters(cls, n: int) -> "TokenVocabulary":
        if not 1 <= n <= 26:
            raise ValueError("vocabulary size must be in [1, 26]")
        return cls(tuple(chr(ord("a") + i) for i in range(n)))


@dataclass(frozen=True)
class Utterance:
    id: str
    transcript: tuple[str, ...]
    speaker: str
    duration_s: float
    audio_path: Path | None = None
    # mel-backed items (VC augmentation output)
    mel_path: Path | None = None
    extra: dict = field(default_factory=dict, compare=True, hash=False)

    @property
    def text(self) -> str:
        return " ".join(self.transcript)


@dataclass(frozen=True)
class DatasetManifest:
    utterances: tuple[Utterance, ...]
    vocabulary: TokenVocabulary
    tag: str
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown manifest tag {self.tag!r}")
        seen = set()
        for u in self.utterances:
            if u.id in seen:
                raise ManifestError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            if not u.transcript:
                raise ManifestError(f"utterance {u.id!r} has empty transcript")
            bad = [t for t in u.transcript if t not in self.vocabulary.tokens]
            if bad:
                raise ManifestError(f"utterance {u.id!r} uses unknown tokens {bad}")
            if not u.duration_s > 0:
                raise ManifestError(f"utterance {u.id!r} has non-positive duration")

    def __len__(self):
        return len(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def by_speaker(self) -> dict[str, list[Utterance]]:
        out: dict[str, list[Utterance]] = {}
        for u in self.utterances:
            out.setdefault(u.speaker, []).append(u)
        return out

    def with_tag(self, tag: str) -> "DatasetManifest":
        return replace(self, tag=tag)

    def merged(self, other: "DatasetManifest", tag: str | None = None) -> "DatasetManifest":
        if other.vocabulary != self.vocabulary:
            raise ValueError("vocabulary mismatch")
        return DatasetManifest(self.utterances + other.utterances, self.vocabulary,
                               tag or self.tag, self.sample_rate_hz)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_speakers: int = 10
    n_utterances_per_speaker: int = 40
    vocab_size: int = 10
    tokens_per_utterance: tuple[int, int] = (4, 8)
    seed: int = 0
    name: str = "target"

    def validate(self):
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be >= 2")
        if self.n_utterances_per_speaker < 1:
            raise ValueError("n_utterances_per_speaker must be >= 1")
        if not 4 <= self.vocab_size <= 26:
            raise ValueError("vocab_size must be in [4, 26]")
        lo, hi = self.tokens_per_utterance
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid tokens_per_utterance range {self.tokens_per_utterance}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not self.name or "/" in self.name:
            raise ValueError(f"invalid corpus name {self.name!r}")


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class _Unit:
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    glide: float  # relative F2 movement across the unit
    voiced: float  # harmonic vs noise mix
    noise_center: float
    noise_width: float


@dataclass(frozen=True)
class _Speaker:
    f0: float
    warp: float  # formant scaling factor
    tilt_db_per_oct: float
    eq_centers: tuple[float, ...]
    eq_gains_db: tuple[float, ...]

    def gain(self, freqs: np.ndarray) -> np.ndarray:
        octs = np.log2(np.maximum(freqs, 50.0) / 500.0)
        db = self.tilt_db_per_oct * octs
        for c, g in zip(self.eq_centers, self.eq_gains_db):
            db = db + g * np.exp(-0.5 * (np.log2(np.maximum(freqs, 50.0) / c) / 0.4) ** 2)
        return 10.0 ** (db / 20.0)


def _unit_inventory(vocab_size: int) -> list[_Unit]:
    rng = np.random.default_rng(_LANGUAGE_SEED)
    f1_grid = np.linspace(300, 850, 4)
    f2_grid = np.linspace(900, 2600, 7)
    combos = [(a, b) for a in f1_grid for b in f2_grid]
    order = rng.permutation(len(combos))
    units = []
    for k in range(vocab_size):
        f1, f2 = combos[order[k]]
        f3 = 2800 + 400 * rng.random()
        units.append(_Unit(
            formants=(f1, f2, f3),
            bandwidths=(90.0, 140.0, 220.0),
            glide=float(rng.choice([-0.25, 0.0, 0.25])),
            voiced=float(rng.choice([1.0, 1.0, 0.7])),
            noise_center=float(3000 + 6000 * rng.random()),
            noise_width=float(600 + 800 * rng.random()),
        ))
    return units


def _speaker_params(rng: np.random.Generator) -> _Speaker:
    return _Speaker(
        f0=float(rng.uniform(95, 250)),
        warp=float(rng.uniform(0.88, 1.15)),
        tilt_db_per_oct=float(rng.uniform(-4, 1)),
        eq_centers=tuple(float(c) for c in rng.uniform(400, 6000, 3)),
        eq_gains_db=tuple(float(g) for g in rng.uniform(-6, 6, 3)),
    )


def _envelope(unit: _Unit, freqs: np.ndarray, warp: float, glide_pos: np.ndarray) -> np.ndarray:
    """Token formant envelope after speaker warping. freqs: (..., H), glide_pos: (T, 1)."""
    env = np.full(np.broadcast_shapes(freqs.shape, glide_pos.shape), 0.01)
    amps = (1.0, 0.6, 0.25)
    for j, (fc, bw, a) in enumerate(zip(unit.formants, unit.bandwidths, amps)):
        fc = fc * warp
        if j == 1:
            fc = fc * (1.0 + unit.glide * (glide_pos - 0.5))
        env = env + a * np.exp(-0.5 * ((freqs - fc) / (bw * warp)) ** 2)
    return env


def _synth_unit(unit: _Unit, spk: _Speaker, n: int, f0: float, phase: np.ndarray,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(n) / SAMPLE_RATE
    pos = (np.arange(n) / max(n - 1, 1))[:, None]
    n_harm = int((SAMPLE_RATE / 2 - 200) // f0)
    h = np.arange(1, n_harm + 1)[None, :]
    freqs = f0 * h
    amps = _envelope(unit, freqs, spk.warp, pos) * spk.gain(freqs)
    ph = phase[:n_harm][None, :] + 2 * np.pi * freqs * t[:, None]
    voiced = (amps * np.sin(ph)).sum(axis=1) * unit.voiced
    new_phase = phase.copy()
    new_phase[:n_harm] = (ph[-1] + 2 * np.pi * freqs[0] / SAMPLE_RATE) % (2 * np.pi)

    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    shape = np.exp(-0.5 * ((f - unit.noise_center * spk.warp) / unit.noise_width) ** 2)
    noise = np.fft.irfft(spec * shape * spk.gain(f), n)
    noise = noise / (np.std(noise) + 1e-9) * 0.6 * (1.0 - unit.voiced + 0.15)

    ramp = min(int(0.015 * SAMPLE_RATE), n // 4)
    win = np.ones(n)
    win[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    win[n - ramp:] = win[:ramp][::-1]
    return (voiced + noise) * win, new_phase


def synthesize_utterance(transcript_ids: Sequence[int], units: list[_Unit], spk: _Speaker,
                         rng: np.random.Generator) -> np.ndarray:
    f0_utt = spk.f0 * rng.uniform(0.95, 1.05)
    phase = np.zeros(400)
    lead = int(rng.uniform(0.04, 0.08) * SAMPLE_RATE)
    tail = int(rng.uniform(0.04, 0.08) * SAMPLE_RATE)
    parts = [np.zeros(lead)]
    for k, tok in enumerate(transcript_ids):
        n = int(UNIT_SECONDS * rng.uniform(0.85, 1.15) * SAMPLE_RATE)
        f0 = f0_utt * (1.0 - 0.08 * k / max(len(transcript_ids), 1)) * rng.uniform(0.97, 1.03)
        seg, phase = _synth_unit(units[tok], spk, n, f0, phase, rng)
        parts.append(seg * rng.uniform(0.8, 1.2))
    parts.append(np.zeros(tail))
    y = np.concatenate(parts)
    y = y / (np.max(np.abs(y)) + 1e-9) * 0.7
    y = y + rng.standard_normal(len(y)) * 3e-4
    return y


def write_wav(path: Path, y: np.ndarray):
    pcm = np.clip(np.round(y * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


def read_wav(path: Path | str) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        if w.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()}")
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir: Path | str) -> DatasetManifest:
    """Write waveforms plus ``manifest.jsonl`` for a synthetic corpus into ``out_dir``.

    Each token is a ~150 ms formant/noise unit; each speaker applies a fixed
    formant warp, spectral tilt/EQ and pitch offset to the unit stream. The
    output is a pure function of ``spec``.
    """
    spec.validate()
    out_dir = Path(os.path.abspath(out_dir))
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create corpus directory {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"corpus directory {out_dir} is not writable")

    vocab = TokenVocabulary.letters(spec.vocab_size)
    units = _unit_inventory(spec.vocab_size)
    root = np.random.SeedSequence([spec.seed, *spec.name.encode()])
    spk_ss, *utt_ss = root.spawn(1 + spec.n_speakers)
    spk_rng = np.random.default_rng(spk_ss)
    speakers = [_speaker_params(spk_rng) for _ in range(spec.n_speakers)]

    lo, hi = spec.tokens_per_utterance
    utts = []
    for si, spk in enumerate(speakers):
        spk_id = f"{spec.name}-spk{si:02d}"
        for ui, ss in enumerate(utt_ss[si].spawn(spec.n_utterances_per_speaker)):
            rng = np.random.default_rng(ss)
            n_tok = int(rng.integers(lo, hi + 1))
            ids = rng.integers(0, spec.vocab_size, n_tok)
            y = synthesize_utterance(ids, units, spk, rng)
            utt_id = f"{spk_id}-{ui:04d}"
            rel = Path("wav") / f"{utt_id}.wav"
            write_wav(out_dir / rel, y)
            utts.append(Utterance(
                id=utt_id,
                transcript=tuple(vocab.tokens[i] for i in ids),
                speaker=spk_id,
                duration_s=len(y) / SAMPLE_RATE,
                audio_path=out_dir / rel,
            ))
    manifest = DatasetManifest(tuple(utts), vocab, "base" if spec.name == "base" else "target")
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# persistence


def _rel(path: Path | None, base: Path) -> str | None:
    if path is None:
        return None
    try:
        return os.path.relpath(path, base)
    except ValueError:
        return str(path)


def save_manifest(manifest: DatasetManifest, path: Path | str):
    path = Path(path)
    base = path.parent.resolve()
    lines = [json.dumps({
        "vocabulary": list(manifest.vocabulary.tokens),
        "blank_index": manifest.vocabulary.blank_index,
        "sample_rate": manifest.sample_rate_hz,
        "tag": manifest.tag,
    }, sort_keys=True)]
    for u in manifest.utterances:
        rec = {
            "id": u.id,
            "audio": _rel(u.audio_path and Path(u.audio_path).resolve(), base),
            "text": u.text,
            "speaker": u.speaker,
            "duration": u.duration_s,
        }
        if u.mel_path is not None:
            rec["mel"] = _rel(Path(u.mel_path).resolve(), base)
        rec.update(u.extra)
        lines.append(json.dumps(rec, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


_CORE_FIELDS = {"id", "audio", "text", "speaker", "duration", "mel"}


def load_manifest(path: Path | str, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    base = Path(os.path.abspath(path.parent))
    with open(path) as f:
        raw = f.read().splitlines()
    if not raw:
        raise ManifestError(f"{path}: empty manifest")

    def parse(lineno: int, line: str) -> dict:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise ManifestError(f"{path}:{lineno}: record must be an object")
        return rec

    header = parse(1, raw[0])
    for key in ("vocabulary", "sample_rate", "tag"):
        if key not in header:
            raise ManifestError(f"{path}:1: header missing field {key!r}")
    if header["sample_rate"] != SAMPLE_RATE:
        raise ManifestError(f"{path}:1: sample_rate must be {SAMPLE_RATE}")
    if header["tag"] not in TAGS:
        raise ManifestError(f"{path}:1: unknown tag {header['tag']!r}")
    try:
        vocab = TokenVocabulary(tuple(header["vocabulary"]), header.get("blank_index", 0))
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{path}:1: bad vocabulary ({e})") from None

    utts = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        rec = parse(lineno, line)
        for key in ("id", "text", "speaker", "duration"):
            if key not in rec:
                raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
        uid = rec["id"]
        if uid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        seen.add(uid)
        if not isinstance(rec["text"], str) or not rec["text"].split():
            raise ManifestError(f"{path}:{lineno}: empty transcript for {uid!r}")
        transcript = tuple(rec["text"].split())
        unknown = [t for t in transcript if t not in vocab.tokens]
        if unknown:
            raise ManifestError(f"{path}:{lineno}: tokens {unknown} not in vocabulary")
        if not isinstance(rec["duration"], (int, float)) or rec["duration"] <= 0:
            raise ManifestError(f"{path}:{lineno}: duration must be positive")
        audio = Path(os.path.normpath(base / rec["audio"])) if rec.get("audio") else None
        mel = Path(os.path.normpath(base / rec["mel"])) if rec.get("mel") else None
        if audio is None and mel is None:
            raise ManifestError(f"{path}:{lineno}: utterance {uid!r} has neither audio nor mel")
        if check_files:
            for p in (audio, mel):
                if p is not None and not p.exists():
                    raise ManifestError(f"{path}:{lineno}: missing file {p} for utterance {uid!r}")
        extra = {k: v for k, v in rec.items() if k not in _CORE_FIELDS}
        utts.append(Utterance(uid, transcript, rec["speaker"], float(rec["duration"]),
                              audio, mel, extra))
    return DatasetManifest(tuple(utts), vocab, header["tag"])


def manifest_hash(manifest: DatasetManifest) -> str:
    """Content hash over utterance records (ids, transcripts, speakers, provenance)."""
    h = hashlib.sha256(manifest.tag.encode())
    for u in manifest.utterances:
        h.update(json.dumps([u.id, u.text, u.speaker, u.extra], sort_keys=True).encode())
    return h.hexdigest()[:16]


def split_by_speaker(manifest: DatasetManifest, held_out_speakers: Iterable[str]
                     ) -> tuple[DatasetManifest, DatasetManifest]:
    held = set(held_out_speakers)
    speakers = set(manifest.speakers)
    if not held:
        raise ValueError("held-out speaker set is empty")
    unknown = held - speakers
    if unknown:
        raise ValueError(f"unknown speakers {sorted(unknown)}")
    if held == speakers:
        raise ValueError("cannot hold out every speaker")
    train = tuple(u for u in manifest.utterances if u.speaker not in held)
    ev = tuple(u for u in manifest.utterances if u.speaker in held)
    return (DatasetManifest(train, manifest.vocabulary, manifest.tag, manifest.sample_rate_hz),
            DatasetManifest(ev, manifest.vocabulary, "validation", manifest.sample_rate_hz))
