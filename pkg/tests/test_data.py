import json

import pytest
from hypothesis import given, settings, strategies as st

from itervc.data import (DatasetManifest, ManifestError, SyntheticCorpusSpec, TokenVocabulary,
                         Utterance, generate_synthetic_corpus, load_manifest, manifest_hash,
                         read_wav, save_manifest, split_by_speaker)

SMALL = SyntheticCorpusSpec(n_speakers=3, n_utterances_per_speaker=2, vocab_size=5, seed=7, name="small")


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_counts_follow_corpus_settings(tmp_path):
    m = generate_synthetic_corpus(SMALL, tmp_path)
    assert len(m) == 6
    assert len(m.speakers) == 3
    assert m.vocabulary.tokens == ("a", "b", "c", "d", "e")
    for u in m.utterances:
        lo, hi = SMALL.tokens_per_utterance
        assert lo <= len(u.transcript) <= hi
        assert u.audio_path.exists()


def test_regeneration_is_byte_identical(tmp_path):
    generate_synthetic_corpus(SMALL, tmp_path / "a")
    generate_synthetic_corpus(SMALL, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a.keys() == b.keys()
    assert a == b


def test_different_seed_changes_transcripts(tmp_path):
    m7 = generate_synthetic_corpus(SMALL, tmp_path / "s7")
    m8 = generate_synthetic_corpus(SyntheticCorpusSpec(3, 2, 5, seed=8, name="small"), tmp_path / "s8")
    assert any(a.transcript != b.transcript for a, b in zip(m7.utterances, m8.utterances))


def test_audio_matches_duration(tiny_corpus):
    manifest, _ = tiny_corpus
    for u in manifest.utterances:
        y = read_wav(u.audio_path)
        assert abs(len(y) / 24000 - u.duration_s) <= 256 / 24000
        assert abs(y).max() <= 1.0


@pytest.mark.parametrize("field,value", [("n_speakers", 1), ("vocab_size", 3), ("vocab_size", 27),
                                         ("tokens_per_utterance", (5, 2)), ("seed", -1)])
def test_invalid_spec_rejected(tmp_path, field, value):
    kwargs = {field: value}
    with pytest.raises(ValueError):
        generate_synthetic_corpus(SyntheticCorpusSpec(**kwargs), tmp_path)


def test_manifest_round_trip(tiny_corpus, tmp_path):
    manifest, root = tiny_corpus
    path = tmp_path / "copy.jsonl"
    # keep relative paths valid by saving beside the audio
    save_manifest(manifest, root / "copy.jsonl")
    again = load_manifest(root / "copy.jsonl")
    assert again == manifest
    assert manifest_hash(again) == manifest_hash(manifest)
    save_manifest(again, path)
    assert load_manifest(path) == manifest


def _write(path, header, records):
    lines = [json.dumps(header)] + [json.dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n")


def test_duplicate_id_is_named(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"")
    rec = {"id": "utt-7", "audio": "x.wav", "text": "a b", "speaker": "s", "duration": 1.0}
    _write(tmp_path / "m.jsonl", {"vocabulary": ["a", "b"], "sample_rate": 24000, "tag": "target"},
           [rec, rec])
    with pytest.raises(ManifestError, match=r"m.jsonl:3.*utt-7"):
        load_manifest(tmp_path / "m.jsonl")


def test_missing_audio_names_utterance(tmp_path):
    rec = {"id": "lost-1", "audio": "nowhere.wav", "text": "a", "speaker": "s", "duration": 1.0}
    _write(tmp_path / "m.jsonl", {"vocabulary": ["a"], "sample_rate": 24000, "tag": "target"}, [rec])
    with pytest.raises(ManifestError, match="lost-1"):
        load_manifest(tmp_path / "m.jsonl")


@pytest.mark.parametrize("record,match", [
    ({"id": "u", "audio": "x.wav", "text": "", "speaker": "s", "duration": 1.0}, "empty transcript"),
    ({"id": "u", "audio": "x.wav", "text": "z", "speaker": "s", "duration": 1.0}, "not in vocabulary"),
    ({"id": "u", "audio": "x.wav", "text": "a", "speaker": "s", "duration": 0}, "duration"),
    ({"id": "u", "audio": "x.wav", "text": "a", "speaker": "s"}, "missing field 'duration'"),
])
def test_schema_errors_report_line(tmp_path, record, match):
    (tmp_path / "x.wav").write_bytes(b"")
    _write(tmp_path / "m.jsonl", {"vocabulary": ["a"], "sample_rate": 24000, "tag": "target"}, [record])
    with pytest.raises(ManifestError, match=rf"m.jsonl:2: .*{match}"):
        load_manifest(tmp_path / "m.jsonl")


def test_vocabulary_rejects_blank_token():
    with pytest.raises(ValueError):
        TokenVocabulary(("a", "<blank>"))
    v = TokenVocabulary(("a", "b"))
    assert v.symbols() == ["<blank>", "a", "b"]
    assert v.decode(v.encode(["b", "a"])) == ("b", "a")


def _manifest(n_speakers, per_speaker):
    vocab = TokenVocabulary.letters(4)
    utts = tuple(Utterance(f"s{s}-{k}", ("a",), f"s{s}", 1.0)
                 for s in range(n_speakers) for k in range(per_speaker))
    return DatasetManifest(utts, vocab, "target")


def test_split_nine_speakers():
    train, ev = split_by_speaker(_manifest(9, 3), {"s7", "s8"})
    assert len(train.speakers) == 7
    assert ev.speakers == ["s7", "s8"]
    assert ev.tag == "validation"
    assert len(train) + len(ev) == 27


@pytest.mark.parametrize("held", [set(), {"s0", "s1", "s2"}, {"nobody"}])
def test_split_rejects_bad_holdout(held):
    with pytest.raises(ValueError):
        split_by_speaker(_manifest(3, 2), held)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.data())
def test_split_is_a_partition(n_speakers, per, data):
    m = _manifest(n_speakers, per)
    held = data.draw(st.sets(st.sampled_from(m.speakers), min_size=1, max_size=n_speakers - 1))
    train, ev = split_by_speaker(m, held)
    assert not set(train.speakers) & set(ev.speakers)
    ids = [u.id for u in train.utterances + ev.utterances]
    assert sorted(ids) == sorted(u.id for u in m.utterances)
