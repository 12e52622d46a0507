import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itervc.features import (FeatureConfig, MelSpectrogram, NormalizationStats, denormalize,
                             fit_normalization, fit_normalization_arrays, load_mels,
                             melspectrogram, normalize, read_matrix, write_matrix)

CFG = FeatureConfig()


def test_silence_is_log_floor():
    mel = melspectrogram(np.zeros(4096))
    assert np.all(mel.data == np.log(1e-5))


def test_frame_count_formula():
    assert melspectrogram(np.zeros(CFG.window + 3 * CFG.hop)).frames == 4
    assert melspectrogram(np.zeros(CFG.window + 3 * CFG.hop + CFG.hop - 1)).frames == 4
    assert melspectrogram(np.zeros(CFG.window)).frames == 1


def _htk_centers(n=80, fmax=12000.0):
    # written out from the HTK formula, independent of the module helpers
    top = 2595 * math.log10(1 + fmax / 700)
    return [700 * (10 ** (top * k / (n + 1) / 2595) - 1) for k in range(1, n + 1)]


@pytest.mark.parametrize("freq", [440.0, 1000.0, 3000.0])
def test_tone_peaks_in_nearest_bin(freq):
    centers = _htk_centers()
    expected = min(range(80), key=lambda k: abs(centers[k] - freq))
    t = np.arange(24000) / 24000
    mel = melspectrogram(0.5 * np.sin(2 * np.pi * freq * t))
    assert np.all(mel.data.argmax(axis=1) == expected)


def test_440_lands_in_bin_13():
    assert min(range(80), key=lambda k: abs(_htk_centers()[k] - 440)) == 13


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1024, 4000))
def test_prepending_one_hop_shifts_frames(seed, n):
    y = np.random.default_rng(seed).normal(size=n)
    a = melspectrogram(y).data
    b = melspectrogram(np.concatenate([np.zeros(CFG.hop), y])).data
    assert b.shape[0] == a.shape[0] + 1
    np.testing.assert_allclose(b[1:], a, atol=1e-6, rtol=0)
    assert np.all(np.isfinite(b))


def test_deterministic():
    y = np.random.default_rng(0).normal(size=5000)
    assert np.array_equal(melspectrogram(y).data, melspectrogram(y).data)


@pytest.mark.parametrize("y", [np.zeros(100), np.array([np.nan] * 2048), np.zeros((2, 2048))])
def test_bad_waveforms(y):
    with pytest.raises(ValueError):
        melspectrogram(y)


def test_config_invariants():
    with pytest.raises(ValueError):
        FeatureConfig(hop=2048)
    with pytest.raises(ValueError):
        FeatureConfig(fmax=13000.0)
    with pytest.raises(ValueError):
        FeatureConfig(n_mels=64)
    assert FeatureConfig().digest() != FeatureConfig(hop=200).digest()


def test_mel_type_rejects_bad_shapes():
    with pytest.raises(ValueError):
        MelSpectrogram(np.zeros((5, 40)))
    with pytest.raises(ValueError):
        MelSpectrogram(np.full((5, 80), np.inf))


def test_normalization_round_trip(tiny_stats, tiny_mels):
    x = next(iter(tiny_mels.values())).astype(np.float64)
    np.testing.assert_allclose(denormalize(normalize(x, tiny_stats), tiny_stats), x, atol=1e-6)
    mel = MelSpectrogram(x)
    back = denormalize(normalize(mel, tiny_stats), tiny_stats)
    assert isinstance(back, MelSpectrogram)
    np.testing.assert_allclose(back.data, x, atol=1e-6)


def test_normalized_corpus_is_centered(tiny_corpus):
    manifest, _ = tiny_corpus
    stats = fit_normalization(manifest)
    mels = load_mels(manifest)
    z = np.concatenate([normalize(m.astype(np.float64), stats) for m in mels.values()])
    assert np.abs(z.mean(axis=0)).max() < 1e-5
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-5)


def test_constant_bin_names_bin():
    mels = [np.random.default_rng(0).normal(size=(10, 80))]
    mels[0][:, 17] = 3.0
    with pytest.raises(ValueError, match="bin 17"):
        fit_normalization_arrays(mels)
    with pytest.raises(ValueError):
        fit_normalization_arrays([np.zeros((4, 80))])


def test_stats_serialize():
    s = NormalizationStats(np.arange(80.0), np.ones(80) * 2)
    again = NormalizationStats.from_dict(s.to_dict())
    assert np.array_equal(again.mean, s.mean) and np.array_equal(again.std, s.std)
    with pytest.raises(ValueError):
        NormalizationStats(np.zeros(80), np.zeros(80))


def test_matrix_file_round_trip(tmp_path):
    a = np.random.default_rng(1).normal(size=(7, 80)).astype(np.float32)
    write_matrix(tmp_path / "x.mel", a)
    raw = (tmp_path / "x.mel").read_bytes()
    assert raw[:4] == b"MEL1" and len(raw) == 12 + 7 * 80 * 4
    assert np.array_equal(read_matrix(tmp_path / "x.mel"), a)
    (tmp_path / "bad.mel").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_matrix(tmp_path / "bad.mel")


def test_cache_keyed_by_config(tiny_corpus, tmp_path, monkeypatch):
    manifest, _ = tiny_corpus
    monkeypatch.setenv("ITERVC_CACHE", str(tmp_path / "cache"))
    first = load_mels(manifest)
    files = list((tmp_path / "cache").rglob("*.mel"))
    assert len(files) == len(manifest)
    assert {f.parent.name for f in files} == {CFG.digest()}
    again = load_mels(manifest)
    for k in first:
        assert np.array_equal(first[k], again[k])
    load_mels(manifest, FeatureConfig(hop=200))
    assert len({f.parent.name for f in (tmp_path / "cache").rglob("*.mel")}) == 2
