import json

import filelock
import pytest

from itervc import orchestrator
from itervc.config import ConfigError, load_config
from itervc.orchestrator import (ExperimentLockedError, IterationHistory, Experiment, has_converged,
                                 load_snapshot, read_history, run_iterations, verify_provenance)


@pytest.mark.parametrize("wers,expected", [
    ([27.6, 26.2], False),
    ([25.8, 25.7], True),
    ([25.0, 25.5], True),
    ([10.0, 10.0], True),
    ([0.0, 0.0], True),
])
def test_has_converged(wers, expected):
    assert has_converged(wers, 0.01) is expected


def test_has_converged_needs_two_records():
    with pytest.raises(ValueError):
        has_converged([27.6], 0.01)
    with pytest.raises(ValueError):
        has_converged(IterationHistory([]), 0.01)


def test_has_converged_uses_only_the_wer_sequence():
    assert has_converged([50.0, 27.6, 26.2]) == has_converged([27.6, 26.2])


def _config(overrides, *extra):
    return load_config(None, overrides + list(extra))


def test_zero_iterations_gives_record_zero(tmp_path, tiny_overrides):
    history = run_iterations(_config(tiny_overrides, "orchestrator.max_iterations=0"), tmp_path)
    assert [r.i for r in history.records] == [0]
    rec = read_history(tmp_path)[0]
    assert rec.augmented_manifest is None
    assert (tmp_path / rec.asr_checkpoint).exists() and (tmp_path / rec.vc_checkpoint).exists()
    assert set(rec.metrics) == {"asr_val_wer", "vc_eval_wer", "identity_mean"}
    assert verify_provenance(tmp_path) == []


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    from conftest import TINY_OVERRIDES
    d = tmp_path_factory.mktemp("run")
    cfg = load_config(None, TINY_OVERRIDES + ["orchestrator.max_iterations=2", "orchestrator.epsilon=0"])
    run_iterations(cfg, d)
    return cfg, d


def test_run_layout_and_provenance(finished_run):
    cfg, d = finished_run
    records = read_history(d)
    assert [r.i for r in records] == list(range(len(records)))
    assert len(records) >= 2
    assert verify_provenance(d) == []
    for r in records:
        assert r.config_hash == cfg.digest()
        metrics = json.loads((d / f"iter_{r.i:03d}" / "metrics.json").read_text())
        assert metrics["config_hash"] == cfg.digest()
    assert load_snapshot(d) == cfg
    report = (d / "report.txt").read_text().splitlines()
    assert len(report) == 2 + len(records)


def test_tampering_is_detected(finished_run, tmp_path):
    import shutil
    _, d = finished_run
    copy = tmp_path / "copy"
    shutil.copytree(d, copy)
    rec = read_history(copy)[1]
    manifest = copy / rec.augmented_manifest
    lines = manifest.read_text().splitlines()
    lines[1] = lines[1].replace('"speaker": "', '"speaker": "x')
    manifest.write_text("\n".join(lines) + "\n")
    problems = verify_provenance(copy)
    assert any("augmented manifest changed" in p for p in problems)


def test_identical_configs_give_identical_history(finished_run, tmp_path):
    cfg, d = finished_run
    run_iterations(cfg, tmp_path)
    assert (tmp_path / "history.jsonl").read_bytes() == (d / "history.jsonl").read_bytes()


def test_crash_then_resume_matches(finished_run, tmp_path, monkeypatch):
    cfg, d = finished_run
    real = Experiment.iteration

    def crash_at_two(self, i, *a, **kw):
        if i == 2:
            raise RuntimeError("simulated crash")
        return real(self, i, *a, **kw)

    monkeypatch.setattr(Experiment, "iteration", crash_at_two)
    with pytest.raises(RuntimeError, match="simulated"):
        run_iterations(cfg, tmp_path)
    assert [r.i for r in read_history(tmp_path)] == [0, 1]
    monkeypatch.setattr(Experiment, "iteration", real)
    run_iterations(cfg, tmp_path, resume=True)
    assert (tmp_path / "history.jsonl").read_bytes() == (d / "history.jsonl").read_bytes()


def test_finished_run_is_a_no_op_on_resume(finished_run, monkeypatch):
    cfg, d = finished_run
    before = (d / "history.jsonl").read_bytes()
    monkeypatch.setattr(Experiment, "iteration", lambda *a, **k: pytest.fail("retrained"))
    run_iterations(cfg, d, resume=True)
    assert (d / "history.jsonl").read_bytes() == before


def test_existing_history_needs_resume(finished_run):
    cfg, d = finished_run
    with pytest.raises(ValueError, match="resume"):
        run_iterations(cfg, d, resume=False)


def test_config_mismatch_refused(finished_run, tiny_overrides):
    _, d = finished_run
    other = _config(tiny_overrides, "orchestrator.max_iterations=2", "seed=5")
    with pytest.raises(ValueError, match="created with config"):
        run_iterations(other, d)


def test_lock_excludes_second_run(tmp_path, tiny_overrides):
    lock = filelock.FileLock(str(tmp_path / ".lock"))
    with lock:
        with pytest.raises(ExperimentLockedError):
            run_iterations(_config(tiny_overrides), tmp_path)


def test_failure_keeps_partial_history(tmp_path, tiny_overrides, monkeypatch):
    cfg = _config(tiny_overrides, "orchestrator.max_iterations=3", "orchestrator.epsilon=0")
    real = orchestrator.augment_dataset

    def fail(*a, **kw):
        raise OSError("disk full")

    monkeypatch.setattr(orchestrator, "augment_dataset", fail)
    with pytest.raises(OSError):
        run_iterations(cfg, tmp_path)
    assert [r.i for r in read_history(tmp_path)] == [0]
    monkeypatch.setattr(orchestrator, "augment_dataset", real)


# -- configuration -------------------------------------------------------------


def test_config_hash_is_stable(tmp_path):
    text = "seed = 3\n[vc]\nlambda_asr = 50.0\n[orchestrator]\nmax_iterations = 2\n"
    (tmp_path / "a.toml").write_text(text)
    (tmp_path / "b.toml").write_text(text)
    a, b = load_config(tmp_path / "a.toml"), load_config(tmp_path / "b.toml")
    assert a.digest() == b.digest()
    assert a.vc.lambda_asr == 50.0 and a.seed == 3
    assert load_config(tmp_path / "a.toml", ["--vc.lambda_asr=100"]).digest() != a.digest()
    assert load_config(None).vc.lambda_asr == 100


def test_module_seeds_differ():
    cfg = load_config(None)
    seeds = {cfg.module_seed(n) for n in ("asr", "vc", "augment", "eval_asr", "speaker.conditioning")}
    assert len(seeds) == 5
    assert load_config(None, ["seed=1"]).module_seed("vc") != cfg.module_seed("vc")


@pytest.mark.parametrize("override,path", [
    ("asr.max_steps=0", "asr.max_steps"),
    ("vc.lambda_asr=-1", "vc.lambda_asr"),
    ("speaker.nope=3", "speaker.nope"),
    ("corpus.target.n_speakers=1", "corpus.target.n_speakers"),
])
def test_config_errors_name_the_field(override, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        load_config(None, [override])


def test_bare_string_overrides():
    cfg = load_config(None, ["corpus.target_manifest=/data/m.jsonl", "corpus.held_out_speakers=['a', 'b']"])
    assert cfg.corpus.target_manifest == "/data/m.jsonl"
    assert cfg.corpus.held_out_speakers == ["a", "b"]
