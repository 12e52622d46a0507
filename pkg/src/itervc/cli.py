"""Command-line entry point.

Every subcommand accepts ``--config FILE`` plus any number of
``--section.key=value`` overrides, validated against the experiment schema.
Exit status: 0 on success, 2 for usage or config errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import asr as asr_mod
from . import speaker as spk_mod
from . import vc as vc_mod
from .augment import augment_dataset
from .config import ConfigError, load_config
from .data import load_manifest
from .features import load_mels
from .metrics import evaluate_conversion, format_table
from .orchestrator import Experiment, load_snapshot, read_history, run_iterations, verify_provenance

log = logging.getLogger("itervc")

_OVERRIDE = re.compile(r"^--[A-Za-z_][\w]*(\.[A-Za-z_]\w*)+=.*$")


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _experiment(args) -> Experiment:
    return Experiment(args.cfg, args.out).prepare()


# -- subcommands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    exp = Experiment(args.cfg, args.out)
    exp.dir.mkdir(parents=True, exist_ok=True)
    for name in ("target", "base"):
        m = exp._corpus(name)
        print(f"{name}: {len(m)} utterances, {len(m.speakers)} speakers -> "
              f"{exp.dir / 'corpus' / name / 'manifest.jsonl'}")
    return 0


def cmd_train_asr(args) -> int:
    exp = _experiment(args)
    cfg = exp.asr_config()
    if args.init:
        init = asr_mod.load_asr(args.init)
        aug = load_manifest(args.augmented) if args.augmented else None
        if aug is not None:
            exp.mels.update(load_mels(aug, exp.features))
        model = asr_mod.finetune_asr(init, exp.base, exp.train, aug, cfg, exp.val, mels=exp.mels)
    else:
        model = asr_mod.train_asr(exp.train, exp.val, cfg, stats=exp.stats, mels=exp.mels)
    asr_mod.save_asr(model, exp.dir / "asr.pt", config_hash=exp.config_hash)
    report = asr_mod.evaluate_wer(model, exp.val, exp.mels)
    rec = report.record(model_id=model.model_hash(), manifest_tag=exp.val.tag, config_hash=exp.config_hash)
    _write_json(exp.dir / "asr_report.json", rec)
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_train_speaker(args) -> int:
    exp = _experiment(args)
    seed = exp.config.module_seed("speaker.conditioning")
    enc = spk_mod.train_speaker_encoder(exp.train, exp.config.speaker.build(seed), stats=exp.stats,
                                        mels=exp.mels)
    spk_mod.save_speaker(enc, exp.dir / "speaker.pt", config_hash=exp.config_hash)
    print(json.dumps({"accuracy": enc.accuracy, "model_id": enc.model_hash(),
                      "config_hash": exp.config_hash}, sort_keys=True))
    return 0


def _speaker(args, exp: Experiment):
    if args.speaker:
        return spk_mod.load_speaker(args.speaker)
    return exp.speaker_encoder("conditioning")


def cmd_train_vc(args) -> int:
    exp = _experiment(args)
    asr = asr_mod.load_asr(args.asr)
    model = exp.train_vc(asr, _speaker(args, exp))
    vc_mod.save_vc(model, exp.dir / "vc.pt", config_hash=exp.config_hash)
    print(json.dumps({"model_id": model.model_hash(), "asr_hash": model.provenance["asr_hash"],
                      "config_hash": exp.config_hash}, sort_keys=True))
    return 0


def cmd_augment(args) -> int:
    exp = _experiment(args)
    vc = vc_mod.load_vc(args.vc)
    policy = exp.config.augment.build(exp.config.module_seed("augment"))
    aug = augment_dataset(vc, exp.train, _speaker(args, exp), policy, exp.dir / "augmented",
                          mels=exp.mels, feature_config=exp.features)
    print(f"{len(aug)} augmented utterances -> {exp.dir / 'augmented' / 'manifest.jsonl'}")
    return 0


def cmd_iterate(args) -> int:
    out = args.resume or args.out
    history = run_iterations(args.cfg, out, resume=bool(args.resume))
    problems = verify_provenance(out)
    for p in problems:
        print(f"provenance: {p}", file=sys.stderr)
    print(format_table([{"i": r.i, **r.metrics} for r in history.records]))
    return 1 if problems else 0


def cmd_evaluate(args) -> int:
    cfg = load_snapshot(args.dir)
    exp = Experiment(cfg, args.dir).prepare()
    records = read_history(args.dir)
    if not records:
        raise ValueError(f"{args.dir} has no completed iterations")
    idx = records[-1].i if args.iteration is None else args.iteration
    if not 0 <= idx < len(records):
        raise ValueError(f"iteration {idx} not in history (0..{len(records) - 1})")
    asr, vc = exp.load_record_models(records[idx])
    evaluator = asr_mod.load_asr(exp.dir / "shared" / "asr_eval.pt")
    spk_metric = exp.speaker_encoder("metric")
    wer = asr_mod.evaluate_wer(asr, exp.val, exp.mels)
    conv = evaluate_conversion(vc, evaluator, spk_metric, exp.val, cfg.module_seed("evaluate"),
                               mels=exp.mels, pairs_per_utterance=cfg.orchestrator.eval_pairs_per_utterance)
    print(json.dumps({"i": idx, "asr_val_wer": wer.wer, "vc_eval_wer": conv.wer,
                      "identity_mean": conv.identity_mean, "config_hash": exp.config_hash}, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    records = read_history(args.dir)
    if not records:
        raise ValueError(f"no history file in {args.dir}")
    print(format_table([{"i": r.i, **r.metrics} for r in records]))
    return 0


# -- parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itervc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help, out=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="TOML or JSON experiment config")
        if out:
            p.add_argument("--out", type=Path, required=name != "iterate", help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("generate", cmd_generate, "write the synthetic target and base corpora")
    p = add("train-asr", cmd_train_asr, "train (or fine-tune) an ASR on the target split")
    p.add_argument("--init", type=Path, help="checkpoint to fine-tune instead of training from scratch")
    p.add_argument("--augmented", type=Path, help="augmented manifest to mix in when fine-tuning")
    add("train-speaker", cmd_train_speaker, "train the speaker encoder")
    p = add("train-vc", cmd_train_vc, "train a VC model against a frozen ASR")
    p.add_argument("--asr", type=Path, required=True)
    p.add_argument("--speaker", type=Path)
    p = add("augment", cmd_augment, "convert the training split with a VC model")
    p.add_argument("--vc", type=Path, required=True)
    p.add_argument("--speaker", type=Path)
    p = add("iterate", cmd_iterate, "run the alternating ASR/VC loop")
    p.add_argument("--resume", type=Path, metavar="DIR", help="continue the run in DIR")
    p = sub.add_parser("evaluate", help="re-score one iteration of an experiment directory")
    p.add_argument("dir", type=Path)
    p.add_argument("--iteration", type=int)
    p.set_defaults(fn=cmd_evaluate)
    p = sub.add_parser("report", help="print the per-iteration table of an experiment")
    p.add_argument("dir", type=Path)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    overrides = [a for a in argv if _OVERRIDE.match(a)]
    try:
        args = parser.parse_args([a for a in argv if not _OVERRIDE.match(a)])
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if hasattr(args, "config"):
            args.cfg = load_config(args.config, overrides)
            if args.command == "iterate" and not (args.out or args.resume):
                parser.print_usage(sys.stderr)
                print("itervc: iterate needs --out or --resume", file=sys.stderr)
                return 2
        elif overrides:
            parser.print_usage(sys.stderr)
            print(f"itervc: {args.command} takes no config overrides", file=sys.stderr)
            return 2
    except ConfigError as e:
        print(f"itervc: config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"itervc: cannot read config: {e}", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"itervc: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        log.debug("failure", exc_info=True)
        print(f"itervc: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
