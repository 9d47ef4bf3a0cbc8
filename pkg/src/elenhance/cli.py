"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage or I/O failure.
The checkpoint root defaults to $ELENHANCE_CKPT_ROOT (else ./checkpoints).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ElEnhanceError

log = logging.getLogger("elenhance")

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3


def _root(args):
    from .pipeline.run import default_root

    return Path(args.root) if args.root else default_root()


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------- corpus


def cmd_corpus_gen(args) -> int:
    from .corpus import CorpusConfig, build_corpus, load_config_file

    raw = load_config_file(args.config) if args.config else {}
    raw = raw.get("corpus", raw) if isinstance(raw, dict) else raw
    if not isinstance(raw, dict):
        raise ConfigError("corpus config must be a mapping")
    manifest = build_corpus(CorpusConfig.from_dict(raw), args.out)
    print(f"wrote {len(manifest)} utterances to {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_corpus_validate(args) -> int:
    from .corpus import load_manifest

    problems = load_manifest(args.manifest).validate()
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} problem(s)")
        return EXIT_FAILURE
    print("ok")
    return EXIT_OK


# ---------------------------------------------------------------- training


def _run(args, targets):
    from .pipeline.config import load_config
    from .pipeline.run import run_experiment

    cfg = load_config(args.config)
    if getattr(args, "system", None):
        cfg["systems"] = [str(args.system)]
    return run_experiment(cfg, _root(args), targets=targets)


def cmd_train_recognition(args) -> int:
    res = _run(args, ["recognition"])
    stages = [args.stage] if args.stage else [1, 2, 3]
    for n in stages:
        print(res.path("recognition") / f"stage{n}.ckpt")
    return EXIT_OK


def cmd_train_alignment(args) -> int:
    res = _run(args, [f"alignment-{args.system}"])
    lineage = res.lineages[str(args.system)]
    print(lineage.alignment)
    if args.stage:
        from .alignment.model import AlignmentModel

        stages = [s["stage"] for s in AlignmentModel.load(lineage.alignment).meta.get("lineage", [])]
        if args.stage not in stages:
            raise ConfigError(f"stage {args.stage} is not in this system's lineage {stages}")
    return EXIT_OK


def cmd_train_synthesis(args) -> int:
    res = _run(args, ["synthesis"])
    name = "diffusion_pretrain.ckpt" if args.phase == "pretrain" else "diffusion.ckpt"
    print(res.path("synthesis") / name)
    return EXIT_OK


def cmd_bnf_extract(args) -> int:
    from .corpus import load_manifest
    from .features import FeatureStore, write_matrix
    from .recognition.model import Recognizer, extract_bnf

    model = Recognizer.load(args.model)
    manifest = load_manifest(args.manifest)
    store = FeatureStore(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for e in manifest:
        path = write_matrix(out / f"{e.utterance_id}.bnf", extract_bnf(model, store.mel(e.utterance_id)))
        lines.append(f"{e.utterance_id}\t{path.name}")
    (out / "index.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} BNF files to {out}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .corpus import write_wav
    from .features import read_matrix
    from .synthesis import DiffusionDecoder, make_vocoder, sample
    from .synthesis.speaker import external_embedding

    decoder = DiffusionDecoder.load(args.model)
    units = read_matrix(args.units) if not str(args.units).endswith(".npy") else np.load(args.units)
    spk = external_embedding(args.spk, decoder.config.spk_dim)
    mel = sample(decoder, units, spk.vector, w=args.w, seed=args.seed)
    write_wav(args.out, make_vocoder({"kind": "griffin_lim"})(mel, seed=args.seed))
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------- use


def cmd_convert(args) -> int:
    from .pipeline.convert import convert_file

    _print(convert_file(args.system, args.input, args.out, seed=args.seed))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .corpus import load_manifest
    from .evaluation.system import EvalReport
    from .pipeline.evaluate import evaluate_system
    from .pipeline.lineage import SystemLineage
    from .recognition.model import Recognizer

    lineage = SystemLineage.load(args.system)
    scorer_path = args.scorer or lineage.scorer
    if not scorer_path:
        raise ConfigError("no scorer recognizer: pass --scorer or use a lineage that records one")
    manifest = load_manifest(args.manifest)
    entries = [e for e in manifest.select(speech_type="EL", split=args.split).entries if e.parallel_id]
    if args.limit:
        entries = entries[: args.limit]
    if not entries:
        raise ConfigError(f"no EL entries with parallel references in split {args.split!r}")
    out_dir = Path(args.wav_dir) if args.wav_dir else Path(args.out).with_suffix("") / f"system{lineage.system_id}"
    row = evaluate_system(lineage, manifest, Recognizer.load(scorer_path), out_dir, entries, seed=args.seed)
    report = EvalReport.load(args.out) if Path(args.out).exists() and args.append else EvalReport()
    report.add(row)
    report.save(args.out)
    print(report.table())
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation.system import EvalReport

    merged = EvalReport()
    for path in args.reports:
        for row in EvalReport.load(path).rows:
            merged.add(row)
    if args.json:
        _print(merged.to_dict())
    else:
        print(merged.table())
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline.config import load_config
    from .pipeline.evaluate import evaluate_experiment
    from .pipeline.run import run_experiment

    cfg = load_config(args.config)
    if args.systems:
        cfg["systems"] = [str(s) for s in args.systems]
    res = run_experiment(cfg, _root(args))
    print("stages run:", ", ".join(res.ran) or "none (all cached)")
    report = evaluate_experiment(res)
    out = Path(args.out) if args.out else res.root / "report.json"
    report.save(out)
    print(report.table())
    print(f"report: {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elenhance", description="Electrolaryngeal speech enhancement toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_root(sp):
        sp.add_argument("--root", help="checkpoint root (default $ELENHANCE_CKPT_ROOT or ./checkpoints)")
        return sp

    corpus = sub.add_parser("corpus", help="synthetic corpus").add_subparsers(dest="action", required=True)
    g = corpus.add_parser("gen")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_corpus_gen)
    v = corpus.add_parser("validate")
    v.add_argument("manifest")
    v.set_defaults(func=cmd_corpus_validate)

    train = sub.add_parser("train", help="train one module").add_subparsers(dest="module", required=True)
    r = with_root(train.add_parser("recognition"))
    r.add_argument("--config")
    r.add_argument("--stage", type=int, choices=(1, 2, 3))
    r.set_defaults(func=cmd_train_recognition)
    a = with_root(train.add_parser("alignment"))
    a.add_argument("--config")
    a.add_argument("--system", default="4", choices=("1", "2", "3", "4", "5"))
    a.add_argument("--stage", help="check that this stage is part of the trained lineage")
    a.set_defaults(func=cmd_train_alignment)
    s = with_root(train.add_parser("synthesis"))
    s.add_argument("--config")
    s.add_argument("--phase", choices=("pretrain", "adapt"), default="adapt")
    s.set_defaults(func=cmd_train_synthesis)

    bnf = sub.add_parser("bnf").add_subparsers(dest="action", required=True)
    b = bnf.add_parser("extract")
    b.add_argument("--model", required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bnf_extract)

    sy = sub.add_parser("synthesize")
    sy.add_argument("--model", required=True, help="diffusion checkpoint")
    sy.add_argument("--units", required=True, help="unit matrix (.npy or binary matrix dump)")
    sy.add_argument("--spk", required=True, help="speaker embedding (.npy or text)")
    sy.add_argument("--w", type=float, default=None)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synthesize)

    c = sub.add_parser("convert")
    c.add_argument("--system", required=True, help="lineage.json of a trained system")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_convert)

    e = sub.add_parser("evaluate")
    e.add_argument("--system", required=True, help="lineage.json")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="report.json")
    e.add_argument("--scorer", help="recognizer checkpoint used for CER (default: the lineage's)")
    e.add_argument("--split", default="test")
    e.add_argument("--limit", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--wav-dir")
    e.add_argument("--append", action="store_true", help="add the row to an existing report")
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--json", action="store_true")
    rp.set_defaults(func=cmd_report)

    run = with_root(sub.add_parser("run", help="train and evaluate every configured system"))
    run.add_argument("--config")
    run.add_argument("--systems", nargs="+")
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ElEnhanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
