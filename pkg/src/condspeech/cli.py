"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 broken invariant
(frozen weights drifted, gradient mask violated), 3 numerical failure
(non-finite loss, failed gradient check). CONDSPEECH_SEED overrides the
configured seed for gen-data and train.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .autodiff import NumericalError
from .encoder import ConfigError, trainable_parameter_report
from .metrics import read_report
from .serialize import FormatError
from .synthdata import CorpusConfigError, CorpusSpec, build_corpora, load_corpus, save_corpus

USAGE_ERRORS = (ConfigError, CorpusConfigError, FormatError, ValueError, KeyError, OSError, json.JSONDecodeError)


def _seed_override(seed: int) -> int:
    env = os.environ.get("CONDSPEECH_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"CONDSPEECH_SEED must be an integer, got {env!r}") from exc


def _cmd_gen_data(args) -> int:
    if args.spec:
        spec = CorpusSpec.from_json(Path(args.spec).read_text())
    else:
        spec = CorpusSpec()
    spec.seed = _seed_override(spec.seed)
    corpus = build_corpora(spec)
    save_corpus(corpus, args.out)
    counts = {name: len(utts) for name, utts in corpus.splits.items()}
    print(json.dumps({"out": str(args.out), "splits": counts, "trials": len(corpus.trials)}))
    return 0


def _load_experiment_config(path: str):
    from .harness import ExperimentConfig

    cfg = ExperimentConfig.from_json(Path(path).read_text())
    cfg.seed = _seed_override(cfg.seed)
    return cfg


def _cmd_train(args) -> int:
    from .harness import run_pipeline

    cfg = _load_experiment_config(args.config)
    corpus = load_corpus(args.data) if args.data else None
    result = run_pipeline(
        cfg, args.out, corpus=corpus, stage_cache=args.stage_cache,
        log=(None if args.quiet else lambda msg: print(msg, file=sys.stderr)),
    )
    print(json.dumps({"report": result.report, "checkpoint": str(result.checkpoint_dir)}))
    return 0


def _cmd_eval(args) -> int:
    from .harness import evaluate, load_pipeline_bundle

    corpus = load_corpus(args.data) if args.data else None
    bundle, corpus = load_pipeline_bundle(args.ckpt, corpus=corpus)
    report = evaluate(bundle, corpus)
    if args.report:
        from .metrics import write_report

        write_report(args.report, report)
    print(json.dumps(report))
    return 0


def _cmd_compare(args) -> int:
    from .harness import compare, format_comparison

    reports = [read_report(p) for p in args.reports]
    names = [Path(p).stem if Path(p).stem != "report" else Path(p).parent.name for p in args.reports]
    cmp = compare(reports, names)
    print(format_comparison(cmp))
    if args.json:
        Path(args.json).write_text(json.dumps(cmp, indent=1))
    if args.plot:
        _plot_comparison(cmp, args.plot)
    return 0


def _plot_comparison(cmp: dict, path: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import REPORT_FIELDS

    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(1, len(cmp["rows"]))
    for i, row in enumerate(cmp["rows"]):
        xs = [j + i * width for j in range(len(REPORT_FIELDS))]
        ys = [row["improvement_pct"][m] or 0.0 for m in REPORT_FIELDS]
        ax.bar(xs, ys, width=width, label=row["name"])
    ax.set_xticks(range(len(REPORT_FIELDS)))
    ax.set_xticklabels(REPORT_FIELDS, rotation=20)
    ax.set_ylabel(f"improvement vs {cmp['baseline']} (%)")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _cmd_param_report(args) -> int:
    from .harness import load_pipeline_bundle
    from .synthdata import load_corpus as _load

    corpus = _load(args.data) if args.data else None
    bundle, _ = load_pipeline_bundle(args.ckpt, corpus=corpus)
    report = trainable_parameter_report(bundle.encoder_state, bundle.decoders)
    print(json.dumps(report, indent=1))
    return 0


def _cmd_gradcheck(args) -> int:
    from .harness import gradcheck_suite

    reports = gradcheck_suite(seed=args.seed)
    worst_ok = True
    for name, rep in sorted(reports.items()):
        print(f"{name}: max rel err {rep.max_rel_err:.3g} [{'ok' if rep.ok else 'FAIL'}]")
        worst_ok = worst_ok and rep.ok
    if not worst_ok:
        raise NumericalError("at least one gradient check exceeded the 1e-4 tolerance")
    return 0


def _cmd_selftest(args) -> int:
    from .harness import selftest

    if not selftest(log=print):
        raise NumericalError("selftest failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condspeech", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--spec", help="corpus spec JSON (defaults used when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="run a staged training pipeline")
    t.add_argument("--config", required=True, help="experiment config JSON")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--data", help="pre-generated corpus directory (regenerated when omitted)")
    t.add_argument("--stage-cache", help="directory for memoizing completed stages")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True, help="stage checkpoint directory")
    e.add_argument("--data", help="corpus directory (regenerated from config when omitted)")
    e.add_argument("--report", help="write the metric report to this JSON file")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("compare", help="relative improvements between metric reports")
    c.add_argument("reports", nargs="+", help="report JSON files; the first is the baseline")
    c.add_argument("--plot", help="write a bar chart PNG (needs matplotlib)")
    c.add_argument("--json", help="write the comparison table as JSON")
    c.set_defaults(fn=_cmd_compare)

    pr = sub.add_parser("param-report", help="trainable parameter accounting for a checkpoint")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", help="corpus directory (speeds up model rebuild)")
    pr.set_defaults(fn=_cmd_param_report)

    gc = sub.add_parser("gradcheck", help="finite-difference checks for every differentiable block")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=_cmd_gradcheck)

    st = sub.add_parser("selftest", help="fast internal consistency checks")
    st.set_defaults(fn=_cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    from .harness import InvariantBreach

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except InvariantBreach as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
