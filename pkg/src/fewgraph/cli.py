"""Command-line entry point.

Subcommands: stream (build/inspect a session stream), train (full pipeline
for one method), eval (score a saved model state), ablate (method matrix),
report (re-render saved results). Exit codes: 0 ok, 2 config error,
3 training divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import load_config
from .errors import ConfigError, DivergedLoss, IoError
from .harness import (
    METHODS,
    emit_results,
    evaluate_session,
    load_datasets,
    read_results_csv,
    read_results_jsonl,
    render_results,
    run_experiment,
)
from .protocol import build_session_stream, describe_stream
from .trainer import load_state


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewgraph")
    sub = parser.add_subparsers(dest="command", required=True)

    p_stream = sub.add_parser("stream", help="build a session stream and print its audit record")
    p_stream.add_argument("--config", required=True)
    p_stream.add_argument("--seed", type=int, default=None)
    p_stream.add_argument("--out", default=None)

    p_train = sub.add_parser("train", help="run the full pipeline for one method")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--method", choices=METHODS, default=None)
    p_train.add_argument("--repeat", type=int, default=None)
    p_train.add_argument("--out", default=None, help="output directory")

    p_eval = sub.add_parser("eval", help="evaluate a saved model state on the stream's test sets")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--state", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", default=None)

    p_ablate = sub.add_parser("ablate", help="run the ablation matrix over all methods")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--seed", type=int, default=None)
    p_ablate.add_argument("--repeat", type=int, default=None)
    p_ablate.add_argument("--out", default=None, help="output directory")

    p_report = sub.add_parser("report", help="re-render saved results")
    p_report.add_argument("--results", required=True, help="results .csv or .jsonl file")
    p_report.add_argument("--format", choices=("table-text", "csv", "json-lines"), default="table-text")
    p_report.add_argument("--out", default=None)

    return parser


def _experiment_config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, protocol=replace(cfg.protocol, seed=args.seed),
                      train=replace(cfg.train, seed=args.seed))
    if getattr(args, "method", None):
        cfg = replace(cfg, method=args.method)
    if getattr(args, "repeat", None) is not None:
        cfg = replace(cfg, repeat=args.repeat)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _write_or_print(text: str, path: str | None) -> None:
    if path:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            raise IoError(f"cannot write {path!r}: {exc}") from exc
    else:
        sys.stdout.write(text)


def _cmd_stream(args) -> int:
    cfg = _experiment_config(args)
    train_ds, test_ds = load_datasets(cfg, cfg.protocol.seed)
    stream = build_session_stream(train_ds, cfg.protocol, test_dataset=test_ds)
    _write_or_print(describe_stream(stream), args.out)
    return 0


def _run_and_emit(cfg, out_dir: str | None) -> int:
    reports, summary = run_experiment(cfg)
    table = render_results(reports, "table-text")
    sys.stdout.write(table)
    sys.stdout.write(
        f"mean PD ({cfg.method}, {cfg.repeat} repeats): {100 * summary['mean_pd']:.2f}\n"
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit_results(reports, "csv", os.path.join(out_dir, f"{cfg.method}.csv"))
        emit_results(reports, "json-lines", os.path.join(out_dir, f"{cfg.method}.jsonl"))
        emit_results(reports, "table-text", os.path.join(out_dir, f"{cfg.method}.txt"))
    return 0


def _cmd_train(args) -> int:
    cfg = _experiment_config(args)
    return _run_and_emit(cfg, cfg.out_dir or None)


def _cmd_eval(args) -> int:
    cfg = _experiment_config(args)
    state = load_state(args.state)
    train_ds, test_ds = load_datasets(cfg, cfg.protocol.seed)
    stream = build_session_stream(train_ds, cfg.protocol, test_dataset=test_ds)
    lines = []
    for t, test_set in enumerate(stream.test_sets):
        if set(test_set.labels()) - state.graph.label_set():
            break
        acc = evaluate_session(state, test_set)
        lines.append(f"session={t} accuracy={100 * acc:.2f}")
    if not lines:
        raise ConfigError("saved state covers none of the stream's test sessions")
    _write_or_print("\n".join(lines) + "\n", args.out)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    all_reports = []
    for method in METHODS:
        reports, _ = run_experiment(replace(cfg, method=method))
        all_reports.extend(reports)
    sys.stdout.write(render_results(all_reports, "table-text"))
    out_dir = cfg.out_dir or None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit_results(all_reports, "csv", os.path.join(out_dir, "ablation.csv"))
        emit_results(all_reports, "json-lines", os.path.join(out_dir, "ablation.jsonl"))
        emit_results(all_reports, "table-text", os.path.join(out_dir, "ablation.txt"))
    return 0


def _cmd_report(args) -> int:
    if args.results.endswith(".jsonl"):
        reports = read_results_jsonl(args.results)
    else:
        reports = read_results_csv(args.results)
    _write_or_print(render_results(reports, args.format), args.out)
    return 0


_COMMANDS = {
    "stream": _cmd_stream,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except (IoError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
