"""Command-line runner: gen-codes, train, adapt and report.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
from collections import defaultdict
from pathlib import Path


from . import nn
from .codegen import (CodeStrategy, build_mask_matrix, gold_correlation_bound,
                      gold_family_for_degree, max_pairwise_cross_correlation, min_pairwise_distance)
from .dropout import maskable_layers
from .errors import CodedFDError, ConfigError, NoCandidateReachedTarget
from .fedcore import METRICS_HEADER
from .harness import KEYS, ExperimentConfig, build_experiment, stub_factory
from .lradapt import format_log, run_adaptation

log = logging.getLogger("codedfd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REPORT_HEADER = ("strategy", "round", "runs", "median_train_acc", "test_acc", "cumulative_bytes")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---- gen-codes --------------------------------------------------------------

def code_report_lines(mm, layer_label: str) -> list[str]:
    rows = mm.rows
    lines = [f"[{layer_label}] width {mm.layer_width} strategy {mm.strategy} rows {len(mm)} "
             f"keep_weight {mm.keep_weight}"]
    lines.append(f"rows identical: {str(bool((rows == rows[0]).all())).lower()}")
    if len(rows) > 1:
        lines.append(f"min pairwise distance: {min_pairwise_distance(rows)}")
        lines.append(f"max unnormalized |R| over rows: {max_pairwise_cross_correlation(rows)}")
    if mm.strategy == CodeStrategy.GOLD.value:
        degree = int(mm.layer_width).bit_length() - 1
        fam = gold_family_for_degree(degree)
        lines.append(f"gold degree: {degree}")
        lines.append(f"gold family size: {len(fam)}")
        lines.append(f"max unnormalized |R| over family: {max_pairwise_cross_correlation(fam)}")
        lines.append(f"gold bound: {gold_correlation_bound(degree)}")
    if "d_min" in mm.meta:
        lines.append(f"reported d_min: {mm.meta['d_min']}")
    return lines


def cmd_gen_codes(cfg: ExperimentConfig, out: Path) -> int:
    rc = cfg.round_config()
    widths = cfg["codes.widths"]
    if not widths:
        spec = cfg.model_spec()
        widths = tuple(spec.layers[i].units for i in maskable_layers(spec))
    report = []
    for i, width in enumerate(widths):
        mm = build_mask_matrix(rc.strategy, width, rc.clients_per_round, rc.alpha, seed=cfg.seed,
                               max_iters=cfg["codes.cwc_max_iters"])
        path = out / f"masks_{i}_{rc.strategy.value}_{width}.txt"
        mm.save(path)
        report += code_report_lines(mm, f"matrix {i}") + [f"file: {path.name}", ""]
    (out / "codes_report.txt").write_text("\n".join(report))
    print("\n".join(report))
    return EXIT_OK


# ---- train ------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    exp = build_experiment(cfg)
    session = exp.session()
    rounds = cfg["fl.rounds"]
    for _ in range(rounds):
        m = session.step()
        log.info("round %d median train acc %.4f", m.round, m.median_train_acc)
    if session.history and session.history[-1].test_acc is None and cfg["run.eval_every"]:
        session.history[-1].test_acc = session.evaluate()
    _write_csv(out / "metrics.csv", METRICS_HEADER, (m.csv_row() for m in session.history))
    _write_csv(out / "bytes_accuracy.csv", ("cumulative_bytes", "test_acc"),
               ((m.cumulative_bytes, f"{m.test_acc:.6f}") for m in session.history if m.test_acc is not None))
    nn.save_weights(out / "weights.bin", exp.spec, session.params)
    last = session.history[-1]
    print(f"rounds {rounds} median_train_acc {last.median_train_acc:.4f} "
          f"test_acc {'' if last.test_acc is None else f'{last.test_acc:.4f}'} "
          f"cumulative_bytes {last.cumulative_bytes}")
    return EXIT_OK


# ---- adapt ------------------------------------------------------------------

def adaptation_summary(result, max_rounds: int) -> str:
    return (f"eta_star_log10={result.eta_star_log10!r} eta_star={result.eta_star!r} r_star={result.r_star} "
            f"r0_star={result.r0_star} step_r_stars={','.join(map(str, result.step_r_stars))} "
            f"overhead={result.overhead} measured_overhead={result.measured_overhead} "
            f"candidates={result.candidates_tried} "
            f"full_sessions_baseline={result.full_sessions_baseline(max_rounds)}")


def cmd_adapt(cfg: ExperimentConfig, out: Path) -> int:
    acfg = cfg.adaptation_config()
    factory = stub_factory(cfg) if cfg["adapt.stub"] else build_experiment(cfg).session_factory()
    try:
        result = run_adaptation(factory, acfg)
    except NoCandidateReachedTarget as e:
        (out / "adapt_log.csv").write_text(format_log(e.log or []))
        raise
    (out / "adapt_log.csv").write_text(result.log_csv())
    summary = adaptation_summary(result, acfg.max_rounds)
    (out / "adapt_summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


# ---- report -----------------------------------------------------------------

def _float_or_none(s: str):
    return float(s) if s != "" else None


def aggregate_metrics(paths) -> list[tuple]:
    """Per (strategy, round): run count and means of median train accuracy, test accuracy, bytes."""
    acc = defaultdict(lambda: {"train": [], "test": [], "bytes": []})
    for p in paths:
        with open(p, newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != METRICS_HEADER:
                raise ValueError(f"{p}: not a metrics CSV (header {header})")
            for row in reader:
                rec = dict(zip(header, row))
                slot = acc[(rec["strategy"], int(rec["round"]))]
                slot["train"].append(float(rec["median_train_acc"]))
                slot["bytes"].append(int(rec["cumulative_bytes"]))
                t = _float_or_none(rec["test_acc"])
                if t is not None:
                    slot["test"].append(t)
    rows = []
    for (strategy, rnd), s in sorted(acc.items()):
        test = f"{statistics.fmean(s['test']):.6f}" if s["test"] else ""
        rows.append((strategy, rnd, len(s["train"]), f"{statistics.fmean(s['train']):.6f}", test,
                     f"{statistics.fmean(s['bytes']):.1f}"))
    return rows


def cmd_report(inputs, out: Path) -> int:
    if not inputs:
        raise ConfigError("report needs at least one metrics CSV")
    rows = aggregate_metrics(inputs)
    _write_csv(out / "report.csv", REPORT_HEADER, rows)
    print(f"wrote {len(rows)} rows to {out / 'report.csv'}")
    return EXIT_OK


# ---- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys:\n" + "\n".join(f"  {k:<24} {spec[2]} (default {spec[1]!r})" for k, spec in KEYS.items())
    ap = argparse.ArgumentParser(prog="codedfd", description=__doc__, epilog=epilog,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a dotted config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-codes", parents=[common], help="build mask matrices and report their metrics")
    sub.add_parser("train", parents=[common], help="run one FL session and write metrics and weights")
    sub.add_parser("adapt", parents=[common], help="search the server learning rate")
    rep = sub.add_parser("report", parents=[common], help="aggregate metrics CSVs per strategy and round")
    rep.add_argument("inputs", nargs="*", help="metrics.csv files")
    sub.add_parser("show-config", parents=[common], help="print the resolved config and exit")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    raw = {}
    for item in args.override:
        if "=" not in item:
            raise ConfigError(f"--override expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    if args.seed is not None:
        raw["run.seed"] = str(args.seed)
    if args.out is not None:
        raw["run.out"] = args.out
    return cfg.updated(raw).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        print(cfg.to_text(), end="")
        return EXIT_OK
    out = Path(cfg["run.out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        if args.command == "gen-codes":
            return cmd_gen_codes(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "adapt":
            return cmd_adapt(cfg, out)
        return cmd_report(args.inputs, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CodedFDError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
