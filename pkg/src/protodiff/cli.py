"""Command-line entry point: ``protodiff {gen-data,run,ablate-alpha,report}``.

Exit codes: 0 success, 1 configuration error, 2 runtime or contract failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .classifier import SessionReport, aggregate_run
from .config import ConfigError, load_config, stage_seeds, write_config
from .protocol import (
    ContractViolation,
    StageError,
    ablate_alpha,
    generate_dataset,
    run_full_protocol,
    specs_from_config,
    write_dataset,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ReportError(RuntimeError):
    pass


def _config(args):
    return load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if cfg.source != "synthetic":
        raise ConfigError("gen-data needs source = synthetic")
    spec, protocol = specs_from_config(cfg)
    ds = generate_dataset(spec, protocol, stage_seeds(cfg.seed)["data"])
    out = Path(cfg.out)
    paths = write_dataset(ds, out)
    write_config(out / "config", cfg)
    rows = {"train": len(ds.train_y), "eval": len(ds.eval_y), "conditions": len(ds.conditions)}
    for name, path in paths.items():
        print(f"{path}  ({rows[name]} rows)")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_full_protocol(cfg, Path(cfg.out))
    s = res.summary
    print(format_row("ours", s["session_total_acc"], s["avg"]))
    for name, b in s["baselines"].items():
        print(format_row(name, b["session_total_acc"], b["avg"]))
    print(f"run directory: {res.out_dir}")
    return EXIT_OK


def cmd_ablate_alpha(args) -> int:
    cfg = _config(args)
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse alpha list {args.alphas!r}") from None
    bad = [a for a in alphas if not 0.0 <= a <= 1.0]
    if bad or not alphas:
        raise ConfigError(f"alphas must be a non-empty list in [0, 1], got {args.alphas!r}")
    out = Path(cfg.out)
    rows = ablate_alpha(cfg, alphas, out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "alpha_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "avg", "last", "last_new_acc"])
        for r in rows:
            w.writerow([repr(r["alpha"]), repr(r["avg"]), repr(r["last"]), repr(r["new_acc"][-1])])
    print(f"{'alpha':>6}  {'Avg':>7}  {'Last':>7}  {'New(last)':>9}")
    for r in rows:
        print(f"{r['alpha']:>6g}  {r['avg']:7.2f}  {r['last']:7.2f}  {_pct(r['new_acc'][-1]):>9}")
    return EXIT_OK


def _pct(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def format_row(label: str, accs, avg) -> str:
    return " | ".join([f"{label:<10}"] + [f"{a:6.2f}" for a in accs] + [f"Avg {avg:6.2f}"])


def load_reports(run_dir) -> list[SessionReport]:
    rep_dir = Path(run_dir) / "reports"
    files = sorted(rep_dir.glob("session_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise ReportError(f"no session reports found under {rep_dir}")
    reports = []
    for f in files:
        try:
            reports.append(SessionReport.from_dict(json.loads(f.read_text())))
        except (ValueError, KeyError, TypeError) as e:
            raise ReportError(f"corrupt report file {f}: {e}") from None
    if [r.session for r in reports] != list(range(len(reports))):
        raise ReportError(f"session reports under {rep_dir} are not numbered 0..{len(reports) - 1}")
    return reports


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    reports = load_reports(run_dir)
    agg = aggregate_run(reports)
    header = " | ".join([f"{'session':<10}"] + [f"{r.session:>6}" for r in reports] + ["   Avg"])
    print(header)
    print(format_row("total", agg["sessions"], agg["avg"]))
    csv_path = Path(args.out) / "report.csv" if args.out else run_dir / "report.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session", "total_acc", "base_acc", "new_acc"])
        for r in reports:
            w.writerow([r.session, r.total_acc,
                        "" if r.base_acc is None else r.base_acc,
                        "" if r.new_acc is None else r.new_acc])
    print(f"wrote {csv_path}")
    return EXIT_OK


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--seed", type=_u64, metavar="U64", help="master seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, metavar="N", help="sampling threads")

    p = argparse.ArgumentParser(prog="protodiff",
                                description="Training-free few-shot class-incremental pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic dataset files") \
        .set_defaults(func=cmd_gen_data)
    sub.add_parser("run", parents=[common], help="run the full session protocol") \
        .set_defaults(func=cmd_run)
    a = sub.add_parser("ablate-alpha", parents=[common], help="sweep the fusion weight")
    a.add_argument("--alphas", default="0,0.25,0.5,0.75,1", help="comma-separated list")
    a.set_defaults(func=cmd_ablate_alpha)
    r = sub.add_parser("report", parents=[common], help="summarize a run directory")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; bad arguments count as config errors here
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractViolation, StageError, ReportError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
