"""Command-line entry point: ``wiener-ot run | report | compare``.

``run`` executes a config and writes artifacts plus a manifest, ``report``
renders a one-page pass/fail summary of an existing run directory, and
``compare`` prints solver cross-check tables for the oracle-compare jobs of
a config.  Exit codes: 0 success, 1 job failure, 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, build_density, load_config
from .errors import ConfigInvalid, ManifestMissing, NoApplicableMethod
from .reporting import CASCADE_COLUMNS, INEQUALITY_COLUMNS, RESIDUAL_COLUMNS
from .runner import load_manifest, oracle_compare, run_config


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return [], []
    return rows[0], rows[1:]


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def render_report(run_dir) -> str:
    """One-page text summary of a run: failing rows first, then worst slacks.

    Reads the manifest for job status and walks every CSV artifact it lists,
    classifying files by their header row.
    """
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)

    check_rows = []   # (passed, badness, label) — higher badness is worse
    slack_lines = []  # regularity/residual slack per test case
    extra_lines = []  # cascade / compare / solve one-liners

    for job in manifest.get("jobs", []):
        jname = job["name"]
        for entry in job.get("files", []):
            path = run_dir / entry["path"]
            if path.suffix != ".csv" or not path.exists():
                continue
            header, rows = _read_csv(path)
            if header == list(INEQUALITY_COLUMNS):
                for name, lhs, rhs, slack, ok, witness in rows:
                    passed = ok == "true"
                    check_rows.append((
                        passed, -float(slack),
                        f"{name}  slack={_fmt(float(slack))}  [{jname}] {witness}"))
            elif header == list(RESIDUAL_COLUMNS):
                for identity, norm, value, tol, ok in rows:
                    passed = ok == "true"
                    if norm in ("lhs", "rhs"):
                        continue  # context moments, not residual norms
                    # slack rows: bigger is safer; residual norms: smaller is
                    badness = -float(value) if norm == "slack" else float(value)
                    check_rows.append((
                        passed, badness,
                        f"{identity}/{norm}={_fmt(float(value))}  "
                        f"tol={_fmt(float(tol))}  [{jname}]"))
                    if norm == "slack":
                        slack_lines.append(
                            f"{identity}  slack={_fmt(float(value))}  [{jname}]")
            elif header == list(CASCADE_COLUMNS):
                if rows:
                    final = rows[-1]
                    extra_lines.append(
                        f"cascade [{jname}] {path.name}: {len(rows)} rows, "
                        f"final phi_gap={_fmt(float(final[3]))}, "
                        f"final hess_gap={_fmt(float(final[6]))}")
            elif header == ["method", "cost", "phi_gap_vs_first"]:
                cells = ", ".join(
                    f"{m}: cost={_fmt(float(c))}, gap={_fmt(float(g))}"
                    for m, c, g in rows)
                extra_lines.append(f"compare [{jname}]: {cells}")
            elif header == ["field", "value"]:
                fields = dict(rows)
                if "cost" in fields:
                    extra_lines.append(
                        f"solve [{jname}]: cost={_fmt(float(fields['cost']))} "
                        f"({fields.get('solver', '?')})")

    statuses = [j["status"] for j in manifest.get("jobs", [])]
    n_ok = statuses.count("ok")
    n_failed = statuses.count("failed")
    n_refused = statuses.count("refused")
    failed_rows = sorted((r for r in check_rows if not r[0]),
                         key=lambda r: -r[1])
    passed_rows = sorted((r for r in check_rows if r[0]),
                         key=lambda r: -r[1])

    lines = [
        f"batch run report: {run_dir}",
        f"config {manifest['config_hash'][:12]}  tool {manifest['version']}  "
        f"seed {manifest['seed']}",
        f"jobs: {len(statuses)} total | {n_ok} ok | {n_failed} failed | "
        f"{n_refused} refused | wall {manifest.get('wall_time_s', 0.0):.1f} s",
    ]
    for job in manifest.get("jobs", []):
        mark = {"ok": " ", "failed": "!", "refused": "~"}.get(job["status"], "?")
        note = f"  ({job['error']})" if job.get("error") else ""
        lines.append(f"  {mark} {job['name']} [{job['kind']}] "
                     f"{job['status']} {job['wall_time_s']:.2f}s{note}")

    lines.append("")
    lines.append(f"checks: {len(check_rows)} rows | "
                 f"{len(passed_rows)} pass | {len(failed_rows)} fail")
    if failed_rows:
        lines.append("failing rows first:")
        for _, _, label in failed_rows[:20]:
            lines.append(f"  FAIL  {label}")
        if len(failed_rows) > 20:
            lines.append(f"  ... and {len(failed_rows) - 20} more")
    if passed_rows:
        lines.append("tightest passing rows:")
        for _, _, label in passed_rows[:10]:
            lines.append(f"  ok    {label}")
    if slack_lines:
        lines.append("bound slack per test case:")
        lines.extend(f"  {s}" for s in slack_lines[:10])
    if extra_lines:
        lines.append("")
        lines.extend(extra_lines[:12])

    lines.append("")
    if n_failed == 0 and not failed_rows and n_refused == 0:
        lines.append(f"PASS 100% — all {len(check_rows)} recorded checks passed.")
    elif n_failed == 0 and not failed_rows:
        lines.append(f"PASS — {len(check_rows)} checks passed; "
                     f"{n_refused} job(s) refused (not counted as failures).")
    else:
        lines.append(f"FAIL — {len(failed_rows)} of {len(check_rows)} checks "
                     f"failed; {n_failed} job(s) failed.")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    manifest, code = run_config(cfg, out_dir=args.out, seed=args.seed,
                                jobs_parallel=args.jobs)
    print(f"run directory: {manifest.output_dir}")
    for job in manifest.jobs:
        note = f"  ({job.error})" if job.error else ""
        print(f"  {job.name} [{job.kind}] {job.status} "
              f"{job.wall_time_s:.2f}s{note}")
    print(f"manifest: {Path(manifest.output_dir) / 'manifest.json'}")
    return code


def _cmd_report(args: argparse.Namespace) -> int:
    print(render_report(args.run_dir))
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    jobs = [j for j in cfg.jobs if j.kind == "oracle-compare"]
    if not jobs:
        raise ConfigInvalid("config has no oracle-compare jobs")

    if args.out is not None:
        sub = ExperimentConfig(densities=cfg.densities, grids=cfg.grids,
                               jobs=jobs, seed=cfg.seed, output_dir=args.out)
        manifest, code = run_config(sub, seed=args.seed,
                                    jobs_parallel=args.jobs)
    else:
        code = 0

    for job in jobs:
        rho = build_density(cfg.densities[job.options["rho"]])
        nu = build_density(cfg.densities[job.options["nu"]])
        table = oracle_compare(rho, nu, methods=job.options.get("methods"))
        print(f"comparison {job.name}: "
              f"rho={job.options['rho']} nu={job.options['nu']}")
        print(f"  {'method':<10} {'cost':<24} {'phi_gap_vs_first':<20} runtime_s")
        for row in table["rows"]:
            print(f"  {row['method']:<10} {row['cost']:<24.16g} "
                  f"{row['phi_gap_vs_first']:<20.6g} {row['runtime_s']:.3f}")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wiener-ot",
        description="Config-driven transport experiments: exact and entropic "
                    "solvers, identity verification, approximation sweeps, "
                    "and inequality suites.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a config and write artifacts")
    p_run.add_argument("config", help="TOML experiment config")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    p_run.add_argument("--jobs", type=int, default=1, metavar="N",
                       help="run up to N jobs concurrently")
    p_run.add_argument("--out", default=None, metavar="DIR",
                       help="override the config output directory")
    p_run.set_defaults(func=_cmd_run)

    p_rep = sub.add_parser("report", help="summarize an existing run directory")
    p_rep.add_argument("run_dir", help="directory containing manifest.json")
    p_rep.set_defaults(func=_cmd_report)

    p_cmp = sub.add_parser("compare",
                           help="print solver cross-check tables for the "
                                "oracle-compare jobs of a config")
    p_cmp.add_argument("config", help="TOML experiment config")
    p_cmp.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    p_cmp.add_argument("--jobs", type=int, default=1, metavar="N",
                       help="run up to N jobs concurrently (with --out)")
    p_cmp.add_argument("--out", default=None, metavar="DIR",
                       help="also write comparison artifacts to DIR")
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ManifestMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NoApplicableMethod as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
