"""Command-line entry points: run, eval, compare, replay."""

import argparse
import json
import sys
from pathlib import Path

from .agents import RulePolicy, TrialLog, run_pipeline
from .harness import (
    MetricsReport,
    PolicyKind,
    TrialConfig,
    compare_table,
    eval_logs,
    rows_to_csv,
    run_experiment,
)
from .world import Goal, Pattern, canonical_json


def _load_config(path: str | None, args) -> TrialConfig:
    base = {}
    if path:
        base = json.loads(Path(path).read_text())
    cfg = TrialConfig.from_jsonable(base)
    if args.pattern:
        cfg.pattern = Pattern(args.pattern)
    if args.trials is not None:
        cfg.trials = args.trials
    if args.policy:
        cfg.policy = PolicyKind(args.policy)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.noise is not None:
        cfg.noise_sigma = args.noise
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args)
    logs, report = run_experiment(cfg, out_dir=args.out)
    payload = report.to_jsonable()
    print(canonical_json(payload))
    if args.out:
        print(f"wrote {len(logs)} trial logs and report.json under {args.out}",
              file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    report = eval_logs(args.logs)
    text = canonical_json(report.to_jsonable())
    print(text)
    out = Path(args.logs) / "report.json"
    out.write_text(text + "\n")
    csv_rows = [["trial", "seed", "success", "e_ctr_m", "e_rot_deg", "iou"]]
    for t in report.per_trial:
        d = t.to_jsonable() if hasattr(t, "to_jsonable") else t
        csv_rows.append([d["trial"], d["seed"], d["success"],
                         d["e_ctr"], d["e_rot"], d["iou"]])
    (Path(args.logs) / "report.csv").write_text(rows_to_csv(csv_rows))
    return 0


def cmd_compare(args) -> int:
    reports: dict = {}
    for path in args.reports:
        data = json.loads(Path(path).read_text())
        rep = MetricsReport.from_jsonable(data)
        reports.setdefault(rep.policy, {})[rep.pattern] = rep
    text, rows = compare_table(reports)
    print(text)
    if args.csv:
        Path(args.csv).write_text(rows_to_csv(rows))
    return 0


def cmd_replay(args) -> int:
    log = TrialLog.from_jsonl(Path(args.log).read_text())
    goal = Goal.from_jsonable(log.header["goal"])
    from .checks import Tolerances
    from .world import WorldConfig

    tol = Tolerances.from_jsonable(log.header["tolerances"])
    index = None
    for i, e in enumerate(log.entries):
        if e["tick"] >= args.from_tick:
            index = i
            break
    if index is None:
        print("no entry at or after the requested tick", file=sys.stderr)
        return 1
    checkpoint = log.entries[index].get("checkpoint")
    if not checkpoint:
        print("log was recorded without checkpoints; cannot replay", file=sys.stderr)
        return 1
    resumed = run_pipeline(None, goal, RulePolicy(), tol, WorldConfig(),
                           resume=checkpoint)
    original = log.entry_lines(index)
    replayed = resumed.entry_lines(0)
    identical = original == replayed and canonical_json(
        {"type": "summary", **(log.summary or {})}) == canonical_json(
        {"type": "summary", **(resumed.summary or {})})
    print(canonical_json({
        "resumed_at_entry": index,
        "resumed_at_tick": log.entries[index]["tick"],
        "replayed_entries": len(replayed),
        "identical": identical,
    }))
    return 0 if identical else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="brickstack",
        description="Deterministic brick-stacking simulator with a gated "
                    "six-stage planning pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run seeded trials and report metrics")
    p_run.add_argument("--pattern", choices=[p.value for p in Pattern])
    p_run.add_argument("--trials", type=int)
    p_run.add_argument("--policy", choices=[p.value for p in PolicyKind])
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--noise", type=float, help="pose noise sigma in meters")
    p_run.add_argument("--config", help="JSON config file (tolerances, world, llm)")
    p_run.add_argument("--out", help="directory for JSONL logs and report.json")
    p_run.set_defaults(fn=cmd_run)

    p_eval = sub.add_parser("eval", help="recompute metrics from persisted logs")
    p_eval.add_argument("--logs", required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_cmp = sub.add_parser("compare", help="render a comparison table from reports")
    p_cmp.add_argument("--reports", nargs="+", required=True)
    p_cmp.add_argument("--csv", help="also write the table as CSV")
    p_cmp.set_defaults(fn=cmd_compare)

    p_rep = sub.add_parser("replay", help="re-execute a trial from a serialized state")
    p_rep.add_argument("--log", required=True)
    p_rep.add_argument("--from-tick", type=int, default=0, dest="from_tick")
    p_rep.set_defaults(fn=cmd_replay)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
