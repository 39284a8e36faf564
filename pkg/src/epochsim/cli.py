"""Command-line frontend: run, gen-trace, sweep and verify."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import asdict
from concurrent.futures import ProcessPoolExecutor

from .config import ConfigError, InfeasibleCL, SimConfig, load_config
from .report import COLUMNS, epoch_rows, summary, write_csv
from .simulator import Simulator
from .trace import TraceError, gen_trace, read_trace
from .verify import GlobalObserver, run_campaign, verdict_report


def parse_seconds(text: str) -> float:
    """CL values are seconds; ``ms`` and ``us`` suffixes are accepted."""
    t = text.strip().lower()
    for suffix, scale in (("ms", 1e-3), ("us", 1e-6), ("s", 1.0)):
        if t.endswith(suffix):
            return float(t[: -len(suffix)]) * scale
    return float(t)


def build_config(args) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "cl_target", None) is not None:
        changes["cl_target_seconds"] = parse_seconds(args.cl_target)
    if getattr(args, "es", None) is not None and isinstance(args.es, int):
        changes["epoch_size_cycles"] = args.es
    return cfg.replace(**changes) if changes else cfg


def check_feasible(sim: Simulator) -> None:
    floor = int(sim.mc.cl_floor)
    if sim.cfg.cl_cycles < floor:
        raise InfeasibleCL(f"CL target {sim.cfg.cl_cycles} cycles is below the minimum "
                           f"checkpoint latency of about {floor} cycles for this system")


def run_once(cfg: SimConfig, trace_path: str, verify: bool = False):
    """Simulate one configuration; returns (rows, summary, problems)."""
    ops = read_trace(trace_path, cfg.core_count, cfg.directive_core)
    obs = GlobalObserver() if verify else None
    sim = Simulator(cfg, ops, observer=obs)
    check_feasible(sim)
    res = sim.run(final_checkpoint=True)
    problems = []
    if obs is not None:
        problems = obs.check_consistent_cut() + obs.assert_flush_clean()
    return epoch_rows(sim), summary(sim, res), problems


def cmd_run(args) -> int:
    cfg = build_config(args)
    rows, summ, problems = run_once(cfg, args.trace, args.verify)
    if args.out and args.out != "-":
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
    else:
        sys.stdout.write(write_csv(rows))
    print(" ".join(f"{k}={v}" for k, v in summ.items()), file=sys.stderr)
    for p in problems:
        print(f"verify: {p}", file=sys.stderr)
    if args.verify:
        print(f"verify: {'PASS' if not problems else 'FAIL'}", file=sys.stderr)
    return 1 if problems else 0


def cmd_gen_trace(args) -> int:
    text = gen_trace(args.cores, args.ops, args.pages, args.zipf, args.write_frac,
                     args.share_frac, args.seed, args.shared_pages)
    if args.out and args.out != "-":
        with open(args.out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _sweep_point(job):
    cfg, trace = job
    try:
        rows, summ, _ = run_once(cfg, trace)
        return rows, summ, ""
    except InfeasibleCL as exc:
        return [], {}, str(exc)


def sweep_points(cfg: SimConfig, cl_list=None, es_list=None) -> list[SimConfig]:
    if cl_list:
        points = [cfg.replace(cl_target_seconds=parse_seconds(c)) for c in cl_list]
    else:
        points = [cfg.replace(epoch_size_cycles=int(e)) for e in es_list]
    if len(points) < 2:
        raise ConfigError("a sweep needs at least two points")
    return points


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    cl_list = args.cl.split(",") if args.cl else None
    es_list = args.es.split(",") if args.es else None
    if bool(cl_list) == bool(es_list):
        raise ConfigError("give exactly one of --cl or --es")
    points = sweep_points(cfg, cl_list, es_list)
    jobs = [(p, args.trace) for p in points]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_sweep_point, jobs))  # map keeps point order
    else:
        results = [_sweep_point(j) for j in jobs]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "cl_target_s", "es_cycles"] + COLUMNS)
    summ_rows = []
    for i, (p, (rows, summ, err)) in enumerate(zip(points, results)):
        for r in rows:
            d = asdict(r)
            w.writerow([i, p.cl_target_seconds, p.epoch_size_cycles] + [d[c] for c in COLUMNS])
        max_cl = max((r.cl_obs_cycles for r in rows), default=-1)
        summ_rows.append([i, p.cl_target_seconds, p.epoch_size_cycles, p.cl_cycles, max_cl,
                          summ.get("run_wa", ""), "infeasible" if err else "ok"])
        if err:
            print(f"point {i}: {err}", file=sys.stderr)
    if args.out and args.out != "-":
        with open(args.out, "w", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    s = csv.writer(sys.stderr if args.out in (None, "-") else sys.stdout, lineterminator="\n")
    s.writerow(["point", "cl_target_s", "es_cycles", "cl_target_cycles", "max_cl_obs", "wa",
                "status"])
    s.writerows(summ_rows)
    return 0


def cmd_verify(args) -> int:
    results = run_campaign(args.campaign, args.runs, args.seed or 0)
    print(verdict_report(results))
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epochsim",
                                 description="NoC-based multicore with epoch checkpoints to NVM")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="simulate one trace and write the per-epoch CSV")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--verify", action="store_true", help="check flush and cut with oracles")
    p.add_argument("--seed", type=int)
    p.add_argument("--cl-target", help="override CL, e.g. 5ms")
    p.add_argument("--es", type=int, help="override epoch size in cycles")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("gen-trace", help="write a synthetic trace")
    p.add_argument("--cores", type=int, default=4)
    p.add_argument("--ops", type=int, default=10000)
    p.add_argument("--pages", type=int, default=256)
    p.add_argument("--zipf", type=float, default=0.0)
    p.add_argument("--write-frac", type=float, default=0.5)
    p.add_argument("--share-frac", type=float, default=0.0)
    p.add_argument("--shared-pages", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_gen_trace)

    p = sub.add_parser("sweep", help="run a trace over several CL or ES points")
    p.add_argument("--config")
    p.add_argument("--trace", required=True)
    p.add_argument("--cl", help="comma list of CL targets, e.g. 1ms,2ms,3ms")
    p.add_argument("--es", help="comma list of epoch sizes in cycles")
    p.add_argument("--cl-target", help="fixed CL for an --es sweep, e.g. 5ms")
    p.add_argument("--out", default="-")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="randomized verification campaigns")
    p.add_argument("--campaign", choices=["noc", "cut", "crash", "oracle", "all"],
                   default="all")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InfeasibleCL as exc:
        print(f"error: infeasible CL: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, TraceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
