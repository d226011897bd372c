"""Command line benchmark harness.

``risam-bench run`` executes trials and writes ``metrics.csv``,
``summary.csv`` and per-trial keyframe trajectory dumps into ``--out-dir``;
``risam-bench report`` renders figures from those files.  ``run`` is the
default subcommand, so ``risam-bench --method gm --gridworld ""`` works too.

Config files are flat ``key = value`` text, one entry per line, ``#`` starts
a comment.  Recognized keys are the command line options (``method``,
``dataset``, ``gridworld``, ``sphere``, ``outlier_fraction``, ``seeds``,
``keyframe_interval``), any :class:`RiSAMConfig` field, and the flags
``batch_every_iteration`` and ``uniform_weights``.  Command line values win
over the file; ``--set key=value`` overrides anything.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields

from .harness import (METHODS, METRIC_FIELDS, RunSpec, dump_trajectories, record_row,
                      run_suite, summarize, trajectory_filename, write_csv)
from .optimizer import RiSAMConfig

log = logging.getLogger(__name__)

RUN_KEYS = ("method", "dataset", "gridworld", "sphere", "outlier_fraction", "seeds",
            "keyframe_interval")
FLAG_KEYS = ("batch_every_iteration", "uniform_weights")


class ConfigError(ValueError):
    pass


def parse_value(text):
    """Best-effort scalar parse: bool, int, float, else the stripped string."""
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_kv_list(text):
    """``"a=1,b=2"`` -> ``{"a": 1, "b": 2}``; empty text gives ``{}``."""
    out = {}
    for item in filter(None, (t.strip() for t in (text or "").split(","))):
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def parse_seeds(text):
    """``"0-4"``, ``"1,3,7"`` or mixtures like ``"0-2,9"``."""
    if isinstance(text, int):
        return [text]
    seeds = []
    for part in filter(None, (t.strip() for t in str(text).split(","))):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ConfigError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds


def read_config(path):
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            cfg[k.strip()] = v.strip()
    return cfg


def _known_keys():
    return set(RUN_KEYS) | set(FLAG_KEYS) | {f.name for f in fields(RiSAMConfig)}


def build_specs(args):
    """Merge config file, flags and ``--set`` overrides into one RunSpec per method."""
    raw = read_config(args.config) if args.config else {}
    for k in RUN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    for item in args.set or []:
        raw.update({k: str(v) for k, v in parse_kv_list(item).items()})
    unknown = set(raw) - _known_keys()
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    methods = [m.strip() for m in str(raw.get("method", "risam")).split(",") if m.strip()]
    sources = [k for k in ("dataset", "gridworld", "sphere") if k in raw]
    if len(sources) != 1:
        raise ConfigError("give exactly one of --dataset, --gridworld, --sphere")
    src = sources[0]
    kw = {}
    if src == "dataset":
        kw["dataset"] = str(raw["dataset"])
    else:
        kw[src] = parse_kv_list(str(raw[src]))
    of = raw.get("outlier_fraction")
    config = {k: parse_value(str(v)) for k, v in raw.items()
              if k not in RUN_KEYS}
    specs = []
    for m in methods:
        specs.append(RunSpec(
            method=m,
            outlier_fraction=None if of is None else float(of),
            seeds=parse_seeds(raw.get("seeds", "0")),
            keyframe_interval=int(raw.get("keyframe_interval", 25)),
            config=config,
            **kw,
        ))
    # surface bad solver settings before any trial starts
    for s in specs:
        s.solver_config()
    return specs


def _print_table(rows, fieldnames, out):
    w = csv.DictWriter(out, fieldnames=fieldnames, extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_run(args):
    try:
        specs = build_specs(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out_dir, exist_ok=True)
    records = run_suite(specs, workers=args.workers)
    rows = [record_row(r) for r in records]
    write_csv(os.path.join(args.out_dir, "metrics.csv"), rows, METRIC_FIELDS)
    summary = summarize(records)
    write_csv(os.path.join(args.out_dir, "summary.csv"), summary)
    traj_dir = os.path.join(args.out_dir, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    for r in records:
        dump_trajectories(r, os.path.join(traj_dir, trajectory_filename(r)))
    _print_table(summary, list(summary[0]), sys.stdout)
    failed = sum(r.metrics.failed for r in records)
    if failed:
        print(f"{failed} of {len(records)} trials failed; see metrics.csv", file=sys.stderr)
        return 1
    return 0


def cmd_report(args):
    from . import report
    try:
        paths = report.render(args.out_dir, fig_dir=args.fig_dir)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


def _add_run_args(p):
    p.add_argument("--method", help=f"one or more of {', '.join(METHODS)} (comma separated)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="g2o file (VERTEX/EDGE SE2 or SE3:QUAT)")
    src.add_argument("--gridworld", metavar="K=V,...",
                     help="synthetic grid world; keys of GridWorldParams, '' for defaults")
    src.add_argument("--sphere", metavar="K=V,...",
                     help="synthetic SE(3) sphere; keys of SphereParams, '' for defaults")
    p.add_argument("--outlier-fraction", dest="outlier_fraction", type=float)
    p.add_argument("--seeds", help="e.g. 0-19 or 0,3,5 (default 0)")
    p.add_argument("--keyframe-interval", dest="keyframe_interval", type=int)
    p.add_argument("--out-dir", dest="out_dir", default="results")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--set", action="append", metavar="K=V,...", help="override config entries")
    p.add_argument("--workers", type=int, help="parallel trials (default: CPUs, capped by RISAM_THREADS)")


def make_parser():
    parser = argparse.ArgumentParser(prog="risam-bench", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    _add_run_args(sub.add_parser("run", help="run trials and write CSV + trajectory dumps"))
    rp = sub.add_parser("report", help="render figures from a run directory")
    rp.add_argument("--out-dir", dest="out_dir", default="results")
    rp.add_argument("--fig-dir", dest="fig_dir", help="default: <out-dir>/figures")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not any(a in ("run", "report", "-h", "--help") for a in argv[:2]):
        argv.insert(1 if argv[:1] in (["-v"], ["--verbose"]) else 0, "run")
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return cmd_report(args)
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
