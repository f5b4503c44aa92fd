"""``dslab`` command line: train, sweep, verify, gradcheck.

Outputs go to files; the exit code is the machine-readable verdict
(0 ok, 1 a check failed, 2 usage or config error, 3 data unavailable).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as C
from . import experiment, gradcheck, verify
from .data import DataDirError, DataFormatError
from .initializers import SCHEMES

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"dslab: error: {msg}", file=sys.stderr)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(args) -> C.RunConfig:
    cfg = C.load(args.config)
    if getattr(args, "out", None):
        cfg = cfg.replace("output", dir=args.out)
    if getattr(args, "max_steps", None) is not None:
        cfg = cfg.replace("train", max_steps=args.max_steps)
    if getattr(args, "subset", None) is not None:
        cfg = cfg.replace("data", subset=args.subset)
    if getattr(args, "data_dir", None):
        cfg = cfg.replace("data", dir=args.data_dir)
    if getattr(args, "lsuv_include_aux", None) is not None:
        cfg = cfg.replace("init", lsuv_include_aux=args.lsuv_include_aux)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.init:
        cfg = cfg.replace("init", scheme=args.init)
    if args.seed is not None:
        cfg = cfg.replace("init", seed=args.seed)
    out = Path(cfg.output.dir)
    summary = experiment.run(cfg, out)
    _info(f"wrote {out / experiment.SUMMARY}")
    print(json.dumps({k: summary[k] for k in ("method", "seed", "steps_to_threshold", "steps_run",
                                              "final_train_acc", "final_val_acc")}))
    return EXIT_OK


def _csv_list(text: str, kind=str) -> list:
    return [kind(v.strip()) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    methods = args.methods
    bad = [m for m in methods if m not in SCHEMES]
    if bad:
        _err(f"unknown init scheme(s) {bad}; expected one of {list(SCHEMES)}")
        return EXIT_USAGE
    out = Path(cfg.output.dir)
    summaries = experiment.sweep(cfg, args.seeds, methods, out, jobs=args.jobs, log=_info)
    paths = experiment.report(out, summaries, methods, args.seeds, baseline=args.baseline)
    _info(f"wrote {paths['results_txt']}")
    print(paths["results_txt"].read_text(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    props = verify.PROPS if args.all or not args.prop else tuple(args.prop)
    results = verify.run(props)
    payload = {
        "passed": all(r.passed for r in results),
        "results": [r.to_dict() for r in results],
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for r in results:
        _info(f"{'PASS' if r.passed else 'FAIL'}  {r.prop:<12} {r.case}")
    if not args.out:
        print(text)
    return EXIT_OK if payload["passed"] else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(seeds=args.seeds)
    worst = gradcheck.worst_by_op(results)
    payload = {
        "seeds": args.seeds,
        "tolerance": gradcheck.TOLERANCE,
        "max_rel_err": max(r.max_rel_err for r in results),
        "ops": {op: {"max_rel_err": r.max_rel_err, "seed": r.seed} for op, r in sorted(worst.items())},
    }
    payload["passed"] = payload["max_rel_err"] <= gradcheck.TOLERANCE
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for op, r in sorted(worst.items()):
        _info(f"{op:<24} worst rel err {r.max_rel_err:.3e} (seed {r.seed})")
    if not args.out:
        print(text)
    return EXIT_OK if payload["passed"] else EXIT_FAIL


def _add_config_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", required=True, help="run config (.toml, or a resolved .json)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--max-steps", type=int, help="overrides train.max_steps")
    p.add_argument("--subset", type=int, help="training images per class (overrides data.subset)")
    p.add_argument("--data-dir", help="dataset directory (overrides data.dir and $DSLAB_DATA_DIR)")
    p.add_argument("--lsuv-include-aux", action=argparse.BooleanOptionalAction, default=None,
                   help="whether plain LSUV also calibrates aux heads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dslab", description="Deep-supervision initialization laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_config_overrides(p)
    p.add_argument("--init", choices=SCHEMES, help="initialization scheme")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run seeds x methods, then write the report")
    _add_config_overrides(p)
    p.add_argument("--seeds", type=lambda s: _csv_list(s, int), default=[42, 123, 456],
                   help="comma-separated seeds (default 42,123,456)")
    p.add_argument("--methods", type=_csv_list, default=["he", "lion-dg", "lsuv", "hybrid"],
                   help="comma-separated init schemes (default he,lion-dg,lsuv,hybrid)")
    p.add_argument("--baseline", default="he", help="method the tests and speedups compare against")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--all", action="store_true", help="every property (the default)")
    p.add_argument("--prop", action="append", choices=verify.PROPS, help="one property; repeatable")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except C.ConfigError as e:
        _err(str(e))
        return EXIT_USAGE
    except DataDirError as e:
        _err(str(e))
        return EXIT_DATA
    except DataFormatError as e:
        _err(f"bad data file: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
