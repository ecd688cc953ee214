"""Command-line entry point: ``efsim run|list|validate``."""

from __future__ import annotations

import argparse
import sys
import traceback

from .engine import NoAcceptanceError
from .harness import (
    ConfigError,
    ConfigIssue,
    UnknownExperimentError,
    get_experiment,
    list_experiments,
    load_config,
    parse_config,
    run_experiment,
    validate_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_ACCEPTANCE = 3
EXIT_INTERNAL = 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="efsim", description="Error filtration experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a registered experiment")
    r.add_argument("name", nargs="?", help="experiment name (taken from --config when omitted)")
    r.add_argument("--config", help="YAML config file")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--seed-override", type=int, help="replace the config seed")
    r.add_argument("--samples-override", type=int, help="replace the config sample count")
    r.add_argument("--threads", type=int, help="worker threads for sampling")
    r.add_argument("--no-plots", action="store_true", help="skip SVG output")
    sub.add_parser("list", help="list registered experiments")
    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("path")
    return ap


def _cmd_run(args) -> int:
    overrides = {}
    if args.seed_override is not None:
        overrides["seed"] = args.seed_override
    if args.samples_override is not None:
        overrides["samples"] = args.samples_override
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.config:
        cfg = load_config(args.config, overrides)
        if args.name and args.name != cfg.experiment:
            raise ConfigError([ConfigIssue("experiment", f"config is for {cfg.experiment!r}, not {args.name!r}")])
    elif args.name:
        get_experiment(args.name)
        # built-in defaults; seed 0 unless overridden
        cfg = parse_config({"experiment": args.name, "seed": 0}, overrides=overrides)
    else:
        print("error: give an experiment name or --config", file=sys.stderr)
        return EXIT_CONFIG
    manifest = run_experiment(cfg.experiment, cfg, args.out, plots=not args.no_plots)
    print(f"{manifest.experiment}  (config {manifest.config_hash[:12]}, {manifest.wall_time_s:.2f} s)")
    for line in manifest.summary:
        print(f"  {line}")
    print(f"wrote {', '.join(manifest.outputs)} to {args.out or cfg.output_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "list":
            rows = list_experiments()
            w0 = max(len(r[0]) for r in rows)
            w1 = max(len(r[1]) for r in rows)
            for name, anchor, desc in rows:
                print(f"{name:<{w0}}  {anchor:<{w1}}  {desc}")
            return EXIT_OK
        if args.command == "validate":
            rep = validate_config(args.path)
            print(rep, file=sys.stdout if rep.ok else sys.stderr)
            return EXIT_OK if rep.ok else EXIT_CONFIG
        return _cmd_run(args)
    except ConfigError as exc:
        for issue in exc.issues:
            print(f"config error: {issue}", file=sys.stderr)
        return EXIT_CONFIG
    except UnknownExperimentError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except NoAcceptanceError as exc:
        print(f"zero acceptance: {exc}", file=sys.stderr)
        return EXIT_NO_ACCEPTANCE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
