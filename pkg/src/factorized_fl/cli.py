"""Command line entry point: ``factorized-fl <subcommand> --config PATH``.

Exit codes: 0 success, 1 suite cells failed, 2 invalid config or input,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import dump_config, load_yaml, normalize
from .errors import ConfigError, FormatError, InputError, NumericError
from .runner import cost_table, run_divergence_probe, run_experiment, run_suite, run_uv_probe

EXIT_OK, EXIT_FAILED_CELLS, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _out_dir(args, fallback: str | None) -> Path | None:
    if args.out:
        return Path(args.out)
    if os.environ.get("OUTPUT_DIR"):
        return Path(os.environ["OUTPUT_DIR"])
    return Path(fallback) if fallback else None


def _load_experiment(args) -> dict:
    raw = load_yaml(args.config)
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a mapping")
    if args.seed is not None:
        raw["global_seed"] = args.seed
    cfg, errors = normalize(raw)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def cmd_run(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, cfg["output_dir"])
    result = run_experiment(cfg, out, threads=args.threads)
    print(f"final mean test accuracy {result.final():.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_suite(args) -> int:
    suite = load_yaml(args.config)
    base = suite.get("base", {}) if isinstance(suite, dict) else {}
    out = _out_dir(args, base.get("output_dir", "runs/suite") if isinstance(base, dict) else "runs/suite")
    path, failures = run_suite(suite, out, threads=args.threads, seed=args.seed)
    print(path.read_text(encoding="utf-8"), end="")
    if failures:
        print(f"{failures} suite cell(s) failed", file=sys.stderr)
        return EXIT_FAILED_CELLS
    return EXIT_OK


def _probe_args(args):
    cfg = load_yaml(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("<root>: probe config must be a mapping")
    seed = args.seed if args.seed is not None else int(cfg.get("global_seed", 0))
    return cfg, seed, _out_dir(args, cfg.get("output_dir"))


def cmd_probe_divergence(args) -> int:
    cfg, seed, out = _probe_args(args)
    traces = run_divergence_probe(cfg, seed, out)
    for name, t in traces.items():
        print(f"{name:>9}: final normalized distance {t.distances[-1]:.4f}")
    return EXIT_OK


def cmd_probe_uv(args) -> int:
    cfg, seed, out = _probe_args(args)
    traces = run_uv_probe(cfg, seed, out)
    for name, (tu, tv) in traces.items():
        print(f"{name:>9}: final u {tu.distances[-1]:.4f}  v {tv.distances[-1]:.4f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    raw = load_yaml(args.config)
    if isinstance(raw, dict) and args.seed is not None:
        raw["global_seed"] = args.seed
    cfg, errors = normalize(raw)
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        return EXIT_CONFIG
    text = dump_config(cfg)
    out = _out_dir(args, None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.normalized.yaml").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_cost(args) -> int:
    rows = cost_table(_load_experiment(args))
    out = _out_dir(args, None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.json").write_text(json.dumps(rows, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if args.json:
        print(json.dumps(rows, sort_keys=True, indent=1))
        return EXIT_OK
    print(f"{'strategy':<20}{'s2c':>12}{'c2s':>12}{'GB':>12}{'vs fedavg':>12}")
    for r in rows:
        mark = " *" if r["configured"] else ""
        print(f"{r['strategy']:<20}{r['s2c_params']:>12}{r['c2s_params']:>12}"
              f"{r['gigabytes']:>12.4f}{r['ratio_to_fedavg']:>12.5f}{mark}")
    return EXIT_OK


COMMANDS = {
    "run": (cmd_run, "run one experiment config"),
    "suite": (cmd_suite, "run a scenario x strategy grid over several trials"),
    "probe-divergence": (cmd_probe_divergence, "update divergence between paired trainings"),
    "probe-uv": (cmd_probe_uv, "u and v divergence of a factorized model"),
    "validate": (cmd_validate, "check a config and print its normalized form"),
    "cost": (cmd_cost, "communication cost formula for every strategy"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factorized-fl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log round progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override global_seed")
        p.add_argument("--out", default=None, help="output directory (else $OUTPUT_DIR, else config)")
        p.add_argument("--threads", type=int, default=1, help="client loops run concurrently")
        if name == "cost":
            p.add_argument("--json", action="store_true", help="print JSON instead of a table")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, InputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
