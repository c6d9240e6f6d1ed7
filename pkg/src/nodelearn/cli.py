"""Command line surface: validate, run, sweep, report, gen-data.

Configs are fully declarative; the only flag that changes run semantics is
the seed override, and it is recorded in the manifest. Exit codes: 0 success,
1 validation failure, 2 runtime fault.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import itertools
import json
import os
import sys
from pathlib import Path

from . import datagen, engine, metrics
from .config import build_stream_spec, load_config, validate_config
from .errors import NodeLearnError

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAULT = 2


def _load_raw(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _out_root(explicit) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("NODELEARN_OUT", "runs"))


def _run_completed(out_dir: Path) -> bool:
    return (out_dir / "manifest.json").exists()


def cmd_validate(args) -> int:
    try:
        raw = _load_raw(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    cfg, errors, warnings = validate_config(raw, strict=not args.lax)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {cfg.name} ({cfg.nodes} nodes, {cfg.ticks} ticks, regime {cfg.regime})")
    return EXIT_OK


def _execute_run(raw: dict, config_path, out_dir: Path, force: bool, lax: bool) -> int:
    cfg, errors, warnings = validate_config(raw, strict=not lax)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    if _run_completed(out_dir) and not force:
        print(f"error: {out_dir} already holds a completed run (use --force)",
              file=sys.stderr)
        return EXIT_INVALID
    state = engine.run(cfg)
    metrics.write_run_outputs(state, out_dir, config_path)
    print(f"run {cfg.name} seed={cfg.seed}: {len(state.rows)} metric rows -> {out_dir}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        raw = _load_raw(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.seed is not None:
        raw["seed"] = args.seed
    out_dir = _out_root(args.out)
    return _execute_run(raw, args.config, out_dir, args.force, args.lax)


def _sweep_cell(raw, config_path, overrides, seed, out_dir, force, lax):
    cell = json.loads(json.dumps(raw))
    for dotted, value in overrides:
        target = cell
        parts = dotted.split(".")
        for key in parts[:-1]:
            target = target.setdefault(key, {})
        target[parts[-1]] = value
    cell["seed"] = seed
    return _execute_run(cell, config_path, out_dir, force, lax)


def _parse_grid(specs):
    grid = []
    for spec in specs or []:
        if "=" not in spec:
            raise NodeLearnError(f"bad grid spec {spec!r}, expected field=v1,v2")
        field, values = spec.split("=", 1)
        parsed = []
        for v in values.split(","):
            parsed.append(json.loads(v))
        grid.append((field, parsed))
    return grid


def cmd_sweep(args) -> int:
    try:
        raw = _load_raw(args.config)
        grid = _parse_grid(args.grid)
    except (OSError, json.JSONDecodeError, NodeLearnError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [raw.get("seed", 0)]
    root = _out_root(args.out)
    cells = []
    names = [f for f, _ in grid]
    for combo in itertools.product(*[vals for _, vals in grid]) if grid else [()]:
        overrides = list(zip(names, combo))
        for seed in seeds:
            parts = [f"{f.replace('.', '-')}={v}" for f, v in overrides]
            cell_dir = root.joinpath(*parts) / f"seed={seed}" if parts \
                else root / f"seed={seed}"
            cells.append((overrides, seed, cell_dir))
    failures = 0
    with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
        futs = {pool.submit(_sweep_cell, raw, args.config, overrides, seed, cell_dir,
                            args.force, args.lax): cell_dir
                for overrides, seed, cell_dir in cells}
        for fut in concurrent.futures.as_completed(futs):
            try:
                code = fut.result()
            except Exception as exc:  # a failed cell never stops the sweep
                print(f"error: {futs[fut]}: {exc}", file=sys.stderr)
                failures += 1
                continue
            if code != EXIT_OK:
                failures += 1
    print(f"sweep: {len(cells) - failures}/{len(cells)} runs completed")
    return EXIT_OK if failures == 0 else EXIT_FAULT


def cmd_report(args) -> int:
    result = metrics.report(args.dirs)
    print(metrics.render_report(result))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        raw = _load_raw(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    cfg, errors, _ = validate_config(raw, strict=not args.lax)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    spec = build_stream_spec(cfg)
    batch = datagen.sample_batch(spec, args.node, args.tick, args.samples)
    samples = [datagen.Sample(x=batch.x[i], y=int(batch.y[i])) for i in range(len(batch))]
    columns = [f"f{i}" for i in range(spec.feature_dim)]
    datagen.export_csv_dataset(samples, args.out, columns)
    print(f"wrote {len(samples)} samples ({spec.feature_dim} features, "
          f"{spec.class_count} classes) -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodelearn",
                                     description="decentralised continual learning simulator")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="check a scenario config")
    p.add_argument("config")
    p.add_argument("--lax", action="store_true", help="warn on unknown keys instead of failing")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute one scenario")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default $NODELEARN_OUT)")
    p.add_argument("--force", action="store_true", help="overwrite a completed run dir")
    p.add_argument("--lax", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid x seed list")
    p.add_argument("config")
    p.add_argument("--grid", action="append", metavar="FIELD=V1,V2",
                   help="dotted config field and JSON values (repeatable)")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--lax", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate finished runs into tables")
    p.add_argument("dirs", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", help="export a synthetic dataset to CSV")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--node", type=int, default=0)
    p.add_argument("--tick", type=int, default=0)
    p.add_argument("--lax", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NodeLearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except Exception as exc:  # panic-level faults only
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
