"""Command-line entry point: ``subspace-lab {gen,train,sweep,check,eval}``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from .checks import SUITES
from .clustering import acc, load_predictions, nmi
from .config import RunConfig, coerce_override
from .data import SynthSpec, gen_union_of_subspaces, load_labels, save_dataset
from .errors import ConfigError, DatasetError, ParseError, SubspaceLabError
from .plots import sweep_svg, write_svg
from .trainer import ablation_sweep, full_pipeline

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (ConfigError, ParseError, DatasetError, FileNotFoundError)

log = logging.getLogger("subspace_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on its own; raising keeps the exit path in one place
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _thread_limit():
    raw = os.environ.get("SUBSPACE_LAB_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SUBSPACE_LAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SUBSPACE_LAB_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def parse_overrides(cfg: RunConfig, tokens: list[str]) -> dict:
    """Turn ``--key value`` / ``--key=value`` pairs into typed config changes.

    Dashes in keys map to underscores, so ``--batch-size 32`` sets ``batch_size``.
    """
    changes, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}; overrides look like --key value")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override {tok} is missing a value")
            key, raw = tok[2:], tokens[i + 1]
            i += 2
        key = key.replace("-", "_")
        changes[key] = coerce_override(cfg, key, raw)
    return changes


def load_config(path, overrides: list[str]) -> tuple[RunConfig, dict]:
    cfg = RunConfig.load(path)
    changes = parse_overrides(cfg, overrides)
    try:
        cfg = cfg.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate(), changes


def parse_grid(specs: list[str], cfg: RunConfig) -> tuple[list[str], list[dict]]:
    """``key=v1,v2`` flags -> ordered keys and the cartesian product of cells."""
    keys, values = [], []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"grid flag {spec!r} must look like key=v1,v2")
        key, raw = spec.split("=", 1)
        key = key.replace("-", "_")
        vals = [coerce_override(cfg, key, v) for v in raw.split(",") if v != ""]
        if not vals:
            raise ConfigError(f"grid key {key!r} has no values")
        keys.append(key)
        values.append(vals)
    if not keys:
        raise ConfigError("sweep needs at least one --grid key=v1,v2")
    return keys, [dict(zip(keys, combo)) for combo in itertools.product(*values)]


# commands ----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = SynthSpec(args.subspaces, args.dim, args.ambient, args.per, args.noise, args.seed)
    ds = gen_union_of_subspaces(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tpath, lpath = save_dataset(out, ds)
    print(f"{ds.name}: N={len(ds)} D={ds.X.shape[1]} classes={ds.n_classes}")
    print(f"wrote {tpath} and {lpath}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    cfg, changes = load_config(args.config, overrides)
    out = Path(args.out)
    res = full_pipeline(cfg, out, extra={"overrides": changes, "config_path": str(args.config)})
    print(json.dumps({"acc": res.result.acc, "nmi": res.result.nmi, "manifest": str(out / "manifest.json")}))
    return EXIT_OK


def cmd_sweep(args, overrides) -> int:
    cfg, _ = load_config(args.config, overrides)
    keys, grid = parse_grid(args.grid, cfg)
    rows = ablation_sweep(cfg, grid)
    out_csv = Path(args.out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([*keys, "acc", "nmi", "error"])
        for r in rows:
            writer.writerow([*(r[k] for k in keys), r["acc"], r["nmi"], r["error"]])
    svg = Path(args.out_svg) if args.out_svg else out_csv.with_suffix(".svg")
    write_svg(svg, sweep_svg(rows, keys))
    failed = [r for r in rows if r["error"]]
    for r in failed:
        print(f"cell {dict((k, r[k]) for k in keys)} failed: {r['error']}", file=sys.stderr)
    print(f"{len(rows)} cells ({len(failed)} failed) -> {out_csv}, {svg}")
    return EXIT_OK


def cmd_check(args) -> int:
    kwargs = {"steps": args.steps} if args.kind == "equiv" else {}
    rows = SUITES[args.kind](**kwargs)
    width = max(len(r["name"]) for r in rows)
    print(f"{'check':<{width}}  {'value':>12}  {'tol':>8}  result")
    for r in rows:
        print(f"{r['name']:<{width}}  {r['value']:>12.3e}  {r['tol']:>8.0e}  {'PASS' if r['passed'] else 'FAIL'}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_RUNTIME


def cmd_eval(args) -> int:
    pred, truth = load_predictions(args.labels)
    if args.truth:
        truth = load_labels(args.truth)
    if truth is None:
        raise ConfigError(f"{args.labels} has no truth column; pass --truth LABELS_CSV")
    if len(truth) != len(pred):
        raise DatasetError(f"prediction count {len(pred)} != truth count {len(truth)}")
    print(json.dumps({"n": int(len(pred)), "acc": acc(pred, truth), "nmi": nmi(pred, truth)}))
    return EXIT_OK


# options that belong to the subcommand itself; any other --key is a config override
_OWN_OPTIONS = {
    "train": {"--out": True, "-h": False, "--help": False},
    "sweep": {"--grid": True, "--out-csv": True, "--out-svg": True, "-h": False, "--help": False},
}


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--key value`` overrides out of a train/sweep command line, wherever they sit."""
    cmd_at = next((i for i, tok in enumerate(argv) if not tok.startswith("-")), None)
    if cmd_at is None or argv[cmd_at] not in _OWN_OPTIONS:
        return argv, []
    own = _OWN_OPTIONS[argv[cmd_at]]
    keep, overrides = list(argv[: cmd_at + 1]), []
    rest = argv[cmd_at + 1 :]
    i = 0
    while i < len(rest):
        tok = rest[i]
        name = tok.split("=", 1)[0]
        if not tok.startswith("--") and not tok.startswith("-h"):
            keep.append(tok)
            i += 1
        elif name in own:
            takes_value = own[name] and "=" not in tok
            keep.extend(rest[i : i + 1 + takes_value])
            i += 1 + takes_value
        elif "=" in tok or i + 1 >= len(rest):
            overrides.append(tok)
            i += 1
        else:
            overrides.extend(rest[i : i + 2])
            i += 2
    return keep, overrides


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subspace-lab", description="Deep subspace clustering with a memory bank.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic union-of-subspaces dataset")
    g.add_argument("--subspaces", type=int, default=5)
    g.add_argument("--dim", type=int, default=4)
    g.add_argument("--ambient", type=int, default=30)
    g.add_argument("--per", type=int, default=50)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", default="synth", help="output prefix (.sctd and .labels.csv are appended)")

    t = sub.add_parser("train", help="run the full pipeline from a JSON config; extra --key value pairs override it")
    t.add_argument("config")
    t.add_argument("--out", default="run")

    s = sub.add_parser("sweep", help="grid over config keys; writes CSV and SVG")
    s.add_argument("config")
    s.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
    s.add_argument("--out-csv", default="sweep.csv")
    s.add_argument("--out-svg", default=None)

    c = sub.add_parser("check", help="run a verification suite")
    c.add_argument("kind", choices=sorted(SUITES))
    c.add_argument("--steps", type=int, default=10)

    e = sub.add_parser("eval", help="score a predictions CSV against truth")
    e.add_argument("labels")
    e.add_argument("--truth", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        argv, extra = split_overrides(list(sys.argv[1:] if argv is None else argv))
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            if args.command == "gen":
                return cmd_gen(args)
            if args.command == "train":
                return cmd_train(args, extra)
            if args.command == "sweep":
                return cmd_sweep(args, extra)
            if args.command == "check":
                return cmd_check(args)
            return cmd_eval(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SubspaceLabError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
