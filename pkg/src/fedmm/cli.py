"""Command line entry point: ``fedmm run | contrast | rank``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigError, FedError
from .simulator import ranking_breakdown, run_federation, summarize
from .vecmath import relative_contrast

log = logging.getLogger("fedmm")

ROUNDS_COLUMNS = ("round", "attacked", "ma", "ba", "selected_ids", "dominant_metric")


def fmt(x: float) -> str:
    return f"{x:.6g}"


def write_atomic(path, text: str) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def rounds_csv(reports) -> str:
    rows = [
        (r.round, int(r.attacked), fmt(r.ma), fmt(r.ba), ";".join(str(i) for i in r.selected_ids), r.dominant_metric)
        for r in reports
    ]
    return _csv_text(ROUNDS_COLUMNS, rows)


def _run_name(pairs, swept: set) -> str:
    parts = [f"{k}={v}" for k, v in pairs if k in swept]
    return "_".join(parts) or "run"


def cmd_run(args) -> int:
    raw = cfgmod.load_file(args.config) if args.config else {}
    grid = cfgmod.expand_overrides(args.set)
    swept = {cfgmod.split_override(s)[0] for s in args.set or () if cfgmod.sweep_values(cfgmod.split_override(s)[1])}
    out = Path(args.out)
    for pairs in grid:
        resolved = cfgmod.apply_overrides(raw, pairs)
        if args.seed is not None:
            resolved["seed"] = args.seed
        cfg = cfgmod.build_config(resolved)
        target = out / _run_name(pairs, swept) if len(grid) > 1 else out
        log.info("running %d rounds into %s", cfg.num_rounds, target)
        reports = run_federation(cfg)
        echo = cfgmod.config_to_dict(cfg)
        summary = summarize(reports)
        summary["config"] = echo
        write_atomic(target / "rounds.csv", rounds_csv(reports))
        write_atomic(target / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_atomic(target / "config.yaml", cfgmod.dump_yaml(cfg))
        print(f"{target}: final MA {fmt(summary.get('final_ma', float('nan')))}, "
              f"mean BA last 10 {fmt(summary.get('mean_ba_last_10', float('nan')))}")
    return 0


def parse_dims(text: str) -> list[int]:
    try:
        dims = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"invalid dims list {text!r}; expected comma-separated integers") from None
    if not dims:
        raise ConfigError("dims list is empty")
    return dims


def cmd_contrast(args) -> int:
    dims = parse_dims(args.dims)
    try:
        rep = relative_contrast(dims, args.points, args.trials, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = [
        (d, fmt(a), fmt(b), fmt(c))
        for d, a, b, c in zip(rep.dims, rep.l1_contrast, rep.l2_contrast, rep.m_over_u_rootd)
    ]
    write_atomic(args.out, _csv_text(("d", "l1_contrast", "l2_contrast", "m_over_u_rootd"), rows))
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def read_results(path) -> tuple[dict, list]:
    """Long-format ``method,attack,ma,ba`` -> {method: {attack: (ma, ba)}} plus attack order."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read results {path}: {exc.strerror}") from None
    table: dict = {}
    order: list = []
    with fh:
        reader = csv.DictReader(fh)
        missing = {"method", "attack", "ma", "ba"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            method, attack = row["method"].strip(), row["attack"].strip()
            try:
                pair = (float(row["ma"]), float(row["ba"]))
            except (TypeError, ValueError):
                raise ConfigError(f"{path}:{lineno}: ma and ba must be numbers") from None
            if attack in table.setdefault(method, {}):
                raise ConfigError(f"{path}:{lineno}: duplicate row for {method}/{attack}")
            table[method][attack] = pair
            if attack not in order:
                order.append(attack)
    return table, order


def rank_table(table: dict, order: list, baseline: str) -> list[dict]:
    """Per-method score rows, highest score first (ties by method name)."""
    if baseline not in table:
        raise ConfigError(f"baseline {baseline!r} not found in results")
    out = []
    for method, values in table.items():
        parts = ranking_breakdown(values, table[baseline])
        row = {"method": method, "score": math.fsum(ma - ba for ma, ba in parts.values())}
        for attack in order:
            if attack in parts:
                row[f"{attack}_ma_score"], row[f"{attack}_ba_score"] = parts[attack]
        out.append(row)
    out.sort(key=lambda r: (-r["score"], r["method"]))
    return out


def cmd_rank(args) -> int:
    table, order = read_results(args.results)
    ranked = rank_table(table, order, args.baseline)
    header = ["method", "score"] + [f"{a}_{m}_score" for a in order for m in ("ma", "ba")]
    rows = [[r["method"]] + [fmt(r[h]) if h in r else "" for h in header[1:]] for r in ranked]
    text = _csv_text(header, rows)
    if args.out:
        write_atomic(args.out, text)
    for r in ranked:
        print(f"{r['method']:>16s} {r['score']:+.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmm", description="Federated backdoor defense lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federation (or a sweep) from a YAML config")
    run.add_argument("--config", help="YAML config file")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="dotted override, repeatable; 'lo..hi step s' sweeps",
    )
    run.set_defaults(func=cmd_run)

    con = sub.add_parser("contrast", help="relative contrast of L1 and L2 norms vs dimension")
    con.add_argument("--dims", default="10,100,1000,10000")
    con.add_argument("--points", type=int, default=100)
    con.add_argument("--trials", type=int, default=20)
    con.add_argument("--seed", type=int, default=0)
    con.add_argument("--out", default="contrast.csv", help="output CSV path")
    con.set_defaults(func=cmd_contrast)

    rank = sub.add_parser("rank", help="ranking score of each method against a baseline")
    rank.add_argument("results", help="CSV with columns method,attack,ma,ba")
    rank.add_argument("--baseline", default="FedAvg")
    rank.add_argument("--out", help="output CSV path")
    rank.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FedError, ValueError, ArithmeticError, OSError) as exc:
        print(f"fedmm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
