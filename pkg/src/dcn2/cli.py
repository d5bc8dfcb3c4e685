"""Command line: run / sweep-hash / grid / inspect-weights.

Settings resolve in three layers: built-in defaults, then a key=value
config file (--config, requires config_version), then explicit CLI flags.
Exit codes: 0 ok, 2 unreadable or empty dataset, 3 schema mismatch,
4 non-finite loss abort, 5 bad configuration, 6 evaluation error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .embeddings import export_weight_distribution, load_table
from .errors import ConfigError, DatasetError, EvalError, GradientError
from .harness import DatasetSpec, RunSpec, SweepSpec, SchemaMismatchError, run_grid, \
    run_hash_sweep, run_single
from .model import ModelConfig

CONFIG_VERSION = 1

_DEFAULTS = {
    "format": "generic",
    "schema": None,
    "variant": "dcn2",
    "hash_bits": "18",
    "dim": "8",
    "lr": "0.002",
    "beta1": "0.0",
    "phi": "1.0",
    "layers": "2",
    "proj_dim": "4",
    "deep": "64,32",
    "sim_activation": "identity",
    "seeds": "3",
    "max_rows": None,
    "window": "20000",
    "batch": "2500",
    "out": "out",
    "budget_seconds": None,
    "data": None,
    "no_checkpoint": False,
    "parallelism": "1",
}


def _parse_config_file(path: str) -> dict:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = value.strip()
    version = values.pop("config_version", None)
    if version is None:
        raise ConfigError(f"{path}: missing config_version")
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"{path}: unsupported config_version {version}")
    unknown = set(values) - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return values


def _merge(args: argparse.Namespace) -> dict:
    merged = dict(_DEFAULTS)
    if getattr(args, "config", None):
        merged.update(_parse_config_file(args.config))
    for key in _DEFAULTS:
        cli = getattr(args, key, None)
        if cli is not None and cli is not False:
            merged[key] = cli
    return merged


def _int(name: str, v) -> int:
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {v!r}") from None


def _float(name: str, v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {v!r}") from None


def _int_list(name: str, v) -> list[int]:
    return [_int(name, p) for p in str(v).split(",") if p.strip()]


def _float_list(name: str, v) -> list[float]:
    return [_float(name, p) for p in str(v).split(",") if p.strip()]


def _seed_list(v) -> list[int]:
    s = str(v)
    if "," in s:
        return [_int("seeds", p) for p in s.split(",") if p.strip()]
    n = _int("seeds", s)
    return list(range(n))


def _model_config(m: dict) -> ModelConfig:
    deep = tuple(_int_list("deep", m["deep"])) if m["deep"] else ()
    return ModelConfig(
        variant=str(m["variant"]),
        hash_bits=_int("hash_bits", m["hash_bits"]),
        dim=_int("dim", m["dim"]),
        cross_layers=_int("layers", m["layers"]),
        proj_dim=_int("proj_dim", m["proj_dim"]),
        phi=_float("phi", m["phi"]),
        deep_layers=deep,
        learning_rate=_float("lr", m["lr"]),
        beta1=_float("beta1", m["beta1"]),
        batch_size=_int("batch", m["batch"]),
        sim_activation=str(m["sim_activation"]),
    )


def _scalarize(m: dict) -> dict:
    """Collapse comma-list axis values to their first element so the shared
    base RunSpec stays scalar; per-cell settings override them anyway."""
    out = dict(m)
    for key in ("hash_bits", "lr", "beta1", "dim", "variant"):
        v = out.get(key)
        if v is not None and "," in str(v):
            out[key] = str(v).split(",")[0]
    return out


def _run_spec(m: dict) -> RunSpec:
    if not m["data"]:
        raise ConfigError("--data is required")
    data = DatasetSpec(
        path=str(m["data"]),
        fmt=str(m["format"]),
        schema_spec=m["schema"],
        max_rows=_int("max_rows", m["max_rows"]) if m["max_rows"] is not None else None,
    )
    config = _model_config(m)
    for msg in config.range_violations():
        print(f"warning: outside benchmark range: {msg}", file=sys.stderr)
    return RunSpec(
        data=data,
        config=config,
        seeds=_seed_list(m["seeds"]),
        out_dir=str(m["out"]),
        window=_int("window", m["window"]),
        save_checkpoints=not m["no_checkpoint"],
    )


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset file (plain or .gz)")
    p.add_argument("--format", choices=["criteo", "avazu", "generic"])
    p.add_argument("--schema", help="generic format: 'name:kind,...' or 'cat,cont,multi,...'")
    p.add_argument("--variant", help="dcn2 | dcnv2 | dcn2_simk (comma list for sweeps)")
    p.add_argument("--hash-bits", dest="hash_bits", help="hash space bits (comma list for sweeps)")
    p.add_argument("--dim", help="embedding dimension")
    p.add_argument("--lr", help="learning rate")
    p.add_argument("--beta1", help="Adam beta1")
    p.add_argument("--phi", help="cross-layer scale factor")
    p.add_argument("--layers", help="cross/onlydense layer count")
    p.add_argument("--proj-dim", dest="proj_dim", help="low-rank projection dim (dcnv2)")
    p.add_argument("--deep", help="deep MLP sizes, e.g. 64,32 (empty for none)")
    p.add_argument("--seeds", help="seed count, or explicit comma list")
    p.add_argument("--max-rows", dest="max_rows", help="cap on rows read")
    p.add_argument("--window", help="evaluation window size (default 20000)")
    p.add_argument("--batch", help="training batch size (default 2500)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key=value config file (overridden by flags)")
    p.add_argument("--no-checkpoint", dest="no_checkpoint", action="store_true", default=False)
    p.add_argument("--parallelism", help="max concurrent sweep cells")


def _cmd_run(args) -> int:
    m = _merge(args)
    spec = _run_spec(m)
    result = run_single(spec)
    for sr in result.seed_results:
        auc = sr.aggregates["auc"]["avg"]
        rig = sr.aggregates["rig"]["avg"]
        print(f"seed {sr.seed}: windows auc avg {auc:.6f}  rig avg {rig:.6f}")
    print(f"summary: {result.summary_path}")
    if result.row_error_flag:
        print(f"warning: {result.row_errors} malformed rows (>1%)", file=sys.stderr)
    return 0


def _cmd_sweep_hash(args) -> int:
    m = _merge(args)
    base = _run_spec(_scalarize(m))
    base.save_checkpoints = False  # sweep cells keep CSV/JSON artifacts only
    axes = {"hash_bits": _int_list("hash_bits", m["hash_bits"])}
    if m["variant"] and "," in str(m["variant"]):
        axes["variant"] = str(m["variant"]).split(",")
    sweep = SweepSpec(base=base, axes=axes, parallelism=_int("parallelism", m["parallelism"]),
                      budget_seconds=_float("budget_seconds", m["budget_seconds"])
                      if m["budget_seconds"] is not None else None)
    result = run_hash_sweep(sweep)
    for b, v, rig, auc in result["table"]:
        print(f"bits {b:>2}  {v:<10} mean rig {rig:.6f}  mean auc {auc:.6f}")
    for label, err in result["failures"]:
        print(f"cell {label} failed: {err}", file=sys.stderr)
    print(f"sweep csv: {result['sweep_csv']}")
    return 0


def _cmd_grid(args) -> int:
    m = _merge(args)
    base = _run_spec(_scalarize(m))
    base.save_checkpoints = False
    axes: dict[str, list] = {}
    if m["variant"]:
        axes["variant"] = str(m["variant"]).split(",")
    if m["hash_bits"] and "," in str(m["hash_bits"]):
        axes["hash_bits"] = _int_list("hash_bits", m["hash_bits"])
    if m["dim"] and "," in str(m["dim"]):
        axes["dim"] = _int_list("dim", m["dim"])
    if m["lr"] and "," in str(m["lr"]):
        axes["lr"] = _float_list("lr", m["lr"])
    if m["beta1"] and "," in str(m["beta1"]):
        axes["beta1"] = _float_list("beta1", m["beta1"])
    if not axes:
        raise ConfigError("grid needs at least one comma-list axis "
                          "(--variant/--hash-bits/--dim/--lr/--beta1)")
    sweep = SweepSpec(base=base, axes=axes, parallelism=_int("parallelism", m["parallelism"]),
                      budget_seconds=_float("budget_seconds", m["budget_seconds"])
                      if m["budget_seconds"] is not None else None)
    report = run_grid(sweep)
    for variant, best in report["best_per_variant"].items():
        print(f"best {variant}: {best['label']}  mean auc {best['mean_auc']:.6f}  "
              f"mean rig {best['mean_rig']:.6f}")
    if report["partial"]:
        print(f"warning: budget exhausted, skipped {len(report['skipped_cells'])} cells",
              file=sys.stderr)
    for label, err in report["failures"]:
        print(f"cell {label} failed: {err}", file=sys.stderr)
    print(f"report: {report['report_path']}")
    return 0


def _cmd_inspect_weights(args) -> int:
    table = load_table(args.checkpoint)
    dist = export_weight_distribution(table, epsilon=float(args.epsilon))
    print(f"rows {dist.total}  modified {dist.modified} "
          f"({100 * dist.modified_fraction:.3f}% with |w-1| > {args.epsilon})")
    print(f"below 1.0: {dist.below_one}   above 1.0: {dist.above_one}")
    print(f"modified mean {dist.modified_mean:.6f}  "
          f"min {dist.min_weight:.6f}  max {dist.max_weight:.6f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("bucket_low,bucket_high,count\n")
            for lo, hi, count in dist.csv_rows():
                fh.write(f"{lo!r},{hi!r},{count}\n")
        print(f"histogram csv: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcn2", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="single-pass training run (one config, n seeds)")
    _add_common(p_run)
    p_run.add_argument("--budget-seconds", dest="budget_seconds", help=argparse.SUPPRESS)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep-hash", help="hash-space scaling sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--budget-seconds", dest="budget_seconds")
    p_sweep.set_defaults(func=_cmd_sweep_hash)

    p_grid = sub.add_parser("grid", help="hyperparameter grid search")
    _add_common(p_grid)
    p_grid.add_argument("--budget-seconds", dest="budget_seconds")
    p_grid.set_defaults(func=_cmd_grid)

    p_iw = sub.add_parser("inspect-weights", help="collision-weight distribution of a checkpoint")
    p_iw.add_argument("checkpoint", help="path to a .emb checkpoint file")
    p_iw.add_argument("--epsilon", default="0.01")
    p_iw.add_argument("--out", help="write histogram CSV here")
    p_iw.set_defaults(func=_cmd_inspect_weights)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except GradientError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except EvalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
