"""Single-pass runs, hash-space sweeps and hyperparameter grids.

A run streams the dataset in file order, batches it, scores every batch
with the current model (progressive validation) and then trains on it.
All artifacts embed the spec hash and seed in their headers, carry no
timestamps, and are byte-identical across reruns of the same spec.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embeddings import export_weight_distribution
from .errors import ConfigError, DatasetError, EvalError, GradientError
from .features import ColumnStore, Schema, avazu_schema, criteo_schema, estimate_padding, \
    generic_schema, load_columns, open_text
from .metrics import WindowedMetrics
from .model import ModelConfig, build, save_model

FORMATS = ("criteo", "avazu", "generic")
ROW_ERROR_FLAG_FRACTION = 0.01
DEFAULT_SEEDS = [0, 1, 2]

GRID_AXES = ("variant", "hash_bits", "dim", "lr", "beta1")
_AXIS_TO_FIELD = {
    "variant": "variant",
    "hash_bits": "hash_bits",
    "dim": "dim",
    "lr": "learning_rate",
    "beta1": "beta1",
}


class SchemaMismatchError(DatasetError):
    """The file exists but no row matches the declared schema."""


@dataclass
class DatasetSpec:
    path: str
    fmt: str = "generic"
    schema_spec: str | None = None
    max_rows: int | None = None

    def resolve_schema(self) -> Schema:
        if self.fmt not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got '{self.fmt}'")
        if self.fmt == "criteo":
            return criteo_schema()
        if self.fmt == "avazu":
            try:
                with open_text(self.path) as fh:
                    header = fh.readline()
            except OSError as e:
                raise DatasetError(f"cannot read {self.path}: {e}") from None
            if not header:
                raise DatasetError(f"empty dataset {self.path}")
            return avazu_schema(header)
        if not self.schema_spec:
            raise ConfigError("generic format needs a schema declaration")
        return generic_schema(self.schema_spec)


@dataclass
class RunSpec:
    data: DatasetSpec
    config: ModelConfig
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out_dir: str = "out"
    window: int = 20_000
    padding_quantile: float = 0.95
    padding_prepass_rows: int = 100_000
    save_checkpoints: bool = True
    label: str = "run"

    def spec_sha(self) -> str:
        payload = {
            "data": {"path": self.data.path, "fmt": self.data.fmt,
                     "schema": self.data.schema_spec, "max_rows": self.data.max_rows},
            "config": self.config.to_dict(),
            "seeds": list(self.seeds),
            "window": self.window,
            "padding_quantile": self.padding_quantile,
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class SeedResult:
    seed: int
    aggregates: dict
    partial: dict | None
    mean_loss: float
    artifacts: dict[str, str]
    collision_weights: dict | None


@dataclass
class RunResult:
    spec_sha: str
    label: str
    rows: int
    row_errors: int
    row_error_flag: bool
    seed_results: list[SeedResult]
    cross_seed: dict
    summary_path: str


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def load_store(spec: RunSpec) -> tuple[Schema, ColumnStore, dict[str, int]]:
    """Resolve schema, run the padding pre-pass, bulk-load the file."""
    schema = spec.data.resolve_schema()
    try:
        padding = estimate_padding(spec.data.path, schema, quantile=spec.padding_quantile,
                                   max_rows=spec.padding_prepass_rows) if schema.mv_fields else {}
        store = load_columns(spec.data.path, schema, max_rows=spec.data.max_rows, padding=padding)
    except OSError as e:
        raise DatasetError(f"cannot read {spec.data.path}: {e}") from None
    if store.rows_read == 0:
        raise DatasetError(f"empty dataset {spec.data.path}")
    if len(store) == 0:
        raise SchemaMismatchError(
            f"no row of {spec.data.path} matches the declared schema "
            f"({store.row_errors} malformed rows)")
    return schema, store, padding


def stream_train(model, batches, metrics: WindowedMetrics) -> list[float]:
    """Test-then-train over a batch iterator; returns per-batch mean losses.

    Every prediction is made by the model state *before* it trains on that
    batch; ``model`` only needs a ``predict_then_train(batch)`` method.
    """
    losses = []
    for batch in batches:
        preds, loss = model.predict_then_train(batch)
        metrics.record_batch(preds, batch.labels)
        losses.append(loss)
    return losses


def _window_csv(path: Path, run_id: str, spec_sha: str, seed: int, metrics: WindowedMetrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# spec_sha={spec_sha} seed={seed}\n")
        fh.write("run_id,window_index,auc,logloss,rig,pos_rate\n")
        for w in metrics.windows:
            fh.write(f"{run_id},{w.index},{_fmt(w.auc)},{_fmt(w.logloss)},"
                     f"{_fmt(w.rig)},{_fmt(w.pos_rate)}\n")


def _weights_csv(path: Path, spec_sha: str, seed: int, dist) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# spec_sha={spec_sha} seed={seed}\n")
        fh.write("bucket_low,bucket_high,count\n")
        for lo, hi, count in dist.csv_rows():
            fh.write(f"{_fmt(lo)},{_fmt(hi)},{count}\n")


def _window_record_dict(w) -> dict:
    return {"index": w.index, "count": w.count, "auc": w.auc,
            "logloss": w.logloss, "rig": w.rig, "pos_rate": w.pos_rate}


def _weight_summary_dict(dist) -> dict:
    return {
        "total": dist.total,
        "modified": dist.modified,
        "modified_fraction": dist.modified_fraction,
        "modified_mean": dist.modified_mean,
        "below_one": dist.below_one,
        "above_one": dist.above_one,
        "min_weight": dist.min_weight,
        "max_weight": dist.max_weight,
        "mass_below": dist.mass_below,
        "mass_above": dist.mass_above,
    }


def run_single(spec: RunSpec, store: ColumnStore | None = None) -> RunResult:
    """Train/evaluate one configuration for every seed; emit all artifacts.

    Raises DatasetError / SchemaMismatchError / GradientError / EvalError;
    no artifacts are written for a failed dataset.
    """
    if not spec.seeds:
        raise ConfigError("seeds must be non-empty")
    if store is None:
        schema, store, _ = load_store(spec)
    else:
        schema = store.schema
    config = replace(spec.config, field_kinds=tuple(f.kind for f in schema.fields))
    violations = config.structural_violations()
    if violations:
        raise ConfigError("invalid config: " + "; ".join(violations))

    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sha = spec.spec_sha()

    seed_results: list[SeedResult] = []
    for seed in spec.seeds:
        cfg = replace(config, seed=seed)
        model = build(cfg)
        metrics = WindowedMetrics(spec.window)
        batches = store.batches(cfg.batch_size, cfg.hash_bits)
        try:
            losses = stream_train(model, batches, metrics)
        except GradientError as e:
            raise GradientError(f"seed {seed}: {e}") from None
        metrics.finish()
        aggregates = metrics.aggregate()

        run_id = f"{sha}-s{seed}"
        prefix = f"{spec.label}_seed{seed}"
        artifacts: dict[str, str] = {}

        wpath = out / f"{prefix}_windows.csv"
        _window_csv(wpath, run_id, sha, seed, metrics)
        artifacts["windows_csv"] = str(wpath)

        dist = None
        if model.table.weighted:
            dist = export_weight_distribution(model.table, epsilon=0.01)
            cpath = out / f"{prefix}_weights.csv"
            _weights_csv(cpath, sha, seed, dist)
            artifacts["weights_csv"] = str(cpath)

        if spec.save_checkpoints:
            emb, params = save_model(model, out / f"{prefix}_checkpoint")
            artifacts["checkpoint_emb"] = str(emb)
            artifacts["checkpoint_params"] = str(params)

        summary = {
            "run_id": run_id,
            "spec_sha": sha,
            "seed": seed,
            "config": cfg.to_dict(),
            "rows": len(store),
            "rows_read": store.rows_read,
            "row_errors": store.row_errors,
            "row_error_flag": store.row_errors > ROW_ERROR_FLAG_FRACTION * max(store.rows_read, 1),
            "windows": [_window_record_dict(w) for w in metrics.windows],
            "partial_window": _window_record_dict(metrics.partial) if metrics.partial else None,
            "aggregates": aggregates,
            "mean_batch_loss": float(np.mean(losses)) if losses else None,
            "n_batches": len(losses),
            "parameter_count": model.parameter_count(),
            "collision_weights": _weight_summary_dict(dist) if dist else None,
        }
        spath = out / f"{prefix}_summary.json"
        spath.write_text(json.dumps(summary, sort_keys=True, indent=1), encoding="utf-8")
        artifacts["summary_json"] = str(spath)

        seed_results.append(SeedResult(
            seed=seed, aggregates=aggregates,
            partial=summary["partial_window"],
            mean_loss=summary["mean_batch_loss"],
            artifacts=artifacts,
            collision_weights=summary["collision_weights"],
        ))

    cross = _cross_seed_means(seed_results)
    run_summary = {
        "spec_sha": sha,
        "label": spec.label,
        "config": config.to_dict(),
        "seeds": list(spec.seeds),
        "rows": len(store),
        "row_errors": store.row_errors,
        "per_seed": {str(r.seed): r.aggregates for r in seed_results},
        "cross_seed_mean": cross,
    }
    summary_path = out / f"{spec.label}_summary.json"
    summary_path.write_text(json.dumps(run_summary, sort_keys=True, indent=1), encoding="utf-8")

    return RunResult(
        spec_sha=sha,
        label=spec.label,
        rows=len(store),
        row_errors=store.row_errors,
        row_error_flag=store.row_errors > ROW_ERROR_FLAG_FRACTION * max(store.rows_read, 1),
        seed_results=seed_results,
        cross_seed=cross,
        summary_path=str(summary_path),
    )


def _cross_seed_means(seed_results: list[SeedResult]) -> dict:
    """Window-level aggregates are averaged across seeds (both recorded)."""
    out: dict[str, dict[str, float]] = {}
    for metric in ("auc", "logloss", "rig", "pos_rate"):
        vals = {}
        for stat in ("avg", "median", "max", "min", "std"):
            xs = [r.aggregates[metric][stat] for r in seed_results]
            vals[stat] = float(np.mean(xs))
        out[metric] = vals
    return out


@dataclass
class SweepSpec:
    base: RunSpec
    axes: dict[str, list]
    parallelism: int = 1
    budget_seconds: float | None = None

    def validate(self) -> None:
        for name, values in self.axes.items():
            if name not in GRID_AXES:
                raise ConfigError(f"unknown sweep axis '{name}' (known: {GRID_AXES})")
            if not values:
                raise ConfigError(f"sweep axis '{name}' has no values")


@dataclass
class CellResult:
    label: str
    settings: dict
    run: RunResult | None
    error: str | None


def _cell_label(settings: dict) -> str:
    return "_".join(f"{k}{settings[k]}" for k in GRID_AXES if k in settings)


def _apply_settings(config: ModelConfig, settings: dict) -> ModelConfig:
    kwargs = {_AXIS_TO_FIELD[k]: v for k, v in settings.items()}
    return replace(config, **kwargs)


def _run_cells(sweep: SweepSpec, cells: list[dict], store: ColumnStore) -> list[CellResult]:
    """Run each cell against the shared read-only store; cells are
    independent (own model, metrics, output files), so order and
    parallelism cannot change any artifact."""

    def one(settings: dict) -> CellResult:
        label = _cell_label(settings)
        spec = replace(
            sweep.base,
            config=_apply_settings(sweep.base.config, settings),
            label=f"{sweep.base.label}_{label}",
        )
        try:
            return CellResult(label, settings, run_single(spec, store=store), None)
        except (DatasetError, ConfigError, GradientError, EvalError) as e:
            return CellResult(label, settings, None, f"{type(e).__name__}: {e}")

    if sweep.parallelism > 1:
        with ThreadPoolExecutor(max_workers=sweep.parallelism) as ex:
            return list(ex.map(one, cells))
    return [one(c) for c in cells]


def run_hash_sweep(sweep: SweepSpec) -> dict:
    """One run per (hash_bits, variant, seed); emits the plot-ready CSV
    (mean RIG / mean AUC against hash bits, rows sorted by hash_bits)."""
    sweep.validate()
    bits_values = sorted(sweep.axes.get("hash_bits", []))
    if len(bits_values) < 2:
        raise ConfigError("hash sweep needs >= 2 hash_bits values")
    variants = sweep.axes.get("variant", [sweep.base.config.variant])
    _, store, _ = load_store(sweep.base)

    cells = [{"hash_bits": b, "variant": v} for b in bits_values for v in variants]
    results = _run_cells(sweep, cells, store)

    out = Path(sweep.base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_rows = []
    seed_rows = []
    for cell in results:
        if cell.run is None:
            continue
        b, v = cell.settings["hash_bits"], cell.settings["variant"]
        table_rows.append((b, v, cell.run.cross_seed["rig"]["avg"], cell.run.cross_seed["auc"]["avg"]))
        for sr in cell.run.seed_results:
            seed_rows.append((b, v, sr.seed, sr.aggregates["rig"]["avg"], sr.aggregates["auc"]["avg"]))

    table_rows.sort(key=lambda r: (r[0], r[1]))
    seed_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    sweep_csv = out / f"{sweep.base.label}_sweep_hash.csv"
    with open(sweep_csv, "w", encoding="utf-8") as fh:
        fh.write("hash_bits,variant,mean_rig,mean_auc\n")
        for b, v, rig, auc in table_rows:
            fh.write(f"{b},{v},{_fmt(rig)},{_fmt(auc)}\n")
    seeds_csv = out / f"{sweep.base.label}_sweep_hash_seeds.csv"
    with open(seeds_csv, "w", encoding="utf-8") as fh:
        fh.write("hash_bits,variant,seed,rig_avg,auc_avg\n")
        for b, v, s, rig, auc in seed_rows:
            fh.write(f"{b},{v},{s},{_fmt(rig)},{_fmt(auc)}\n")

    return {
        "cells": results,
        "table": table_rows,
        "per_seed": seed_rows,
        "sweep_csv": str(sweep_csv),
        "seeds_csv": str(seeds_csv),
        "failures": [(c.label, c.error) for c in results if c.error],
    }


def _cell_params(cell: CellResult) -> int:
    # identical across seeds; read it from the first seed summary
    path = cell.run.seed_results[0].artifacts.get("summary_json")
    if not path:
        return 0
    return json.loads(Path(path).read_text(encoding="utf-8"))["parameter_count"]


def _rank_key(cell: CellResult) -> tuple:
    run = cell.run
    # higher auc, then higher rig, then fewer parameters, then stable label
    return (-run.cross_seed["auc"]["avg"], -run.cross_seed["rig"]["avg"],
            _cell_params(cell), cell.label)


def run_grid(sweep: SweepSpec) -> dict:
    """Exhaustive grid over the declared axes with an optional wall-clock
    budget; ranks by mean windowed AUC across seeds, ties broken by mean
    RIG, then fewer parameters."""
    sweep.validate()
    if not sweep.axes:
        raise ConfigError("grid needs at least one axis")
    _, store, _ = load_store(sweep.base)

    names = [a for a in GRID_AXES if a in sweep.axes]
    combos = [dict(zip(names, c)) for c in itertools.product(*[sweep.axes[n] for n in names])]
    skipped: list[str] = []
    if sweep.budget_seconds is None:
        results = _run_cells(sweep, combos, store)
    else:
        started = time.monotonic()
        results = []
        for settings in combos:
            if time.monotonic() - started > sweep.budget_seconds:
                skipped.append(_cell_label(settings))
                continue
            results.extend(_run_cells(sweep, [settings], store))

    ranked = sorted([c for c in results if c.run is not None], key=_rank_key)
    best_per_variant: dict[str, dict] = {}
    for cell in ranked:
        v = cell.settings.get("variant", sweep.base.config.variant)
        if v not in best_per_variant:
            best_per_variant[v] = {
                "settings": cell.settings,
                "label": cell.label,
                "mean_auc": cell.run.cross_seed["auc"]["avg"],
                "mean_rig": cell.run.cross_seed["rig"]["avg"],
            }

    report = {
        "partial": bool(skipped),
        "skipped_cells": skipped,
        "ranking": [
            {
                "label": c.label,
                "settings": c.settings,
                "mean_auc": c.run.cross_seed["auc"]["avg"],
                "mean_rig": c.run.cross_seed["rig"]["avg"],
            }
            for c in ranked
        ],
        "best_per_variant": best_per_variant,
        "failures": [(c.label, c.error) for c in results if c.error],
    }
    out = Path(sweep.base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"{sweep.base.label}_grid_report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=1), encoding="utf-8")
    report["report_path"] = str(report_path)
    report["cells"] = results
    return report
