"""Raw benchmark rows -> hashed, transformed feature records.

The hashing engine is murmur3 (32-bit, x86 variant) with a fixed seed of
42 so runs reproduce across platforms. Field names are prefixed into the
hashed key, so equal values in distinct fields collide only by chance.

Two parsing paths exist: ``parse_row`` is the per-row reference, and
``load_columns`` is the columnar bulk loader used by the harness. The
loader caches raw 32-bit hashes per token and defers the modulo, so one
parsed file serves every hash-space size; tests assert both paths emit
identical indices.
"""

from __future__ import annotations

import gzip
import io
from array import array
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DatasetError, RowParseError

HASH_SEED = 42
MISSING_TOKEN = "<missing>"
CONTINUOUS_TOKEN = "<value>"
PAD_INDEX = 0
KEY_SEPARATOR = "\x1f"

_KINDS = ("categorical", "continuous", "multivalue")
_KIND_ALIASES = {
    "cat": "categorical",
    "categorical": "categorical",
    "cont": "continuous",
    "continuous": "continuous",
    "num": "continuous",
    "multi": "multivalue",
    "multivalue": "multivalue",
    "mv": "multivalue",
}


def murmur3_32(data: bytes, seed: int = 0) -> int:
    """MurmurHash3 x86 32-bit. Pure-python, matches the reference vectors."""
    c1 = 0xCC9E2D51
    c2 = 0x1B873593
    h = seed & 0xFFFFFFFF
    n = len(data)
    nblocks = n // 4
    for i in range(0, 4 * nblocks, 4):
        k = int.from_bytes(data[i:i + 4], "little")
        k = (k * c1) & 0xFFFFFFFF
        k = ((k << 15) | (k >> 17)) & 0xFFFFFFFF
        k = (k * c2) & 0xFFFFFFFF
        h ^= k
        h = ((h << 13) | (h >> 19)) & 0xFFFFFFFF
        h = (h * 5 + 0xE6546B64) & 0xFFFFFFFF
    tail = data[4 * nblocks:]
    k = 0
    if len(tail) >= 3:
        k ^= tail[2] << 16
    if len(tail) >= 2:
        k ^= tail[1] << 8
    if len(tail) >= 1:
        k ^= tail[0]
        k = (k * c1) & 0xFFFFFFFF
        k = ((k << 15) | (k >> 17)) & 0xFFFFFFFF
        k = (k * c2) & 0xFFFFFFFF
        h ^= k
    h ^= n
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & 0xFFFFFFFF
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & 0xFFFFFFFF
    h ^= h >> 16
    return h


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: str
    field_index: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown field kind '{self.kind}' for field '{self.name}'")


def _hash_key(field_name: str, value: str) -> bytes:
    # errors="replace" keeps hashing total over arbitrary (fuzzed) text.
    return (field_name + KEY_SEPARATOR + value).encode("utf-8", errors="replace")


def hash_feature_raw(fld: FieldSchema, value: str) -> int:
    """Full 32-bit murmur value for (field, value), before any modulo."""
    return murmur3_32(_hash_key(fld.name, value), HASH_SEED)


def hash_feature(fld: FieldSchema, value: str, hash_bits: int) -> int:
    """Hashed index in [0, 2^hash_bits); deterministic across runs/platforms."""
    if not 1 <= hash_bits <= 30:
        raise ConfigError(f"hash_bits must be in [1, 30], got {hash_bits}")
    return hash_feature_raw(fld, value) & ((1 << hash_bits) - 1)


def log_transform(raw: float) -> float:
    """Sign-preserving log: ln(1+raw) for raw >= 0, -ln(1+|raw|) otherwise."""
    if not np.isfinite(raw):
        raise RowParseError(f"non-finite continuous value {raw!r}")
    if raw >= 0:
        return float(np.log1p(raw))
    return -float(np.log1p(-raw))


class Schema:
    """Ordered field list plus the file-format details of a dataset profile."""

    def __init__(self, fields: list[FieldSchema], delimiter: str = "\t",
                 mv_separator: str = "|", has_header: bool = False):
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate field names in schema")
        if [f.field_index for f in fields] != list(range(len(fields))):
            raise ConfigError("field_index values must be 0..n-1 in order")
        self.fields = list(fields)
        self.delimiter = delimiter
        self.mv_separator = mv_separator
        self.has_header = has_header
        self.cat_fields = [f for f in fields if f.kind == "categorical"]
        self.cont_fields = [f for f in fields if f.kind == "continuous"]
        self.mv_fields = [f for f in fields if f.kind == "multivalue"]
        # (kind, position within kind) for each field, in field order
        self._layout: list[tuple[str, int]] = []
        counts = {"categorical": 0, "continuous": 0, "multivalue": 0}
        for f in fields:
            self._layout.append((f.kind, counts[f.kind]))
            counts[f.kind] += 1

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def layout(self) -> list[tuple[str, int]]:
        return self._layout

    def continuous_raw_hashes(self) -> np.ndarray:
        """Per-field embedding key of each continuous field (value-independent)."""
        return np.array([hash_feature_raw(f, CONTINUOUS_TOKEN) for f in self.cont_fields],
                        dtype=np.uint32)


def criteo_schema() -> Schema:
    """Tab-separated: label, 13 continuous (I1..I13), 26 categorical (C1..C26)."""
    fields = [FieldSchema(f"I{i + 1}", "continuous", i) for i in range(13)]
    fields += [FieldSchema(f"C{i + 1}", "categorical", 13 + i) for i in range(26)]
    return Schema(fields, delimiter="\t", has_header=False)


def avazu_schema(header_line: str) -> Schema:
    """Comma-separated with header; 'click' is the label, 'id' is dropped."""
    cols = [c.strip() for c in header_line.rstrip("\r\n").split(",")]
    if "click" not in cols:
        raise DatasetError("avazu header has no 'click' column")
    feature_cols = [c for c in cols if c not in ("id", "click")]
    fields = [FieldSchema(name, "categorical", i) for i, name in enumerate(feature_cols)]
    return Schema(fields, delimiter=",", has_header=True)


def generic_schema(spec: str, delimiter: str = "\t", mv_separator: str = "|") -> Schema:
    """Schema from a compact string: 'cat,cat,cont,multi' or 'name:kind,...'.

    Columns follow the label in file order; unnamed fields get f00, f01, ...
    """
    fields = []
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    if not parts:
        raise ConfigError("empty schema string")
    for i, part in enumerate(parts):
        if ":" in part:
            name, kind = part.split(":", 1)
            name, kind = name.strip(), kind.strip()
        else:
            name, kind = f"f{i:02d}", part
        kind = _KIND_ALIASES.get(kind.lower())
        if kind is None:
            raise ConfigError(f"unknown field kind in schema entry '{part}'")
        fields.append(FieldSchema(name, kind, i))
    return Schema(fields, delimiter=delimiter, mv_separator=mv_separator)


@dataclass
class FeatureRecord:
    """One parsed training instance, hashed and transformed.

    Arrays follow the within-kind field order of the schema. ``mv_indices``
    rows are padded to the configured length with PAD_INDEX; only the first
    ``mv_valid[k]`` entries of row k are real lookups.
    """

    label: int
    cat_indices: np.ndarray
    cont_values: np.ndarray
    cont_indices: np.ndarray
    mv_indices: list[np.ndarray]
    mv_valid: np.ndarray


def parse_row(line: str, schema: Schema, hash_bits: int,
              padding: dict[str, int] | None = None) -> FeatureRecord:
    """Reference row parser. Raises RowParseError on malformed rows.

    Missing categorical values hash the literal '<missing>' token, missing
    continuous values become 0.0, over-long multivalue lists keep their
    first entries.
    """
    padding = padding or {}
    cols = line.rstrip("\r\n").split(schema.delimiter)
    if len(cols) != schema.n_fields + 1:
        raise RowParseError(f"expected {schema.n_fields + 1} columns, got {len(cols)}")
    try:
        label = int(cols[0])
    except ValueError:
        raise RowParseError(f"bad label {cols[0]!r}") from None
    if label not in (0, 1):
        raise RowParseError(f"label must be 0 or 1, got {label}")

    cat = np.empty(len(schema.cat_fields), dtype=np.int64)
    for j, f in enumerate(schema.cat_fields):
        tok = cols[1 + f.field_index] or MISSING_TOKEN
        cat[j] = hash_feature(f, tok, hash_bits)

    cont_v = np.zeros(len(schema.cont_fields), dtype=np.float64)
    cont_i = np.empty(len(schema.cont_fields), dtype=np.int64)
    for j, f in enumerate(schema.cont_fields):
        tok = cols[1 + f.field_index]
        if tok:
            try:
                cont_v[j] = log_transform(float(tok))
            except ValueError:
                raise RowParseError(f"bad continuous value {tok!r} in field '{f.name}'") from None
        cont_i[j] = hash_feature(f, CONTINUOUS_TOKEN, hash_bits)

    mv_idx: list[np.ndarray] = []
    mv_valid = np.zeros(len(schema.mv_fields), dtype=np.int64)
    for j, f in enumerate(schema.mv_fields):
        pad = padding.get(f.name, 1)
        tok = cols[1 + f.field_index]
        items = [t for t in tok.split(schema.mv_separator) if t] if tok else []
        items = items[:pad]
        row = np.full(pad, PAD_INDEX, dtype=np.int64)
        for k, item in enumerate(items):
            row[k] = hash_feature(f, item, hash_bits)
        mv_idx.append(row)
        mv_valid[j] = len(items)
    return FeatureRecord(label=label, cat_indices=cat, cont_values=cont_v,
                         cont_indices=cont_i, mv_indices=mv_idx, mv_valid=mv_valid)


class PaddingEstimator:
    """Streaming histogram of multivalue list cardinalities per field."""

    def __init__(self, quantile: float = 0.95):
        if not 0 < quantile <= 1:
            raise ConfigError(f"quantile must be in (0, 1], got {quantile}")
        self.quantile = quantile
        self._hist: dict[str, Counter] = {}

    def observe(self, field_name: str, cardinality: int) -> None:
        self._hist.setdefault(field_name, Counter())[int(cardinality)] += 1

    def observed_fields(self) -> set[str]:
        return set(self._hist)

    def estimate(self, field_name: str, quantile: float | None = None) -> int:
        """Smallest length covering the target quantile of observed sizes, min 1."""
        if field_name not in self._hist:
            raise ConfigError(f"no observations for field '{field_name}'")
        q = self.quantile if quantile is None else quantile
        hist = self._hist[field_name]
        total = sum(hist.values())
        acc = 0
        for size in sorted(hist):
            acc += hist[size]
            if acc >= q * total:
                return max(size, 1)
        return max(max(hist), 1)


def open_text(path: str | Path) -> io.TextIOBase:
    """Plain or gzip text reader; undecodable bytes are replaced, not fatal."""
    p = Path(path)
    if p.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(p, "rb"), encoding="utf-8", errors="replace")
    return open(p, "r", encoding="utf-8", errors="replace")


@dataclass
class RecordBatch:
    """Columnar view of a batch of records (rows are instances)."""

    labels: np.ndarray
    cat: np.ndarray                 # (B, n_cat) hashed indices
    cont_vals: np.ndarray           # (B, n_cont) transformed values
    cont_idx: np.ndarray            # (n_cont,) per-field constant indices
    mv: list[np.ndarray]            # per field: (B, pad) indices
    mv_valid: list[np.ndarray]      # per field: (B,) validity counts

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_records(cls, records: list[FeatureRecord]) -> "RecordBatch":
        if not records:
            raise ValueError("empty batch")
        r0 = records[0]
        labels = np.array([r.label for r in records], dtype=np.int8)
        cat = np.stack([r.cat_indices for r in records]) if r0.cat_indices.size else \
            np.zeros((len(records), 0), dtype=np.int64)
        cont_vals = np.stack([r.cont_values for r in records]).astype(np.float32) if r0.cont_values.size else \
            np.zeros((len(records), 0), dtype=np.float32)
        cont_idx = r0.cont_indices.copy()
        mv = []
        mv_valid = []
        for j in range(len(r0.mv_indices)):
            mv.append(np.stack([r.mv_indices[j] for r in records]))
            mv_valid.append(np.array([r.mv_valid[j] for r in records], dtype=np.int64))
        return cls(labels, cat, cont_vals, cont_idx, mv, mv_valid)


class ColumnStore:
    """All parsed rows of a file, hash values kept at full 32-bit width.

    ``batches`` applies the 2^hash_bits mask lazily, so one store serves
    every cell of a hash-space sweep.
    """

    def __init__(self, schema: Schema, labels: np.ndarray, cat_raw: np.ndarray,
                 cont_vals: np.ndarray, mv_raw: list[np.ndarray],
                 mv_valid: list[np.ndarray], row_errors: int, rows_read: int):
        self.schema = schema
        self.labels = labels
        self.cat_raw = cat_raw
        self.cont_vals = cont_vals
        self.cont_raw = schema.continuous_raw_hashes()
        self.mv_raw = mv_raw
        self.mv_valid = mv_valid
        self.row_errors = row_errors
        self.rows_read = rows_read

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, lo: int, hi: int, hash_bits: int) -> RecordBatch:
        mask = np.int64((1 << hash_bits) - 1)
        return RecordBatch(
            labels=self.labels[lo:hi],
            cat=self.cat_raw[lo:hi].astype(np.int64) & mask,
            cont_vals=self.cont_vals[lo:hi],
            cont_idx=self.cont_raw.astype(np.int64) & mask,
            mv=[m[lo:hi].astype(np.int64) & mask for m in self.mv_raw],
            mv_valid=[v[lo:hi] for v in self.mv_valid],
        )

    def batches(self, batch_size: int, hash_bits: int) -> Iterator[RecordBatch]:
        for lo in range(0, len(self), batch_size):
            yield self.batch(lo, min(lo + batch_size, len(self)), hash_bits)


def load_columns(path: str | Path, schema: Schema, max_rows: int | None = None,
                 padding: dict[str, int] | None = None) -> ColumnStore:
    """Bulk-parse a dataset file into a ColumnStore.

    Malformed rows are counted and skipped; the pass never aborts on row
    content. Raw hashes are cached per (field, token).
    """
    padding = padding or {}
    n_cat = len(schema.cat_fields)
    n_cont = len(schema.cont_fields)
    pads = [max(1, padding.get(f.name, 1)) for f in schema.mv_fields]

    labels = array("b")
    cat_flat = array("I")       # 4-byte unsigned on CPython/Linux
    cont_flat = array("d")
    mv_flat = [array("I") for _ in schema.mv_fields]
    mv_valid = [array("i") for _ in schema.mv_fields]

    caches: list[dict[str, int]] = [dict() for _ in schema.fields]
    cat_cols = [(1 + f.field_index, caches[f.field_index], f) for f in schema.cat_fields]
    cont_cols = [(1 + f.field_index, f) for f in schema.cont_fields]
    mv_cols = [(1 + f.field_index, caches[f.field_index], f, pads[j])
               for j, f in enumerate(schema.mv_fields)]

    row_errors = 0
    rows_read = 0
    ncols = schema.n_fields + 1
    delim = schema.delimiter
    mv_sep = schema.mv_separator

    with open_text(path) as fh:
        if schema.has_header:
            fh.readline()
        for line in fh:
            if max_rows is not None and rows_read >= max_rows:
                break
            rows_read += 1
            cols = line.rstrip("\r\n").split(delim)
            if len(cols) != ncols:
                row_errors += 1
                continue
            tok = cols[0]
            if tok == "0":
                label = 0
            elif tok == "1":
                label = 1
            else:
                try:
                    label = int(tok)
                except ValueError:
                    row_errors += 1
                    continue
                if label not in (0, 1):
                    row_errors += 1
                    continue

            row_cat = []
            for ci, cache, f in cat_cols:
                t = cols[ci] or MISSING_TOKEN
                h = cache.get(t)
                if h is None:
                    h = hash_feature_raw(f, t)
                    cache[t] = h
                row_cat.append(h)

            row_cont = []
            bad = False
            for ci, f in cont_cols:
                t = cols[ci]
                if not t:
                    row_cont.append(0.0)
                    continue
                try:
                    row_cont.append(log_transform(float(t)))
                except (ValueError, RowParseError):
                    bad = True
                    break
            if bad:
                row_errors += 1
                continue

            row_mv = []
            for ci, cache, f, pad in mv_cols:
                t = cols[ci]
                items = [s for s in t.split(mv_sep) if s] if t else []
                items = items[:pad]
                slot = [PAD_INDEX] * pad
                for k, item in enumerate(items):
                    h = cache.get(item)
                    if h is None:
                        h = hash_feature_raw(f, item)
                        cache[item] = h
                    slot[k] = h
                row_mv.append((slot, len(items)))

            labels.append(label)
            cat_flat.extend(row_cat)
            cont_flat.extend(row_cont)
            for j, (slot, valid) in enumerate(row_mv):
                mv_flat[j].extend(slot)
                mv_valid[j].append(valid)

    def _np(arr: array, dtype) -> np.ndarray:
        return np.frombuffer(arr, dtype=np.dtype(f"{arr.typecode}")).astype(dtype) if len(arr) \
            else np.zeros(0, dtype)

    n = len(labels)
    return ColumnStore(
        schema=schema,
        labels=_np(labels, np.int8),
        cat_raw=_np(cat_flat, np.uint32).reshape(n, n_cat) if n else np.zeros((0, n_cat), np.uint32),
        cont_vals=_np(cont_flat, np.float32).reshape(n, n_cont) if n else np.zeros((0, n_cont), np.float32),
        mv_raw=[_np(m, np.uint32).reshape(n, pads[j]) if n else np.zeros((0, pads[j]), np.uint32)
                for j, m in enumerate(mv_flat)],
        mv_valid=[_np(v, np.int64) for v in mv_valid],
        row_errors=row_errors,
        rows_read=rows_read,
    )


def estimate_padding(path: str | Path, schema: Schema, quantile: float = 0.95,
                     max_rows: int = 100_000) -> dict[str, int]:
    """Pre-pass over the stream head to pick multivalue padding lengths."""
    if not schema.mv_fields:
        return {}
    est = PaddingEstimator(quantile=quantile)
    mv_cols = [(1 + f.field_index, f.name) for f in schema.mv_fields]
    ncols = schema.n_fields + 1
    seen = 0
    with open_text(path) as fh:
        if schema.has_header:
            fh.readline()
        for line in fh:
            if seen >= max_rows:
                break
            seen += 1
            cols = line.rstrip("\r\n").split(schema.delimiter)
            if len(cols) != ncols:
                continue
            for ci, name in mv_cols:
                t = cols[ci]
                items = [s for s in t.split(schema.mv_separator) if s] if t else []
                est.observe(name, len(items))
    return {name: est.estimate(name) for _, name in mv_cols
            if name in est.observed_fields()}
