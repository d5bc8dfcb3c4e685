"""Collision-weighted embedding table.

The table is one contiguous b x (d+1) block: columns 0..d-1 hold the
embedding, column d holds a trainable scalar weight per row, initialized
to exactly 1.0 so a fresh table is bit-identical to a plain lookup. Every
lookup returns row * weight; gradients flow into both the row and its
weight. A plain (weight-free) table is the same storage with the weight
column frozen at 1 and excluded from training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import AdamState, adam_step_rows

CHECKPOINT_MAGIC = b"CWET"
CHECKPOINT_VERSION = 1


class CollisionWeightedTable:
    """Partitioned embedding matrix: b x d block plus a per-row weight column."""

    def __init__(self, data: np.ndarray, omega: float, seed: int, weighted: bool = True):
        if data.ndim != 2 or data.shape[1] < 2:
            raise ShapeError(f"table data must be b x (d+1), got {data.shape}")
        self.data = data
        self.omega = float(omega)
        self.seed = int(seed)
        self.weighted = bool(weighted)

    @property
    def capacity(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1] - 1

    @property
    def embeddings(self) -> np.ndarray:
        return self.data[:, :-1]

    @property
    def weights(self) -> np.ndarray:
        return self.data[:, -1]

    def trainable_parameters(self) -> int:
        return self.capacity * (self.dim + 1 if self.weighted else self.dim)

    def lookup(self, index: int) -> np.ndarray:
        """Embedding row scaled by its collision weight (weight 1 for plain)."""
        row = self.data[index, :-1]
        if not self.weighted:
            return row.copy()
        return row * self.data[index, -1]

    def gather(self, indices: np.ndarray) -> np.ndarray:
        """Vectorized lookup: any index shape -> that shape + (d,)."""
        rows = self.data[indices.reshape(-1)]
        out = rows[:, :-1] * rows[:, -1:] if self.weighted else rows[:, :-1].copy()
        return out.reshape(indices.shape + (self.dim,))

    def lookup_multivalue(self, indices: np.ndarray, validity_count: int) -> np.ndarray:
        """Sum of lookups over the first validity_count indices; pads contribute 0."""
        if validity_count > len(indices):
            raise ShapeError(f"validity_count {validity_count} exceeds {len(indices)} indices")
        out = np.zeros(self.dim, dtype=self.data.dtype)
        for i in indices[:validity_count]:
            out += self.lookup(int(i))
        return out


def init_table(hash_bits: int, dim: int, omega: float, mu: float, sigma: float,
               rng_seed: int, weighted: bool = True, dtype=np.float32,
               max_rejection_rounds: int = 100) -> CollisionWeightedTable:
    """Fresh table: embeddings ~ N(mu, sigma^2) rejection-sampled into
    [-omega, omega], weight column all ones.

    Rejection retries are capped so omega -> 0 cannot loop forever; stale
    entries are clamped to the bound after the cap.
    """
    if not 1 <= hash_bits <= 30:
        raise ConfigError(f"hash_bits must be in [1, 30], got {hash_bits}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if omega <= 0:
        raise ConfigError(f"omega must be > 0, got {omega}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    b = 1 << hash_bits
    rng = np.random.default_rng(rng_seed)
    block = rng.normal(mu, sigma, size=(b, dim))
    lo, hi = -omega, omega
    for _ in range(max_rejection_rounds):
        bad = (block < lo) | (block > hi)
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        block[bad] = rng.normal(mu, sigma, size=n_bad)
    np.clip(block, lo, hi, out=block)
    data = np.empty((b, dim + 1), dtype=dtype)
    data[:, :-1] = block
    data[:, -1] = 1.0
    return CollisionWeightedTable(data, omega=omega, seed=rng_seed, weighted=weighted)


def lookup_reference(table: CollisionWeightedTable, index: int) -> tuple[np.ndarray, int]:
    """Scalar-loop lookup that counts multiplications.

    The weighted path costs exactly d multiplies more than the plain one;
    this is the instruction-count bound the production path must match.
    """
    d = table.dim
    out = np.empty(d, dtype=table.data.dtype)
    mults = 0
    for k in range(d):
        v = table.data[index, k]
        if table.weighted:
            v = v * table.data[index, -1]
            mults += 1
        out[k] = v
    return out, mults


def accumulate_gradients(table: CollisionWeightedTable, touched_indices: np.ndarray,
                         upstream_per_slot: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Merge per-slot upstream gradients into per-row buffers.

    grad wrt row i is weight(i) * upstream, grad wrt weight(i) is
    dot(row(i), upstream); duplicate indices accumulate additively.
    Returns (unique_rows, grad_rows, grad_weights) with grad_weights all
    zero for a plain table.
    """
    idx = np.asarray(touched_indices).reshape(-1)
    up = np.asarray(upstream_per_slot).reshape(len(idx), table.dim)
    uniq, inv = np.unique(idx, return_inverse=True)
    rows = table.data[idx]
    if table.weighted:
        per_slot_row_grad = up * rows[:, -1:]
        per_slot_w_grad = np.einsum("kd,kd->k", rows[:, :-1], up)
    else:
        per_slot_row_grad = up
        per_slot_w_grad = np.zeros(len(idx), dtype=up.dtype)
    grad_rows = np.zeros((len(uniq), table.dim), dtype=np.float64)
    grad_w = np.zeros(len(uniq), dtype=np.float64)
    np.add.at(grad_rows, inv, per_slot_row_grad)
    np.add.at(grad_w, inv, per_slot_w_grad)
    return uniq, grad_rows, grad_w


@dataclass
class TableAdam:
    """Sparse Adam over the table: moments are full-size, updates touch only
    the rows hit by the batch (bias correction shares one step counter)."""

    state: AdamState

    @classmethod
    def for_table(cls, table: CollisionWeightedTable, learning_rate: float, beta1: float,
                  beta2: float = 0.999, epsilon: float = 1e-8) -> "TableAdam":
        return cls(AdamState.for_param(table.data, learning_rate, beta1, beta2, epsilon))

    def apply(self, table: CollisionWeightedTable, rows: np.ndarray,
              grad_rows: np.ndarray, grad_weights: np.ndarray) -> None:
        if table.weighted:
            grad = np.concatenate([grad_rows, grad_weights[:, None]], axis=1)
            adam_step_rows(table.data, rows, grad.astype(table.data.dtype), self.state, group="table")
        else:
            # weight column frozen: route the update through the embedding block only
            emb = table.data[:, :-1]
            sub = AdamState(
                first_moment=self.state.first_moment[:, :-1],
                second_moment=self.state.second_moment[:, :-1],
                step_count=self.state.step_count,
                learning_rate=self.state.learning_rate,
                beta1=self.state.beta1,
                beta2=self.state.beta2,
                epsilon=self.state.epsilon,
            )
            adam_step_rows(emb, rows, grad_rows.astype(emb.dtype), sub, group="table")
            self.state.step_count = sub.step_count


@dataclass
class WeightDistribution:
    """Histogram + summary of the collision-weight column."""

    bucket_edges: np.ndarray
    counts: np.ndarray
    total: int
    modified: int
    modified_fraction: float
    modified_mean: float
    below_one: int
    above_one: int
    min_weight: float
    max_weight: float
    mass_below: float      # sum of (1 - w) over modified weights below 1
    mass_above: float      # sum of (w - 1) over modified weights above 1

    def csv_rows(self) -> list[tuple[float, float, int]]:
        return [(float(self.bucket_edges[i]), float(self.bucket_edges[i + 1]), int(c))
                for i, c in enumerate(self.counts)]


def export_weight_distribution(table: CollisionWeightedTable, epsilon: float,
                               n_buckets: int = 64) -> WeightDistribution:
    """Histogram the weight column; summarize how far training moved it.

    "Modified" means |w - 1| > epsilon. below_one/above_one count modified
    weights on each side of 1.0.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    w = np.asarray(table.weights, dtype=np.float64)
    lo = min(float(w.min()), 1.0 - epsilon)
    hi = max(float(w.max()), 1.0 + epsilon)
    if lo == hi:
        lo, hi = lo - epsilon, hi + epsilon
    counts, edges = np.histogram(w, bins=n_buckets, range=(lo, hi))
    mod = np.abs(w - 1.0) > epsilon
    n_mod = int(mod.sum())
    below = mod & (w < 1.0)
    above = mod & (w > 1.0)
    return WeightDistribution(
        bucket_edges=edges,
        counts=counts,
        total=int(w.size),
        modified=n_mod,
        modified_fraction=n_mod / w.size,
        modified_mean=float(w[mod].mean()) if n_mod else 1.0,
        below_one=int(below.sum()),
        above_one=int(above.sum()),
        min_weight=float(w.min()),
        max_weight=float(w.max()),
        mass_below=float((1.0 - w[below]).sum()),
        mass_above=float((w[above] - 1.0).sum()),
    )


def save_table(table: CollisionWeightedTable, path) -> None:
    """Binary layout: magic, version, b, d, omega, seed, weighted flag, then
    the raw fp32 b x (d+1) block."""
    header = struct.pack(
        "<4sIQIdQB",
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        table.capacity, table.dim, table.omega, table.seed & 0xFFFFFFFFFFFFFFFF,
        1 if table.weighted else 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(table.data, dtype=np.float32).tobytes())


def load_table(path) -> CollisionWeightedTable:
    hdr_size = struct.calcsize("<4sIQIdQB")
    with open(path, "rb") as fh:
        hdr = fh.read(hdr_size)
        if len(hdr) != hdr_size:
            raise ConfigError(f"truncated table file {path}")
        magic, version, b, d, omega, seed, weighted = struct.unpack("<4sIQIdQB", hdr)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"bad magic in {path}: {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported table version {version}")
        raw = fh.read(b * (d + 1) * 4)
    data = np.frombuffer(raw, dtype=np.float32).reshape(b, d + 1).copy()
    return CollisionWeightedTable(data, omega=omega, seed=seed, weighted=bool(weighted))
