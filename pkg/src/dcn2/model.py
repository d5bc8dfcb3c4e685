"""Trainable variants wired end to end.

Three variants share one record pipeline:

* ``dcn2``       collision-weighted table + onlydense stack + deep MLP,
                 plus the pairwise-similarity logit,
* ``dcnv2``      plain table + low-rank cross stack + deep MLP (baseline),
* ``dcn2_simk``  collision-weighted table + similarity logit only.

The final prediction is sigmoid(y_dcn + y_sk + b_f) where y_dcn is an
affine head over [cross output ‖ deep output] and y_sk the similarity
logit. Per-field vectors: categorical fields look up their hashed index,
continuous fields scale a per-field embedding by the transformed value,
multivalue fields sum their valid lookups.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .embeddings import CollisionWeightedTable, TableAdam, accumulate_gradients, init_table, \
    load_table, save_table
from .errors import ConfigError, GradientError, ShapeError
from .features import FeatureRecord, RecordBatch
from .layers import LowRankCrossLayer, MlpStack, OnlyDenseLayer, SimLayer, \
    lowrank_stack_parameters, onlydense_stack_parameters
from .numerics import AdamState, adam_step, sigmoid, sigmoid_bce

VARIANTS = ("dcn2", "dcnv2", "dcn2_simk")

MODEL_MAGIC = "dcn2-model"
MODEL_VERSION = 1

PROB_FLOOR = 1e-12

# benchmark protocol ranges; enforced at the harness/CLI boundary
RANGE_DIM = (8, 16)
RANGE_LR = (1e-4, 1e-2)
RANGE_BETA1 = (0.0, 0.9)
RANGE_PHI = (1.0, 3.0)


@dataclass
class ModelConfig:
    """Full hyperparameter record for one run."""

    variant: str = "dcn2"
    hash_bits: int = 18
    dim: int = 8
    field_kinds: tuple[str, ...] = ()
    cross_layers: int = 2
    proj_dim: int = 4
    phi: float = 1.0
    deep_layers: tuple[int, ...] = (64, 32)
    learning_rate: float = 2e-3
    beta1: float = 0.0
    batch_size: int = 2500
    init_mu: float = 0.0
    init_sigma: float = 0.05
    init_omega: float = 0.1
    sim_activation: str = "identity"
    seed: int = 0
    dtype: str = "f32"

    @property
    def n_fields(self) -> int:
        return len(self.field_kinds)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def input_width(self) -> int:
        return self.n_fields * self.dim

    def structural_violations(self) -> list[str]:
        v = []
        if self.variant not in VARIANTS:
            v.append(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if not 1 <= self.hash_bits <= 30:
            v.append(f"hash_bits must be in [1, 30], got {self.hash_bits}")
        if self.dim < 1:
            v.append(f"dim must be >= 1, got {self.dim}")
        if self.n_fields < 1:
            v.append("field_kinds must name at least one field")
        if any(k not in ("categorical", "continuous", "multivalue") for k in self.field_kinds):
            v.append(f"unknown field kind in {self.field_kinds}")
        if self.cross_layers < 0:
            v.append(f"cross_layers must be >= 0, got {self.cross_layers}")
        if self.variant == "dcnv2" and not 1 <= self.proj_dim <= self.input_width:
            v.append(f"proj_dim must be in [1, {self.input_width}], got {self.proj_dim}")
        if self.phi < 0:
            v.append(f"phi must be >= 0, got {self.phi}")
        if self.learning_rate < 0:
            v.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.beta1 < 1:
            v.append(f"beta1 must be in [0, 1), got {self.beta1}")
        if self.batch_size < 1:
            v.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_sigma <= 0:
            v.append(f"init_sigma must be > 0, got {self.init_sigma}")
        if self.init_omega <= 0:
            v.append(f"init_omega must be > 0, got {self.init_omega}")
        if any(s < 1 for s in self.deep_layers):
            v.append(f"deep layer sizes must be >= 1, got {self.deep_layers}")
        if self.dtype not in ("f32", "f64"):
            v.append(f"dtype must be f32 or f64, got '{self.dtype}'")
        return v

    def range_violations(self) -> list[str]:
        """Benchmark-protocol ranges (lr, beta1, dim, phi sweep bounds)."""
        v = []
        if not RANGE_DIM[0] <= self.dim <= RANGE_DIM[1]:
            v.append(f"dim must be in {RANGE_DIM}, got {self.dim}")
        if not RANGE_LR[0] <= self.learning_rate <= RANGE_LR[1]:
            v.append(f"learning_rate must be in {RANGE_LR}, got {self.learning_rate}")
        if not RANGE_BETA1[0] <= self.beta1 <= RANGE_BETA1[1]:
            v.append(f"beta1 must be in {RANGE_BETA1}, got {self.beta1}")
        if not RANGE_PHI[0] <= self.phi <= RANGE_PHI[1]:
            v.append(f"phi must be in {RANGE_PHI}, got {self.phi}")
        return v

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field_kinds"] = list(self.field_kinds)
        d["deep_layers"] = list(self.deep_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "field_kinds" in d:
            d["field_kinds"] = tuple(d["field_kinds"])
        if "deep_layers" in d:
            d["deep_layers"] = tuple(d["deep_layers"])
        return cls(**d)


class Model:
    """One trainable instance; owned by a single training loop."""

    def __init__(self, config: ModelConfig, table: CollisionWeightedTable,
                 cross: list, deep: MlpStack | None, sim: SimLayer | None,
                 head_w: np.ndarray | None, b_f: np.ndarray):
        self.config = config
        self.table = table
        self.cross = cross
        self.deep = deep
        self.sim = sim
        self.head_w = head_w
        self.b_f = b_f
        self.table_adam = TableAdam.for_table(table, config.learning_rate, config.beta1)
        self.opt: dict[str, AdamState] = {
            name: AdamState.for_param(p, config.learning_rate, config.beta1)
            for name, p in self.dense_param_items()
        }

    # -- parameter bookkeeping -------------------------------------------

    def dense_param_items(self) -> list[tuple[str, np.ndarray]]:
        items: list[tuple[str, np.ndarray]] = []
        for i, layer in enumerate(self.cross):
            items += [(f"cross.{i}.{n}", p) for n, p in layer.param_items()]
        if self.deep is not None:
            items += [(f"deep.{n}", p) for n, p in self.deep.param_items()]
        if self.sim is not None:
            items += [(f"sim.{n}", p) for n, p in self.sim.param_items()]
        if self.head_w is not None:
            items.append(("head.w", self.head_w))
        items.append(("head.b_f", self.b_f))
        return items

    def parameter_count(self) -> int:
        dense = sum(p.size for _, p in self.dense_param_items())
        return dense + self.table.trainable_parameters()

    # -- forward ----------------------------------------------------------

    def _embed(self, batch: RecordBatch) -> np.ndarray:
        """Per-field vectors, (B, n_fields, dim), in schema field order."""
        cfg = self.config
        B = len(batch)
        E = np.zeros((B, cfg.n_fields, cfg.dim), dtype=self.table.data.dtype)
        cat_k = cont_k = mv_k = 0
        for f, kind in enumerate(cfg.field_kinds):
            if kind == "categorical":
                E[:, f, :] = self.table.gather(batch.cat[:, cat_k])
                cat_k += 1
            elif kind == "continuous":
                base = self.table.lookup(int(batch.cont_idx[cont_k]))
                E[:, f, :] = batch.cont_vals[:, cont_k:cont_k + 1] * base[None, :]
                cont_k += 1
            else:
                idx = batch.mv[mv_k]
                gathered = self.table.gather(idx)
                mask = np.arange(idx.shape[1])[None, :] < batch.mv_valid[mv_k][:, None]
                E[:, f, :] = np.einsum("bpd,bp->bd", gathered, mask.astype(gathered.dtype))
                mv_k += 1
        return E

    def _scatter_embedding_grads(self, batch: RecordBatch, dE: np.ndarray
                                 ) -> tuple[np.ndarray, np.ndarray]:
        """Flatten dE into (touched_indices, per-slot upstream) pairs."""
        cfg = self.config
        B = len(batch)
        idx_parts: list[np.ndarray] = []
        up_parts: list[np.ndarray] = []
        cat_k = cont_k = mv_k = 0
        for f, kind in enumerate(cfg.field_kinds):
            if kind == "categorical":
                idx_parts.append(batch.cat[:, cat_k])
                up_parts.append(dE[:, f, :])
                cat_k += 1
            elif kind == "continuous":
                idx_parts.append(np.full(B, batch.cont_idx[cont_k], dtype=np.int64))
                up_parts.append(dE[:, f, :] * batch.cont_vals[:, cont_k:cont_k + 1])
                cont_k += 1
            else:
                idx = batch.mv[mv_k]
                valid = np.arange(idx.shape[1])[None, :] < batch.mv_valid[mv_k][:, None]
                flat = valid.reshape(-1)
                rep = np.repeat(dE[:, f, :][:, None, :], idx.shape[1], axis=1).reshape(-1, cfg.dim)
                idx_parts.append(idx.reshape(-1)[flat])
                up_parts.append(rep[flat])
                mv_k += 1
        return np.concatenate(idx_parts), np.concatenate(up_parts)

    def _forward(self, batch: RecordBatch):
        E = self._embed(batch)
        B = len(batch)
        X0 = E.reshape(B, -1)
        cross_caches = []
        x = X0
        for layer in self.cross:
            if isinstance(layer, LowRankCrossLayer):
                x, cache = layer.forward(x, X0)
            else:
                x, cache = layer.forward(x)
            cross_caches.append(cache)
        deep_out, deep_cache = (self.deep.forward(X0) if self.deep is not None else (None, None))
        if self.head_w is not None:
            concat = x if deep_out is None else np.concatenate([x, deep_out], axis=1)
            y_dcn = concat @ self.head_w
        else:
            concat, y_dcn = None, np.zeros(B, dtype=X0.dtype)
        if self.sim is not None:
            y_sk, sim_cache = self.sim.forward(E)
        else:
            y_sk, sim_cache = np.zeros(B, dtype=X0.dtype), None
        logit = y_dcn + y_sk + float(self.b_f)
        return logit, (E, X0, cross_caches, deep_cache, concat, sim_cache)

    def predict_batch(self, batch: RecordBatch) -> np.ndarray:
        """Probabilities in (0, 1); pure, no state change."""
        logit, _ = self._forward(batch)
        return np.clip(sigmoid(logit), PROB_FLOOR, 1.0 - PROB_FLOOR)

    def predict(self, record: FeatureRecord) -> float:
        return float(self.predict_batch(RecordBatch.from_records([record]))[0])

    # -- training ---------------------------------------------------------

    def _backward_and_update(self, batch: RecordBatch, logit: np.ndarray, caches) -> None:
        E, X0, cross_caches, deep_cache, concat, sim_cache = caches
        B = len(batch)
        labels = batch.labels.astype(np.float64)
        _, grad_logit = sigmoid_bce(logit, labels)
        dlogit = (grad_logit / B).astype(X0.dtype)

        grads: dict[str, np.ndarray] = {"head.b_f": np.asarray(dlogit.sum(), dtype=self.b_f.dtype)}
        dX0 = np.zeros_like(X0)
        dE = np.zeros_like(E)

        if self.head_w is not None:
            grads["head.w"] = concat.T @ dlogit
            dconcat = dlogit[:, None] * self.head_w[None, :]
            cross_width = X0.shape[1]
            dcross = dconcat[:, :cross_width]
            if self.deep is not None:
                ddeep = dconcat[:, cross_width:]
                mg = self.deep.backward(deep_cache, ddeep)
                for n, _ in self.deep.param_items():
                    grads[f"deep.{n}"] = mg[n]
                dX0 += mg["x"]
            u = dcross
            for i in range(len(self.cross) - 1, -1, -1):
                layer = self.cross[i]
                lg = layer.backward(cross_caches[i], u)
                for n, _ in layer.param_items():
                    grads[f"cross.{i}.{n}"] = lg[n]
                u = lg["x"]
                if "x0" in lg:
                    dX0 += lg["x0"]
            dX0 += u

        if self.sim is not None:
            sg = self.sim.backward(sim_cache, dlogit)
            grads["sim.w"] = sg["w"]
            grads["sim.b"] = np.asarray(sg["b"], dtype=self.sim.b.dtype)
            dE += sg["E"]

        dE += dX0.reshape(E.shape)

        touched, upstream = self._scatter_embedding_grads(batch, dE)
        rows, grad_rows, grad_w = accumulate_gradients(self.table, touched, upstream)
        self.table_adam.apply(self.table, rows, grad_rows, grad_w)
        for name, param in self.dense_param_items():
            adam_step(param, np.asarray(grads[name], dtype=param.dtype), self.opt[name], group=name)

    def train_step(self, batch: RecordBatch | list) -> float:
        """One forward + backward + Adam update on the mean batch loss.

        Returns the pre-update mean loss. A non-finite loss aborts the step
        before any parameter changes.
        """
        if not isinstance(batch, RecordBatch):
            batch = RecordBatch.from_records(batch)
        if len(batch) == 0:
            raise ShapeError("train_step needs a non-empty batch")
        logit, caches = self._forward(batch)
        losses, _ = sigmoid_bce(logit, batch.labels.astype(np.float64))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise GradientError("non-finite loss; step aborted before update")
        self._backward_and_update(batch, logit, caches)
        return mean_loss

    def predict_then_train(self, batch: RecordBatch) -> tuple[np.ndarray, float]:
        """Progressive-validation step: score the batch with the current
        parameters, then train on it. One forward pass serves both."""
        logit, caches = self._forward(batch)
        preds = np.clip(sigmoid(logit), PROB_FLOOR, 1.0 - PROB_FLOOR)
        losses, _ = sigmoid_bce(logit, batch.labels.astype(np.float64))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise GradientError("non-finite loss; step aborted before update")
        self._backward_and_update(batch, logit, caches)
        return preds, mean_loss


def build(config: ModelConfig) -> Model:
    """Assemble a variant; deterministic given config.seed."""
    violations = config.structural_violations()
    if violations:
        raise ConfigError("invalid config: " + "; ".join(violations))
    dtype = config.np_dtype
    weighted = config.variant != "dcnv2"
    table = init_table(config.hash_bits, config.dim, config.init_omega, config.init_mu,
                       config.init_sigma, rng_seed=config.seed, weighted=weighted, dtype=dtype)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xD0C2)))
    D = config.input_width

    cross: list = []
    deep = None
    sim = None
    head_w = None
    if config.variant in ("dcn2", "dcnv2"):
        for _ in range(config.cross_layers):
            if config.variant == "dcn2":
                cross.append(OnlyDenseLayer(D, phi=config.phi, rng=rng, dtype=dtype))
            else:
                cross.append(LowRankCrossLayer(D, config.proj_dim, phi=config.phi, rng=rng, dtype=dtype))
        if config.deep_layers:
            deep = MlpStack([D, *config.deep_layers], rng=rng, dtype=dtype)
        concat_width = D + (deep.out_dim if deep is not None else 0)
        head_w = (rng.standard_normal(concat_width) * np.sqrt(1.0 / concat_width)).astype(dtype)
    if config.variant in ("dcn2", "dcn2_simk"):
        sim = SimLayer(config.n_fields, config.dim, activation=config.sim_activation, dtype=dtype)
    b_f = np.zeros((), dtype=dtype)
    return Model(config, table, cross, deep, sim, head_w, b_f)


def complexity_estimate(config: ModelConfig, onlydense_layers: int | None = None,
                        lowrank_layers: int | None = None) -> dict:
    """Both sides of the stack-cost trade-off inequality.

    Per-layer width terms: |F|*d for the onlydense stack and (|F|*d)
    divided by the d/p compression ratio -- i.e. |F|*p -- for the low-rank
    stack; each side scales by its layer count. ``dominates`` is true when
    the onlydense side is within the low-rank budget.
    """
    l_od = config.cross_layers if onlydense_layers is None else onlydense_layers
    l_c = config.cross_layers if lowrank_layers is None else lowrank_layers
    F, d, p = config.n_fields, config.dim, config.proj_dim
    if p < 1:
        raise ConfigError(f"proj_dim must be >= 1, got {p}")
    onlydense_width = F * d
    lowrank_width = (F * d) / (d / p)
    onlydense_ops = l_od * onlydense_width
    lowrank_ops = l_c * lowrank_width
    return {
        "onlydense_width": float(onlydense_width),
        "lowrank_width": float(lowrank_width),
        "onlydense_ops": float(onlydense_ops),
        "lowrank_ops": float(lowrank_ops),
        "dominates": bool(onlydense_ops <= lowrank_ops),
    }


def stack_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of the configured cross stack."""
    D = config.input_width
    if config.variant == "dcn2":
        return onlydense_stack_parameters(config.cross_layers, D)
    if config.variant == "dcnv2":
        return lowrank_stack_parameters(config.cross_layers, D, config.proj_dim)
    return 0


# -- checkpointing ---------------------------------------------------------


def save_model(model: Model, prefix: str | Path) -> tuple[Path, Path]:
    """Write `<prefix>.emb` (table binary) and `<prefix>.params` (sidecar:
    JSON header line with shapes, then flattened fp32 blocks in order)."""
    prefix = Path(prefix)
    emb_path = prefix.with_suffix(".emb")
    params_path = prefix.with_suffix(".params")
    save_table(model.table, emb_path)
    items = model.dense_param_items()
    header = {
        "magic": MODEL_MAGIC,
        "version": MODEL_VERSION,
        "config": model.config.to_dict(),
        "groups": [{"name": n, "shape": list(p.shape)} for n, p in items],
    }
    with open(params_path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for _, p in items:
            fh.write(np.ascontiguousarray(p, dtype=np.float32).tobytes())
    return emb_path, params_path


def load_model(prefix: str | Path) -> Model:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".params"), "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != MODEL_MAGIC:
            raise ConfigError(f"not a model sidecar: {prefix}")
        if header.get("version") != MODEL_VERSION:
            raise ConfigError(f"unsupported model version {header.get('version')}")
        config = ModelConfig.from_dict(header["config"])
        model = build(config)
        model.table = load_table(prefix.with_suffix(".emb"))
        model.table_adam = TableAdam.for_table(model.table, config.learning_rate, config.beta1)
        for spec_entry, (name, param) in zip(header["groups"], model.dense_param_items()):
            if spec_entry["name"] != name or list(param.shape) != spec_entry["shape"]:
                raise ConfigError(f"sidecar group mismatch at '{name}'")
            n = param.size
            raw = fh.read(4 * n)
            param[...] = np.frombuffer(raw, dtype=np.float32).reshape(param.shape)
    return model
