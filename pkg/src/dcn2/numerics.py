"""Dense numeric kernels with hand-derived backward passes.

Everything operates on plain numpy arrays: a "vector" is a 1-D array, a
"matrix" is 2-D row-major. Ops accept either a single vector or a batch
(rows are instances) and preserve the input dtype, so the same kernels run
the fp32 training path and the fp64 gradient checks.

Only ``adam_step``/``adam_step_rows`` mutate anything (the optimizer
state and the parameter passed in); all other ops are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GradientError, ShapeError

__all__ = [
    "affine_forward",
    "affine_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_bce",
    "AdamState",
    "adam_step",
    "adam_step_rows",
    "FiniteDifferenceReport",
    "finite_difference_check",
]


def affine_forward(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b for a single vector, or x @ W.T + b row-wise for a batch."""
    if W.ndim != 2:
        raise ShapeError(f"W must be 2-D, got ndim={W.ndim}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"W.cols={W.shape[1]} does not match x.len={x.shape[-1]}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"b.len={b.shape[0] if b.ndim else '?'} does not match W.rows={W.shape[0]}")
    if x.ndim == 1:
        return W @ x + b
    return x @ W.T + b


def affine_backward(
    W: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``affine_forward``: (grad_W, grad_x, grad_b).

    grad_W is the outer product upstream ⊗ x (summed over the batch),
    grad_x = W.T @ upstream, grad_b = upstream (batch-summed).
    """
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"W.cols={W.shape[1]} does not match x.len={x.shape[-1]}")
    if upstream.shape[-1] != W.shape[0]:
        raise ShapeError(f"upstream.len={upstream.shape[-1]} does not match W.rows={W.shape[0]}")
    if x.ndim == 1:
        grad_W = np.outer(upstream, x)
        grad_x = W.T @ upstream
        grad_b = upstream.copy()
    else:
        grad_W = upstream.T @ x
        grad_x = upstream @ W
        grad_b = upstream.sum(axis=0)
    return grad_W, grad_x, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass upstream where x > 0; subgradient at exactly 0 is 0."""
    return np.where(x > 0, upstream, 0)


def sigmoid(z):
    """Numerically stable logistic; never overflows for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def sigmoid_bce(logit, label):
    """Binary cross-entropy of sigmoid(logit) against a 0/1 label.

    Uses the log-sum-exp form  max(z,0) - z*y + log(1+exp(-|z|)), which is
    exact and overflow-free for |z| well past 1e3. Returns (loss, grad)
    where grad = sigmoid(z) - y; works on scalars or same-shape arrays.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    # the exact gradient lies strictly inside (-1, 1); keep it there when
    # fp64 sigmoid saturates at large |z|
    lim = np.nextafter(1.0, 0.0)
    grad = np.clip(sigmoid(z) - y, -lim, lim)
    if z.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


@dataclass
class AdamState:
    """Adam moment buffers for one parameter group.

    ``first_moment``/``second_moment`` are shaped exactly like the tracked
    parameter. beta2/epsilon are fixed defaults; the benchmark protocol
    sweeps only the learning rate and beta1.
    """

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, learning_rate: float, beta1: float,
                  beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(param),
            second_moment=np.zeros_like(param),
            step_count=0,
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, group: str = "param") -> np.ndarray:
    """One in-place Adam update with bias correction.

    A non-finite gradient rejects the whole step and names the group. An
    exactly-zero gradient leaves the parameter untouched (moments still
    decay), so zero-gradient groups are a true fixed point.
    """
    if grad.shape != param.shape:
        raise ShapeError(f"grad shape {grad.shape} does not match param shape {param.shape} in '{group}'")
    if not np.all(np.isfinite(grad)):
        raise GradientError(f"non-finite gradient in group '{group}'")
    state.step_count += 1
    if not np.any(grad):
        state.first_moment *= state.beta1
        state.second_moment *= state.beta2
        return param
    b1, b2 = state.beta1, state.beta2
    m, v = state.first_moment, state.second_moment
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * np.square(grad)
    t = state.step_count
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    param -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype, copy=False)
    return param


def adam_step_rows(param: np.ndarray, rows: np.ndarray, grad: np.ndarray,
                   state: AdamState, group: str = "param") -> np.ndarray:
    """Adam applied only to the given rows of a large parameter matrix.

    Moments of untouched rows are left as-is (lazy update); bias correction
    uses the shared step counter. This is the streaming-scale path for
    embedding tables, where a dense update over 2^22 rows per batch is not
    affordable. ``rows`` must be unique; duplicate gradients are merged
    upstream.
    """
    if grad.shape != (len(rows),) + param.shape[1:]:
        raise ShapeError(f"row grad shape {grad.shape} does not match rows x param tail in '{group}'")
    if not np.all(np.isfinite(grad)):
        raise GradientError(f"non-finite gradient in group '{group}'")
    state.step_count += 1
    if len(rows) == 0:
        return param
    b1, b2 = state.beta1, state.beta2
    m = state.first_moment[rows] * b1 + (1.0 - b1) * grad
    v = state.second_moment[rows] * b2 + (1.0 - b2) * np.square(grad)
    state.first_moment[rows] = m
    state.second_moment[rows] = v
    t = state.step_count
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    param[rows] -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype, copy=False)
    return param


@dataclass
class FiniteDifferenceReport:
    """Per-group max relative error between analytic and central differences."""

    max_rel_error: dict[str, float]
    tolerance: float
    flagged: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def finite_difference_check(
    forward: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic_grads: dict[str, np.ndarray],
    tolerance: float,
    step: float = 1e-5,
) -> FiniteDifferenceReport:
    """Compare analytic gradients against central differences at fp64.

    ``forward`` must be deterministic and scalar-valued over the params
    dict. Each entry of each group is perturbed by ±step; the report flags
    groups whose max relative error exceeds the tolerance (the check never
    raises). Relative error uses |fd - an| / max(|fd| + |an|, 1e-8).
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    errors: dict[str, float] = {}
    flagged: list[str] = []
    for name, p in work.items():
        an = np.asarray(analytic_grads[name], dtype=np.float64)
        if an.shape != p.shape:
            raise ShapeError(f"analytic grad shape {an.shape} does not match param {p.shape} in '{name}'")
        worst = 0.0
        flat = p.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = forward(work)
            flat[i] = orig - step
            f_minus = forward(work)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(fd) + abs(an_flat[i]), 1e-8)
            worst = max(worst, abs(fd - an_flat[i]) / denom)
        errors[name] = worst
        if worst > tolerance:
            flagged.append(name)
    return FiniteDifferenceReport(max_rel_error=errors, tolerance=tolerance, flagged=flagged)


def quadratic_probe(dim: int = 4, seed: int = 0) -> tuple[Callable, dict, dict]:
    """Self-test fixture: f(x) = x.A x + c.x with known analytic gradient."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    A = (A + A.T) / 2
    c = rng.standard_normal(dim)
    x = rng.standard_normal(dim)

    def f(params):
        v = params["x"]
        return float(v @ A @ v + c @ v)

    grads = {"x": 2 * A @ x + c}
    return f, {"x": x}, grads
