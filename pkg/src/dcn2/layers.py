"""Interaction layers: onlydense, low-rank cross, pairwise similarity, MLP.

Every layer takes either a single vector (1-D) or a batch with instances
as rows, returns (output, cache), and has a hand-derived ``backward`` that
maps (cache, upstream) to a dict of gradients. Parameter arrays live on
the layer and are updated in place by the optimizer; phi is a fixed
hyperparameter everywhere, never trained.

The onlydense layer is  x_r = relu(W x + b0) ⊙ x · phi  -- an explicit
full-width cross with a scaled Hadamard anchor and deliberately no
additive residual: zero input gives exactly zero output. The low-rank
cross layer keeps the residual:  x_r = x0 ⊙ (W1 relu(W0 x + b0) + b1 +
phi x) + x.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import relu

_SIM_ACTIVATIONS = ("identity", "relu", "tanh")


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected 1-D or 2-D input, got ndim={x.ndim}")


def _maybe_squeeze(x: np.ndarray, was_vector: bool) -> np.ndarray:
    return x[0] if was_vector else x


class OnlyDenseLayer:
    """Full-width explicit cross: x_t = relu(W x + b0), x_r = x_t ⊙ x · phi."""

    def __init__(self, dim: int, phi: float = 1.0, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.phi = float(phi)
        self.W = (rng.standard_normal((dim, dim)) * np.sqrt(2.0 / dim)).astype(dtype)
        # bias starts at 1 so a fresh layer acts like ~phi * identity on
        # small inputs instead of squashing them quadratically
        self.b0 = np.ones(dim, dtype=dtype)

    def forward(self, x: np.ndarray):
        xb, vec = _as_batch(x)
        if xb.shape[1] != self.dim:
            raise ShapeError(f"input width {xb.shape[1]} does not match layer dim {self.dim}")
        pre = xb @ self.W.T + self.b0
        xt = relu(pre)
        out = xt * xb * self.phi
        return _maybe_squeeze(out, vec), (xb, pre, xt, vec)

    def backward(self, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        xb, pre, xt, vec = cache
        u, _ = _as_batch(upstream)
        # product rule: upstream reaches x both directly and through x_t
        dxt = u * xb * self.phi
        dpre = dxt * (pre > 0)
        dx = u * xt * self.phi + dpre @ self.W
        return {
            "W": dpre.T @ xb,
            "b0": dpre.sum(axis=0),
            "x": _maybe_squeeze(dx, vec),
        }

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("W", self.W), ("b0", self.b0)]

    def parameter_count(self) -> int:
        return self.dim * self.dim + self.dim


class LowRankCrossLayer:
    """DCNv2-style low-rank cross with residual and anchor input x0."""

    def __init__(self, dim: int, proj_dim: int, phi: float = 1.0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if proj_dim < 1 or proj_dim > dim:
            raise ConfigError(f"proj_dim must be in [1, dim={dim}], got {proj_dim}")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.proj_dim = proj_dim
        self.phi = float(phi)
        self.W0 = (rng.standard_normal((proj_dim, dim)) * np.sqrt(2.0 / dim)).astype(dtype)
        self.W1 = (rng.standard_normal((dim, proj_dim)) * np.sqrt(1.0 / proj_dim)).astype(dtype)
        self.b0 = np.zeros(proj_dim, dtype=dtype)
        self.b1 = np.zeros(dim, dtype=dtype)

    def forward(self, x: np.ndarray, x0: np.ndarray):
        xb, vec = _as_batch(x)
        x0b, _ = _as_batch(x0)
        if xb.shape != x0b.shape:
            raise ShapeError(f"x shape {xb.shape} does not match x0 shape {x0b.shape}")
        if xb.shape[1] != self.dim:
            raise ShapeError(f"input width {xb.shape[1]} does not match layer dim {self.dim}")
        prep = xb @ self.W0.T + self.b0
        xp = relu(prep)
        xo = xp @ self.W1.T + self.b1 + self.phi * xb
        out = x0b * xo + xb
        return _maybe_squeeze(out, vec), (xb, x0b, prep, xp, xo, vec)

    def backward(self, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        xb, x0b, prep, xp, xo, vec = cache
        u, _ = _as_batch(upstream)
        dxo = u * x0b
        dx0 = u * xo
        dxp = dxo @ self.W1
        dprep = dxp * (prep > 0)
        dx = u + self.phi * dxo + dprep @ self.W0
        return {
            "W0": dprep.T @ xb,
            "W1": dxo.T @ xp,
            "b0": dprep.sum(axis=0),
            "b1": dxo.sum(axis=0),
            "x": _maybe_squeeze(dx, vec),
            "x0": _maybe_squeeze(dx0, vec),
        }

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("W0", self.W0), ("W1", self.W1), ("b0", self.b0), ("b1", self.b1)]

    def parameter_count(self) -> int:
        return 2 * self.dim * self.proj_dim + self.proj_dim + self.dim


class SimLayer:
    """Scalar logit from all n^2 pairwise dot products between field embeddings.

    The weight vector is deliberately redundant over (i,j)/(j,i): the full
    Gram matrix E Eᵀ is cheaper to form than slicing out the triangle.
    Weights and bias start at zero so a fresh layer contributes nothing.
    """

    def __init__(self, n_fields: int, dim: int, activation: str = "identity",
                 dtype=np.float32):
        if activation not in _SIM_ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_SIM_ACTIVATIONS}, got '{activation}'")
        self.n = n_fields
        self.m = dim
        self.activation = activation
        self.w = np.zeros(n_fields * n_fields, dtype=dtype)
        self.b = np.zeros((), dtype=dtype)

    def forward(self, E: np.ndarray):
        single = E.ndim == 2
        Eb = E[None] if single else E
        if Eb.shape[1] != self.n or Eb.shape[2] != self.m:
            raise ShapeError(f"embedding block {Eb.shape[1:]} does not match ({self.n}, {self.m})")
        G = Eb @ Eb.transpose(0, 2, 1)
        s = G.reshape(len(Eb), -1) @ self.w + self.b
        if self.activation == "relu":
            y = relu(s)
        elif self.activation == "tanh":
            y = np.tanh(s)
        else:
            y = s
        out = float(y[0]) if single else y
        return out, (Eb, G, s, single)

    def backward(self, cache, upstream) -> dict[str, np.ndarray]:
        Eb, G, s, single = cache
        u = np.atleast_1d(np.asarray(upstream, dtype=G.dtype))
        if self.activation == "relu":
            ds = u * (s > 0)
        elif self.activation == "tanh":
            ds = u * (1.0 - np.tanh(s) ** 2)
        else:
            ds = u.copy()
        Wm = self.w.reshape(self.n, self.n)
        sym = Wm + Wm.T
        gE = np.einsum("ij,bjm->bim", sym, Eb) * ds[:, None, None]
        return {
            "w": G.reshape(len(Eb), -1).T @ ds,
            "b": ds.sum(),
            "E": gE[0] if single else gE,
        }

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("w", self.w), ("b", self.b)]

    def parameter_count(self) -> int:
        return self.n * self.n + 1


class MlpStack:
    """Plain deep branch: affine layers with ReLU between them.

    ``sizes`` runs input -> hidden... -> output; hidden activations are
    ReLU, the last layer stays linear (a single-layer stack is exactly one
    affine map). An empty stack (one size or fewer) is the identity.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be >= 1, got {sizes}")
        self.sizes = list(sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            scale = np.sqrt((1.0 if last else 2.0) / fan_in)
            self.weights.append((rng.standard_normal((fan_out, fan_in)) * scale).astype(dtype))
            self.biases.append(np.zeros(fan_out, dtype=dtype))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.sizes[-1] if self.sizes else 0

    def forward(self, x: np.ndarray):
        xb, vec = _as_batch(x)
        h = xb
        pres = []
        inputs = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if h.shape[1] != W.shape[1]:
                raise ShapeError(f"layer {i} expects width {W.shape[1]}, got {h.shape[1]}")
            inputs.append(h)
            pre = h @ W.T + b
            pres.append(pre)
            h = relu(pre) if i < self.n_layers - 1 else pre
        return _maybe_squeeze(h, vec), (inputs, pres, vec)

    def backward(self, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        inputs, pres, vec = cache
        u, _ = _as_batch(upstream)
        grads: dict[str, np.ndarray] = {}
        for i in range(self.n_layers - 1, -1, -1):
            dpre = u if i == self.n_layers - 1 else u * (pres[i] > 0)
            grads[f"W{i}"] = dpre.T @ inputs[i]
            grads[f"b{i}"] = dpre.sum(axis=0)
            u = dpre @ self.weights[i]
        grads["x"] = _maybe_squeeze(u, vec)
        return grads

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"W{i}", W))
            out.append((f"b{i}", b))
        return out

    def parameter_count(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


def onlydense_stack_parameters(n_layers: int, width: int) -> int:
    """Closed form: l * (D^2 + D) for a stack of l layers at width D."""
    return n_layers * (width * width + width)


def lowrank_stack_parameters(n_layers: int, width: int, proj_dim: int) -> int:
    """Closed form: l * (2 D p + p + D)."""
    return n_layers * (2 * width * proj_dim + proj_dim + width)
