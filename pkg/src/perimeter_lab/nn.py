"""Dense networks with hand-written reverse mode and an Adam optimizer.

Everything is float64. Inputs may be a single vector ``(d,)`` or a batch
``(n, d)``; outputs follow the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu", "none")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _dact(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal init. Widening layers get rows of norm ``gain`` rather than
    orthonormal columns, so narrow unit-range inputs still move the features."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    scale = gain * (np.sqrt(rows / cols) if rows > cols else 1.0)
    return np.ascontiguousarray(scale * q[:rows, :cols])


@dataclass
class Cache:
    inputs: list[np.ndarray]  # input to each layer (batched)
    pre: list[np.ndarray]  # pre-activations
    post: list[np.ndarray]  # activations
    version: int
    squeeze: bool


class DenseNet:
    """Stack of affine layers, each followed by tanh, relu or nothing."""

    def __init__(
        self,
        sizes: list[int],
        activations: list[str],
        rng: np.random.Generator | None = None,
        hidden_gain: float = np.sqrt(2.0),
        output_gain: float = 1.0,
        output_bias: float = 0.0,
    ):
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ValueError("need len(activations) == len(sizes) - 1 >= 1")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            gain = output_gain if i == n_layers - 1 else hidden_gain
            self.weights.append(orthogonal((sizes[i + 1], sizes[i]), gain, rng))
            b = np.zeros(sizes[i + 1])
            if i == n_layers - 1:
                b += output_bias
            self.biases.append(b)
        self.version = 0

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def touch(self) -> None:
        """Mark parameters as changed; older caches become stale."""
        self.version += 1

    def forward(self, x) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {a.shape[1]}")
        inputs, pre, post = [], [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(a)
            z = a @ w.T + b
            a = _act(act, z)
            pre.append(z)
            post.append(a)
        cache = Cache(inputs, pre, post, self.version, squeeze)
        return (a[0] if squeeze else a), cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: Cache, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` w.r.t. params and input."""
        if cache.version != self.version:
            raise RuntimeError("stale cache: parameters changed since forward pass")
        g = np.asarray(grad_out, dtype=float)
        if cache.squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in reversed(range(len(self.weights))):
            dz = g * _dact(self.activations[i], cache.pre[i], cache.post[i])
            grads[2 * i] = dz.T @ cache.inputs[i]
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ self.weights[i]
        return grads, (g[0] if cache.squeeze else g)

    def copy(self) -> "DenseNet":
        other = DenseNet.__new__(DenseNet)
        other.sizes = list(self.sizes)
        other.activations = list(self.activations)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.version = 0
        return other

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        d = {f"{prefix}sizes": np.asarray(self.sizes, dtype=np.int64),
             f"{prefix}activations": np.asarray(self.activations, dtype=str)}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"{prefix}W{i}"] = w
            d[f"{prefix}b{i}"] = b
        return d

    @classmethod
    def from_state(cls, d, activations: list[str] | None = None, prefix: str = "") -> "DenseNet":
        """Rebuild from :meth:`state_dict` output; stored activations win over the argument."""
        net = cls.__new__(cls)
        net.sizes = [int(s) for s in d[f"{prefix}sizes"]]
        key = f"{prefix}activations"
        if key in d:
            activations = [str(a) for a in d[key]]
        if activations is None or len(activations) != len(net.sizes) - 1:
            raise ValueError("activations missing or inconsistent with layer sizes")
        net.activations = list(activations)
        n = len(net.sizes) - 1
        net.weights = [np.array(d[f"{prefix}W{i}"], dtype=float) for i in range(n)]
        net.biases = [np.array(d[f"{prefix}b{i}"], dtype=float) for i in range(n)]
        net.version = 0
        return net


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: list[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; update rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm
