"""Minimal feed-forward network with hand-written reverse-mode gradients.

Everything runs in float64 numpy so gradients can be validated against
central finite differences to tight tolerances and parameter updates stay
bitwise reproducible. Weights are stored as a flat list
[W1, b1, W2, b2, ...] with W of shape (fan_in, fan_out); hidden layers use
tanh, the output layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    """Orthogonal weight matrix scaled by ``gain`` (QR of a Gaussian draw)."""
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    # C-contiguous so matmul summation order matches arrays rebuilt from a
    # flat weight file, keeping save/load roundtrips bitwise transparent
    return np.ascontiguousarray(gain * q[:fan_in, :fan_out])


@dataclass
class MLP:
    """tanh MLP; ``weights`` alternates W and b per layer."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, out_gain: float = 1.0) -> "MLP":
        """Orthogonal init: gain sqrt(2) on hidden layers, ``out_gain`` on the
        output layer (small values keep the initial policy near-uniform)."""
        sizes = tuple(int(s) for s in sizes)
        weights = []
        for k in range(len(sizes) - 1):
            gain = out_gain if k == len(sizes) - 2 else np.sqrt(2.0)
            weights.append(orthogonal(rng, sizes[k], sizes[k + 1], gain))
            weights.append(np.zeros(sizes[k + 1]))
        return cls(sizes=sizes, weights=weights)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MLP":
        return MLP(sizes=self.sizes, weights=[w.copy() for w in self.weights])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns (output, cache); cache holds the activation entering each
        layer, as needed by ``backward``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[1]}")
        cache = [x]
        h = x
        n_layers = len(self.weights) // 2
        for k in range(n_layers):
            z = h @ self.weights[2 * k] + self.weights[2 * k + 1]
            h = z if k == n_layers - 1 else np.tanh(z)
            cache.append(h)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, d_out: np.ndarray, cache: list[np.ndarray]) -> list[np.ndarray]:
        """Gradients of a scalar loss w.r.t. every weight, given dL/d(output)."""
        grads: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        n_layers = len(self.weights) // 2
        d = d_out
        for k in range(n_layers - 1, -1, -1):
            a_prev = cache[k]
            grads[2 * k] = a_prev.T @ d
            grads[2 * k + 1] = d.sum(axis=0)
            if k > 0:
                d = (d @ self.weights[2 * k].T) * (1.0 - a_prev**2)
        return grads

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for i, w in enumerate(self.weights):
            self.weights[i] = vec[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")


class Adam:
    """Adam with standard decay constants; state is positional over the
    weight list, so it survives parameter copies."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, weights: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(w) for w in weights]
            self.v = [np.zeros_like(w) for w in weights]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w -= scale * m / (np.sqrt(v) + self.eps)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))
