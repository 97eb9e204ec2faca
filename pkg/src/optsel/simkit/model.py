"""A stack of linear layers with per-sample factor capture.

Layer ``l`` computes ``s_l = W_l^T a_l`` for every token position, with
``a_{l+1} = phi(s_l)`` between layers.  The per-sample gradient of ``W_l`` is
``a_l @ g_l.T`` where ``g_l`` is the loss gradient w.r.t. ``s_l``; the backward
pass hands back exactly those ``(a_l, g_l)`` factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..gradcore import FactorPair, SampleGradient

ACTIVATIONS = ("tanh", "identity")
LOSSES = ("softmax_ce", "squared_error")


@dataclass
class LinearStackModel:
    weights: list[np.ndarray]
    activation: str = "tanh"
    loss: str = "softmax_ce"
    _sizes: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        if not self.weights:
            raise ConfigError("model needs at least one layer")
        for i, (w, nxt) in enumerate(zip(self.weights, self.weights[1:])):
            if w.shape[1] != nxt.shape[0]:
                raise ConfigError(f"layer {i} output {w.shape[1]} does not feed layer {i + 1} input {nxt.shape[0]}")
        self._sizes = [w.size for w in self.weights]

    @classmethod
    def init(cls, rng: np.random.Generator, sizes: Sequence[int], scale: float = 1.0,
             activation: str = "tanh", loss: str = "softmax_ce") -> "LinearStackModel":
        """Gaussian init with std ``scale / sqrt(fan_in)``; ``sizes = [d0, ..., d_out]``."""
        ws = [rng.standard_normal((a, b)) * (scale / np.sqrt(a)) for a, b in zip(sizes, sizes[1:])]
        return cls(ws, activation, loss)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(d1, d2)`` per layer: input width and output width."""
        return [w.shape for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(self._sizes)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ConfigError(f"expected {self.n_params} parameters, got {theta.size}")
        out, start = [], 0
        for w in self.weights:
            out.append(theta[start:start + w.size].reshape(w.shape).copy())
            start += w.size
        self.weights = out

    def copy(self) -> "LinearStackModel":
        return LinearStackModel([w.copy() for w in self.weights], self.activation, self.loss)

    def _phi(self, s):
        return np.tanh(s) if self.activation == "tanh" else s

    def _dphi(self, s):
        return 1.0 - np.tanh(s) ** 2 if self.activation == "tanh" else np.ones_like(s)

    def forward(self, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Layer inputs and pre-activations for tokens ``x`` of shape (..., d0, T)."""
        inputs, pre = [], []
        a = x
        for i, w in enumerate(self.weights):
            inputs.append(a)
            s = np.matmul(w.T, a)
            pre.append(s)
            if i + 1 < len(self.weights):
                a = self._phi(s)
        return inputs, pre

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[1][-1]

    def losses_and_out_grads(self, out: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample loss (mean over positions) and its gradient w.r.t. the outputs.

        ``out`` is (B, C, T).  Labels are class ids (B, T); squared error also
        takes real targets (B, C, T) and one-hot encodes class ids.
        """
        T = out.shape[-1]
        labels = np.asarray(labels)
        if self.loss == "softmax_ce":
            labels = np.asarray(labels, dtype=np.int64)
            z = out - out.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            onehot = np.zeros_like(out)
            np.put_along_axis(onehot, labels[:, None, :], 1.0, axis=1)
            loss = -np.sum(onehot * logp, axis=(1, 2)) / T
            grad = (np.exp(logp) - onehot) / T
        else:
            if labels.ndim == out.ndim - 1:
                labels = _onehot(labels, out.shape[1])
            diff = out - labels.astype(np.float64)
            loss = 0.5 * np.sum(diff * diff, axis=(1, 2)) / T
            grad = diff / T
        return loss, grad

    def batch_backward(self, x: np.ndarray, labels: np.ndarray) -> tuple[list[list[tuple[np.ndarray, np.ndarray]]], np.ndarray]:
        """Per-sample factors for a stacked batch ``x`` of shape (B, d0, T).

        Returns ``factors[b][l] == (a, g)`` and the per-sample losses.
        """
        if not np.all(np.isfinite(x)):
            raise ConfigError("non-finite input activations")
        inputs, pre = self.forward(x)
        loss, g = self.losses_and_out_grads(pre[-1], labels)
        grads = [None] * len(self.weights)
        grads[-1] = g
        for i in range(len(self.weights) - 1, 0, -1):
            back = np.matmul(self.weights[i], grads[i])
            grads[i - 1] = back * self._dphi(pre[i - 1])
        if not all(np.all(np.isfinite(a)) for a in inputs):
            raise ConfigError("non-finite activations in forward pass")
        factors = [[(inputs[l][b], grads[l][b]) for l in range(len(self.weights))] for b in range(x.shape[0])]
        return factors, loss

    def weight_gradient(self, factors: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        """Flat parameter gradient from one sample's factors."""
        return np.concatenate([(a @ g.T).ravel() for a, g in factors])


def _onehot(labels: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros(labels.shape[:1] + (C,) + labels.shape[1:])
    np.put_along_axis(out, labels.astype(np.int64)[:, None], 1.0, axis=1)
    return out


def per_sample_backward(model: LinearStackModel, sample) -> tuple[SampleGradient, float]:
    """Factorized gradient and loss of a single sample."""
    x = np.asarray(sample.tokens, dtype=np.float64)[None]
    labels = np.asarray(sample.label)[None]
    factors, loss = model.batch_backward(x, labels)
    pairs = tuple(FactorPair(l, a, g) for l, (a, g) in enumerate(factors[0]))
    return SampleGradient(sample.id, pairs), float(loss[0])


def sample_loss(model: LinearStackModel, sample) -> float:
    x = np.asarray(sample.tokens, dtype=np.float64)[None]
    loss, _ = model.losses_and_out_grads(model.logits(x), np.asarray(sample.label)[None])
    return float(loss[0])


def evaluate(model: LinearStackModel, samples: Sequence) -> dict[str, float]:
    """Mean per-sample loss and per-position argmax accuracy."""
    if not samples:
        raise ConfigError("cannot evaluate on an empty set")
    x = np.stack([s.tokens for s in samples])
    labels = np.stack([np.asarray(s.label) for s in samples])
    out = model.logits(x)
    loss, _ = model.losses_and_out_grads(out, labels)
    if labels.ndim == out.ndim:
        labels = np.argmax(labels, axis=1)
    acc = float(np.mean(np.argmax(out, axis=1) == labels))
    return {"loss": float(np.mean(loss)), "accuracy": acc}
