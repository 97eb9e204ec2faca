"""SGD/Adam updates plus the projected second moment used for selection.

Parameter-space Adam drives the model.  A second, much smaller moment lives
in the sketched k1 x k2 space of each layer; it is only used to build the
frozen diagonal preconditioner that turns the validation gradient into an
optimizer-aware selection target.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import container
from .errors import ConfigError
from .gradcore import ValAggregate


def _finite(g, name: str = "gradient") -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ConfigError(f"non-finite {name}")
    return g


def sgd_apply(g, lr: float) -> np.ndarray:
    return -lr * _finite(g)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.m.shape != self.v.shape:
            raise ConfigError("Adam moments must have the same shape")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("Adam eps must be positive")
        if self.t < 0:
            raise ConfigError("Adam step counter must be >= 0")

    @classmethod
    def zeros(cls, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_update(state: AdamState, g, lr: float) -> tuple[np.ndarray, AdamState]:
    """One Adam step.  Returns the parameter delta and the advanced state."""
    g = _finite(g)
    if g.shape != state.m.shape:
        raise ConfigError(f"gradient shape {g.shape} vs state shape {state.m.shape}")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    delta = -lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return delta, AdamState(m, v, t, b1, b2, state.eps)


@dataclass(frozen=True)
class ProjectedMoment:
    """Second moment of the applied batch gradient, tracked in sketched space."""

    per_layer: tuple[np.ndarray, ...]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        mats = tuple(np.array(v, dtype=np.float64, copy=True) for v in self.per_layer)
        for v in mats:
            if np.any(v < 0):
                raise ConfigError("projected second moment must be non-negative")
            v.setflags(write=False)
        object.__setattr__(self, "per_layer", mats)

    @classmethod
    def zeros(cls, shapes: Sequence[tuple[int, int]], beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "ProjectedMoment":
        return cls(tuple(np.zeros(s) for s in shapes), 0, beta1, beta2, eps)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(v.shape for v in self.per_layer)


def projected_moment_update(pm: ProjectedMoment, batch_grad) -> ProjectedMoment:
    mats = batch_grad.per_layer if isinstance(batch_grad, ValAggregate) else tuple(batch_grad)
    if len(mats) != len(pm.per_layer):
        raise ConfigError(f"batch gradient has {len(mats)} layers, moment has {len(pm.per_layer)}")
    new = []
    for i, (v, g) in enumerate(zip(pm.per_layer, mats)):
        g = _finite(g, "batch gradient")
        if g.shape != v.shape:
            raise ConfigError(f"layer {i}: batch gradient shape {g.shape} vs moment {v.shape}")
        new.append(pm.beta2 * v + (1.0 - pm.beta2) * g * g)
    return ProjectedMoment(tuple(new), pm.t + 1, pm.beta1, pm.beta2, pm.eps)


@dataclass(frozen=True)
class Preconditioner:
    per_layer: tuple[np.ndarray, ...]
    source_step: int = 0

    @classmethod
    def ones(cls, shapes: Sequence[tuple[int, int]]) -> "Preconditioner":
        return cls(tuple(np.ones(s) for s in shapes), 0)


def linearized_preconditioner(pm: ProjectedMoment) -> Preconditioner:
    """Frozen diagonal Adam map for the next step.

    With ``t = pm.t + 1`` the step about to be taken, the entries are
    ``(1 - b1) / ((1 - b1**t) * (sqrt(v_hat) + eps))`` where ``v_hat`` is the
    stored moment bias-corrected for its own ``pm.t`` updates (zero before any
    update).  The first factor is the coefficient of the new gradient inside
    Adam's bias-corrected first moment.
    """
    t = pm.t + 1
    scale = (1.0 - pm.beta1) / (1.0 - pm.beta1**t)
    out = []
    for v in pm.per_layer:
        v_hat = v / (1.0 - pm.beta2**pm.t) if pm.t > 0 else np.zeros_like(v)
        out.append(scale / (np.sqrt(v_hat) + pm.eps))
    return Preconditioner(tuple(out), pm.t)


def precondition_target(agg: ValAggregate, D: Preconditioner) -> ValAggregate:
    if agg.preconditioned:
        raise ConfigError("validation aggregate is already preconditioned")
    if len(D.per_layer) != len(agg.per_layer):
        raise ConfigError(f"preconditioner has {len(D.per_layer)} layers, aggregate {len(agg.per_layer)}")
    mats = []
    for i, (m, d) in enumerate(zip(agg.per_layer, D.per_layer)):
        if m.shape != d.shape:
            raise ConfigError(f"layer {i}: preconditioner shape {d.shape} vs aggregate {m.shape}")
        mats.append(d * m)
    return ValAggregate(tuple(mats), agg.count, preconditioned=True)


def save_checkpoint(adam: AdamState, pm: ProjectedMoment,
                    path: str | os.PathLike | None = None) -> bytes:
    """Serialize ``{t, beta1, beta2, eps, m, v, per-layer V}``."""
    f = io.BytesIO()
    container.write_header(f, container.KIND_OPTIMIZER)
    f.write(struct.pack("<QQ3d", adam.t, pm.t, adam.beta1, adam.beta2, adam.eps))
    f.write(struct.pack("<3d", pm.beta1, pm.beta2, pm.eps))
    f.write(struct.pack("<Q", adam.m.size))
    container.w_mat(f, adam.m)
    container.w_mat(f, adam.v)
    container.write_shape_table(f, list(pm.shapes))
    for v in pm.per_layer:
        container.w_mat(f, v)
    data = f.getvalue()
    if path is not None:
        container.atomic_write_bytes(path, data)
    return data


def load_checkpoint(src) -> tuple[AdamState, ProjectedMoment]:
    f = io.BytesIO(src) if isinstance(src, (bytes, bytearray)) else open(src, "rb")
    with f:
        container.read_header(f, container.KIND_OPTIMIZER)
        t, pt, b1, b2, eps = struct.unpack("<QQ3d", container.read_exact(f, 40))
        pb1, pb2, peps = struct.unpack("<3d", container.read_exact(f, 24))
        (n,) = struct.unpack("<Q", container.read_exact(f, 8))
        m = container.r_mat(f, (n,))
        v = container.r_mat(f, (n,))
        shapes = container.read_shape_table(f)
        V = tuple(container.r_mat(f, s) for s in shapes)
    return AdamState(m, v, t, b1, b2, eps), ProjectedMoment(V, pt, pb1, pb2, peps)
