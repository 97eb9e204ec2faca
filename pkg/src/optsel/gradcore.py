"""Factorized per-sample gradients for linear layers.

A linear layer ``s = W^T a`` has a per-sample weight gradient that is a sum
of rank-one outer products, one per token position.  We keep it in that
factorized form, as an activation matrix ``a`` (d1 x T) and an output-gradient
matrix ``g`` (d2 x T), and never build the d2 x d1 gradient except in the
reference kernel :func:`inner_naive`.

Three ways of computing gradient inner products are provided:

* ``naive``      materialize ``g a^T`` and take the Frobenius product
* ``ghost``      contract the two T x T interaction matrices ``g_y^T g_x`` and ``a_y^T a_x``
* ``reordered``  fold all validation samples into one k1 x k2 matrix first
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from .errors import ConfigError

DISTRIBUTIONS = ("rademacher", "gaussian")


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FactorPair:
    """One linear layer's per-sample gradient, ``out_grads @ activations.T``."""

    layer_id: int
    activations: np.ndarray
    out_grads: np.ndarray

    def __post_init__(self):
        a = _as_matrix(self.activations, "activations")
        g = _as_matrix(self.out_grads, "out_grads")
        if a.shape[1] != g.shape[1]:
            raise ConfigError(
                f"layer {self.layer_id}: activations have T={a.shape[1]} "
                f"but out_grads have T={g.shape[1]}"
            )
        if a.shape[1] < 1:
            raise ConfigError(f"layer {self.layer_id}: sequence length must be >= 1")
        object.__setattr__(self, "activations", a)
        object.__setattr__(self, "out_grads", g)

    @property
    def d1(self) -> int:
        return self.activations.shape[0]

    @property
    def d2(self) -> int:
        return self.out_grads.shape[0]

    @property
    def T(self) -> int:
        return self.activations.shape[1]

    def full_gradient(self) -> np.ndarray:
        """The d2 x d1 gradient; transpose of the weight-shaped gradient."""
        return self.out_grads @ self.activations.T


@dataclass(frozen=True)
class SampleGradient:
    sample_id: int
    layers: tuple[FactorPair, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ConfigError("a sample needs at least one layer")
        ids = [p.layer_id for p in layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ConfigError(f"layer ids must be strictly increasing, got {ids}")
        object.__setattr__(self, "layers", layers)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple((p.d1, p.d2) for p in self.layers)

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(p.layer_id for p in self.layers)

    def factors(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(p.activations, p.out_grads) for p in self.layers]

    def scaled(self, alpha: float) -> "SampleGradient":
        return SampleGradient(
            self.sample_id,
            tuple(FactorPair(p.layer_id, p.activations, alpha * p.out_grads) for p in self.layers),
        )


@dataclass(frozen=True)
class ProjectionSpec:
    """Per-layer sketching matrices ``(R_a, R_g)``.

    Matrices are stored already multiplied by ``1/sqrt(k)``.  A side whose
    target dimension is not smaller than its input dimension is stored as the
    identity and skipped when projecting.
    """

    seed: int
    per_layer: tuple[tuple[np.ndarray, np.ndarray], ...]
    distribution: str = "rademacher"
    layer_ids: tuple[int, ...] = ()
    identity: tuple[tuple[bool, bool], ...] = field(default=())

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown projection distribution {self.distribution!r}")
        per_layer = tuple((np.asarray(ra, dtype=np.float64), np.asarray(rg, dtype=np.float64))
                          for ra, rg in self.per_layer)
        for i, (ra, rg) in enumerate(per_layer):
            if ra.shape[0] > ra.shape[1] or rg.shape[0] > rg.shape[1]:
                raise ConfigError(f"layer {i}: projection must not increase dimension")
        object.__setattr__(self, "per_layer", per_layer)
        if not self.layer_ids:
            object.__setattr__(self, "layer_ids", tuple(range(len(per_layer))))
        if not self.identity:
            ident = tuple(
                (_is_identity(ra), _is_identity(rg)) for ra, rg in per_layer
            )
            object.__setattr__(self, "identity", ident)

    @classmethod
    def build(
        cls,
        seed: int,
        shapes: Sequence[tuple[int, int]],
        k: int | tuple[int, int],
        distribution: str = "rademacher",
        layer_ids: Sequence[int] | None = None,
    ) -> "ProjectionSpec":
        """Draw projections for layers of the given ``(d1, d2)`` shapes.

        Each side is projected to ``min(k, d)``; sides where ``k >= d`` get the
        identity.  The matrix for ``(layer_id, side)`` depends only on
        ``(seed, layer_id, side)``, so specs can be rebuilt instead of stored.
        """
        if distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown projection distribution {distribution!r}")
        k1, k2 = (k, k) if np.isscalar(k) else k
        if k1 < 1 or k2 < 1:
            raise ConfigError("projection dimension must be >= 1")
        layer_ids = tuple(range(len(shapes))) if layer_ids is None else tuple(layer_ids)
        per_layer = []
        for lid, (d1, d2) in zip(layer_ids, shapes):
            ra = _sketch(seed, lid, 0, min(k1, d1), d1, distribution)
            rg = _sketch(seed, lid, 1, min(k2, d2), d2, distribution)
            per_layer.append((ra, rg))
        return cls(seed, tuple(per_layer), distribution, layer_ids)

    @classmethod
    def identity_for(cls, shapes: Sequence[tuple[int, int]]) -> "ProjectionSpec":
        return cls.build(0, shapes, (max(d for d, _ in shapes), max(d for _, d in shapes)))

    @property
    def out_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple((ra.shape[0], rg.shape[0]) for ra, rg in self.per_layer)

    @property
    def in_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple((ra.shape[1], rg.shape[1]) for ra, rg in self.per_layer)

    @property
    def scale(self) -> tuple[tuple[float, float], ...]:
        return tuple(
            (1.0 if ia else 1.0 / np.sqrt(k1), 1.0 if ig else 1.0 / np.sqrt(k2))
            for (k1, k2), (ia, ig) in zip(self.out_shapes, self.identity)
        )


def _is_identity(r: np.ndarray) -> bool:
    return r.shape[0] == r.shape[1] and np.array_equal(r, np.eye(r.shape[0]))


def _sketch(seed: int, layer_id: int, side: int, k: int, d: int, distribution: str) -> np.ndarray:
    if k >= d:
        return np.eye(d)
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (layer_id << 1) | side], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    if distribution == "gaussian":
        r = rng.standard_normal((k, d))
    else:
        r = rng.integers(0, 2, size=(k, d)).astype(np.float64) * 2.0 - 1.0
    return r / np.sqrt(k)


@dataclass(frozen=True)
class ProjectedSample:
    """Sketched factors; ``layers[l] == (a_hat, g_hat)`` with shapes k1 x T, k2 x T."""

    sample_id: int
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        layers = []
        for i, (a, g) in enumerate(self.layers):
            a = _as_matrix(a, "a_hat")
            g = _as_matrix(g, "g_hat")
            if a.shape[1] != g.shape[1]:
                raise ConfigError(f"layer {i}: a_hat and g_hat disagree on T")
            layers.append((a, g))
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple((a.shape[0], g.shape[0]) for a, g in self.layers)

    @property
    def T(self) -> int:
        return self.layers[0][0].shape[1]

    def factors(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(self.layers)

    def matrices(self) -> list[np.ndarray]:
        """Per-layer ``sum_t a_hat[:, t] g_hat[:, t]^T`` (k1 x k2)."""
        return [a @ g.T for a, g in self.layers]

    def scaled(self, alpha: float) -> "ProjectedSample":
        return ProjectedSample(self.sample_id, tuple((a, alpha * g) for a, g in self.layers))

    @classmethod
    def from_sample(cls, sample: SampleGradient) -> "ProjectedSample":
        """Wrap an unprojected sample (identity sketch)."""
        return cls(sample.sample_id, tuple(sample.factors()))


@dataclass(frozen=True)
class ValAggregate:
    per_layer: tuple[np.ndarray, ...]
    count: int
    preconditioned: bool = False

    def __post_init__(self):
        mats = []
        for m in self.per_layer:
            m = np.array(m, dtype=np.float64, copy=True)
            m.setflags(write=False)
            mats.append(m)
        object.__setattr__(self, "per_layer", tuple(mats))

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(m.shape for m in self.per_layer)

    def sq_norm(self) -> float:
        return float(sum(np.sum(m * m) for m in self.per_layer))

    def scaled(self, c: float) -> "ValAggregate":
        return ValAggregate(tuple(c * m for m in self.per_layer), self.count, self.preconditioned)

    @classmethod
    def zeros(cls, shapes: Sequence[tuple[int, int]]) -> "ValAggregate":
        return cls(tuple(np.zeros(s) for s in shapes), 0)


Factorized = Union[SampleGradient, ProjectedSample]


def _check_same(x_factors, y_factors, what: str = "inputs"):
    if len(x_factors) != len(y_factors):
        raise ConfigError(f"{what} have {len(x_factors)} and {len(y_factors)} layers")
    for i, ((ax, gx), (ay, gy)) in enumerate(zip(x_factors, y_factors)):
        if ax.shape[0] != ay.shape[0] or gx.shape[0] != gy.shape[0]:
            raise ConfigError(
                f"layer {i}: shape mismatch ({ax.shape[0]}, {gx.shape[0]}) "
                f"vs ({ay.shape[0]}, {gy.shape[0]})"
            )


def project_sample(sample: SampleGradient, spec: ProjectionSpec) -> ProjectedSample:
    if len(sample.layers) != len(spec.per_layer):
        raise ConfigError(
            f"sample has {len(sample.layers)} layers, projection spec has {len(spec.per_layer)}"
        )
    out = []
    for pair, (ra, rg), (ia, ig) in zip(sample.layers, spec.per_layer, spec.identity):
        if (pair.d1, pair.d2) != (ra.shape[1], rg.shape[1]):
            raise ConfigError(
                f"layer {pair.layer_id}: sample shape ({pair.d1}, {pair.d2}) does not match "
                f"projection input shape ({ra.shape[1]}, {rg.shape[1]})"
            )
        a = pair.activations if ia else ra @ pair.activations
        g = pair.out_grads if ig else rg @ pair.out_grads
        out.append((a, g))
    return ProjectedSample(sample.sample_id, tuple(out))


def inner_naive(x: Factorized, y: Factorized) -> float:
    """Reference kernel: materialize every per-layer gradient."""
    fx, fy = x.factors(), y.factors()
    _check_same(fx, fy)
    total = 0.0
    for (ax, gx), (ay, gy) in zip(fx, fy):
        total += float(np.sum((gx @ ax.T) * (gy @ ay.T)))
    return total


def inner_ghost(x: Factorized, y: Factorized) -> float:
    fx, fy = x.factors(), y.factors()
    _check_same(fx, fy)
    total = 0.0
    for (ax, gx), (ay, gy) in zip(fx, fy):
        total += float(np.sum((gy.T @ gx) * (ay.T @ ax)))
    return total


def val_aggregate(val: Sequence[ProjectedSample]) -> ValAggregate:
    if not val:
        raise ConfigError("cannot aggregate an empty validation batch")
    first = val[0].factors()
    mats = [np.zeros((a.shape[0], g.shape[0])) for a, g in first]
    for s in val:
        fs = s.factors()
        _check_same(first, fs, "validation samples")
        for m, (a, g) in zip(mats, fs):
            m += a @ g.T
    return ValAggregate(tuple(mats), len(val))


class KernelDims(NamedTuple):
    L: int
    T: int
    B_tr: int
    B_val: int
    d1: int
    d2: int


class Cost(NamedTuple):
    time_ops: int
    space_units: int


KERNELS = ("naive", "ghost", "reordered", "reordered_sym")


def cost_model(kernel: str, dims: KernelDims | dict) -> Cost:
    """Leading-order time and space for scoring ``B_tr`` candidates against ``B_val``
    validation samples.  ``reordered_sym`` is the variant that contracts with the
    output-gradient factor first."""
    if isinstance(dims, dict):
        dims = KernelDims(**dims)
    L, T, btr, bval, d1, d2 = (int(v) for v in dims)
    if min(dims) < 1:
        raise ConfigError(f"dims must be positive, got {dims}")
    if kernel == "naive":
        return Cost(L * T * T * btr * bval * d1 * d2, L * btr * bval * d1 * d2)
    if kernel == "ghost":
        return Cost(L * T * T * btr * bval * (d1 + d2),
                    L * T * (btr + bval) * d1 + T * T * btr * bval)
    if kernel == "reordered":
        return Cost(L * T * btr * d2 * (bval * d1 + T),
                    L * T * (btr + bval) * d1 + btr * d2 * max(d1, T))
    if kernel == "reordered_sym":
        return Cost(L * T * btr * d1 * (bval * d2 + T),
                    L * T * (btr + bval) * d1 + btr * d1 * max(d2, T))
    raise ConfigError(f"unknown kernel {kernel!r}")


def _contract_first_with_activations(k1: int, k2: int, T: int, count: int) -> bool:
    dims = KernelDims(1, T, 1, max(count, 1), k1, k2)
    return cost_model("reordered", dims).time_ops <= cost_model("reordered_sym", dims).time_ops


def inner_reordered(x: ProjectedSample, agg: ValAggregate) -> float:
    """Candidate-vs-aggregate product ``sum_t a[:, t]^T M g[:, t]`` summed over layers.

    The contraction order (activation side or output-gradient side first) is
    whichever the cost model says is cheaper for these shapes.
    """
    fx = x.factors()
    if len(fx) != len(agg.per_layer):
        raise ConfigError(f"sample has {len(fx)} layers, aggregate has {len(agg.per_layer)}")
    total = 0.0
    for i, ((a, g), m) in enumerate(zip(fx, agg.per_layer)):
        if m.shape != (a.shape[0], g.shape[0]):
            raise ConfigError(f"layer {i}: aggregate shape {m.shape} vs sample ({a.shape[0]}, {g.shape[0]})")
        if _contract_first_with_activations(a.shape[0], g.shape[0], a.shape[1], agg.count):
            total += float(np.sum((a.T @ m) * g.T))
        else:
            total += float(np.sum(a * (m @ g)))
    return total


def kfac_second_order_score(
    x: ProjectedSample,
    cands: Sequence[ProjectedSample],
    val: Sequence[ProjectedSample],
) -> float:
    """``grad_x^T (G (x) A) sum_k grad_k`` with K-FAC factors built from ``val``.

    Evaluated without forming any Kronecker product: per layer and candidate,
    ``(sum_m <g_x, g_m><g_m, g_k>) * (sum_m <a_x, a_m><a_m, a_k>)`` with
    Frobenius products over the token axis.
    """
    if not val:
        raise ConfigError("K-FAC score needs a non-empty validation batch")
    fx = x.factors()
    for s in list(cands) + list(val):
        _check_same(fx, s.factors())
    total = 0.0
    for layer, (ax, gx) in enumerate(fx):
        va = np.stack([s.factors()[layer][0].ravel() for s in val])
        vg = np.stack([s.factors()[layer][1].ravel() for s in val])
        xa = va @ ax.ravel()
        xg = vg @ gx.ravel()
        for c in cands:
            ac, gc = c.factors()[layer]
            total += float((xg @ (vg @ gc.ravel())) * (xa @ (va @ ac.ravel())))
    return total


# Batch kernels: score every candidate against the summed validation gradient.


@dataclass(frozen=True)
class StackedFactors:
    """Per-layer factor tensors for a batch: ``(B x d1 x T, B x d2 x T)``."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __len__(self) -> int:
        return self.layers[0][0].shape[0]

    @classmethod
    def of(cls, samples: Sequence[Factorized]) -> "StackedFactors":
        per = [s.factors() for s in samples]
        return cls(tuple(
            (np.stack([f[l][0] for f in per]), np.stack([f[l][1] for f in per]))
            for l in range(len(per[0]))
        ))


Batch = Union[Sequence[Factorized], StackedFactors]


def _stacked(samples: Batch) -> StackedFactors:
    return samples if isinstance(samples, StackedFactors) else StackedFactors.of(samples)


def _stack(samples: Batch, layer: int) -> tuple[np.ndarray, np.ndarray]:
    return _stacked(samples).layers[layer]


def _token_products(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``out[i, t, j, s] = x[i, :, t] . y[j, :, s]`` through one matrix product."""
    n, d, T = x.shape
    m, _, S = y.shape
    xf = x.transpose(0, 2, 1).reshape(n * T, d)
    yf = y.transpose(0, 2, 1).reshape(m * S, d)
    return (xf @ yf.T).reshape(n, T, m, S)


def scores_naive(train: Batch, val: Batch) -> np.ndarray:
    """Materialize every token-pair outer product, as counted in the naive cost model."""
    train, val = _stacked(train), _stacked(val)
    out = np.zeros(len(train))
    for layer in range(len(train.layers)):
        a_tr, g_tr = _stack(train, layer)
        a_val, g_val = _stack(val, layer)
        # per-token outer products, flattened: T x B x (d1 * d2)
        o_tr = np.einsum("idt,iet->tide", a_tr, g_tr).reshape(a_tr.shape[2], len(train), -1)
        o_val = np.einsum("jdt,jet->tjde", a_val, g_val).reshape(a_val.shape[2], len(val), -1)
        d = o_tr.shape[2]
        pair = o_tr.reshape(-1, d) @ o_val.reshape(-1, d).T  # (T*B_tr) x (T*B_val)
        out += pair.reshape(o_tr.shape[0], len(train), -1).sum(axis=(0, 2))
    return out


def scores_ghost(train: Batch, val: Batch) -> np.ndarray:
    train, val = _stacked(train), _stacked(val)
    out = np.zeros(len(train))
    for layer in range(len(train.layers)):
        a_tr, g_tr = _stack(train, layer)
        a_val, g_val = _stack(val, layer)
        # B_val x B_tr x T x T interaction tensors
        gg = _token_products(g_val, g_tr)
        aa = _token_products(a_val, a_tr)
        out += np.einsum("jtis,jtis->i", gg, aa)
    return out


def scores_reordered(train: Batch, val: Batch) -> np.ndarray:
    train, val = _stacked(train), _stacked(val)
    out = np.zeros(len(train))
    for layer in range(len(train.layers)):
        a_tr, g_tr = _stack(train, layer)
        a_val, g_val = _stack(val, layer)
        d1, T = a_val.shape[1], a_val.shape[2]
        d2 = g_val.shape[1]
        m = a_val.transpose(1, 0, 2).reshape(d1, -1) @ g_val.transpose(1, 0, 2).reshape(d2, -1).T
        if _contract_first_with_activations(d1, d2, T, len(val)):
            out += np.einsum("iet,iet->i", np.matmul(m.T, a_tr), g_tr)
        else:
            out += np.einsum("idt,idt->i", np.matmul(m, g_tr), a_tr)
    return out


BATCH_KERNELS = {
    "naive": scores_naive,
    "ghost": scores_ghost,
    "reordered": scores_reordered,
}


def gram_ghost(samples: Sequence[Factorized]) -> np.ndarray:
    """Pairwise ``inner_ghost`` for a batch, as one symmetric n x n matrix."""
    n = len(samples)
    G = np.zeros((n, n))
    for a, g in _stacked(samples).layers:
        G += np.einsum("itjs,itjs->ij", _token_products(g, g), _token_products(a, a))
    return 0.5 * (G + G.T)


def scores_against(samples: Sequence[ProjectedSample], agg: ValAggregate) -> np.ndarray:
    """``inner_reordered`` for every sample in the batch."""
    out = np.zeros(len(samples))
    stacked = _stacked(samples)
    for layer, m in enumerate(agg.per_layer):
        a, g = stacked.layers[layer]
        if a.shape[1:2] + g.shape[1:2] != m.shape:
            raise ConfigError(f"layer {layer}: aggregate shape {m.shape} vs samples "
                              f"({a.shape[1]}, {g.shape[1]})")
        if _contract_first_with_activations(m.shape[0], m.shape[1], a.shape[2], agg.count):
            out += np.einsum("iet,iet->i", np.matmul(m.T, a), g)
        else:
            out += np.einsum("idt,idt->i", np.matmul(m, g), a)
    return out
