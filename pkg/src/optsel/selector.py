"""Subset selection and weighting from candidate gradients.

All solvers work on a :class:`GramSystem`: the raw candidate Gram matrix ``G``,
the optimizer-aware alignment vector ``b`` and the squared norm of the
preconditioned target.  The matching objective for weights ``w`` is

    ||target||^2 - 2 w.b + w.G.w + lam ||w||^2

which equals ``||target - sum_i w_i grad_i||^2 + lam ||w||^2`` whenever ``b``
and ``G`` are computed against the same target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import gradcore
from .errors import ConfigError, SolverError
from .gradcore import ProjectedSample, ValAggregate
from .optstate import Preconditioner, precondition_target

STRATEGIES = (
    "two_stage",
    "omp",
    "topk_aware",
    "topk_raw",
    "random",
    "grad_match",
    "hard_filter_reweight",
    "vanilla_reweight",
    "unbounded",
)

FILTER_SCALES = ("matched", "raw")

_KKT_TOL = 1e-8


def parse_strategy(name: str) -> str:
    if name not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
    return name


@dataclass(frozen=True)
class GramSystem:
    G: np.ndarray
    b: np.ndarray
    lam: float = 0.0
    target_sq_norm: float = 0.0

    def __post_init__(self):
        G = np.array(self.G, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).ravel()
        if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] != b.size:
            raise ConfigError(f"Gram matrix {G.shape} does not match alignment vector ({b.size},)")
        scale = max(1.0, float(np.max(np.abs(G), initial=0.0)))
        if np.max(np.abs(G - G.T), initial=0.0) > 1e-9 * scale:
            raise ConfigError("Gram matrix is not symmetric")
        if np.any(np.diag(G) < -1e-12 * scale):
            raise ConfigError("Gram matrix has a negative diagonal entry")
        if G.size and np.linalg.eigvalsh(0.5 * (G + G.T))[0] < -1e-7 * scale:
            raise ConfigError("Gram matrix is not positive semi-definite")
        if self.lam < 0:
            raise ConfigError("ridge parameter must be >= 0")
        G.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.b.size

    def with_lambda(self, lam: float) -> "GramSystem":
        return replace(self, lam=float(lam))


@dataclass(frozen=True)
class SelectionOutcome:
    indices: tuple[int, ...]
    weights: np.ndarray
    objective: float
    residual_norm: float

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ConfigError(f"duplicate indices in selection {idx}")
        w = np.array(self.weights, dtype=np.float64).ravel()
        if w.size != len(idx):
            raise ConfigError("weights must align with indices")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)


def relative_lambda(G: np.ndarray, rel: float) -> float:
    """``rel`` times the mean diagonal of ``G`` (``rel`` itself if that is zero)."""
    mean_diag = float(np.mean(np.diag(G))) if G.size else 0.0
    return rel * mean_diag if mean_diag > 0 else rel


def build_gram_system(
    cands: Sequence[ProjectedSample],
    raw_agg: ValAggregate | None,
    precond_agg: ValAggregate,
    lam: float = 0.0,
) -> GramSystem:
    if not cands:
        raise ConfigError("cannot build a Gram system without candidates")
    if not precond_agg.preconditioned:
        raise ConfigError("alignment target must be preconditioned (use an all-ones preconditioner for raw)")
    if raw_agg is not None:
        if raw_agg.preconditioned:
            raise ConfigError("raw aggregate is marked preconditioned")
        if raw_agg.count != precond_agg.count or raw_agg.shapes != precond_agg.shapes:
            raise ConfigError("raw and preconditioned aggregates come from different validation batches")
    G = gradcore.gram_ghost(cands)
    b = gradcore.scores_against(cands, precond_agg)
    return GramSystem(G, b, lam, precond_agg.sq_norm())


def _subset(sys: GramSystem, subset: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.asarray(list(subset), dtype=int)
    if idx.size == 0:
        raise ConfigError("subset must be non-empty")
    if np.any(idx < 0) or np.any(idx >= sys.n):
        raise ConfigError(f"subset index out of range for n={sys.n}")
    return idx, sys.G[np.ix_(idx, idx)], sys.b[idx]


def objective_value(sys: GramSystem, w) -> float:
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size != sys.n:
        raise ConfigError(f"weight vector has {w.size} entries, system has {sys.n}")
    return float(sys.target_sq_norm - 2.0 * w @ sys.b + w @ sys.G @ w + sys.lam * w @ w)


def subset_objective(sys: GramSystem, subset: Sequence[int], w) -> float:
    _, G, b = _subset(sys, subset)
    w = np.asarray(w, dtype=np.float64)
    return float(sys.target_sq_norm - 2.0 * w @ b + w @ G @ w + sys.lam * w @ w)


def _expand(sys: GramSystem, subset: Sequence[int], w) -> np.ndarray:
    full = np.zeros(sys.n)
    full[list(subset)] = w
    return full


def greedy_filter(
    cands: Sequence[ProjectedSample],
    precond_agg: ValAggregate,
    budget: int,
    *,
    scale: str = "matched",
    precondition_residual_updates: bool = False,
    preconditioner: Preconditioner | None = None,
) -> list[int]:
    """Greedy residual search with unit weights.

    The residual starts at the preconditioned target and each pick subtracts
    the chosen candidate's sketched gradient (``D * grad`` instead when
    ``precondition_residual_updates``).  Ties go to the lowest index.

    With ``scale="matched"`` the starting residual is rescaled to the norm of
    ``budget`` average candidates, the size a unit-weight sum can reach; this
    makes the picks invariant to the overall scale of the target.  ``"raw"``
    uses the target as given.
    """
    n = len(cands)
    if budget > n:
        raise ConfigError(f"budget {budget} exceeds candidate count {n}")
    if budget < 0:
        raise ConfigError("budget must be >= 0")
    if scale not in FILTER_SCALES:
        raise ConfigError(f"unknown filter scale {scale!r}")
    if precondition_residual_updates and preconditioner is None:
        raise ConfigError("precondition_residual_updates needs the preconditioner")

    L = len(precond_agg.per_layer)
    steps = []  # per candidate, per layer: matrix subtracted from the residual
    for c in cands:
        mats = c.matrices()
        if len(mats) != L:
            raise ConfigError(f"candidate {c.sample_id} has {len(mats)} layers, target has {L}")
        if precondition_residual_updates:
            mats = [d * m for d, m in zip(preconditioner.per_layer, mats)]
        steps.append(mats)
    flat = np.stack([np.concatenate([m.ravel() for m in mats]) for mats in steps]) if n else np.zeros((0, 0))
    direction = np.stack([np.concatenate([m.ravel() for m in c.matrices()]) for c in cands]) if n else flat
    r = np.concatenate([m.ravel() for m in precond_agg.per_layer])
    if flat.size and flat.shape[1] != r.size:
        raise ConfigError("candidate and target shapes disagree")

    step_norms = np.linalg.norm(flat, axis=1) if n else np.zeros(0)
    if n and not np.any(step_norms > 0):
        return list(range(budget))
    if scale == "matched":
        tnorm = np.linalg.norm(r)
        if tnorm > 0:
            r = r * (budget * float(np.mean(step_norms)) / tnorm)

    chosen: list[int] = []
    available = np.ones(n, dtype=bool)
    while len(chosen) < budget:
        scores = np.where(available, direction @ r, -np.inf)
        i = int(np.argmax(scores))
        chosen.append(i)
        available[i] = False
        r = r - flat[i]
    return chosen


def ridge_solve(sys: GramSystem, subset: Sequence[int]) -> np.ndarray:
    _, G, b = _subset(sys, subset)
    Q = G + sys.lam * np.eye(b.size)
    if sys.lam == 0.0 and np.linalg.cond(Q) > 1.0 / (1e3 * np.finfo(float).eps):
        raise SolverError("ridge system is singular with lam=0; use lam > 0")
    try:
        return np.linalg.solve(Q, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError("ridge system is singular; use lam > 0") from exc


def _solve_block(Q: np.ndarray, c: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(Q, c)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(Q, c, rcond=None)[0]


def nnls_solve(sys: GramSystem, subset: Sequence[int]) -> np.ndarray:
    """Non-negative weights minimizing the matching objective on ``subset``.

    Lawson-Hanson active set, run directly on the normal equations
    ``(G_S + lam I) w = b_S`` since only inner products are available.
    """
    _, G, c = _subset(sys, subset)
    n = c.size
    Q = G + sys.lam * np.eye(n)
    scale = max(float(np.max(np.abs(c))), float(np.max(np.abs(Q))), np.finfo(float).tiny)
    tol = 10 * np.finfo(float).eps * n * scale

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    grad = c - Q @ x
    for _ in range(3 * n + 10):
        cand = np.where(~passive, grad, -np.inf)
        j = int(np.argmax(cand))
        if cand[j] <= tol:
            break
        passive[j] = True
        for _ in range(3 * n + 10):
            z = np.zeros(n)
            z[passive] = _solve_block(Q[np.ix_(passive, passive)], c[passive])
            if np.all(z[passive] > 0):
                x = z
                break
            neg = passive & (z <= 0)
            alpha = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + alpha * (z - x)
            passive &= x > tol * 1e-3
            x[~passive] = 0.0
            if not passive.any():
                break
        grad = c - Q @ x

    # one exact re-solve on the final support tightens the stationarity residual
    if passive.any():
        z = np.zeros(n)
        z[passive] = _solve_block(Q[np.ix_(passive, passive)], c[passive])
        if np.all(z[passive] >= 0):
            x = z
    return np.maximum(x, 0.0)


def nnls_kkt(sys: GramSystem, subset: Sequence[int], w) -> tuple[float, float, float]:
    """``(stationarity, dual_infeasibility, scale)`` of a candidate NNLS solution.

    Optimality holds when both violations are below ``1e-8 * scale``.
    """
    _, G, c = _subset(sys, subset)
    w = np.asarray(w, dtype=np.float64)
    Q = G + sys.lam * np.eye(c.size)
    grad = Q @ w - c
    scale = max(float(np.max(np.abs(c))), float(np.max(np.abs(Q))) * max(float(np.max(w, initial=0.0)), 1.0))
    scale = scale if scale > 0 else 1.0
    active = w > 0
    stat = float(np.max(np.abs(grad[active]), initial=0.0))
    dual = float(max(0.0, -np.min(grad[~active], initial=0.0)))
    return stat, dual, scale


def omp_select(sys: GramSystem, budget: int) -> SelectionOutcome:
    """Forward selection scoring every trial set by its ridge-optimal objective."""
    if budget > sys.n:
        raise ConfigError(f"budget {budget} exceeds candidate count {sys.n}")
    if sys.lam <= 0:
        raise ConfigError("omp_select needs lam > 0")
    chosen: list[int] = []
    weights = np.zeros(0)
    best_obj = sys.target_sq_norm
    for _ in range(budget):
        best_u, best_err, best_w = -1, np.inf, None
        for u in range(sys.n):
            if u in chosen:
                continue
            trial = chosen + [u]
            w = ridge_solve(sys, trial)
            err = subset_objective(sys, trial, w)
            if err < best_err:
                best_u, best_err, best_w = u, err, w
        chosen.append(best_u)
        weights, best_obj = best_w, best_err
    return SelectionOutcome(tuple(chosen), weights, best_obj, float(np.sqrt(max(best_obj, 0.0))))


def topk_select(scores, budget: int) -> list[int]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if budget > scores.size:
        raise ConfigError(f"budget {budget} exceeds candidate count {scores.size}")
    order = np.lexsort((np.arange(scores.size), -scores))
    return [int(i) for i in order[:budget]]


def weigh_subset(sys: GramSystem, subset: Sequence[int], method: str = "nnls") -> SelectionOutcome:
    """Assign weights to a fixed subset: ``nnls``, ``ridge`` (signs free) or ``unit``."""
    subset = list(subset)
    if not subset:
        return SelectionOutcome((), np.zeros(0), sys.target_sq_norm, float(np.sqrt(max(sys.target_sq_norm, 0.0))))
    if method == "nnls":
        w = nnls_solve(sys, subset)
    elif method == "ridge":
        w = ridge_solve(sys, subset)
    elif method == "unit":
        w = np.ones(len(subset))
    else:
        raise ConfigError(f"unknown weighting method {method!r}")
    obj = subset_objective(sys, subset, w)
    return SelectionOutcome(tuple(subset), w, obj, float(np.sqrt(max(obj, 0.0))))


def two_stage_select(
    cands: Sequence[ProjectedSample],
    raw_agg: ValAggregate | None,
    precond_agg: ValAggregate,
    budget: int,
    lam: float,
    **filter_opts,
) -> SelectionOutcome:
    """Greedy filter for the backbone, then one global NNLS for the weights."""
    indices = greedy_filter(cands, precond_agg, budget, **filter_opts)
    sys = build_gram_system(cands, raw_agg, precond_agg, lam)
    return weigh_subset(sys, indices, "nnls")


def shapley_first_order(w_i: float, align_i: float, lr: float) -> float:
    return -lr * w_i * align_i


def second_order_utility(sys: GramSystem, w, lr: float) -> float:
    """Second-order target-loss change under an identity Hessian:
    ``-lr * w.b + lr**2 / 2 * w.G.w``."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size != sys.n:
        raise ConfigError(f"weight vector has {w.size} entries, system has {sys.n}")
    return float(-lr * (w @ sys.b) + 0.5 * lr * lr * (w @ sys.G @ w))


def _arg_best(values: np.ndarray, maximize: bool, rtol: float = 1e-12) -> int:
    best = np.max(values) if maximize else np.min(values)
    slack = rtol * max(1.0, abs(best))
    hits = np.flatnonzero(values >= best - slack) if maximize else np.flatnonzero(values <= best + slack)
    return int(hits[0])


def alignment_l2_check(v, candidates: Sequence) -> tuple[int, int, int, int]:
    """Arg-optima of the inner-product, shifted-l2, cosine and unit-l2 criteria.

    Returns ``(argmax <v,h>, argmin ||v-h||^2 - ||h||^2, argmax cos(v,h),
    argmin ||v/|v| - h/|h|||^2)``; ties (to 1e-12 relative) go to the lowest index.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    H = np.stack([np.asarray(h, dtype=np.float64).ravel() for h in candidates])
    ip = H @ v
    shifted = np.sum((v - H) ** 2, axis=1) - np.sum(H * H, axis=1)
    norms = np.linalg.norm(H, axis=1)
    vnorm = np.linalg.norm(v)
    if vnorm == 0 or np.any(norms == 0):
        raise ConfigError("cosine alignment needs non-zero vectors")
    cos = ip / (norms * vnorm)
    unit = np.sum((v / vnorm - H / norms[:, None]) ** 2, axis=1)
    return (
        _arg_best(ip, True),
        _arg_best(shifted, False),
        _arg_best(cos, True),
        _arg_best(unit, False),
    )


def run_strategy(
    name: str,
    cands: Sequence[ProjectedSample],
    raw_agg: ValAggregate,
    precond_agg: ValAggregate,
    budget: int,
    *,
    lambda_rel: float = 1e-3,
    rng: np.random.Generator | None = None,
    filter_scale: str = "matched",
    precondition_residual_updates: bool = False,
    preconditioner: Preconditioner | None = None,
) -> SelectionOutcome:
    """Select and weight ``budget`` candidates with a named strategy.

    Returned objectives are measured against the target each strategy used
    (raw for the raw-gradient strategies, preconditioned otherwise).
    """
    parse_strategy(name)
    n = len(cands)
    if budget > n:
        raise ConfigError(f"budget {budget} exceeds candidate count {n}")

    raw_as_target = precondition_target(raw_agg, Preconditioner.ones(raw_agg.shapes))
    uses_raw = name in ("topk_raw", "grad_match", "vanilla_reweight")
    target = raw_as_target if uses_raw else precond_agg
    sys = build_gram_system(cands, raw_agg, target)
    if not np.any(np.diag(sys.G) > 0):
        return SelectionOutcome(tuple(range(budget)), np.zeros(budget), sys.target_sq_norm,
                                float(np.sqrt(sys.target_sq_norm)))
    sys = sys.with_lambda(relative_lambda(sys.G, lambda_rel))
    filter_opts = dict(
        scale=filter_scale,
        precondition_residual_updates=precondition_residual_updates and not uses_raw,
        preconditioner=preconditioner,
    )

    if name == "random":
        if rng is None:
            raise ConfigError("random strategy needs an rng")
        idx = [int(i) for i in rng.choice(n, size=budget, replace=False)]
        return weigh_subset(sys, idx, "unit")
    if name in ("topk_aware", "topk_raw"):
        return weigh_subset(sys, topk_select(sys.b, budget), "unit")
    if name == "hard_filter_reweight":
        return weigh_subset(sys, topk_select(sys.b, budget), "nnls")
    if name in ("omp", "grad_match"):
        return omp_select(sys, budget)
    idx = greedy_filter(cands, target, budget, **filter_opts)
    if name == "unbounded":
        return weigh_subset(sys, idx, "ridge")
    # two_stage, vanilla_reweight
    return weigh_subset(sys, idx, "nnls")
