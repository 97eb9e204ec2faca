"""Online fine-tuning simulator: pool, score, select, weight, update.

Each step draws an oversampled candidate pool from the training stream and a
validation batch from the target stream, projects every per-sample gradient,
runs a selection strategy against the optimizer-preconditioned validation
aggregate, and applies the weighted gradient of the chosen samples.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from collections import deque
from dataclasses import astuple, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .. import container
from ..errors import ConfigError, StreamExhausted
from ..gradcore import FactorPair, ProjectionSpec, SampleGradient, project_sample, val_aggregate
from ..optstate import (
    AdamState,
    ProjectedMoment,
    adam_update,
    linearized_preconditioner,
    precondition_target,
    projected_moment_update,
    sgd_apply,
)
from ..selector import SelectionOutcome, parse_strategy, run_strategy
from .corpus import Corpus, NoiseParams, Sample, gen_corpus
from .model import LinearStackModel, evaluate

SEED_TAGS = {"corpus": 1, "projection": 2, "pool": 3, "model": 4, "val": 5, "strategy": 6}


@dataclass(frozen=True)
class PoolSchedule:
    b_tr: int = 8
    alpha: int = 4
    b_val: int = 4
    alpha_val: int = 4
    steps: int | None = None
    budget_fraction: float = 0.05

    def __post_init__(self):
        if self.alpha < 1 or self.alpha_val < 1:
            raise ConfigError("oversampling factor alpha must be >= 1")
        if self.b_tr < 1 or self.b_val < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0 < self.budget_fraction <= 1:
            raise ConfigError("budget_fraction must be in (0, 1]")

    @property
    def B_tr(self) -> int:
        return self.alpha * self.b_tr

    @property
    def B_val(self) -> int:
        return self.alpha_val * self.b_val

    def budget(self, n: int) -> int:
        return int(self.budget_fraction * n)

    def total_steps(self, n: int) -> int:
        by_budget = math.ceil(self.budget(n) / self.b_tr)
        return by_budget if self.steps is None else min(self.steps, by_budget)


@dataclass(frozen=True)
class MetricsRow:
    step: int
    target_loss: float
    eval_accuracy: float
    selected_clean_fraction: float
    objective_value: float
    weights_entropy: float
    cumulative_data_fraction: float
    status: str = "ok"


METRICS_HEADER = tuple(f.name for f in fields(MetricsRow))


@dataclass
class OnlineRun:
    strategy: str
    seed: int
    rows: list[MetricsRow]
    selected_ids: list[int] = field(default_factory=list)
    applied_negative_weight: bool = False
    exhausted: bool = False
    wall_time: float = 0.0

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    @property
    def best(self) -> MetricsRow:
        return min(self.rows, key=lambda r: (r.target_loss, r.step))


def sub_seed(seed: int, tag: str, overrides=None) -> int:
    """Independent 63-bit seed for one randomness source of a run."""
    if overrides is not None and getattr(overrides, tag, None) is not None:
        return int(getattr(overrides, tag))
    state = np.random.SeedSequence([int(seed), SEED_TAGS[tag]]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def lr_at(step: int, total: int, lr: float, min_lr: float, warmup: int) -> float:
    """Linear warmup to ``lr`` then linear decay to ``min_lr`` at ``total`` steps."""
    if lr == 0:
        return 0.0
    if warmup > 0 and step < warmup:
        return lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return lr + (min_lr - lr) * frac


def weights_entropy(w: np.ndarray) -> float:
    a = np.abs(np.asarray(w, dtype=np.float64))
    s = a.sum()
    if s == 0:
        return 0.0
    p = a[a > 0] / s
    return float(-np.sum(p * np.log(p)))


def weighted_gradient(grads: Sequence[np.ndarray], w: Sequence[float]) -> np.ndarray:
    """``sum_i w_i grad_i`` in parameter space."""
    out = np.zeros_like(grads[0])
    for g, wi in zip(grads, w):
        out += wi * g
    return out


class Trainer:
    """Model plus optimizer state; applies one parameter update per call."""

    def __init__(self, model: LinearStackModel, kind: str = "adam",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.model = model
        self.kind = kind
        self.adam = AdamState.zeros(model.n_params, beta1, beta2, eps)

    def step(self, grad: np.ndarray, lr: float) -> None:
        if self.kind == "adam":
            delta, self.adam = adam_update(self.adam, grad, lr)
        else:
            delta = sgd_apply(grad, lr)
        self.model.set_flat(self.model.get_flat() + delta)

    def step_weighted(self, grads: Sequence[np.ndarray], w: Sequence[float], lr: float) -> None:
        self.step(weighted_gradient(grads, w), lr)


def _backward(model: LinearStackModel, samples: Sequence[Sample]) -> list[SampleGradient]:
    x = np.stack([s.tokens for s in samples])
    labels = np.stack([np.asarray(s.label) for s in samples])
    factors, _ = model.batch_backward(x, labels)
    return [SampleGradient(s.id, tuple(FactorPair(l, a, g) for l, (a, g) in enumerate(fs)))
            for s, fs in zip(samples, factors)]


class _Stream:
    """Epoch-style shuffled stream; returned items go to the back."""

    def __init__(self, n: int, rng: np.random.Generator, cycle: bool):
        self.n, self.rng, self.cycle = n, rng, cycle
        self.queue = deque(int(i) for i in rng.permutation(n))

    def draw(self, count: int) -> list[int]:
        if len(self.queue) < count:
            if not self.cycle:
                raise StreamExhausted(f"stream has {len(self.queue)} items, need {count}")
            held = set(self.queue)
            self.queue.extend(int(i) for i in self.rng.permutation(self.n) if int(i) not in held)
        return [self.queue.popleft() for _ in range(count)]

    def give_back(self, items: Sequence[int]) -> None:
        self.queue.extend(items)


def build_model(config, seed: int) -> LinearStackModel:
    rng = np.random.default_rng(sub_seed(seed, "model", config.seed_overrides))
    return LinearStackModel.init(rng, config.sizes, config.model.init_scale,
                                 config.model.activation, config.model.loss)


def build_corpus(config, seed: int) -> Corpus:
    c = config.corpus
    noise = NoiseParams(c.offdist_scale, c.offdist_shift, c.teacher_scale)
    return gen_corpus(sub_seed(seed, "corpus", config.seed_overrides), c.n, config.sizes,
                      c.mix, noise, c.T, c.n_target, c.n_test, config.model.activation)


def simulate(config, strategy: str, seed: int, corpus: Corpus | None = None,
             on_row: Callable[[MetricsRow], None] | None = None) -> OnlineRun:
    """Run one (strategy, seed) online training trajectory."""
    strategy = parse_strategy(strategy)
    started = time.perf_counter()
    ov = config.seed_overrides
    corpus = build_corpus(config, seed) if corpus is None else corpus
    if not corpus.train or not corpus.target or not corpus.test:
        raise ConfigError("corpus needs non-empty train, target and test splits")
    s = config.schedule
    sched = PoolSchedule(s.b_tr, s.alpha, s.b_val, s.alpha_val, s.steps, s.budget_fraction)
    p, o = config.params, config.optimizer
    n = corpus.n
    budget = sched.budget(n)
    total = sched.total_steps(n)

    model = build_model(config, seed)
    trainer = Trainer(model, o.kind, o.beta1, o.beta2, o.eps)
    spec = ProjectionSpec.build(sub_seed(seed, "projection", ov), model.layer_shapes,
                                config.projection.k, config.projection.distribution)
    pm = ProjectedMoment.zeros(spec.out_shapes, o.beta1, o.beta2, o.eps)
    pool_stream = _Stream(n, np.random.default_rng(sub_seed(seed, "pool", ov)), cycle=False)
    val_rng = np.random.default_rng(sub_seed(seed, "val", ov))
    val_stream = _Stream(len(corpus.target), val_rng, cycle=True)
    fixed_val = val_stream.draw(min(sched.B_val, len(corpus.target))) if p.fixed_validation else None
    strat_rng = np.random.default_rng(sub_seed(seed, "strategy", ov))

    run = OnlineRun(strategy, int(seed), [])
    consumed = clean = 0
    objective = float("nan")
    entropy = 0.0

    def record(step: int, status: str = "ok") -> None:
        ev = evaluate(model, corpus.test)
        row = MetricsRow(step, ev["loss"], ev["accuracy"],
                         clean / consumed if consumed else float("nan"),
                         objective, entropy, consumed / n, status)
        run.rows.append(row)
        if on_row is not None:
            on_row(row)

    record(0)
    step = 0
    while step < total and consumed < budget:
        b = min(s.b_tr, budget - consumed)
        pool_size = min(sched.B_tr, len(pool_stream.queue))
        if pool_size < b:
            run.exhausted = True
            break
        pool_idx = pool_stream.draw(pool_size)
        val_idx = fixed_val if fixed_val is not None else val_stream.draw(min(sched.B_val, len(corpus.target)))

        pool = [corpus.train[i] for i in pool_idx]
        pool_grads = _backward(model, pool)
        cands = [project_sample(g, spec) for g in pool_grads]
        val = [project_sample(g, spec) for g in _backward(model, [corpus.target[i] for i in val_idx])]
        raw = val_aggregate(val)
        D = linearized_preconditioner(pm)
        pre = precondition_target(raw, D)

        out: SelectionOutcome = run_strategy(
            strategy, cands, raw, pre, b, lambda_rel=p.lambda_rel, rng=strat_rng,
            filter_scale=p.filter_scale, precondition_residual_updates=p.precondition_residual_updates,
            preconditioner=D)
        chosen = list(out.indices)
        w = np.asarray(out.weights, dtype=np.float64)
        mass = np.abs(w).sum()
        if p.normalize_weights and mass > 0:
            w = w / mass
        if np.any(w < 0):
            run.applied_negative_weight = True

        picked = set(chosen)
        pool_stream.give_back([pool_idx[i] for i in range(len(pool_idx)) if i not in picked])
        consumed += len(chosen)
        clean += sum(pool[i].quality == "clean" for i in chosen)
        run.selected_ids.extend(pool[i].id for i in chosen)
        objective = float(out.objective)
        entropy = weights_entropy(w)

        if mass > 0:
            flat = [model.weight_gradient(pool_grads[i].factors()) for i in chosen]
            trainer.step_weighted(flat, w, lr_at(step, total, o.lr, o.min_lr, o.warmup_steps))
            if p.moment_source == "applied":
                mats = [sum(wi * m for wi, m in zip(w, ms))
                        for ms in zip(*(cands[i].matrices() for i in chosen))]
            else:
                mats = [sum(ms) / len(cands) for ms in zip(*(c.matrices() for c in cands))]
            pm = projected_moment_update(pm, mats)
        step += 1
        if step % config.eval_interval == 0 and not (step >= total or consumed >= budget):
            record(step)

    record(step, "stream_exhausted" if run.exhausted else "ok")
    run.wall_time = time.perf_counter() - started
    return run


def run_online(config, strategy: str, seed: int | None = None, corpus: Corpus | None = None) -> list[MetricsRow]:
    """Metrics rows of one run; ``seed`` defaults to the first configured seed."""
    return simulate(config, strategy, config.seeds[0] if seed is None else seed, corpus).rows


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(r)])
    return buf.getvalue()


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | os.PathLike) -> None:
    container.atomic_write_bytes(path, metrics_csv(rows).encode())


def read_metrics_csv(path: str | os.PathLike) -> list[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected metrics header {header}")
        out = []
        for rec in reader:
            out.append(MetricsRow(int(rec[0]), *(float(v) for v in rec[1:7]), rec[7]))
    return out
