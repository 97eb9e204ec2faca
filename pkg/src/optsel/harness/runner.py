"""Strategy sweeps over seeds, summaries and the ablation table."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import container
from ..simkit.loop import MetricsRow, OnlineRun, build_corpus, read_metrics_csv, simulate, write_metrics_csv
from . import config as cfgmod
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    "hard_filter_reweight",
    "topk_aware",
    "topk_raw",
    "vanilla_reweight",
    "unbounded",
    "two_stage",
)


@dataclass(frozen=True)
class RunSummary:
    strategy: str
    seed: int
    best_metric: float  # lowest target loss on the evaluation grid
    final_metric: float  # target loss once the budget is spent
    steps_to_threshold: int | None
    wall_time: float
    best_accuracy: float = float("nan")
    final_accuracy: float = float("nan")
    negative_weights_applied: bool = False
    status: str = "ok"


def summarize_run(run: OnlineRun, threshold: float | None = None) -> RunSummary:
    return summarize_rows(run.strategy, run.seed, run.rows, threshold, run.wall_time,
                          run.applied_negative_weight)


def summarize_rows(strategy: str, seed: int, rows: Sequence[MetricsRow], threshold: float | None = None,
                   wall_time: float = float("nan"), negative: bool = False) -> RunSummary:
    best = min(rows, key=lambda r: (r.target_loss, r.step))
    final = rows[-1]
    reached = None
    if threshold is not None:
        reached = next((r.step for r in rows if r.target_loss <= threshold), None)
    return RunSummary(strategy, int(seed), best.target_loss, final.target_loss, reached, wall_time,
                      best.eval_accuracy, final.eval_accuracy, negative, final.status)


def _mean_std(values: Sequence[float]) -> dict[str, float]:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0, "n": int(a.size)}


def aggregate(summaries: Sequence[RunSummary]) -> dict:
    """Per-strategy mean and sample std, strategies ordered by mean final loss."""
    by: dict[str, list[RunSummary]] = {}
    for s in summaries:
        by.setdefault(s.strategy, []).append(s)
    table = {}
    for name, runs in by.items():
        table[name] = {
            "best_metric": _mean_std([r.best_metric for r in runs]),
            "final_metric": _mean_std([r.final_metric for r in runs]),
            "best_accuracy": _mean_std([r.best_accuracy for r in runs]),
            "final_accuracy": _mean_std([r.final_accuracy for r in runs]),
            "seeds": [r.seed for r in runs],
            "negative_weights_applied": any(r.negative_weights_applied for r in runs),
            "flagged": [r.seed for r in runs if r.status != "ok"],
        }
    order = sorted(table, key=lambda k: (table[k]["final_metric"]["mean"], k))
    return {"order": order, "strategies": {k: table[k] for k in order}}


def _one(args) -> tuple[OnlineRun | None, str | None]:
    config, strategy, seed = args
    if os.environ.get("OPTSEL_THREADS"):
        _limit_threads(int(os.environ["OPTSEL_THREADS"]))
    try:
        return simulate(config, strategy, seed, build_corpus(config, seed)), None
    except Exception as exc:  # reported in the summary instead of aborting the sweep
        return None, f"{type(exc).__name__}: {exc}"


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def run_sweep(config: ExperimentConfig, strategies: Sequence[str] | None = None,
              workers: int = 1) -> tuple[list[OnlineRun], list[dict]]:
    """Run every (strategy, seed) pair; returns finished runs and failures."""
    strategies = list(strategies or config.strategies)
    jobs = [(config, st, seed) for st in strategies for seed in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, jobs))
    else:
        results = [_one(j) for j in jobs]
    runs, failures = [], []
    for (_, st, seed), (run, err) in zip(jobs, results):
        if run is None:
            log.error("run %s seed %s failed: %s", st, seed, err)
            failures.append({"strategy": st, "seed": seed, "error": err})
        else:
            runs.append(run)
    return runs, failures


def csv_name(strategy: str, seed: int) -> str:
    return f"metrics_{strategy}_seed{seed}.csv"


def write_outputs(config: ExperimentConfig, runs: Sequence[OnlineRun], failures: Sequence[dict],
                  out_dir: str | os.PathLike) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in runs:
        write_metrics_csv(run.rows, out / csv_name(run.strategy, run.seed))
    summaries = [summarize_run(r, config.loss_threshold) for r in runs]
    doc = {
        "schema_version": cfgmod.SCHEMA_VERSION,
        "complete": not failures,
        "failures": list(failures),
        "runs": [asdict(s) for s in summaries],
        **aggregate(summaries),
    }
    container.atomic_write_bytes(out / "config.yaml", cfgmod.dumps(config).encode())
    container.atomic_write_bytes(out / "summary.json", (json.dumps(doc, indent=2, default=_json_default) + "\n").encode())
    return doc


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x)}")


def output_dir(config: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get("OPTSEL_OUTPUT_DIR") or config.output)


def run_experiment(config_path: str | os.PathLike, out_dir: str | None = None, workers: int = 1) -> dict:
    """Load a config, run the sweep and write per-run CSVs plus ``summary.json``."""
    config = cfgmod.load(config_path)
    runs, failures = run_sweep(config, workers=workers)
    return write_outputs(config, runs, failures, output_dir(config, out_dir))


def recompute_summary(out_dir: str | os.PathLike, config: ExperimentConfig) -> dict:
    """Rebuild the aggregate statistics from the metrics CSVs alone."""
    out = Path(out_dir)
    summaries = []
    for st in config.strategies:
        for seed in config.seeds:
            path = out / csv_name(st, seed)
            if path.exists():
                summaries.append(summarize_rows(st, seed, read_metrics_csv(path), config.loss_threshold))
    return aggregate(summaries)


def ablation_table(doc: dict, variants: Sequence[str] = ABLATION_VARIANTS) -> list[dict]:
    rows = []
    for v in variants:
        s = doc["strategies"].get(v)
        if s is None:
            continue
        rows.append({
            "variant": v,
            "best_mean": s["best_metric"]["mean"], "best_std": s["best_metric"]["std"],
            "final_mean": s["final_metric"]["mean"], "final_std": s["final_metric"]["std"],
            "negative_weights_applied": s["negative_weights_applied"],
        })
    return rows


def _fmt(m: float, s: float) -> str:
    return "nan" if math.isnan(m) else f"{m:.4f} ± {s:.4f}"


def ablation_markdown(rows: Sequence[dict]) -> str:
    lines = ["| variant | best target loss | final target loss | negative weights |",
             "|---|---|---|---|"]
    for r in rows:
        flag = "yes" if r["negative_weights_applied"] else "no"
        lines.append(f"| {r['variant']} | {_fmt(r['best_mean'], r['best_std'])} | "
                     f"{_fmt(r['final_mean'], r['final_std'])} | {flag} |")
    return "\n".join(lines) + "\n"


def ablation_csv(rows: Sequence[dict]) -> str:
    head = ["variant", "best_mean", "best_std", "final_mean", "final_std", "negative_weights_applied"]
    body = [",".join(str(r[h]) if not isinstance(r[h], float) else repr(r[h]) for h in head) for r in rows]
    return "\n".join([",".join(head), *body]) + "\n"


def ablation_suite(config: ExperimentConfig, out_dir: str | None = None, workers: int = 1) -> list[dict]:
    """Run the ablation variants and write ``ablation.csv`` / ``ablation.md``."""
    runs, failures = run_sweep(config, ABLATION_VARIANTS, workers)
    out = output_dir(config, out_dir)
    cfg = config.replace(strategies=list(ABLATION_VARIANTS))
    doc = write_outputs(cfg, runs, failures, out)
    rows = ablation_table(doc)
    container.atomic_write_bytes(out / "ablation.csv", ablation_csv(rows).encode())
    container.atomic_write_bytes(out / "ablation.md", ablation_markdown(rows).encode())
    if failures:
        raise RuntimeError(f"{len(failures)} ablation runs failed; partial outputs in {out}")
    return rows
