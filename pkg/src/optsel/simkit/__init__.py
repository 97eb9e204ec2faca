"""Synthetic corpus, small model and online training loop."""

from .corpus import Corpus, NoiseParams, QUALITIES, Sample, export_corpus, gen_corpus, import_corpus
from .loop import MetricsRow, OnlineRun, PoolSchedule, run_online, simulate
from .model import LinearStackModel, evaluate, per_sample_backward, sample_loss

__all__ = [
    "Corpus", "NoiseParams", "QUALITIES", "Sample", "export_corpus", "gen_corpus", "import_corpus",
    "MetricsRow", "OnlineRun", "PoolSchedule", "run_online", "simulate",
    "LinearStackModel", "evaluate", "per_sample_backward", "sample_loss",
]
