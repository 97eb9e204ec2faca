"""Experiment configs, sweeps, ablations and kernel benchmarks."""
