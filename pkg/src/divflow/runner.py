"""Runs independent per-timeframe training jobs, optionally in worker processes."""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits

from .trainer import TrainConfig, train_timeframe

WORKERS_ENV = "DIVFLOW_WORKERS"


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _job(args):
    dataset, geometry, t, config = args
    # one BLAS thread per job keeps results independent of the worker count
    with threadpool_limits(limits=1):
        start = time.perf_counter()
        net, history = train_timeframe(dataset, geometry, t, config)
        return net, history, time.perf_counter() - start


def train_all(dataset, geometry, config: TrainConfig, workers: int = 1, timeframes=None):
    """Train every timeframe; returns ``[(net, history, seconds), ...]`` in timeframe order."""
    ts = list(range(dataset.nt)) if timeframes is None else list(timeframes)
    jobs = [(dataset, geometry, t, config) for t in ts]
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_job, jobs))
