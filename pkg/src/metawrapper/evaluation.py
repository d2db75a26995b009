"""AUC, relative improvement, the train/test overfitting gap, and step timing."""

import time
from dataclasses import dataclass

import numpy as np

from ._kernels import average_ranks


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must have the same length")


def auc(scores, labels=None):
    """Pooled rank-sum AUC with average ranks for ties.

    Accepts a ScoredSet or two arrays.
    """
    s = scores if isinstance(scores, ScoredSet) else ScoredSet(scores, labels)
    pos = s.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(s.labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = average_ranks(s.scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_or_none(scores, labels):
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return None


def impr(auc_model, auc_base):
    """Relative AUC improvement over a base model, in percent, measured from 0.5."""
    if auc_base <= 0.5:
        raise ValueError("base AUC must exceed 0.5")
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


@dataclass
class OverfitReport:
    train_loss: float
    test_loss: float

    @property
    def gap(self):
        return self.test_loss - self.train_loss


def overfit_report(loss_fn, train, test):
    """``loss_fn(data) -> mean cross-entropy``; gap is test minus train."""
    return OverfitReport(float(loss_fn(train)), float(loss_fn(test)))


@dataclass
class TimingStats:
    n: int
    mean_ms: float
    p50_ms: float
    p95_ms: float

    @classmethod
    def from_seconds(cls, samples):
        ms = 1e3 * np.asarray(samples, dtype=np.float64)
        return cls(len(ms), float(ms.mean()), float(np.percentile(ms, 50)),
                   float(np.percentile(ms, 95)))

    def to_dict(self):
        return {"n": self.n, "mean_ms": self.mean_ms, "p50_ms": self.p50_ms, "p95_ms": self.p95_ms}


def time_steps(step, n_steps=100, warmup=10):
    """Wall-clock ``step(i)`` for ``warmup + n_steps`` calls, keeping the last ``n_steps``."""
    if n_steps < 1:
        raise ValueError("need at least one timed step")
    for i in range(warmup):
        step(i)
    samples = []
    for i in range(n_steps):
        t0 = time.perf_counter()
        step(warmup + i)
        samples.append(time.perf_counter() - t0)
    return TimingStats.from_seconds(samples)


def _bench_setup(model_cfg, dataset, methods, train_cfg, n_tasks, seed):
    from .bilevel import TrainConfig, Trainer
    from .data import task_indices

    base = (train_cfg or TrainConfig()).to_dict()
    trainers = {m: Trainer(dataset, model_cfg, TrainConfig(**{**base, "method": m, "seed": seed}))
                for m in methods}
    first = trainers[methods[0]]
    rng = np.random.default_rng([seed, 7])
    tasks = []
    while len(tasks) < n_tasks:
        for in_idx, out_idx in task_indices(len(first.train_data), first.cfg.in_ratio,
                                            first.cfg.batch_size, rng):
            tasks.append((first.train_data.take(in_idx), first.train_data.take(out_idx)))
    return trainers, tasks[:n_tasks]


def _step_fn(trainer, tasks, phase):
    from . import model as mdl

    if phase == "train":
        def step(i):
            d_in, d_out = tasks[i]
            grads, rows, _ = trainer.step_gradients(d_in, d_out)
            trainer.apply(grads, rows, 1e-3)
    elif phase == "infer":
        def step(i):
            mdl.predict_proba(trainer.params, tasks[i][0], trainer.model_cfg, trainer.variant)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return step


def bench(model_cfg, dataset, phase, method, train_cfg=None, n_steps=100, warmup=10, seed=0):
    """Per-step timing of one method on fixed, pre-drawn batches.

    ``phase="train"`` times gradient plus update; ``phase="infer"`` times a
    forward pass on the in-bag batch.
    """
    trainers, tasks = _bench_setup(model_cfg, dataset, [method], train_cfg, n_steps + warmup, seed)
    return time_steps(_step_fn(trainers[method], tasks, phase), n_steps, warmup)


def bench_ratio(model_cfg, dataset, phase, base, other, train_cfg=None, n_steps=100, warmup=10, seed=0,
                clock="cpu"):
    """Timing of two methods on identical batches, steps interleaved so that
    machine-load drift hits both equally.

    Each step is timed on the wall clock and on process CPU time.  Returns
    per-method stats (wall-clock fields plus ``cpu_mean_ms``), ``ratio_wall``
    and ``ratio_cpu`` of mean step times ``other / base``, and ``ratio``,
    which is the one selected by ``clock``.  CPU time is the default because
    on a shared machine the wall clock also counts time the process spent
    descheduled.
    """
    if clock not in ("cpu", "wall"):
        raise ValueError(f"unknown clock {clock!r}")
    trainers, tasks = _bench_setup(model_cfg, dataset, [base, other], train_cfg, n_steps + warmup, seed)
    steps = {m: _step_fn(trainers[m], tasks, phase) for m in (base, other)}
    wall = {base: [], other: []}
    cpu = {base: [], other: []}
    for i in range(warmup + n_steps):
        order = (base, other) if i % 2 == 0 else (other, base)
        for m in order:
            t0, c0 = time.perf_counter(), time.process_time()
            steps[m](i)
            if i >= warmup:
                wall[m].append(time.perf_counter() - t0)
                cpu[m].append(time.process_time() - c0)
    stats = {}
    for m in (base, other):
        stats[m] = TimingStats.from_seconds(wall[m]).to_dict()
        stats[m]["cpu_mean_ms"] = 1e3 * float(np.mean(cpu[m]))
    stats["ratio_wall"] = stats[other]["mean_ms"] / stats[base]["mean_ms"]
    stats["ratio_cpu"] = stats[other]["cpu_mean_ms"] / stats[base]["cpu_mean_ms"]
    stats["ratio"] = stats["ratio_cpu" if clock == "cpu" else "ratio_wall"]
    stats["clock"] = clock
    return stats
