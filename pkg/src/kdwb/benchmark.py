"""Forward-only throughput measurement (samples per second)."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass
from itertools import cycle, islice
from typing import Sequence

import numpy as np

from .analysis import ScoreTable
from .data import Dataset, Vocab, build_vocab, encode_batch
from .model import Model, TokenBatch, forward
from .tensor import no_grad


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    batch_size: int = 12
    seq_len: int = 128
    warmup_batches: int = 2
    measured_batches: int = 10
    repetitions: int = 3

    def __post_init__(self):
        if self.repetitions < 3:
            raise BenchmarkError("repetitions must be >= 3")
        if self.measured_batches < 10:
            raise BenchmarkError("measured_batches must be >= 10")
        if self.batch_size < 1 or self.seq_len < 3 or self.warmup_batches < 0:
            raise BenchmarkError("invalid batch_size / seq_len / warmup_batches")

    def to_dict(self) -> dict:
        return asdict(self)


def hardware_description() -> str:
    threads = os.environ.get("OMP_NUM_THREADS") or os.environ.get("OPENBLAS_NUM_THREADS") or "default"
    return (f"{platform.machine()} {platform.processor() or 'cpu'}; {os.cpu_count()} cores; "
            f"python {platform.python_version()}; numpy {np.__version__}; blas threads {threads}")


def make_batches(ds: Dataset, cfg: BenchConfig, vocab: Vocab, vocab_limit: int) -> list[TokenBatch]:
    """Fixed-width batches (no trimming) so every model sees identical shapes."""
    if len(vocab) > vocab_limit:
        raise BenchmarkError(f"vocab of {len(vocab)} tokens exceeds model vocab {vocab_limit}")
    need = (cfg.warmup_batches + cfg.measured_batches) * cfg.batch_size
    examples = list(islice(cycle(ds.examples), need))
    return [encode_batch(vocab, examples[i:i + cfg.batch_size], cfg.seq_len, trim=False)
            for i in range(0, need, cfg.batch_size)]


def _time_run(model: Model, warm: Sequence[TokenBatch], timed: Sequence[TokenBatch]) -> float:
    with no_grad():
        for b in warm:
            forward(model, b)
        start = time.perf_counter()
        samples = 0
        for b in timed:
            forward(model, b)
            samples += len(b)
        elapsed = time.perf_counter() - start
    if elapsed <= 0:
        raise BenchmarkError("zero elapsed time; timer resolution too coarse")
    return samples / elapsed


def measure_throughput(model: Model, ds: Dataset, cfg: BenchConfig = BenchConfig(),
                       vocab: Vocab | None = None) -> float:
    """Median samples/sec over repetitions; warmup batches are not timed.

    The dataset is cycled when it is smaller than warmup + measured batches.
    """
    if not len(ds):
        raise BenchmarkError("empty dataset")
    vocab = vocab or build_vocab(ds)
    batches = make_batches(ds, cfg, vocab, model.config.vocab_size)
    if cfg.seq_len > model.config.max_positions:
        raise BenchmarkError(f"seq_len {cfg.seq_len} exceeds max_positions {model.config.max_positions}")
    warm, timed = batches[:cfg.warmup_batches], batches[cfg.warmup_batches:]
    rates = [_time_run(model, warm, timed) for _ in range(cfg.repetitions)]
    return float(statistics.median(rates))


def speed_report(models: Sequence[tuple[str, Model]], tasks: Sequence[tuple[str, Dataset]],
                 cfg: BenchConfig = BenchConfig(), vocab: Vocab | None = None) -> ScoreTable:
    """Full models x tasks grid of samples/sec, measured one cell at a time."""
    cells = {}
    for task, ds in tasks:
        v = vocab or build_vocab(ds)
        for mid, model in models:
            cells[(mid, task)] = measure_throughput(model, ds, cfg, v)
    return ScoreTable([m for m, _ in models], [t for t, _ in tasks], cells)


def speed_header(cfg: BenchConfig) -> list[str]:
    d = cfg.to_dict()
    return [" ".join(f"{k}={d[k]}" for k in d), f"hardware: {hardware_description()}"]


def write_speed_table(table: ScoreTable, cfg: BenchConfig, path) -> None:
    table.to_csv(path, comments=speed_header(cfg))
