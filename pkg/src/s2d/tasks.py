"""Synthetic regression task whose teacher has one amplified singular direction."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from .model import Linear, ToyModel, forward


@dataclass(frozen=True)
class SyntheticTask:
    input_dim: int = 32
    output_dim: int = 8
    seed: int = 0
    spike_gain: float = 20.0
    noise_std: float = 0.3
    teacher_hidden: int = 64
    spectrum_decay: float = 0.05

    def __post_init__(self):
        if self.spike_gain < 1:
            raise ValueError(f"spike_gain must be >= 1, got {self.spike_gain}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 < self.spectrum_decay <= 1:
            raise ValueError("spectrum_decay must lie in (0, 1]")


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.sign(np.diag(r))


def teacher_first_layer(task: SyntheticTask, rng: np.random.Generator) -> np.ndarray:
    """Weight with geometric spectrum ``decay**r``; the leading value is multiplied by ``spike_gain``."""
    n = min(task.teacher_hidden, task.input_dim)
    sigma = task.spectrum_decay ** np.arange(n)
    sigma[0] *= task.spike_gain
    u = _orthonormal(rng, task.teacher_hidden, n)
    v = _orthonormal(rng, task.input_dim, n)
    return (u * sigma) @ v.T


class SpikedTask:
    """Frozen teacher plus deterministic sample streams.

    Training batches come from ``stream(task.seed)``; held-out evaluation uses
    ``task.seed + 1``.
    """

    def __init__(self, task: SyntheticTask):
        self.task = task
        rng = np.random.default_rng([task.seed, 0x7EAC])
        w1 = teacher_first_layer(task, rng)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(task.teacher_hidden), (task.output_dim, task.teacher_hidden))
        # rescale the readout so clean targets have unit RMS; the first-layer spectrum is untouched
        ref = rng.normal(size=(4096, task.input_dim))
        hidden = forward(ToyModel([Linear("t1", w1, np.zeros(task.teacher_hidden), "gelu")]), ref)[0]
        w2 = w2 / np.sqrt(np.mean((hidden @ w2.T) ** 2))
        self.teacher = ToyModel(
            [
                Linear("t1", w1, np.zeros(task.teacher_hidden), "gelu"),
                Linear("t2", w2, np.zeros(task.output_dim), "none"),
            ]
        )

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        x = rng.normal(size=(n, self.task.input_dim))
        y = forward(self.teacher, x)[0]
        if self.task.noise_std:
            y = y + self.task.noise_std * rng.normal(size=y.shape)
        return x, y

    def stream(self, seed: int, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng(seed)
        while True:
            yield self.sample(rng, batch_size)

    def eval_set(self, n: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        return self.sample(np.random.default_rng(self.task.seed + 1), n)

    def calibration(self, seed: int, n: int = 256) -> np.ndarray:
        return self.sample(np.random.default_rng(seed), n)[0]


def make_spiked_task(task: SyntheticTask) -> SpikedTask:
    return SpikedTask(task)
