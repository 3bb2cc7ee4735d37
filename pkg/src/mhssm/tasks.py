"""Synthetic long-range memory tasks.

Both tasks are generated statelessly from (seed, batch_index), so any batch
can be regenerated without replaying the stream. Targets use -1 as the
ignore index at positions where the task leaves the output undefined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .seq import SeqBatch
from .tensor import Tensor

IGNORE_INDEX = -1

TASK_KINDS = ("delayed_echo", "selective_copy")


@dataclass
class TaskSpec:
    kind: str = "delayed_echo"
    seq_len: int = 256
    vocab: int = 8
    lag: int = 32
    num_markers: int = 4
    seed: int = 0

    @property
    def input_dim(self) -> int:
        # selective_copy appends a marker-flag channel to the one-hot tokens
        return self.vocab + (1 if self.kind == "selective_copy" else 0)

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.kind == "delayed_echo" and not 0 <= self.lag < self.seq_len:
            raise ConfigError(f"lag must satisfy 0 <= lag < seq_len, got {self.lag}")
        if self.kind == "selective_copy":
            if not 1 <= self.num_markers <= self.seq_len // 2:
                raise ConfigError(
                    f"num_markers must lie in [1, seq_len/2], got {self.num_markers}"
                )


def generate_task(spec: TaskSpec, batch: int, batch_index: int = 0,
                  dtype=np.float64) -> tuple[SeqBatch, np.ndarray]:
    """One deterministic batch of (one-hot inputs, integer targets)."""
    spec.validate()
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    rng = np.random.default_rng([spec.seed, batch_index])
    bsz, horizon, vocab = batch, spec.seq_len, spec.vocab
    tokens = rng.integers(0, vocab, size=(bsz, horizon))
    targets = np.full((bsz, horizon), IGNORE_INDEX, dtype=np.int64)

    if spec.kind == "delayed_echo":
        if spec.lag == 0:
            targets[:] = tokens
        else:
            targets[:, spec.lag:] = tokens[:, :-spec.lag]
        onehot = np.zeros((bsz, horizon, vocab), dtype=dtype)
        np.put_along_axis(onehot, tokens[..., None], 1.0, axis=-1)
        data = onehot
    else:
        # markers fall before the answer slots at the tail of the sequence
        flags = np.zeros((bsz, horizon, 1), dtype=dtype)
        answer_start = horizon - spec.num_markers
        for b in range(bsz):
            marked = np.sort(rng.choice(answer_start, size=spec.num_markers, replace=False))
            flags[b, marked, 0] = 1.0
            targets[b, answer_start:] = tokens[b, marked]
        onehot = np.zeros((bsz, horizon, vocab), dtype=dtype)
        np.put_along_axis(onehot, tokens[..., None], 1.0, axis=-1)
        data = np.concatenate([onehot, flags], axis=-1)

    lengths = np.full(bsz, horizon, dtype=np.int64)
    return SeqBatch(Tensor(data, dtype=dtype), lengths), targets
