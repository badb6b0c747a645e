"""Token-sequence datasets shared by training, counting and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SequenceDataset:
    """Fixed-length examples; ``targets`` uses -1 wherever no prediction is scored.

    ``labels`` holds the answer token of each example and ``answer_pos`` the
    position whose next-token prediction is that answer.
    """

    tokens: np.ndarray  # (N, T) int64
    targets: np.ndarray  # (N, T) int64
    labels: np.ndarray  # (N,) int64, answer token id
    subjects: np.ndarray  # (N,) int64
    answer_pos: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        n = self.tokens.shape[0]
        if self.targets.shape != self.tokens.shape or self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise ValueError("inconsistent dataset array shapes")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def subset(self, idx) -> SequenceDataset:
        idx = np.asarray(idx)
        return SequenceDataset(self.tokens[idx], self.targets[idx], self.labels[idx], self.subjects[idx], self.answer_pos)

    def by_subject(self) -> dict[int, SequenceDataset]:
        return {int(s): self.subset(np.flatnonzero(self.subjects == s)) for s in np.unique(self.subjects)}

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.subset(np.arange(start, min(start + batch_size, len(self))))
