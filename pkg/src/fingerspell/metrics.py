"""Edit-distance decomposition and letter accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.substitutions + other.substitutions, self.deletions + other.deletions,
                          self.insertions + other.insertions, self.ref_length + other.ref_length)


def edit_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Substitutions, deletions and insertions of a minimal unit-cost alignment.

    On ties the backtrace prefers the diagonal (match or substitution),
    then insertion, then deletion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i][j - 1] + 1,
                          d[i - 1][j] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return EditCounts(s, dl, ins, n)


def accuracy_from_counts(counts: EditCounts) -> float:
    if counts.ref_length == 0:
        raise ValueError("letter accuracy is undefined for an empty reference")
    return 1.0 - counts.errors / counts.ref_length


def letter_accuracy(ref: Sequence, hyp: Sequence) -> float:
    """1 - (S + D + I) / N; negative when insertions dominate."""
    if len(ref) == 0:
        raise ValueError("letter accuracy is undefined for an empty reference")
    return accuracy_from_counts(edit_counts(ref, hyp))


def corpus_accuracy(pairs: Iterable[tuple[Sequence, Sequence]], pooled: bool = True) -> float:
    """Letter accuracy over a corpus.

    ``pooled`` sums S, D, I and N over all pairs before dividing; otherwise
    the per-pair accuracies are averaged.
    """
    counts = [edit_counts(r, h) for r, h in pairs]
    if not counts:
        raise ValueError("corpus is empty")
    if pooled:
        total = EditCounts()
        for c in counts:
            total = total + c
        return accuracy_from_counts(total)
    return sum(accuracy_from_counts(c) for c in counts) / len(counts)
