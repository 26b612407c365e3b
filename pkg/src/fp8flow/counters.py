"""Instrumented pass counters used as a desk-scale proxy for memory traffic.

Operators that accept a ``counter`` argument record how many full-tensor
read and write passes they perform. Callers own the counter, so there is no
global mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class PassCounter:
    reads: int = 0
    writes: int = 0
    by_op: dict[str, list[int]] = field(default_factory=dict)

    def record(self, op: str, reads: int = 1, writes: int = 1) -> None:
        self.reads += reads
        self.writes += writes
        tally = self.by_op.setdefault(op, [0, 0])
        tally[0] += reads
        tally[1] += writes

    @property
    def passes(self) -> int:
        """Elementwise full-tensor passes (a pass reads its input and writes its output)."""
        return max(self.reads, self.writes)

    def as_dict(self) -> dict:
        return {
            "reads": self.reads,
            "writes": self.writes,
            "by_op": {k: {"reads": v[0], "writes": v[1]} for k, v in sorted(self.by_op.items())},
        }


def record(counter: PassCounter | None, op: str, reads: int = 1, writes: int = 1) -> None:
    if counter is not None:
        counter.record(op, reads, writes)
