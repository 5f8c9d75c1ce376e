"""Tick-level 1F1B pipeline schedule, used to check the bubble fraction."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Tuple

from ..config import ParashardError

FORWARD_TICKS = 1
BACKWARD_TICKS = 2

Op = Tuple[str, int]


@dataclass(frozen=True)
class ScheduleGrid:
    pp: int
    microbatches: int
    rows: Tuple[Tuple[str, ...], ...]

    @property
    def makespan(self) -> int:
        return len(self.rows[0]) if self.rows else 0

    @property
    def idle_ticks(self) -> int:
        return sum(cell == "." for row in self.rows for cell in row)

    @property
    def idle_fraction(self) -> Fraction:
        if not self.makespan:
            return Fraction(0)
        return Fraction(self.idle_ticks, self.pp * self.makespan)

    def render(self) -> str:
        width = max((len(cell) for row in self.rows for cell in row), default=1)
        return "\n".join(
            f"stage {index}: " + " ".join(cell.rjust(width) for cell in row) for index, row in enumerate(self.rows)
        )


def _stage_order(stage: int, pp: int, microbatches: int) -> List[Op]:
    warmup = min(pp - stage - 1, microbatches)
    order: List[Op] = [("F", i) for i in range(warmup)]
    for i in range(microbatches - warmup):
        order.append(("F", warmup + i))
        order.append(("B", i))
    order.extend(("B", i) for i in range(microbatches - warmup, microbatches))
    return order


def simulate_1f1b(pp: int, microbatches: int) -> ScheduleGrid:
    """List-schedule every stage's 1F1B order; backward takes twice a forward."""
    if pp < 1 or microbatches < 1:
        raise ParashardError(f"pp and microbatches must be >= 1, got {pp}, {microbatches}")
    orders = [_stage_order(stage, pp, microbatches) for stage in range(pp)]
    cursor = [0] * pp
    free_at = [0] * pp
    finish: Dict[Tuple[int, str, int], int] = {}
    spans: List[List[Tuple[int, int, str]]] = [[] for _ in range(pp)]

    def ready(stage: int, kind: str, micro: int) -> int | None:
        deps = []
        if kind == "F" and stage > 0:
            deps.append((stage - 1, "F", micro))
        if kind == "B":
            deps.append((stage, "F", micro))
            if stage < pp - 1:
                deps.append((stage + 1, "B", micro))
        if any(dep not in finish for dep in deps):
            return None
        return max([free_at[stage]] + [finish[dep] for dep in deps])

    remaining = sum(len(order) for order in orders)
    while remaining:
        progressed = False
        for stage in range(pp):
            while cursor[stage] < len(orders[stage]):
                kind, micro = orders[stage][cursor[stage]]
                start = ready(stage, kind, micro)
                if start is None:
                    break
                end = start + (FORWARD_TICKS if kind == "F" else BACKWARD_TICKS)
                finish[(stage, kind, micro)] = end
                spans[stage].append((start, end, f"{kind}{micro}"))
                free_at[stage] = end
                cursor[stage] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise ParashardError("1F1B schedule deadlocked")

    makespan = max(free_at)
    rows = []
    for stage_spans in spans:
        row = ["."] * makespan
        for start, end, label in stage_spans:
            row[start:end] = [label] * (end - start)
        rows.append(tuple(row))
    return ScheduleGrid(pp=pp, microbatches=microbatches, rows=tuple(rows))


def bubble_fraction(pp: int, microbatches: int) -> Fraction:
    return Fraction(pp - 1, microbatches + pp - 1)


__all__ = ["ScheduleGrid", "bubble_fraction", "simulate_1f1b"]
