"""Replay checking for candidate inputs produced by branch flipping.

A candidate is only as good as what the interpreter actually does with
it, so every solver model is re-run concretely and judged against the
recorded trace: the run must follow the original branch sequence up to
the flip point and then go the other way there.  No symbolic machinery
is involved; this is the ground-truth end of the pipeline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .vm import MiniVm, ST_EXIT


class Outcome(enum.Enum):
    CORRECT = "correct"
    DIVERGENT = "divergent"
    TOO_SHORT = "too-short"
    NOT_INVERTED = "not-inverted"


@dataclass(frozen=True)
class Verdict:
    outcome: Outcome
    position: int | None = None  # branch-trace index where the run went wrong
    run_status: str = ""

    def __bool__(self):
        return self.outcome is Outcome.CORRECT


def verify(program, baseline, constraint, candidate, *, expected_target=None,
           quantum=None, budget=None) -> Verdict:
    """Judge one candidate against one recorded branch point.

    `baseline` is the seed run's result; `constraint` the path record
    being flipped.  `expected_target` overrides the landing pc for
    indirect flips, where one site offers several alternatives.
    """
    if baseline.first_read_branch_pos is None:
        raise ValueError("baseline run never read input; nothing to flip")
    expected = expected_target
    if expected is None:
        expected = constraint.inverted_target
    index = baseline.first_read_branch_pos + constraint.trace_pos

    kwargs = {"keep_events": False}
    if quantum is not None:
        kwargs["quantum"] = quantum
    if budget is not None:
        kwargs["budget"] = budget
    redo = MiniVm(program, candidate, **kwargs).run()

    trace = redo.branch_trace
    base = baseline.branch_trace
    stop = min(index, len(trace))
    for k in range(stop):
        if trace[k] != base[k]:
            return Verdict(Outcome.DIVERGENT, k, redo.status)
    if len(trace) <= index:
        if redo.status == ST_EXIT:
            return Verdict(Outcome.TOO_SHORT, len(trace), redo.status)
        # A trap cut the run before it could come back to the site.
        return Verdict(Outcome.DIVERGENT, len(trace), redo.status)

    site, landed = trace[index]
    if site == constraint.site and landed == expected:
        return Verdict(Outcome.CORRECT, index, redo.status)
    if trace[index] == base[index]:
        return Verdict(Outcome.NOT_INVERTED, index, redo.status)
    return Verdict(Outcome.DIVERGENT, index, redo.status)
