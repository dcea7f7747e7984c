"""Branch-flip campaigns: turn one recorded run into many new inputs.

Every symbolic branch point in the mirrored path yields flip tasks: a
conditional jump yields one (satisfy the negated condition under the
path prefix), an indirect jump yields one per alternative table
target.  Each task is sliced, solved, and the resulting input is
replayed through the interpreter for a verdict.

Tasks are independent, so they can be distributed over worker
processes.  Workers are forked after the task list is built and read
it from module state rather than having expression graphs shipped to
them; each task also carries its own solver seed derived from its
position, which makes the produced corpus byte-for-byte identical no
matter how many workers ran or in what order results arrived.
"""

from __future__ import annotations

import multiprocessing
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import expr as E
from .slicer import complete_model, full_query, slice_query
from .solver import Status, solve
from .symex import PathConstraint, SymbolicExecutor
from .verifier import Outcome, Verdict, verify
from .vm import MiniVm

CONDITIONAL = "conditional"
INDIRECT = "indirect"


@dataclass(frozen=True)
class FlipTask:
    """One solver query: make branch `branch_index` go to `target`."""

    branch_index: int
    site: int
    kind: str
    target: int
    prefix: tuple
    goal: E.Expr

    def corpus_name(self) -> str:
        stem = "%04d_%x" % (self.branch_index, self.site)
        if self.kind == INDIRECT:
            stem += "_t%x" % self.target
        return stem + ".bin"


@dataclass
class TaskResult:
    task: FlipTask
    status: str                  # sat | unsat | unknown | error:<detail>
    verdict: Verdict | None
    candidate: bytes | None
    solver_time: float
    kept: int                    # prefix conditions that survived slicing


@dataclass
class CampaignReport:
    branches: int
    queries: int
    sat: int
    correct: int
    wall_time: float
    aborted: bool
    results: list[TaskResult] = field(default_factory=list)
    baseline: object = None
    path: tuple = ()
    symex_stats: object = None

    def counts(self) -> dict:
        out = {"unsat": 0, "unknown": 0, "error": 0}
        for r in self.results:
            if r.status in out:
                out[r.status] += 1
            elif r.status.startswith("error"):
                out["error"] += 1
        return out


def make_tasks(path: Sequence[PathConstraint]) -> list[FlipTask]:
    """Expand a recorded path into flip tasks, in path order."""
    tasks = []
    for i, pc in enumerate(path):
        prefix = tuple(p.cond for p in path[:i])
        if pc.kind == CONDITIONAL:
            tasks.append(FlipTask(i, pc.site, pc.kind, pc.inverted_target,
                                  prefix, E.bnot(pc.cond)))
        else:
            for target, cond in pc.alt_targets:
                tasks.append(FlipTask(i, pc.site, pc.kind, target,
                                      prefix, cond))
    return tasks


def order_tasks(tasks: Sequence[FlipTask], policy: str,
                seed: int = 0) -> list[int]:
    """Processing order over task indices.  The corpus does not depend
    on it; only scheduling does."""
    order = list(range(len(tasks)))
    if policy == "seq":
        return order
    if policy == "random":
        random.Random(seed).shuffle(order)
        return order
    raise ValueError("unknown branch policy %r" % policy)


# Worker-side state, installed before the pool forks.
_SHARED: dict = {}


def _task_seed(solver_seed: int, index: int) -> int:
    return solver_seed * 1_000_003 + index


def _solve_task(index: int):
    try:
        task = _SHARED["tasks"][index]
        if _SHARED["slicing"]:
            query = slice_query(task.prefix, task.goal)
        else:
            query = full_query(task.prefix, task.goal)
        result = solve(query.conditions(),
                       timeout=_SHARED["timeout"],
                       seed=_task_seed(_SHARED["solver_seed"], index))
        model = dict(result.model) if result.model is not None else None
        return index, result.status.value, model, result.stats.elapsed, \
            len(query.kept)
    except Exception as exc:  # a failed task must not sink the campaign
        return index, "error: %r" % (exc,), None, 0.0, 0


def run_campaign(program, seed: bytes, *, jobs: int = 1,
                 policy: str = "seq", policy_seed: int = 0,
                 solver_timeout: float | None = None, solver_seed: int = 0,
                 slicing: bool = True, skip_concrete: bool = True,
                 follow_switches: bool = True, jump_tables: bool = True,
                 max_table_size: int = 512, quantum: int | None = None,
                 budget: int | None = None, output_dir=None,
                 max_campaign_time: float | None = None,
                 max_predicate_time: float | None = None) -> CampaignReport:
    """Record one run of `program` on `seed`, then try to flip every
    symbolic branch point along it."""
    start = time.monotonic()

    vm_kwargs = {}
    if quantum is not None:
        vm_kwargs["quantum"] = quantum
    if budget is not None:
        vm_kwargs["budget"] = budget
    baseline = MiniVm(program, seed, **vm_kwargs).run()

    sx = SymbolicExecutor(program, seed, skip_concrete=skip_concrete,
                          follow_switches=follow_switches,
                          jump_tables=jump_tables,
                          max_table_size=max_table_size)
    mirror_deadline = None
    if max_predicate_time is not None:
        mirror_deadline = time.monotonic() + max_predicate_time
    sx.run(baseline.events, deadline=mirror_deadline)

    tasks = make_tasks(sx.path)
    order = order_tasks(tasks, policy, policy_seed)
    deadline = None
    if max_campaign_time is not None:
        deadline = start + max_campaign_time

    raw: dict[int, tuple] = {}
    aborted = False
    if jobs <= 1 or len(tasks) <= 1:
        _SHARED.update(tasks=tasks, slicing=slicing,
                       timeout=solver_timeout, solver_seed=solver_seed)
        for index in order:
            if deadline is not None and time.monotonic() > deadline:
                aborted = True
                break
            raw[index] = _solve_task(index)
    else:
        _SHARED.update(tasks=tasks, slicing=slicing,
                       timeout=solver_timeout, solver_seed=solver_seed)
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=jobs) as pool:
            pending = pool.imap_unordered(_solve_task, order)
            for outcome in pending:
                raw[outcome[0]] = outcome
                if deadline is not None and time.monotonic() > deadline:
                    aborted = True
                    pool.terminate()
                    break

    results = []
    sat = correct = 0
    for index, task in enumerate(tasks):
        got = raw.get(index)
        if got is None:
            continue  # skipped by an expired campaign deadline
        _, status, model, elapsed, kept = got
        verdict = None
        candidate = None
        if status == Status.SAT.value and model is not None:
            sat += 1
            candidate = complete_model(seed, model)
            verdict = verify(program, baseline, sx.path[task.branch_index],
                             candidate, expected_target=task.target,
                             quantum=quantum, budget=budget)
            if verdict.outcome is Outcome.CORRECT:
                correct += 1
        results.append(TaskResult(task, status, verdict, candidate,
                                  elapsed, kept))

    if output_dir is not None:
        directory = Path(output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        for r in results:
            if r.verdict is not None and r.verdict.outcome is Outcome.CORRECT:
                (directory / r.task.corpus_name()).write_bytes(r.candidate)

    return CampaignReport(
        branches=len(sx.path), queries=len(results), sat=sat,
        correct=correct, wall_time=time.monotonic() - start,
        aborted=aborted, results=results, baseline=baseline,
        path=tuple(sx.path), symex_stats=sx.stats)
