"""Decide satisfiability of byte-variable bitvector conditions.

Two halves.  The front half translates each condition into CNF over
propositional variables, one per input-byte bit, by structural
recursion: arithmetic becomes ripple-carry networks, shifts become
mux barrels, comparisons become borrow chains.  Variable 1 is pinned
true by a unit clause so constant bits can be passed around as plain
literals, which lets the gate builders fold most constant structure
away before any clause is emitted.

The back half is a small conflict-driven SAT solver: two watched
literals per clause, first-UIP clause learning, activity-ordered
decisions with phase saving, and geometric restarts.  Decisions
default to the positive phase, so unconstrained table-index bits tend
toward high values rather than zero.

Models are evaluated back against the source conditions before being
returned; a disagreement means the translation is wrong and raises
instead of handing the caller a bogus input.
"""

from __future__ import annotations

import enum
import heapq
import random
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import expr as E

TRUE = 1


class Status(enum.Enum):
    SAT = "sat"
    UNSAT = "unsat"
    UNKNOWN = "unknown"


@dataclass
class SolverStats:
    cnf_vars: int = 0
    cnf_clauses: int = 0
    decisions: int = 0
    propagations: int = 0
    conflicts: int = 0
    learned: int = 0
    restarts: int = 0
    elapsed: float = 0.0


@dataclass(frozen=True)
class SolverResult:
    status: Status
    model: Mapping[int, int] | None
    stats: SolverStats


class EncodingError(Exception):
    """A produced model failed re-evaluation; the CNF translation is buggy."""


# ----------------------------------------------------------------------
# conditions -> CNF

class _Blaster:
    def __init__(self):
        self.nvars = 1
        self.clauses: list[list[int]] = [[TRUE]]
        self.bit_map: dict[tuple[int, int], int] = {}
        self._memo: dict[int, list[int]] = {}

    def fresh(self) -> int:
        self.nvars += 1
        return self.nvars

    def clause(self, lits) -> None:
        out = []
        for lit in lits:
            if lit == TRUE:
                return
            if lit != -TRUE:
                out.append(lit)
        self.clauses.append(out)

    # -- gates ----------------------------------------------------------

    def gAND(self, a, b):
        if a == -TRUE or b == -TRUE or a == -b:
            return -TRUE
        if a == TRUE or a == b:
            return b
        if b == TRUE:
            return a
        o = self.fresh()
        self.clauses += [[-o, a], [-o, b], [o, -a, -b]]
        return o

    def gOR(self, a, b):
        return -self.gAND(-a, -b)

    def gXOR(self, a, b):
        if a == TRUE:
            return -b
        if a == -TRUE:
            return b
        if b == TRUE:
            return -a
        if b == -TRUE:
            return a
        if a == b:
            return -TRUE
        if a == -b:
            return TRUE
        o = self.fresh()
        self.clauses += [[-o, a, b], [-o, -a, -b], [o, -a, b], [o, a, -b]]
        return o

    def gMAJ(self, a, b, c):
        if b in (TRUE, -TRUE):
            a, b = b, a
        if c in (TRUE, -TRUE):
            a, c = c, a
        if a == TRUE:
            return self.gOR(b, c)
        if a == -TRUE:
            return self.gAND(b, c)
        if a == b or a == c:
            return a
        if b == c:
            return b
        if a == -b:
            return c
        if b == -c:
            return a
        o = self.fresh()
        self.clauses += [[-o, a, b], [-o, a, c], [-o, b, c],
                         [o, -a, -b], [o, -a, -c], [o, -b, -c]]
        return o

    def gMUX(self, c, t, e):
        if c == TRUE or t == e:
            return t
        if c == -TRUE:
            return e
        if t == TRUE and e == -TRUE:
            return c
        if t == -TRUE and e == TRUE:
            return -c
        o = self.fresh()
        self.clause([-o, -c, t])
        self.clause([-o, c, e])
        self.clause([o, -c, -t])
        self.clause([o, c, -e])
        return o

    # -- word-level helpers (bit lists are LSB first) --------------------

    def _const_bits(self, value, width):
        return [TRUE if (value >> i) & 1 else -TRUE for i in range(width)]

    def _ripple(self, a, b, carry):
        out = []
        for ai, bi in zip(a, b):
            out.append(self.gXOR(self.gXOR(ai, bi), carry))
            carry = self.gMAJ(ai, bi, carry)
        return out

    def _ult(self, a, b):
        lt = -TRUE
        for ai, bi in zip(a, b):
            keep = self.gAND(-self.gXOR(ai, bi), lt)
            lt = self.gOR(self.gAND(-ai, bi), keep)
        return lt

    def _equal(self, a, b):
        out = TRUE
        for ai, bi in zip(a, b):
            out = self.gAND(out, -self.gXOR(ai, bi))
        return out

    def _shift(self, kind, value, count, width):
        fill = value[-1] if kind == E.ASHR else -TRUE
        shifted = list(value)
        stage = 0
        while (1 << stage) < width:
            amount = 1 << stage
            cbit = count[stage]
            if kind == E.SHL:
                moved = [-TRUE] * amount + shifted[:width - amount]
            else:
                moved = shifted[amount:] + [fill] * amount
            shifted = [self.gMUX(cbit, m, s)
                       for m, s in zip(moved, shifted)]
            stage += 1
        # Counts of `width` or more push everything out.
        too_big = -self._ult(count, self._const_bits(width, len(count)))
        return [self.gMUX(too_big, fill if kind == E.ASHR else -TRUE, s)
                for s in shifted]

    def _mul(self, a, b, width):
        acc = [-TRUE] * width
        for i, bit in enumerate(b):
            if bit == -TRUE:
                continue
            partial = [-TRUE] * i + [self.gAND(bit, aj)
                                     for aj in a[:width - i]]
            acc = self._ripple(acc, partial, -TRUE)
        return acc

    # -- structural translation ------------------------------------------

    def bits(self, e: E.Expr) -> list[int]:
        done = self._memo.get(id(e))
        if done is not None:
            return done
        out = self._translate(e)
        if len(out) != e.width:
            raise EncodingError("width drift at %r" % e.kind)
        self._memo[id(e)] = out
        return out

    def _translate(self, e: E.Expr) -> list[int]:
        kind = e.kind
        if kind == E.CONST:
            return self._const_bits(e.params[0], e.width)
        if kind == E.VAR:
            index = e.params[0]
            bit_map = self.bit_map
            out = []
            for i in range(8):
                key = (index, i)
                pvar = bit_map.get(key)
                if pvar is None:
                    pvar = bit_map[key] = self.fresh()
                out.append(pvar)
            return out

        kids = [self.bits(c) for c in e.children]
        width = e.width

        if kind == E.ADD:
            return self._ripple(kids[0], kids[1], -TRUE)
        if kind == E.SUB:
            return self._ripple(kids[0], [-b for b in kids[1]], TRUE)
        if kind == E.NEG:
            return self._ripple(self._const_bits(0, width),
                                [-b for b in kids[0]], TRUE)
        if kind == E.MUL:
            return self._mul(kids[0], kids[1], width)
        if kind == E.AND:
            return [self.gAND(a, b) for a, b in zip(*kids)]
        if kind == E.OR:
            return [self.gOR(a, b) for a, b in zip(*kids)]
        if kind == E.XOR:
            return [self.gXOR(a, b) for a, b in zip(*kids)]
        if kind == E.NOT:
            return [-b for b in kids[0]]
        if kind in (E.SHL, E.LSHR, E.ASHR):
            return self._shift(kind, kids[0], kids[1], width)
        if kind == E.CONCAT:
            out = []
            for part in reversed(kids):
                out.extend(part)
            return out
        if kind == E.EXTRACT:
            high, low = e.params
            return kids[0][low:high + 1]
        if kind == E.ZEXT:
            return kids[0] + [-TRUE] * e.params[0]
        if kind == E.SEXT:
            return kids[0] + [kids[0][-1]] * e.params[0]
        if kind == E.EQ:
            return [self._equal(kids[0], kids[1])]
        if kind == E.NE:
            return [-self._equal(kids[0], kids[1])]
        if kind == E.ULT:
            return [self._ult(kids[0], kids[1])]
        if kind == E.ULE:
            return [-self._ult(kids[1], kids[0])]
        if kind == E.SLT:
            a = kids[0][:-1] + [-kids[0][-1]]
            b = kids[1][:-1] + [-kids[1][-1]]
            return [self._ult(a, b)]
        if kind == E.SLE:
            a = kids[0][:-1] + [-kids[0][-1]]
            b = kids[1][:-1] + [-kids[1][-1]]
            return [-self._ult(b, a)]
        if kind == E.ITE:
            cond = kids[0][0]
            return [self.gMUX(cond, t, f)
                    for t, f in zip(kids[1], kids[2])]
        if kind == E.BAND:
            return [self.gAND(kids[0][0], kids[1][0])]
        if kind == E.BOR:
            return [self.gOR(kids[0][0], kids[1][0])]
        if kind == E.BNOT:
            return [-kids[0][0]]
        raise EncodingError("no translation for %r" % kind)

    def assert_true(self, e: E.Expr) -> None:
        if e.width != 1:
            raise EncodingError("conditions must have width 1")
        self.clause([self.bits(e)[0]])


# ----------------------------------------------------------------------
# CDCL search

_RESTART_FIRST = 100
_RESTART_GROWTH = 1.5
_ACTIVITY_DECAY = 0.95
_ACTIVITY_CAP = 1e100


class _Search:
    def __init__(self, nvars, seed):
        self.nvars = nvars
        self.assign = [0] * (nvars + 1)
        self.level_of = [0] * (nvars + 1)
        self.reason: list = [None] * (nvars + 1)
        self.trail: list[int] = []
        self.lim: list[int] = []
        self.qhead = 0
        self.watches: dict[int, list] = {}
        self.phase = [True] * (nvars + 1)
        rng = random.Random(seed)
        self.activity = [rng.random() * 1e-6 for _ in range(nvars + 1)]
        self.var_inc = 1.0
        self.order = [(-self.activity[v], v) for v in range(2, nvars + 1)]
        heapq.heapify(self.order)
        self.stats = SolverStats(cnf_vars=nvars)
        self.failed = False

    # -- assignment -------------------------------------------------------

    def _value(self, lit):
        a = self.assign[lit if lit > 0 else -lit]
        return a if lit > 0 else -a

    def _enqueue(self, lit, reason=None):
        var = lit if lit > 0 else -lit
        self.assign[var] = 1 if lit > 0 else -1
        self.level_of[var] = len(self.lim)
        self.reason[var] = reason
        self.trail.append(lit)

    def _cancel_until(self, level):
        assign, phase = self.assign, self.phase
        order, activity = self.order, self.activity
        mark = self.lim[level]
        for lit in reversed(self.trail[mark:]):
            var = lit if lit > 0 else -lit
            phase[var] = lit > 0
            assign[var] = 0
            self.reason[var] = None
            heapq.heappush(order, (-activity[var], var))
        del self.trail[mark:]
        del self.lim[level:]
        self.qhead = len(self.trail)

    # -- clauses ----------------------------------------------------------

    def add_clause(self, lits, learned=False):
        if not lits:
            self.failed = True
            return None
        if len(lits) == 1:
            if self._value(lits[0]) == -1:
                self.failed = True
            elif self._value(lits[0]) == 0:
                self._enqueue(lits[0])
            return None
        clause = list(lits)
        self.watches.setdefault(clause[0], []).append(clause)
        self.watches.setdefault(clause[1], []).append(clause)
        if learned:
            self.stats.learned += 1
        return clause

    def _propagate(self):
        trail, assign = self.trail, self.assign
        while self.qhead < len(trail):
            lit = trail[self.qhead]
            self.qhead += 1
            falsified = -lit
            watching = self.watches.get(falsified)
            if not watching:
                continue
            self.stats.propagations += 1
            self.watches[falsified] = keep = []
            i, n = 0, len(watching)
            while i < n:
                clause = watching[i]
                i += 1
                if clause[0] == falsified:
                    clause[0], clause[1] = clause[1], clause[0]
                first = clause[0]
                a = assign[first if first > 0 else -first]
                first_val = a if first > 0 else -a
                if first_val == 1:
                    keep.append(clause)
                    continue
                for j in range(2, len(clause)):
                    other = clause[j]
                    a = assign[other if other > 0 else -other]
                    if (a if other > 0 else -a) != -1:
                        clause[1], clause[j] = other, falsified
                        self.watches.setdefault(other, []).append(clause)
                        break
                else:
                    keep.append(clause)
                    if first_val == -1:
                        keep.extend(watching[i:])
                        self.qhead = len(trail)
                        return clause
                    self._enqueue(first, clause)
        return None

    # -- learning ----------------------------------------------------------

    def _bump(self, var):
        activity = self.activity
        activity[var] += self.var_inc
        if activity[var] > _ACTIVITY_CAP:
            scale = 1.0 / _ACTIVITY_CAP
            for v in range(len(activity)):
                activity[v] *= scale
            self.var_inc *= scale
        heapq.heappush(self.order, (-activity[var], var))

    def _analyze(self, conflict):
        learnt = []
        seen = bytearray(self.nvars + 1)
        level_of = self.level_of
        current = len(self.lim)
        counter = 0
        p = 0
        index = len(self.trail)
        reason = conflict
        while True:
            for q in reason:
                if q == p:
                    continue
                var = q if q > 0 else -q
                if not seen[var] and level_of[var] > 0:
                    seen[var] = 1
                    self._bump(var)
                    if level_of[var] >= current:
                        counter += 1
                    else:
                        learnt.append(q)
            while True:
                index -= 1
                p = self.trail[index]
                if seen[p if p > 0 else -p]:
                    break
            counter -= 1
            if counter == 0:
                break
            reason = self.reason[p if p > 0 else -p]
        learnt.insert(0, -p)

        if len(learnt) == 1:
            return learnt, 0
        best = 1
        for j in range(2, len(learnt)):
            if level_of[abs(learnt[j])] > level_of[abs(learnt[best])]:
                best = j
        learnt[1], learnt[best] = learnt[best], learnt[1]
        return learnt, level_of[abs(learnt[1])]

    # -- top level ----------------------------------------------------------

    def _decide(self):
        order, assign = self.order, self.assign
        while order:
            _, var = heapq.heappop(order)
            if not assign[var]:
                self.lim.append(len(self.trail))
                self.stats.decisions += 1
                self._enqueue(var if self.phase[var] else -var)
                return True
        for var in range(2, self.nvars + 1):
            if not assign[var]:
                self.lim.append(len(self.trail))
                self.stats.decisions += 1
                self._enqueue(var if self.phase[var] else -var)
                return True
        return False

    def run(self, deadline):
        if self.failed or self._propagate() is not None:
            return Status.UNSAT
        budget = _RESTART_FIRST
        since_restart = 0
        conflicts_at_check = 0
        while True:
            conflict = self._propagate()
            if conflict is not None:
                self.stats.conflicts += 1
                since_restart += 1
                if not self.lim:
                    return Status.UNSAT
                learnt, back = self._analyze(conflict)
                self._cancel_until(back)
                if len(learnt) == 1:
                    if self._value(learnt[0]) == -1:
                        return Status.UNSAT
                    if self._value(learnt[0]) == 0:
                        self._enqueue(learnt[0])
                else:
                    clause = self.add_clause(learnt, learned=True)
                    self._enqueue(learnt[0], clause)
                self.var_inc /= _ACTIVITY_DECAY
                if deadline is not None \
                        and self.stats.conflicts - conflicts_at_check >= 64:
                    conflicts_at_check = self.stats.conflicts
                    if time.monotonic() > deadline:
                        return Status.UNKNOWN
                continue
            if since_restart >= budget:
                since_restart = 0
                budget = int(budget * _RESTART_GROWTH)
                self.stats.restarts += 1
                if self.lim:
                    self._cancel_until(0)
                continue
            if deadline is not None and time.monotonic() > deadline:
                return Status.UNKNOWN
            if not self._decide():
                return Status.SAT


# ----------------------------------------------------------------------
# public entry point

def solve(conditions: Sequence[E.Expr], *, timeout: float | None = None,
          seed: int = 0) -> SolverResult:
    """Find input bytes satisfying every condition, or refute them.

    `timeout` is wall seconds; expiry gives Status.UNKNOWN.  `seed`
    perturbs the initial decision order only; it never affects
    soundness, just which model comes back first.
    """
    start = time.monotonic()
    blaster = _Blaster()
    for cond in conditions:
        blaster.assert_true(cond)

    search = _Search(blaster.nvars, seed)
    search.stats.cnf_clauses = len(blaster.clauses)
    ok = True
    for clause in blaster.clauses:
        search.add_clause(clause)
        if search.failed:
            ok = False
            break

    deadline = None if timeout is None else start + timeout
    status = search.run(deadline) if ok else Status.UNSAT
    stats = search.stats
    stats.elapsed = time.monotonic() - start

    if status is not Status.SAT:
        return SolverResult(status, None, stats)

    model: dict[int, int] = {}
    for (index, bit), pvar in blaster.bit_map.items():
        if search.assign[pvar] > 0:
            model[index] = model.get(index, 0) | (1 << bit)
        else:
            model.setdefault(index, 0)
    for cond in conditions:
        if E.eval(cond, model) != 1:
            raise EncodingError(
                "model fails condition %r; translation bug" % cond)
    return SolverResult(status, model, stats)
