"""Constraint slicing for branch-flip queries.

A flip query is a path prefix (conditions that held on the recorded
run) plus one target condition to satisfy instead.  Most prefix
conditions talk about input bytes the target never looks at; dropping
them shrinks the solver's job without changing satisfiability, because
dropped conditions can always be met by the seed input itself.

Relevance is transitive through shared input bytes, so the slice is
the connected component of the target in the constraint/variable
graph.  A union-find over variable indices computes it in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from . import expr as E


@dataclass(frozen=True)
class SlicedQuery:
    """A solver-ready query: kept prefix conditions plus the target."""

    constraints: tuple[E.Expr, ...]
    target: E.Expr
    kept: tuple[int, ...]
    var_mask: int

    def conditions(self) -> tuple[E.Expr, ...]:
        """All conditions to assert, prefix first, target last."""
        return self.constraints + (self.target,)

    @property
    def variables(self) -> set[int]:
        out = set()
        mask = self.var_mask
        index = 0
        while mask:
            if mask & 1:
                out.add(index)
            mask >>= 1
            index += 1
        return out


class _UnionFind:
    __slots__ = ("parent",)

    def __init__(self):
        self.parent: dict[int, int] = {}

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent.setdefault(root, root) != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _bits(mask: int):
    index = 0
    while mask:
        if mask & 1:
            yield index
        mask >>= 1
        index += 1


def slice_query(prefix: Sequence[E.Expr], target: E.Expr) -> SlicedQuery:
    """Keep only the prefix conditions the target transitively depends on."""
    groups = _UnionFind()
    for cond in (*prefix, target):
        anchor = None
        for v in _bits(cond.used_vars):
            if anchor is None:
                anchor = v
            else:
                groups.union(anchor, v)

    if target.used_vars == 0:
        # Nothing to steer; the prefix is irrelevant by definition.
        return SlicedQuery((), target, (), 0)

    root = groups.find(next(_bits(target.used_vars)))
    kept = []
    var_mask = target.used_vars
    for i, cond in enumerate(prefix):
        mask = cond.used_vars
        if mask and groups.find(next(_bits(mask))) == root:
            kept.append(i)
            var_mask |= mask
    constraints = tuple(prefix[i] for i in kept)
    return SlicedQuery(constraints, target, tuple(kept), var_mask)


def full_query(prefix: Sequence[E.Expr], target: E.Expr) -> SlicedQuery:
    """The unsliced query: every prefix condition kept."""
    var_mask = target.used_vars
    for cond in prefix:
        var_mask |= cond.used_vars
    return SlicedQuery(tuple(prefix), target, tuple(range(len(prefix))),
                       var_mask)


def complete_model(seed: bytes, model: Mapping[int, int]) -> bytes:
    """Turn a solver model into a full candidate input.

    Bytes the query never constrained keep their seed values, which is
    what makes slicing sound: dropped conditions held on the seed and
    still see the seed's bytes.
    """
    out = bytearray(seed)
    for offset, value in model.items():
        if 0 <= offset < len(out):
            out[offset] = value & 0xFF
    return bytes(out)
