"""Vectorized expression evaluation over many byte assignments at once.

eval_bulk() computes an expression for N assignments in one pass using numpy
uint64 columns, which makes exhaustive and large-sample equivalence checks
cheap (2^16 assignments of two input bytes evaluate in about a millisecond).
It is written independently of expr.eval on purpose: the two implementations
cross-check each other in the test suite, and eval_bulk serves as the oracle
for the solver without sharing any code with the bit-blasting path.

Widths above 64 bits are rejected here; the scalar evaluator has no limit.
"""

from __future__ import annotations

import numpy as np

from . import expr as E

_U64 = np.uint64


def _mask(width: int) -> np.uint64:
    return _U64((1 << width) - 1) if width < 64 else _U64(0xFFFFFFFFFFFFFFFF)


def var_columns(var_indices, assignments) -> dict:
    """Build {var index -> uint64 column} from an (N, k) array of byte values."""
    arr = np.asarray(assignments, dtype=np.uint64)
    return {v: arr[:, i] for i, v in enumerate(var_indices)}


def all_assignments(var_indices) -> dict:
    """Columns enumerating every assignment of the given byte variables."""
    k = len(var_indices)
    n = 1 << (8 * k)
    idx = np.arange(n, dtype=np.uint64)
    cols = {}
    for i, v in enumerate(var_indices):
        cols[v] = (idx >> _U64(8 * i)) & _U64(0xFF)
    return cols


def eval_bulk(e: E.Expr, columns: dict) -> np.ndarray:
    """Evaluate e elementwise for every assignment row in `columns`."""
    n = len(next(iter(columns.values()))) if columns else 1
    memo: dict = {}

    def go(node: E.Expr) -> np.ndarray:
        got = memo.get(id(node))
        if got is not None:
            return got
        if node.width > 64:
            raise ValueError("eval_bulk supports widths <= 64, got %d" % node.width)
        k = node.kind
        w = node.width
        m = _mask(w)
        if k == E.CONST:
            out = np.full(n, node.params[0], dtype=np.uint64)
        elif k == E.VAR:
            out = columns[node.params[0]]
        else:
            kids = [go(c) for c in node.children]
            if k == E.ADD:
                out = (kids[0] + kids[1]) & m
            elif k == E.SUB:
                out = (kids[0] - kids[1]) & m
            elif k == E.MUL:
                out = (kids[0] * kids[1]) & m
            elif k == E.AND:
                out = kids[0] & kids[1]
            elif k == E.OR:
                out = kids[0] | kids[1]
            elif k == E.XOR:
                out = kids[0] ^ kids[1]
            elif k == E.NOT:
                out = ~kids[0] & m
            elif k == E.NEG:
                out = (-kids[0]) & m  # wraps in uint64, then masked
            elif k == E.SHL:
                c = kids[1]
                big = c >= _U64(w)
                out = np.where(big, _U64(0), (kids[0] << np.where(big, _U64(0), c)) & m)
            elif k == E.LSHR:
                c = kids[1]
                big = c >= _U64(w)
                out = np.where(big, _U64(0), kids[0] >> np.where(big, _U64(0), c))
            elif k == E.ASHR:
                a, c = kids
                sign = (a >> _U64(w - 1)) & _U64(1)
                big = c >= _U64(w)
                csafe = np.where(big, _U64(0), c)
                logical = np.where(big, _U64(0), a >> csafe)
                # sign fill: top `c` bits set when the sign bit is on
                fill = np.where(
                    csafe == _U64(0),
                    _U64(0),
                    ((m >> (_U64(w) - csafe)) << (_U64(w) - csafe)) & m,
                )
                fill = np.where(big, m, fill)
                out = np.where(sign == _U64(1), logical | fill, logical)
            elif k == E.EXTRACT:
                high, low = node.params
                out = (kids[0] >> _U64(low)) & _mask(high - low + 1)
            elif k == E.CONCAT:
                out = np.zeros(n, dtype=np.uint64)
                for child, v in zip(node.children, kids):
                    out = ((out << _U64(child.width)) | v) & m
            elif k == E.ZEXT:
                out = kids[0]
            elif k == E.SEXT:
                w0 = node.children[0].width
                sign = (kids[0] >> _U64(w0 - 1)) & _U64(1)
                ext = (m >> _U64(w0)) << _U64(w0) if w > w0 else _U64(0)
                out = np.where(sign == _U64(1), kids[0] | ext, kids[0])
            elif k == E.EQ:
                out = (kids[0] == kids[1]).astype(np.uint64)
            elif k == E.NE:
                out = (kids[0] != kids[1]).astype(np.uint64)
            elif k == E.ULT:
                out = (kids[0] < kids[1]).astype(np.uint64)
            elif k == E.ULE:
                out = (kids[0] <= kids[1]).astype(np.uint64)
            elif k in (E.SLT, E.SLE):
                w0 = node.children[0].width
                bias = _U64(1 << (w0 - 1))
                a = kids[0] ^ bias
                b = kids[1] ^ bias
                out = (a < b if k == E.SLT else a <= b).astype(np.uint64)
            elif k == E.ITE:
                out = np.where(kids[0] != _U64(0), kids[1], kids[2])
            elif k == E.BAND:
                out = kids[0] & kids[1]
            elif k == E.BOR:
                out = kids[0] | kids[1]
            elif k == E.BNOT:
                out = kids[0] ^ _U64(1)
            else:
                raise ValueError("unknown kind %r" % k)
        memo[id(node)] = out
        return out

    with np.errstate(over="ignore"):
        return go(e)
