"""Seeded random expression generator shared by the module and acceptance tests.

Generates well-typed trees up to a depth budget over a small set of 8-bit
input variables.  Widths stay <= 64 so the vectorized evaluator applies.
Built through expr.raw(), i.e. no rewriting: callers rebuild() when they want
the simplified twin.
"""

from __future__ import annotations

import random

from minidse import expr as E

_WIDTHS = (1, 3, 8, 11, 16, 24, 32, 40, 64)

_BIN = (E.ADD, E.SUB, E.MUL, E.AND, E.OR, E.XOR, E.SHL, E.LSHR, E.ASHR)
_CMP = (E.EQ, E.NE, E.ULT, E.ULE, E.SLT, E.SLE)


def random_expr(rng: random.Random, depth: int, var_indices, width: int | None = None) -> E.Expr:
    """A random raw expression of the given width (random width if None)."""
    if width is None:
        width = rng.choice(_WIDTHS)
    if depth <= 0:
        return _leaf(rng, width, var_indices)
    choice = rng.random()
    if width == 1 and choice < 0.45:
        kind = rng.choice(_CMP)
        w = rng.choice(_WIDTHS)
        a = random_expr(rng, depth - 1, var_indices, w)
        b = random_expr(rng, depth - 1, var_indices, w)
        return E.raw(kind, (a, b))
    if width == 1 and choice < 0.6:
        kind = rng.choice((E.BAND, E.BOR, E.BNOT))
        if kind == E.BNOT:
            return E.raw(kind, (random_expr(rng, depth - 1, var_indices, 1),))
        return E.raw(
            kind,
            (
                random_expr(rng, depth - 1, var_indices, 1),
                random_expr(rng, depth - 1, var_indices, 1),
            ),
        )
    r = rng.random()
    if r < 0.40:
        kind = rng.choice(_BIN)
        a = random_expr(rng, depth - 1, var_indices, width)
        b = random_expr(rng, depth - 1, var_indices, width)
        return E.raw(kind, (a, b))
    if r < 0.50:
        kind = rng.choice((E.NOT, E.NEG))
        return E.raw(kind, (random_expr(rng, depth - 1, var_indices, width),))
    if r < 0.62:
        inner_w = rng.randrange(width, 65)
        high = rng.randrange(width - 1, inner_w)
        low = high - width + 1
        inner = random_expr(rng, depth - 1, var_indices, inner_w)
        return E.raw(E.EXTRACT, (inner,), (high, low))
    if r < 0.74 and width >= 2:
        # split into 2..3 concat parts
        nparts = rng.choice((2, 3)) if width >= 3 else 2
        cuts = sorted(rng.sample(range(1, width), nparts - 1))
        sizes = []
        prev = 0
        for c in cuts:
            sizes.append(c - prev)
            prev = c
        sizes.append(width - prev)
        parts = tuple(random_expr(rng, depth - 1, var_indices, s) for s in sizes)
        return E.raw(E.CONCAT, parts)
    if r < 0.86 and width >= 2:
        kind = rng.choice((E.ZEXT, E.SEXT))
        n = rng.randrange(1, width)
        inner = random_expr(rng, depth - 1, var_indices, width - n)
        return E.raw(kind, (inner,), (n,))
    if r < 0.94:
        c = random_expr(rng, depth - 1, var_indices, 1)
        a = random_expr(rng, depth - 1, var_indices, width)
        b = random_expr(rng, depth - 1, var_indices, width)
        return E.raw(E.ITE, (c, a, b))
    return _leaf(rng, width, var_indices)


def _leaf(rng: random.Random, width: int, var_indices) -> E.Expr:
    if width == 8 and var_indices and rng.random() < 0.6:
        return E.raw(E.VAR, (), (rng.choice(tuple(var_indices)),))
    if var_indices and rng.random() < 0.35:
        # reach a variable at other widths through extend/extract
        v = E.raw(E.VAR, (), (rng.choice(tuple(var_indices)),))
        if width == 8:
            return v
        if width > 8:
            return E.raw(E.ZEXT, (v,), (width - 8,))
        return E.raw(E.EXTRACT, (v,), (width - 1, 0))
    return E.raw(E.CONST, (), (width, rng.getrandbits(width)))


def random_bool_expr(rng: random.Random, depth: int, var_indices) -> E.Expr:
    return random_expr(rng, depth, var_indices, width=1)
