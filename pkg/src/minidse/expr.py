"""Bitvector expression trees with hash-consing and constructor-time rewriting.

Every expression is an immutable node interned in a module-level table, so
structural equality coincides with reference identity (`a is b`).  Construction
through :func:`mk` (or the typed helpers below) simplifies each node once, at
creation time, under the assumption that all children are already simplified:

    A & A -> A            A | A -> A           A ^ A -> 0
    A - A -> 0            0 * A -> 0           0 & A -> 0
    0 << A -> 0           0 >> A -> 0  (logical)
    Extract(h, l, Extract(h', l', A))      -> Extract(h + l', l + l', A)
    Extract of a Concat inside one limb    -> Extract on that limb
    Concat of adjacent descending Extracts of one base -> merged Extract
    Extract(h, l, ZeroExtend(n, x)), h < width(x) -> Extract(h, l, x)
    Extract(w - 1, 0, x)                   -> x
    constant folding: any variable-free node folds to a Const

Nodes carry two derived attributes used throughout the engine: ``symbolic``
(does any Var occur below) and ``used_vars`` (bitmask of input-byte variable
indices).  Widths are arbitrary positive bit counts; boolean-producing kinds
(comparisons, BoolAnd/BoolOr/BoolNot) have width 1 and value 0 or 1.

`raw()` builds a node without rewriting or interning; it exists so tests can
compare a simplified tree against its unsimplified twin.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Mapping

CONST = "const"
VAR = "var"
CONCAT = "concat"
EXTRACT = "extract"
ZEXT = "zext"
SEXT = "sext"
ADD = "add"
SUB = "sub"
MUL = "mul"
AND = "and"
OR = "or"
XOR = "xor"
NOT = "not"
NEG = "neg"
SHL = "shl"
LSHR = "lshr"
ASHR = "ashr"
EQ = "eq"
NE = "ne"
ULT = "ult"
ULE = "ule"
SLT = "slt"
SLE = "sle"
ITE = "ite"
BAND = "booland"
BOR = "boolor"
BNOT = "boolnot"

BINARY_ALU = frozenset({ADD, SUB, MUL, AND, OR, XOR, SHL, LSHR, ASHR})
UNARY_ALU = frozenset({NOT, NEG})
COMPARISONS = frozenset({EQ, NE, ULT, ULE, SLT, SLE})
BOOL_OPS = frozenset({BAND, BOR, BNOT})
ALL_KINDS = (
    frozenset({CONST, VAR, CONCAT, EXTRACT, ZEXT, SEXT, ITE})
    | BINARY_ALU
    | UNARY_ALU
    | COMPARISONS
    | BOOL_OPS
)


class ExprTypeError(Exception):
    """Raised when an expression is built with inconsistent widths or bad arity."""


class MissingVariable(Exception):
    """Raised by eval() when the assignment does not cover a used variable."""


class Expr:
    __slots__ = ("kind", "width", "children", "params", "symbolic", "used_vars")

    # Nodes are created only by _new(); identity-based __eq__/__hash__ are
    # exactly what hash-consing wants.
    def __init__(self, kind, width, children, params):
        self.kind = kind
        self.width = width
        self.children = children
        self.params = params
        if kind == VAR:
            self.symbolic = True
            self.used_vars = 1 << params[0]
        else:
            uv = 0
            for c in children:
                uv |= c.used_vars
            self.used_vars = uv
            self.symbolic = uv != 0

    def __repr__(self):
        if self.kind == CONST:
            return "(bv%d w%d)" % (self.params[0], self.width)
        if self.kind == VAR:
            return "(var %d)" % self.params[0]
        inner = " ".join(repr(c) for c in self.children)
        if self.params:
            head = "%s:%s" % (self.kind, ",".join(str(p) for p in self.params))
        else:
            head = self.kind
        return "(%s %s)" % (head, inner)


_table: dict = {}
_simplify_enabled = True


def intern_table_size() -> int:
    return len(_table)


def clear_intern_table() -> None:
    """Drop all interned nodes.  Only for tests measuring table growth."""
    _table.clear()


def set_simplification(enabled: bool) -> bool:
    """Globally enable/disable constructor rewrites; returns the old value."""
    global _simplify_enabled
    old = _simplify_enabled
    _simplify_enabled = bool(enabled)
    return old


@contextmanager
def simplification(enabled: bool):
    old = set_simplification(enabled)
    try:
        yield
    finally:
        set_simplification(old)


def _new(kind, width, children, params):
    key = (kind, width, params, children)
    e = _table.get(key)
    if e is None:
        e = Expr(kind, width, children, params)
        _table[key] = e
    return e


def _mask(width: int) -> int:
    return (1 << width) - 1


def const(width: int, value: int) -> Expr:
    if width < 1:
        raise ExprTypeError("const width must be >= 1, got %d" % width)
    return _new(CONST, width, (), (value & _mask(width),))


def var(index: int) -> Expr:
    """8-bit symbolic variable; index is the input-file byte offset."""
    if index < 0:
        raise ExprTypeError("variable index must be >= 0, got %d" % index)
    return _new(VAR, 8, (), (index,))


def _check(kind, children, params):
    """Validate arity/widths and return the result width."""
    n = len(children)
    if kind in BINARY_ALU or kind in COMPARISONS:
        if n != 2:
            raise ExprTypeError("%s takes 2 children, got %d" % (kind, n))
        a, b = children
        if a.width != b.width:
            raise ExprTypeError(
                "%s width mismatch: %d vs %d" % (kind, a.width, b.width)
            )
        return 1 if kind in COMPARISONS else a.width
    if kind in UNARY_ALU:
        if n != 1:
            raise ExprTypeError("%s takes 1 child, got %d" % (kind, n))
        return children[0].width
    if kind == CONCAT:
        if n < 1:
            raise ExprTypeError("concat needs at least one child")
        return sum(c.width for c in children)
    if kind == EXTRACT:
        if n != 1 or len(params) != 2:
            raise ExprTypeError("extract takes 1 child and (high, low) params")
        high, low = params
        if not (0 <= low <= high < children[0].width):
            raise ExprTypeError(
                "extract bounds (%d, %d) out of range for width %d"
                % (high, low, children[0].width)
            )
        return high - low + 1
    if kind in (ZEXT, SEXT):
        if n != 1 or len(params) != 1 or params[0] < 0:
            raise ExprTypeError("%s takes 1 child and a bit count >= 0" % kind)
        return children[0].width + params[0]
    if kind == ITE:
        if n != 3:
            raise ExprTypeError("ite takes 3 children, got %d" % n)
        c, a, b = children
        if c.width != 1:
            raise ExprTypeError("ite condition must have width 1")
        if a.width != b.width:
            raise ExprTypeError("ite branch widths differ: %d vs %d" % (a.width, b.width))
        return a.width
    if kind in BOOL_OPS:
        want = 1 if kind == BNOT else 2
        if n != want:
            raise ExprTypeError("%s takes %d children, got %d" % (kind, want, n))
        for c in children:
            if c.width != 1:
                raise ExprTypeError("%s children must have width 1" % kind)
        return 1
    raise ExprTypeError("unknown expression kind %r" % (kind,))


def _to_signed(v: int, width: int) -> int:
    if v & (1 << (width - 1)):
        return v - (1 << width)
    return v


def _apply(kind, width, params, children, vals):
    """Concrete semantics shared by eval() and constant folding."""
    m = _mask(width)
    if kind == ADD:
        return (vals[0] + vals[1]) & m
    if kind == SUB:
        return (vals[0] - vals[1]) & m
    if kind == MUL:
        return (vals[0] * vals[1]) & m
    if kind == AND:
        return vals[0] & vals[1]
    if kind == OR:
        return vals[0] | vals[1]
    if kind == XOR:
        return vals[0] ^ vals[1]
    if kind == NOT:
        return ~vals[0] & m
    if kind == NEG:
        return -vals[0] & m
    if kind == SHL:
        c = vals[1]
        return 0 if c >= width else (vals[0] << c) & m
    if kind == LSHR:
        c = vals[1]
        return 0 if c >= width else vals[0] >> c
    if kind == ASHR:
        a, c = vals
        sign = (a >> (width - 1)) & 1
        if c >= width:
            return m if sign else 0
        out = a >> c
        if sign:
            out |= (m << (width - c)) & m
        return out
    if kind == EXTRACT:
        high, low = params
        return (vals[0] >> low) & _mask(high - low + 1)
    if kind == CONCAT:
        out = 0
        for child, v in zip(children, vals):
            out = (out << child.width) | v
        return out
    if kind == ZEXT:
        return vals[0]
    if kind == SEXT:
        w0 = children[0].width
        return _to_signed(vals[0], w0) & m
    if kind == EQ:
        return int(vals[0] == vals[1])
    if kind == NE:
        return int(vals[0] != vals[1])
    if kind == ULT:
        return int(vals[0] < vals[1])
    if kind == ULE:
        return int(vals[0] <= vals[1])
    if kind == SLT:
        w0 = children[0].width
        return int(_to_signed(vals[0], w0) < _to_signed(vals[1], w0))
    if kind == SLE:
        w0 = children[0].width
        return int(_to_signed(vals[0], w0) <= _to_signed(vals[1], w0))
    if kind == ITE:
        return vals[1] if vals[0] else vals[2]
    if kind == BAND:
        return vals[0] & vals[1]
    if kind == BOR:
        return vals[0] | vals[1]
    if kind == BNOT:
        return vals[0] ^ 1
    raise ExprTypeError("unknown expression kind %r" % (kind,))


def _is_zero(e: Expr) -> bool:
    return e.kind == CONST and e.params[0] == 0


def _simplify(kind, width, children, params):
    """Return a rewritten Expr, or None when no rule fires."""
    # Constant folding closure: every variable-free node folds.
    if children and all(c.kind == CONST for c in children):
        vals = [c.params[0] for c in children]
        return const(width, _apply(kind, width, params, children, vals))

    if kind in (AND, BAND, OR, BOR):
        a, b = children
        if a is b:
            return a
        if kind == AND and (_is_zero(a) or _is_zero(b)):
            return const(width, 0)
        return None
    if kind in (XOR, SUB):
        a, b = children
        if a is b:
            return const(width, 0)
        return None
    if kind == BNOT:
        if children[0].kind == BNOT:
            return children[0].children[0]
        return None
    if kind == MUL:
        a, b = children
        if _is_zero(a) or _is_zero(b):
            return const(width, 0)
        return None
    if kind in (SHL, LSHR):
        if _is_zero(children[0]):
            return const(width, 0)
        return None
    if kind == EXTRACT:
        high, low = params
        x = children[0]
        if high == x.width - 1 and low == 0:
            return x
        if x.kind == EXTRACT:
            ih, il = x.params
            return mk(EXTRACT, (x.children[0],), (high + il, low + il))
        if x.kind == CONCAT:
            # Locate a single limb covering [low, high] (bit 0 = LSB of the
            # last child; concat children are listed most-significant first).
            off = 0
            for limb in reversed(x.children):
                if low >= off and high < off + limb.width:
                    return mk(EXTRACT, (limb,), (high - off, low - off))
                off += limb.width
            return None
        if x.kind == ZEXT and high < x.children[0].width:
            return mk(EXTRACT, (x.children[0],), (high, low))
        return None
    if kind == CONCAT:
        if len(children) == 1:
            return children[0]
        if any(c.kind == CONCAT for c in children):
            flat = []
            for c in children:
                if c.kind == CONCAT:
                    flat.extend(c.children)
                else:
                    flat.append(c)
            return mk(CONCAT, tuple(flat))
        # Merge maximal runs of adjacent descending extracts of one base.
        out = []
        i = 0
        merged = False
        n = len(children)
        while i < n:
            c = children[i]
            if c.kind == EXTRACT:
                base = c.children[0]
                high = c.params[0]
                low = c.params[1]
                j = i + 1
                while j < n:
                    nxt = children[j]
                    if (
                        nxt.kind == EXTRACT
                        and nxt.children[0] is base
                        and nxt.params[0] == low - 1
                    ):
                        low = nxt.params[1]
                        j += 1
                    else:
                        break
                if j > i + 1:
                    out.append(mk(EXTRACT, (base,), (high, low)))
                    merged = True
                    i = j
                    continue
            out.append(c)
            i += 1
        if merged:
            return mk(CONCAT, tuple(out))
        return None
    if kind in (ZEXT, SEXT) and params[0] == 0:
        return children[0]
    return None


def mk(kind, children: Iterable[Expr] = (), params: tuple = ()) -> Expr:
    """Build (and possibly rewrite) an interned node of the given kind."""
    if kind == CONST:
        return const(params[0], params[1])
    if kind == VAR:
        return var(params[0])
    children = tuple(children)
    width = _check(kind, children, params)
    if _simplify_enabled:
        out = _simplify(kind, width, children, params)
        if out is not None:
            return out
    return _new(kind, width, children, params)


def raw(kind, children: Iterable[Expr] = (), params: tuple = ()) -> Expr:
    """Build a node with no rewriting and no interning (differential testing)."""
    if kind == CONST:
        if params[1] != params[1] & _mask(params[0]):
            params = (params[0], params[1] & _mask(params[0]))
        return Expr(CONST, params[0], (), (params[1] & _mask(params[0]),))
    if kind == VAR:
        return Expr(VAR, 8, (), params)
    children = tuple(children)
    width = _check(kind, children, params)
    return Expr(kind, width, children, params)


def rebuild(e: Expr) -> Expr:
    """Reconstruct a tree through mk(), yielding its fully simplified form."""
    memo: dict = {}

    def go(n: Expr) -> Expr:
        got = memo.get(id(n))
        if got is not None:
            return got
        if n.kind == CONST:
            out = const(n.width, n.params[0])
        elif n.kind == VAR:
            out = var(n.params[0])
        else:
            out = mk(n.kind, tuple(go(c) for c in n.children), n.params)
        memo[id(n)] = out
        return out

    return go(e)


# Typed helpers; symex and tests read much better with these.

def add(a, b):
    return mk(ADD, (a, b))


def sub(a, b):
    return mk(SUB, (a, b))


def mul(a, b):
    return mk(MUL, (a, b))


def and_(a, b):
    return mk(AND, (a, b))


def or_(a, b):
    return mk(OR, (a, b))


def xor(a, b):
    return mk(XOR, (a, b))


def not_(a):
    return mk(NOT, (a,))


def neg(a):
    return mk(NEG, (a,))


def shl(a, b):
    return mk(SHL, (a, b))


def lshr(a, b):
    return mk(LSHR, (a, b))


def ashr(a, b):
    return mk(ASHR, (a, b))


def concat(*parts):
    return mk(CONCAT, parts)


def extract(high, low, a):
    return mk(EXTRACT, (a,), (high, low))


def zero_extend(n, a):
    return mk(ZEXT, (a,), (n,))


def sign_extend(n, a):
    return mk(SEXT, (a,), (n,))


def eq(a, b):
    return mk(EQ, (a, b))


def ne(a, b):
    return mk(NE, (a, b))


def ult(a, b):
    return mk(ULT, (a, b))


def ule(a, b):
    return mk(ULE, (a, b))


def slt(a, b):
    return mk(SLT, (a, b))


def sle(a, b):
    return mk(SLE, (a, b))


def ite(c, a, b):
    return mk(ITE, (c, a, b))


def band(a, b):
    return mk(BAND, (a, b))


def bor(a, b):
    return mk(BOR, (a, b))


def bnot(a):
    return mk(BNOT, (a,))


def used_variables(e: Expr) -> set[int]:
    """Set of input-byte indices occurring in e (decoded from the bitmask)."""
    out = set()
    uv = e.used_vars
    i = 0
    while uv:
        if uv & 1:
            out.add(i)
        uv >>= 1
        i += 1
    return out


def eval(e: Expr, assignment: Mapping[int, int]) -> int:  # noqa: A001
    """Evaluate under a byte assignment {var index -> 0..255}.

    The DAG is walked once per distinct node.  Raises MissingVariable when a
    used variable has no binding.
    """
    memo: dict = {}

    def go(n: Expr) -> int:
        v = memo.get(id(n))
        if v is not None:
            return v
        if n.kind == CONST:
            v = n.params[0]
        elif n.kind == VAR:
            idx = n.params[0]
            try:
                v = assignment[idx] & 0xFF
            except KeyError:
                raise MissingVariable("no value for input byte %d" % idx) from None
        else:
            vals = [go(c) for c in n.children]
            v = _apply(n.kind, n.width, n.params, n.children, vals)
        memo[id(n)] = v
        return v

    return go(e)


# ---------------------------------------------------------------------------
# SMT-LIB2 printing.  Width-1 terms double as booleans; the printer renders
# boolean-shaped kinds natively and bridges with (ite ... #b1 #b0) / (= x #b1)
# only where sorts demand it, so dumps stay readable and cross-checkable.

_BV_OPS = {
    ADD: "bvadd",
    SUB: "bvsub",
    MUL: "bvmul",
    AND: "bvand",
    OR: "bvor",
    XOR: "bvxor",
    SHL: "bvshl",
    LSHR: "bvlshr",
    ASHR: "bvashr",
}

_BOOLISH = frozenset({EQ, NE, ULT, ULE, SLT, SLE, BAND, BOR, BNOT})


def _fmt_const(value: int, width: int) -> str:
    if width % 4 == 0:
        return "#x%0*x" % (width // 4, value)
    return "#b" + format(value, "0%db" % width)


def _render_bv(e: Expr) -> str:
    if e.kind == CONST:
        return _fmt_const(e.params[0], e.width)
    if e.kind == VAR:
        return "b%d" % e.params[0]
    if e.kind in _BV_OPS:
        return "(%s %s %s)" % (
            _BV_OPS[e.kind],
            _render_bv(e.children[0]),
            _render_bv(e.children[1]),
        )
    if e.kind == NOT:
        return "(bvnot %s)" % _render_bv(e.children[0])
    if e.kind == NEG:
        return "(bvneg %s)" % _render_bv(e.children[0])
    if e.kind == CONCAT:
        return "(concat %s)" % " ".join(_render_bv(c) for c in e.children)
    if e.kind == EXTRACT:
        return "((_ extract %d %d) %s)" % (
            e.params[0],
            e.params[1],
            _render_bv(e.children[0]),
        )
    if e.kind == ZEXT:
        return "((_ zero_extend %d) %s)" % (e.params[0], _render_bv(e.children[0]))
    if e.kind == SEXT:
        return "((_ sign_extend %d) %s)" % (e.params[0], _render_bv(e.children[0]))
    if e.kind == ITE:
        return "(ite %s %s %s)" % (
            _render_bool(e.children[0]),
            _render_bv(e.children[1]),
            _render_bv(e.children[2]),
        )
    if e.kind in _BOOLISH:
        return "(ite %s #b1 #b0)" % _render_bool(e)
    raise ExprTypeError("cannot render %r" % e.kind)


def _render_bool(e: Expr) -> str:
    if e.width != 1:
        raise ExprTypeError("boolean rendering needs width 1, got %d" % e.width)
    if e.kind == CONST:
        return "true" if e.params[0] else "false"
    if e.kind == EQ:
        return "(= %s %s)" % (_render_bv(e.children[0]), _render_bv(e.children[1]))
    if e.kind == NE:
        return "(not (= %s %s))" % (
            _render_bv(e.children[0]),
            _render_bv(e.children[1]),
        )
    if e.kind in (ULT, ULE, SLT, SLE):
        op = {ULT: "bvult", ULE: "bvule", SLT: "bvslt", SLE: "bvsle"}[e.kind]
        return "(%s %s %s)" % (op, _render_bv(e.children[0]), _render_bv(e.children[1]))
    if e.kind == BAND:
        return "(and %s %s)" % (_render_bool(e.children[0]), _render_bool(e.children[1]))
    if e.kind == BOR:
        return "(or %s %s)" % (_render_bool(e.children[0]), _render_bool(e.children[1]))
    if e.kind == BNOT:
        return "(not %s)" % _render_bool(e.children[0])
    # Width-1 bitvector term used as a boolean.
    return "(= %s #b1)" % _render_bv(e)


def to_smtlib(constraints: Iterable[Expr], logic: str = "QF_BV") -> str:
    """Render constraints as an SMT-LIB2 script, one assert per constraint."""
    constraints = list(constraints)
    vars_used = set()
    for c in constraints:
        if c.width != 1:
            raise ExprTypeError("constraints must have width 1")
        vars_used |= used_variables(c)
    lines = ["(set-logic %s)" % logic]
    for i in sorted(vars_used):
        lines.append("(declare-const b%d (_ BitVec 8))" % i)
    for c in constraints:
        lines.append("(assert %s)" % _render_bool(c))
    lines.append("(check-sat)")
    return "\n".join(lines) + "\n"


def serialize(e: Expr) -> str:
    """Canonical structural string (used for cross-process identity checks)."""
    if e.kind == CONST:
        return "(c %d %d)" % (e.width, e.params[0])
    if e.kind == VAR:
        return "(v %d)" % e.params[0]
    head = e.kind
    if e.params:
        head += ":" + ",".join(str(p) for p in e.params)
    return "(%s %s)" % (head, " ".join(serialize(c) for c in e.children))
