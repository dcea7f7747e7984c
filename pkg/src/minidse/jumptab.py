"""Jump table recovery for indirect jumps.

When an indirect jump's target came out of a table indexed by input,
the mirror has already concretized the table slot's address but kept
its symbolic expression.  This module finds that expression by walking
the current basic block backward from the jump, rebuilds the table
from the program's initial data image around the slot the run actually
touched, and turns it into a branch condition over the address
expression: which slot was read decides where the jump lands.

Two table layouts are recognized, selected by the width of the access
that fetched the target.  Eight byte slots hold code addresses
directly.  Four byte slots hold signed displacements relative to a
base recovered from the concrete run; a base of zero makes this the
four byte absolute case, so both spellings come out of one decoder.
Slots extend from the touched one in both directions while they keep
decoding to in-code targets, and at least three qualifying slots must
exist before the table is believed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

from . import expr as E
from . import isa
from .isa import Access, Opcode, RegOp


@dataclass(frozen=True)
class JumpTable:
    kind: str      # "address" | "offset"
    base: int      # decoded targets are base + sext(raw); zero for "address"
    stride: int
    entries: tuple  # (slot address, raw value, decoded target)


def _defined_regs(instr):
    acc = isa.access(instr.opcode)
    out = []
    for pos, operand in enumerate(instr.explicit):
        if isinstance(operand, RegOp) and acc[pos] in (Access.W, Access.RW):
            out.append(operand.reg)
    for reg, a in isa.IMPLICIT_REGS.get(instr.opcode, ()):
        if a in (Access.W, Access.RW):
            out.append(reg)
    return out


def locate_table_load(journal, target_reg):
    """Walk the block journal backward to the load that produced the
    jump target.

    The value flowing into the jump register is followed through mov,
    add, and addr; the first load that defines a register still on the
    tracked path is the table fetch, and its recorded address
    expression carries the symbolic slot choice.  Returns the pair
    (instruction event, address expression) or None when the chain
    leaves this shape: any other defining instruction could warp the
    loaded value, and a condition built over the slot address would
    then predict the wrong targets.
    """
    tracked = {target_reg}
    for event, addr_expr in reversed(journal):
        instr = event.instruction
        op = instr.opcode
        if not tracked.intersection(_defined_regs(instr)):
            continue
        if op is Opcode.LOAD:
            return event, addr_expr
        if op is Opcode.MOV:
            dest, src = instr.explicit
            tracked.discard(dest.reg)
            if isinstance(src, RegOp):
                tracked.add(src.reg)
        elif op is Opcode.ADD:
            # The previous value of the destination still contributes.
            src = instr.explicit[1]
            if isinstance(src, RegOp):
                tracked.add(src.reg)
        elif op is Opcode.ADDR:
            mem = instr.explicit[1]
            tracked.discard(instr.explicit[0].reg)
            if mem.base is not None:
                tracked.add(mem.base)
            if mem.index is not None:
                tracked.add(mem.index)
        else:
            return None
        if not tracked:
            return None
    return None


def recover_table(initial_mem, ea, width, concrete_target, code_range,
                  max_entries=512):
    """Rebuild the jump table around the slot at `ea` from the initial
    data image, or return None when no plausible table is there.

    `width` is the bit width of the access that fetched the target and
    picks the slot layout; `concrete_target` anchors the displacement
    base for the four byte layout and sanity-checks the eight byte one.
    Tables wider than `max_entries` keep a window around the touched
    slot.
    """
    stride = width // 8
    if stride not in (4, 8):
        return None
    lo_code, hi_code = code_range

    def slot(k):
        # A slot counts only if every one of its bytes was materialized
        # in the data image; partial overlap with neighbouring data is
        # not table content.
        address = (ea + k * stride) & isa.MASK64
        raw = 0
        for i in range(stride):
            byte = initial_mem.get((address + i) & isa.MASK64)
            if byte is None:
                return None
            raw |= byte << (8 * i)
        return address, raw

    first = slot(0)
    if first is None:
        return None
    if stride == 8:
        kind = "address"
        base = 0
        if first[1] != concrete_target:
            return None  # initial image disagrees with the run
    else:
        kind = "offset"
        raw0 = first[1]
        disp0 = raw0 - (1 << 32) if raw0 >> 31 else raw0
        base = (concrete_target - disp0) & isa.MASK64

    def decoded(k):
        s = slot(k)
        if s is None:
            return None
        raw = s[1]
        if stride == 8:
            target = raw
        else:
            disp = raw - (1 << 32) if raw >> 31 else raw
            target = (base + disp) & isa.MASK64
        if not lo_code <= target < hi_code:
            return None
        return s[0], raw, target

    if decoded(0) is None:
        return None
    lo = hi = 0
    while decoded(hi + 1) is not None:
        hi += 1
    while decoded(lo - 1) is not None:
        lo -= 1
    if hi - lo + 1 < 3:
        return None
    if hi - lo + 1 > max_entries:
        half = max_entries // 2
        new_lo = max(lo, -half)
        new_hi = new_lo + max_entries - 1
        if new_hi > hi:
            new_hi = hi
            new_lo = hi - max_entries + 1
        lo, hi = new_lo, new_hi
    entries = tuple(decoded(k) for k in range(lo, hi + 1))
    return JumpTable(kind, base, stride, entries)


def build_branch_condition(table, ptr_expr, concrete_target):
    """Group table slots by target and phrase the jump as conditions
    over the slot address expression.

    Returns (cond, alt_targets): `cond` holds on the executed path
    (the pointer hit a slot whose target is the concrete one), and
    `alt_targets` pairs every other reachable target with the
    condition that steers the pointer into one of its slots.
    """
    taken = []
    alternatives = {}
    for address, _, target in table.entries:
        term = E.eq(ptr_expr, E.const(64, address))
        if target == concrete_target:
            taken.append(term)
        else:
            alternatives.setdefault(target, []).append(term)
    cond = reduce(E.bor, taken)
    alt_targets = tuple(
        (target, reduce(E.bor, terms))
        for target, terms in sorted(alternatives.items()))
    return cond, alt_targets
