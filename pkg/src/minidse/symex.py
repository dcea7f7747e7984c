"""Symbolic mirror of a concrete run.

The interpreter executes the program and streams events; this module
replays them, carrying expressions over the input file bytes wherever
the run's values depend on them.  State is sparse: a register, flag,
or memory byte appears in the maps only while its value is actually
input-dependent, and concrete writes erase entries rather than storing
constants.  Every concrete value the mirror needs (operand values,
effective addresses, loaded bytes) comes from the snapshot attached to
the instruction event, so the mirror never re-executes the program.

At each conditional jump whose flags are input-dependent, and at each
indirect jump whose target came through a recovered jump table, the
mirror records a path constraint: an expression that is true on the
driving input, paired with enough position information to replay and
check a flipped run later.  Conditions are checked against the driving
input as they are recorded; a false condition means the mirror's
semantics diverged from the interpreter and is raised immediately.

Input bytes are numbered by file offset, so the same offset reads as
the same variable no matter where in memory it lands.  When the
program writes over the file and reads the region back, the stored
expressions flow through instead of minting fresh variables; offsets
overwritten with concrete data turn back into plain bytes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import events as ev
from . import expr as E
from . import isa
from . import jumptab
from .isa import CF, OF, SF, ZF, ImmOp, MemOp, Opcode, RegOp
from .vm import alu_result, branch_taken

MASK64 = isa.MASK64


class MirrorTimeout(Exception):
    """Mirroring exceeded the wall-clock budget it was given."""


class MirrorDivergence(Exception):
    """A recorded condition does not hold on the driving input.

    This can only come from a mismatch between the mirror's expression
    semantics and the interpreter, never from the program under test,
    so it is an error rather than a reportable result.
    """


@dataclass(frozen=True)
class PathConstraint:
    """One input-dependent branch decision of the concrete run."""

    site: int          # address of the branch instruction
    kind: str          # "conditional" | "indirect"
    opcode: Opcode
    cond: E.Expr       # true along the executed path
    taken: bool | None          # conditional jumps only
    trace_pos: int     # index among the run's recorded branch sites
    tid: int
    next_pc: int       # where the run actually went
    inverted_target: int | None  # conditional: where the flip lands
    alt_targets: tuple          # indirect: ((target, condition), ...)


@dataclass
class SymexStats:
    events: int = 0
    instructions: int = 0
    mirrored: int = 0
    skipped: int = 0
    concretizations: int = 0
    tables: int = 0


class _Context:
    """Per-thread symbolic state: sparse register and flag maps plus
    the journal of the basic block being executed."""

    __slots__ = ("regs", "flags", "journal")

    def __init__(self, regs=None, flags=None):
        self.regs = dict(regs) if regs else {}
        self.flags = dict(flags) if flags else {}
        self.journal = []


_ALU_OPS = frozenset({
    Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.AND, Opcode.OR,
    Opcode.XOR, Opcode.NOT, Opcode.NEG, Opcode.SHL, Opcode.SHR,
    Opcode.SAR, Opcode.CMP, Opcode.TEST,
})

# Branch conditions over flag expressions; must agree bit for bit with
# the interpreter's predicates over concrete flags.
_COND_BUILDERS = {
    Opcode.JZ: lambda f: f(ZF),
    Opcode.JNZ: lambda f: E.bnot(f(ZF)),
    Opcode.JL: lambda f: E.ne(f(SF), f(OF)),
    Opcode.JGE: lambda f: E.eq(f(SF), f(OF)),
    Opcode.JLE: lambda f: E.bor(f(ZF), E.ne(f(SF), f(OF))),
    Opcode.JG: lambda f: E.band(E.bnot(f(ZF)), E.eq(f(SF), f(OF))),
    Opcode.JB: lambda f: f(CF),
    Opcode.JAE: lambda f: E.bnot(f(CF)),
    Opcode.JBE: lambda f: E.bor(f(CF), f(ZF)),
    Opcode.JA: lambda f: E.band(E.bnot(f(CF)), E.bnot(f(ZF))),
}


class SymbolicExecutor:
    """Consumes an event stream and accumulates path constraints.

    `skip_concrete` fast-paths instructions that touch no symbolic
    state; `follow_switches` keeps one register/flag context per thread
    (turning it off deliberately lets threads trample each other's
    expressions); `jump_tables` enables table recovery at indirect
    jumps.  `check` validates every recorded condition against `seed`.
    """

    def __init__(self, program, seed, *, skip_concrete=True,
                 follow_switches=True, jump_tables=True,
                 max_table_size=512, check=True):
        self.program = program
        self.initial_mem = program.initial_memory()
        self.code_range = program.code_range()
        self.assignment = {i: b for i, b in enumerate(seed)} if check else None
        self.skip_concrete = skip_concrete
        self.follow_switches = follow_switches
        self.jump_tables = jump_tables
        self.max_table_size = max_table_size
        self.contexts = {0: _Context()}
        self.current_tid = 0
        self.memory = {}      # address -> byte expression, symbolic only
        self.file_exprs = {}  # file offset -> expression, None once plain
        self.seen_offsets = set()
        self.path = []
        self.trace_pos = 0
        self.stats = SymexStats()
        self.exit_code = None

    def run(self, events, deadline=None):
        if deadline is None:
            for event in events:
                self.feed(event)
            return self
        for i, event in enumerate(events):
            self.feed(event)
            if i & 1023 == 0 and time.monotonic() > deadline:
                raise MirrorTimeout(
                    "mirroring still running after its time budget")
        return self

    @property
    def var_count(self):
        """Distinct input bytes turned into symbolic variables so far."""
        return len(self.seen_offsets)

    def feed(self, event):
        self.stats.events += 1
        if isinstance(event, ev.InstructionEvent):
            self._instruction(event)
        elif isinstance(event, ev.ReadSymbolicInput):
            self._read_input(event)
        elif isinstance(event, ev.WriteSymbolicInput):
            self._write_input(event)
        elif isinstance(event, ev.ThreadSwitch):
            if self.follow_switches:
                self.current_tid = event.to_tid
                if event.to_tid not in self.contexts:
                    self.contexts[event.to_tid] = _Context()
        elif isinstance(event, ev.ExitEvent):
            self.exit_code = event.code

    # ------------------------------------------------------------------
    # input file tracking

    def _read_input(self, event):
        for i in range(event.length):
            offset = event.offset + i
            address = (event.addr + i) & MASK64
            if offset in self.file_exprs:
                e = self.file_exprs[offset]
            else:
                e = E.var(offset)
                self.seen_offsets.add(offset)
            if e is None:
                self.memory.pop(address, None)
            else:
                self.memory[address] = e

    def _write_input(self, event):
        for i in range(event.length):
            address = (event.addr + i) & MASK64
            self.file_exprs[event.offset + i] = self.memory.get(address)

    # ------------------------------------------------------------------
    # instruction dispatch

    def _instruction(self, event):
        self.stats.instructions += 1
        ctx = self.contexts[self.current_tid]
        if event.instruction.opcode in isa.BLOCK_ENDERS:
            self.stats.mirrored += 1
            self._control(ctx, event)
            ctx.journal.clear()
            return
        if self.skip_concrete and self._is_concrete(ctx, event):
            self.stats.skipped += 1
            ctx.journal.append((event, None))
            return
        self.stats.mirrored += 1
        addr_expr = self._mirror(ctx, event)
        ctx.journal.append((event, addr_expr))

    def _is_concrete(self, ctx, event):
        """True when the instruction can neither read nor clobber any
        symbolic state, so the mirror has nothing to do for it."""
        instr = event.instruction
        regs = ctx.regs
        for flag in isa.FLAGS_WRITTEN.get(instr.opcode, ()):
            if flag in ctx.flags:
                return False
        for pos, operand in enumerate(instr.explicit):
            if isinstance(operand, RegOp):
                if operand.reg in regs:
                    return False
            elif isinstance(operand, MemOp):
                if operand.base is not None and operand.base in regs:
                    return False
                if operand.index is not None and operand.index in regs:
                    return False
                ea = event.values[pos][0]
                for i in range(instr.width // 8):
                    if (ea + i) & MASK64 in self.memory:
                        return False
        for reg, _ in isa.IMPLICIT_REGS.get(instr.opcode, ()):
            if reg in regs:
                return False
        return True

    def _mirror(self, ctx, event):
        instr = event.instruction
        values = event.values
        op = instr.opcode
        width = instr.width

        addr_expr = None
        for pos, operand in enumerate(instr.explicit):
            if isinstance(operand, MemOp):
                addr_expr = self._address_expr(ctx, operand, values[pos])
                break

        if op is Opcode.MOV:
            value = self._operand_src(ctx, instr, 1, width, values)
            self._write_dest(ctx, instr, 0, width, value, values)
        elif op is Opcode.LOAD:
            if addr_expr is not None:
                self.stats.concretizations += 1
            slot = values[1]
            value = self._memory_value(slot[0], width, slot[1])
            self._write_dest(ctx, instr, 0, width, value, values)
        elif op is Opcode.STORE:
            if addr_expr is not None:
                self.stats.concretizations += 1
            value = self._operand_src(ctx, instr, 0, width, values)
            self._memory_store(values[1][0], width, value)
        elif op is Opcode.ADDR:
            value = addr_expr
            if value is not None and width < 64:
                value = E.extract(width - 1, 0, value)
                if not value.symbolic:
                    value = None
            self._write_dest(ctx, instr, 0, width, value, values)
        elif op in _ALU_OPS:
            self._mirror_alu(ctx, instr, values)
        elif op is Opcode.OPEN:
            ctx.regs.pop(instr.explicit[0].reg, None)
        elif op in (Opcode.READ, Opcode.WRITE):
            # The interpreter ran the transfer on concrete fd, buffer,
            # and length; a symbolic value in any of them was pinned to
            # its concrete value.  Buffer contents were handled by the
            # input events preceding this one.  The length lands in r0.
            if any(isinstance(o, RegOp) and o.reg in ctx.regs
                   for o in instr.explicit):
                self.stats.concretizations += 1
            ctx.regs.pop(0, None)
        else:
            raise AssertionError("unhandled opcode %r" % op)
        return addr_expr

    # ------------------------------------------------------------------
    # operand expressions

    def _address_expr(self, ctx, operand, slot):
        """Symbolic effective address, or None when fully concrete.
        Concrete parts come from the snapshot's base/index values."""
        base_e = ctx.regs.get(operand.base) if operand.base is not None else None
        index_e = ctx.regs.get(operand.index) if operand.index is not None else None
        if base_e is None and index_e is None:
            return None
        if operand.base is not None:
            e = base_e if base_e is not None else E.const(64, slot[2])
        else:
            e = E.const(64, 0)
        if operand.index is not None:
            idx = index_e if index_e is not None else E.const(64, slot[3])
            e = E.add(e, E.mul(idx, E.const(64, operand.scale)))
        if operand.disp:
            e = E.add(e, E.const(64, operand.disp & MASK64))
        return e if e.symbolic else None

    def _operand_src(self, ctx, instr, pos, width, values):
        """Expression for a source operand at `width`, or None when its
        value is concrete."""
        operand = instr.explicit[pos]
        if isinstance(operand, ImmOp):
            return None
        if isinstance(operand, RegOp):
            e = ctx.regs.get(operand.reg)
            if e is None:
                return None
            if width < 64:
                e = E.extract(width - 1, 0, e)
            return e if e.symbolic else None
        slot = values[pos]
        return self._memory_value(slot[0], width, slot[1])

    def _memory_value(self, address, width, concrete):
        """Expression for `width` bits of memory at a concrete address,
        or None when no byte there is symbolic.  Concrete bytes are
        filled in from the snapshot's loaded value."""
        parts = []
        symbolic = False
        for i in reversed(range(width // 8)):
            e = self.memory.get((address + i) & MASK64)
            if e is None:
                e = E.const(8, (concrete >> (8 * i)) & 0xFF)
            else:
                symbolic = True
            parts.append(e)
        if not symbolic:
            return None
        if len(parts) == 1:
            return parts[0]
        return E.concat(*parts)

    def _memory_store(self, address, width, value):
        for i in range(width // 8):
            a = (address + i) & MASK64
            if value is None:
                self.memory.pop(a, None)
                continue
            byte = E.extract(8 * i + 7, 8 * i, value)
            if byte.symbolic:
                self.memory[a] = byte
            else:
                self.memory.pop(a, None)

    # ------------------------------------------------------------------
    # register writes

    def _write_dest(self, ctx, instr, pos, width, value, values,
                    low_value=None):
        slot_full = values[pos][0]
        if low_value is None:
            low_value = slot_full & isa.width_mask(width)
        self._write_reg_expr(ctx, instr.explicit[pos].reg, width, value,
                             slot_full, low_value)

    def _write_reg_expr(self, ctx, reg, width, value, full_reference,
                        low_value):
        """Mirror a register write at `width`.  `full_reference` is a
        64-bit register value whose bits above `width` match the
        register after the write (sub-register writes preserve them);
        `low_value` is the concrete written value, used when the
        expression side is concrete but the parent register is not."""
        if width == 64:
            if value is not None:
                ctx.regs[reg] = value
            else:
                ctx.regs.pop(reg, None)
            return
        if width == 32:
            if value is not None:
                ctx.regs[reg] = E.zero_extend(32, value)
            else:
                ctx.regs.pop(reg, None)
            return
        parent = ctx.regs.get(reg)
        if value is None and parent is None:
            return
        upper = (E.extract(63, width, parent) if parent is not None
                 else E.const(64 - width, full_reference >> width))
        low = value if value is not None else E.const(width, low_value)
        merged = E.concat(upper, low)
        if merged.symbolic:
            ctx.regs[reg] = merged
        else:
            ctx.regs.pop(reg, None)

    # ------------------------------------------------------------------
    # ALU mirroring

    def _mirror_alu(self, ctx, instr, values):
        op = instr.opcode
        width = instr.width
        mask = isa.width_mask(width)
        unary = op in (Opcode.NOT, Opcode.NEG)
        a_c = values[0][0] & mask
        a_e = self._operand_src(ctx, instr, 0, width, values)
        if unary:
            b_c = 0
            b_e = None
        else:
            b_c = values[1][0] & mask
            b_e = self._operand_src(ctx, instr, 1, width, values)

        if a_e is None and b_e is None:
            result = None
        else:
            ae = a_e if a_e is not None else E.const(width, a_c)
            be = b_e if b_e is not None else E.const(width, b_c)
            result = self._alu_expr(op, width, ae, be)

        if op in isa.FLAGS_WRITTEN:
            if result is None:
                for flag in isa.FLAGS_WRITTEN[op]:
                    ctx.flags.pop(flag, None)
            else:
                self._flag_exprs(ctx, op, width, ae, be, result)

        if op in (Opcode.CMP, Opcode.TEST):
            return
        res_c = alu_result(op, width, a_c, b_c)
        self._write_dest(ctx, instr, 0, width, result, values,
                         low_value=res_c)

    def _alu_expr(self, op, width, a, b):
        if op is Opcode.ADD:
            return E.add(a, b)
        if op in (Opcode.SUB, Opcode.CMP):
            return E.sub(a, b)
        if op is Opcode.MUL:
            return E.mul(a, b)
        if op in (Opcode.AND, Opcode.TEST):
            return E.and_(a, b)
        if op is Opcode.OR:
            return E.or_(a, b)
        if op is Opcode.XOR:
            return E.xor(a, b)
        if op is Opcode.NOT:
            return E.not_(a)
        if op is Opcode.NEG:
            return E.neg(a)
        count = E.and_(b, E.const(width, width - 1))
        if op is Opcode.SHL:
            return E.shl(a, count)
        if op is Opcode.SHR:
            return E.lshr(a, count)
        return E.ashr(a, count)

    def _set_flag(self, ctx, flag, e):
        if e is not None and e.symbolic:
            ctx.flags[flag] = e
        else:
            ctx.flags.pop(flag, None)

    def _flag_exprs(self, ctx, op, width, a, b, result):
        """Flag expressions matching the interpreter's concrete rules."""
        top = width - 1
        self._set_flag(ctx, ZF, E.eq(result, E.const(width, 0)))
        self._set_flag(ctx, SF, E.extract(top, top, result))
        if op is Opcode.ADD:
            sa = E.extract(top, top, a)
            sb = E.extract(top, top, b)
            sr = E.extract(top, top, result)
            self._set_flag(ctx, CF, E.ult(result, a))
            self._set_flag(ctx, OF, E.band(E.eq(sa, sb), E.ne(sr, sa)))
        elif op in (Opcode.SUB, Opcode.CMP):
            sa = E.extract(top, top, a)
            sb = E.extract(top, top, b)
            sr = E.extract(top, top, result)
            self._set_flag(ctx, CF, E.ult(a, b))
            self._set_flag(ctx, OF, E.band(E.ne(sa, sb), E.ne(sr, sa)))
        elif op in (Opcode.SHL, Opcode.SHR, Opcode.SAR):
            # Carry holds the last bit shifted out; a zero count makes
            # the shl formula pick bit zero and the others wrap to the
            # top bit, exactly as the interpreter computes it.
            wm = E.const(width, width - 1)
            count = E.and_(b, wm)
            if op is Opcode.SHL:
                amount = E.and_(E.sub(E.const(width, width), count), wm)
            else:
                amount = E.and_(E.sub(count, E.const(width, 1)), wm)
            self._set_flag(ctx, CF, E.extract(0, 0, E.lshr(a, amount)))
            self._set_flag(ctx, OF, None)
        else:  # and/or/xor/test/neg clear carry and overflow
            self._set_flag(ctx, CF, None)
            self._set_flag(ctx, OF, None)

    # ------------------------------------------------------------------
    # control flow

    def _control(self, ctx, event):
        instr = event.instruction
        op = instr.opcode
        if op in isa.CONDITIONAL_JUMPS:
            self._conditional(ctx, event)
        elif op is Opcode.JMP:
            if not isinstance(instr.explicit[0], ImmOp):
                self._indirect(ctx, event)
        elif op is Opcode.SPAWN:
            # The child starts from a copy of the parent's registers
            # and flags, so it inherits the expressions too; the parent
            # then receives the concrete child tid.
            child_tid = event.values[0][0]
            self.contexts[child_tid] = _Context(ctx.regs, ctx.flags)
            ctx.regs.pop(instr.explicit[0].reg, None)
        # join, yield, and exit leave no symbolic trace

    def _conditional(self, ctx, event):
        instr = event.instruction
        op = instr.opcode
        flags_read = isa.FLAGS_READ[op]
        flag_slots = event.values[len(instr.explicit):]
        bits = {f: slot[0] for f, slot in zip(flags_read, flag_slots)}

        vector = [0, 0, 0, 0]
        for f, bit in bits.items():
            vector[f] = bit
        taken = bool(branch_taken(op, vector))

        pos = self.trace_pos
        self.trace_pos += 1

        def flag(f):
            e = ctx.flags.get(f)
            return e if e is not None else E.const(1, bits[f])

        path_cond = _COND_BUILDERS[op](flag)
        if not path_cond.symbolic:
            return
        cond = path_cond if taken else E.bnot(path_cond)
        self._check_on_path(cond, instr.address)
        target = instr.explicit[0].value
        fallthrough = (instr.address + 1) & MASK64
        self.path.append(PathConstraint(
            site=instr.address, kind="conditional", opcode=op, cond=cond,
            taken=taken, trace_pos=pos, tid=self.current_tid,
            next_pc=target if taken else fallthrough,
            inverted_target=fallthrough if taken else target,
            alt_targets=()))

    def _indirect(self, ctx, event):
        instr = event.instruction
        operand = instr.explicit[0]
        slot = event.values[0]
        pos = self.trace_pos
        self.trace_pos += 1

        ptr_expr = None
        if isinstance(operand, RegOp):
            target = slot[0] & MASK64
            value_expr = ctx.regs.get(operand.reg)
            if self.jump_tables:
                found = jumptab.locate_table_load(ctx.journal, operand.reg)
                if found is not None:
                    load_event, ptr_expr = found
                    accessed = load_event.values[1][0]
                    load_width = load_event.instruction.width
        else:
            target = slot[1] & MASK64
            value_expr = self._memory_value(slot[0], 64, slot[1])
            if self.jump_tables:
                ptr_expr = self._address_expr(ctx, operand, slot)
                accessed = slot[0]
                load_width = 64

        if ptr_expr is not None:
            table = jumptab.recover_table(
                self.initial_mem, accessed, load_width, target,
                self.code_range, self.max_table_size)
            if table is not None:
                cond, alts = jumptab.build_branch_condition(
                    table, ptr_expr, target)
                self.stats.tables += 1
                self._check_on_path(cond, instr.address)
                self.path.append(PathConstraint(
                    site=instr.address, kind="indirect", opcode=Opcode.JMP,
                    cond=cond, taken=None, trace_pos=pos,
                    tid=self.current_tid, next_pc=target,
                    inverted_target=None, alt_targets=alts))
                return
        if value_expr is not None or ptr_expr is not None:
            self.stats.concretizations += 1

    def _check_on_path(self, cond, site):
        if self.assignment is None:
            return
        if E.eval(cond, self.assignment) != 1:
            raise MirrorDivergence(
                "recorded condition is false on the driving input "
                "(branch at 0x%x)" % site)
