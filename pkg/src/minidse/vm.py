"""Concrete interpreter for the mini instruction set.

Execution model:

  - Eight 64-bit registers per thread, four flag bits, a shared flat
    byte-addressed memory initialized from the program's data image.
    Only addresses covered by the data image are mapped; touching
    anything else is a memory trap.
  - Cooperative multithreading under a deterministic round robin
    scheduler with a fixed instruction quantum.  spawn copies the
    parent's registers and flags into the child and stores the child's
    thread id in the destination register; join blocks until the target
    thread has exited; the program ends when thread 0 exits.
  - One input file, preopened by content: open returns a fresh
    descriptor (3, 4, ...) at position 0 over the shared image whose
    size is fixed by the seed.  read copies file bytes into memory and
    write copies memory bytes over the file image; both report the
    transferred length in r0.  Reads clip at end of file; writes past
    the end are an i/o trap.  Descriptors 1 and 2 collect stdout and
    stderr.  exit ends the calling thread.
  - Total instruction budget; exceeding it is a trap, as are unmapped
    memory, control transfer outside code, unknown descriptors or file
    ranges, join on a bad thread id, and an all-blocked thread set.

Every executed instruction is reported as an event (gated until the
first input read; see events module).  A join attempt that blocks does
not count as executed; the instruction reruns when the thread wakes.

Arithmetic semantics are the usual two's complement ones.  Shift
counts are masked to the operation width.  Flag behavior by group:
add/sub/cmp set ZF SF CF OF from the result, the bitwise group and neg
set ZF SF and clear CF OF, shifts set ZF SF, put the last bit shifted
out in CF (count folded mod width first) and clear OF, mul/not/mov
leave flags alone.  8 and 16 bit register writes preserve the upper
bits; 32 bit writes zero the upper half.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import events as ev
from . import isa
from .isa import (
    CF, MASK64, OF, SF, ZF, Access, ImmOp, MemOp, Opcode, RegOp, width_mask,
)

DEFAULT_QUANTUM = 64
DEFAULT_BUDGET = 10_000_000

# An output write longer than this is treated as an i/o trap rather
# than an attempt to materialize it.
MAX_IO_LENGTH = 1 << 20

ST_EXIT = "exit"
ST_TRAP_MEM = "trap-mem"
ST_TRAP_IO = "trap-io"
ST_TRAP_JUMP = "trap-jump"
ST_TRAP_THREAD = "trap-thread"
ST_TRAP_DEADLOCK = "trap-deadlock"
ST_TRAP_BUDGET = "trap-budget"


class VmError(Exception):
    """Programming error in how the machine was driven, not a trap."""


class _Trap(Exception):
    def __init__(self, status):
        self.status = status


class _ProgramExit(Exception):
    def __init__(self, code):
        self.code = code


def _msb(value, width):
    return (value >> (width - 1)) & 1


# Branch predicates over the flag vector, shared with the verifier.
BRANCH_PREDICATES = {
    Opcode.JZ: lambda f: f[ZF],
    Opcode.JNZ: lambda f: 1 - f[ZF],
    Opcode.JL: lambda f: f[SF] ^ f[OF],
    Opcode.JGE: lambda f: 1 - (f[SF] ^ f[OF]),
    Opcode.JLE: lambda f: f[ZF] | (f[SF] ^ f[OF]),
    Opcode.JG: lambda f: (1 - f[ZF]) & (1 - (f[SF] ^ f[OF])),
    Opcode.JB: lambda f: f[CF],
    Opcode.JAE: lambda f: 1 - f[CF],
    Opcode.JBE: lambda f: f[CF] | f[ZF],
    Opcode.JA: lambda f: (1 - f[CF]) & (1 - f[ZF]),
}


def branch_taken(opcode, flags):
    return BRANCH_PREDICATES[opcode](flags)


def alu_result(op, width, a, b):
    """Concrete ALU result at `width`.  Inputs must already be masked
    to the width; flag effects are the interpreter's business."""
    mask = width_mask(width)
    if op is Opcode.ADD:
        return (a + b) & mask
    if op in (Opcode.SUB, Opcode.CMP):
        return (a - b) & mask
    if op is Opcode.MUL:
        return (a * b) & mask
    if op in (Opcode.AND, Opcode.TEST):
        return a & b
    if op is Opcode.OR:
        return a | b
    if op is Opcode.XOR:
        return a ^ b
    if op is Opcode.NOT:
        return ~a & mask
    if op is Opcode.NEG:
        return (-a) & mask
    count = b & (width - 1)
    if op is Opcode.SHL:
        return (a << count) & mask
    if op is Opcode.SHR:
        return a >> count
    if op is Opcode.SAR:
        signed = a - (1 << width) if _msb(a, width) else a
        return (signed >> count) & mask
    raise ValueError("not an ALU opcode: %r" % op)


def schedule_next(threads, current):
    """Round robin choice: the first runnable thread after the current
    one, wrapping around, the current thread itself as last resort.
    None when no thread can run."""
    n = len(threads)
    for step in range(1, n + 1):
        pick = (current + step) % n
        if threads[pick].status == "run":
            return pick
    return None


class _Thread:
    __slots__ = ("tid", "regs", "flags", "pc", "status", "waiting_for",
                 "executed")

    def __init__(self, tid, pc):
        self.tid = tid
        self.regs = [0] * isa.NUM_REGS
        self.flags = [0, 0, 0, 0]
        self.pc = pc
        self.status = "run"  # run | blocked | done
        self.waiting_for = None
        self.executed = 0


@dataclass
class VmStats:
    executed: int = 0
    switches: int = 0
    threads: int = 1
    per_thread: dict = field(default_factory=dict)
    file_reads: int = 0
    file_writes: int = 0


@dataclass
class RunResult:
    status: str
    exit_code: int | None
    events: list | None
    branch_trace: list  # (site address, next pc) per conditional/indirect jump
    first_read_branch_pos: int | None
    stdout: bytes
    stderr: bytes
    file_image: bytes
    stats: VmStats


class MiniVm:
    """One deterministic run of a program over one input file image."""

    def __init__(self, program, seed, quantum=DEFAULT_QUANTUM,
                 budget=DEFAULT_BUDGET, sink=None, keep_events=None):
        if quantum < 1:
            raise VmError("quantum must be at least 1")
        self.program = program
        self.memory = program.initial_memory()
        self.image = bytearray(seed)
        self.quantum = quantum
        self.budget = budget
        self.sink = sink
        self.keep_events = keep_events if keep_events is not None else sink is None
        self.events = [] if self.keep_events else None

        self.threads = [_Thread(0, isa.CODE_BASE)]
        self.current = 0
        self.fd_pos = {}
        self.next_fd = 3
        self.stdout = bytearray()
        self.stderr = bytearray()
        self.branch_trace = []
        self.first_read_branch_pos = None
        self.gate_open = False
        self.executed = 0
        self.switches = 0
        self.file_reads = 0
        self.file_writes = 0
        self.pending = []  # events built while executing one instruction

    # The event gate: instruction events only flow once input has been
    # read, everything else always flows.
    def _emit(self, event):
        if isinstance(event, ev.InstructionEvent) and not self.gate_open:
            return
        if isinstance(event, ev.ReadSymbolicInput) and not self.gate_open:
            self.gate_open = True
            self.first_read_branch_pos = len(self.branch_trace)
        if self.keep_events:
            self.events.append(event)
        if self.sink is not None:
            self.sink(event)

    def run(self):
        try:
            self._loop()
            raise AssertionError("unreachable")
        except _Trap as trap:
            status, code = trap.status, None
        except _ProgramExit as done:
            status, code = ST_EXIT, done.code
            self._emit(ev.ExitEvent(code))
        per_thread = {t.tid: t.executed for t in self.threads}
        stats = VmStats(self.executed, self.switches, len(self.threads),
                        per_thread, self.file_reads, self.file_writes)
        return RunResult(status, code, self.events, self.branch_trace,
                         self.first_read_branch_pos, bytes(self.stdout),
                         bytes(self.stderr), bytes(self.image), stats)

    def _loop(self):
        quantum_left = self.quantum
        while True:
            thread = self.threads[self.current]
            if thread.status != "run":
                self._switch_or_deadlock()
                quantum_left = self.quantum
                continue
            if self.executed >= self.budget:
                raise _Trap(ST_TRAP_BUDGET)
            reason = self._step(thread)
            if reason != "block":
                self.executed += 1
                thread.executed += 1
                quantum_left -= 1
            if reason is not None or quantum_left == 0:
                nxt = schedule_next(self.threads, self.current)
                if nxt is None:
                    if thread.status == "run":
                        quantum_left = self.quantum
                        continue
                    raise _Trap(ST_TRAP_DEADLOCK)
                if nxt != self.current:
                    self._emit(ev.ThreadSwitch(self.current, nxt))
                    self.switches += 1
                    self.current = nxt
                quantum_left = self.quantum

    def _switch_or_deadlock(self):
        nxt = schedule_next(self.threads, self.current)
        if nxt is None or nxt == self.current:
            raise _Trap(ST_TRAP_DEADLOCK)
        self._emit(ev.ThreadSwitch(self.current, nxt))
        self.switches += 1
        self.current = nxt

    # Memory access.  Mapped means covered by the program's data image;
    # everything else, including code addresses, traps.
    def _load_bytes(self, addr, count):
        mem = self.memory
        out = 0
        for i in range(count):
            a = (addr + i) & MASK64
            if a not in mem:
                raise _Trap(ST_TRAP_MEM)
            out |= mem[a] << (8 * i)
        return out

    def _store_bytes(self, addr, count, value):
        mem = self.memory
        addrs = []
        for i in range(count):
            a = (addr + i) & MASK64
            if a not in mem:
                raise _Trap(ST_TRAP_MEM)
            addrs.append(a)
        for i, a in enumerate(addrs):
            mem[a] = (value >> (8 * i)) & 0xFF

    def _effective_address(self, op, regs):
        ea = op.disp
        if op.base is not None:
            ea += regs[op.base]
        if op.index is not None:
            ea += regs[op.index] * op.scale
        return ea & MASK64

    def _write_reg(self, thread, reg, value, width):
        if width == 64:
            thread.regs[reg] = value & MASK64
        elif width == 32:
            thread.regs[reg] = value & 0xFFFFFFFF
        else:
            mask = width_mask(width)
            thread.regs[reg] = (thread.regs[reg] & ~mask & MASK64) | (value & mask)

    def _step(self, thread):
        """Execute one instruction for `thread`.  Returns None to keep
        running, or "yield" | "block" | "done" when the scheduler must
        pick again."""
        instr = self.program.instruction_at(thread.pc)
        if instr is None:
            raise _Trap(ST_TRAP_JUMP)
        op = instr.opcode
        width = instr.width
        mask = width_mask(width)
        regs = thread.regs
        self.pending = []

        # Pre-execution capture: operand values, effective addresses,
        # and the memory reads the instruction performs.
        acc = isa.access(op)
        slot_values = []
        src = []  # operand value at instruction width, None for pure writes
        eas = {}
        for pos, operand in enumerate(instr.explicit):
            a = acc[pos]
            if isinstance(operand, RegOp):
                slot_values.append([regs[operand.reg], 0, 0, 0])
                src.append(regs[operand.reg] & mask)
            elif isinstance(operand, ImmOp):
                slot_values.append([operand.value, 0, 0, 0])
                src.append(operand.value & mask)
            else:
                ea = self._effective_address(operand, regs)
                eas[pos] = ea
                base_val = regs[operand.base] if operand.base is not None else 0
                index_val = regs[operand.index] if operand.index is not None else 0
                if a is Access.R:
                    value = self._load_bytes(ea, width // 8)
                    src.append(value)
                else:
                    value = 0  # filled after execution for stores
                    src.append(None)
                slot_values.append([ea, value, base_val, index_val])

        next_pc = (thread.pc + 1) & MASK64
        reason = None

        if op is Opcode.MOV:
            self._write_reg(thread, instr.explicit[0].reg, src[1], width)
        elif op is Opcode.LOAD:
            self._write_reg(thread, instr.explicit[0].reg, src[1], width)
        elif op is Opcode.STORE:
            self._store_bytes(eas[1], width // 8, src[0])
            slot_values[1][1] = src[0]
        elif op is Opcode.ADDR:
            value = eas[1] & mask
            self._write_reg(thread, instr.explicit[0].reg, value, width)
        elif op in _ALU_BINARY:
            result = self._alu(thread, op, width, src[0], src[1])
            self._write_reg(thread, instr.explicit[0].reg, result, width)
        elif op in (Opcode.CMP, Opcode.TEST):
            self._alu(thread, Opcode.SUB if op is Opcode.CMP else Opcode.AND,
                      width, src[0], src[1])
        elif op in (Opcode.NOT, Opcode.NEG):
            a = src[0]
            if op is Opcode.NOT:
                result = ~a & mask
            else:
                result = (-a) & mask
                thread.flags[ZF] = int(result == 0)
                thread.flags[SF] = _msb(result, width)
                thread.flags[CF] = 0
                thread.flags[OF] = 0
            self._write_reg(thread, instr.explicit[0].reg, result, width)
        elif op in isa.CONDITIONAL_JUMPS:
            taken = branch_taken(op, thread.flags)
            target = instr.explicit[0].value
            next_pc = target if taken else next_pc
            self.branch_trace.append((instr.address, next_pc))
        elif op is Opcode.JMP:
            operand = instr.explicit[0]
            next_pc = src[0]
            if not isinstance(operand, ImmOp):
                self.branch_trace.append((instr.address, next_pc))
        elif op is Opcode.SPAWN:
            child = _Thread(len(self.threads), instr.explicit[1].value)
            child.regs = list(regs)
            child.flags = list(thread.flags)
            self.threads.append(child)
            self._write_reg(thread, instr.explicit[0].reg, child.tid, 64)
        elif op is Opcode.JOIN:
            target = src[0]
            if not 0 <= target < len(self.threads):
                raise _Trap(ST_TRAP_THREAD)
            other = self.threads[target]
            if other.status != "done":
                thread.status = "blocked"
                thread.waiting_for = target
                return "block"
        elif op is Opcode.YIELD:
            reason = "yield"
        elif op is Opcode.OPEN:
            fd = self.next_fd
            self.next_fd += 1
            self.fd_pos[fd] = 0
            self._write_reg(thread, instr.explicit[0].reg, fd, 64)
        elif op is Opcode.READ:
            self._sys_read(thread, src[0], src[1], src[2])
        elif op is Opcode.WRITE:
            self._sys_write(thread, src[0], src[1], src[2])
        elif op is Opcode.EXIT:
            code = src[0] & 0xFFFFFFFF
            if thread.tid == 0:
                self.executed += 1
                thread.executed += 1
                self._finish_instruction(instr, slot_values, thread)
                raise _ProgramExit(code)
            thread.status = "done"
            for other in self.threads:
                if other.status == "blocked" and other.waiting_for == thread.tid:
                    other.status = "run"
                    other.waiting_for = None
            reason = "done"
        else:
            raise AssertionError("unhandled opcode %r" % op)

        thread.pc = next_pc
        self._finish_instruction(instr, slot_values, thread)
        return reason

    def _finish_instruction(self, instr, slot_values, thread):
        # Pure writes snapshot the value after execution; read/write
        # operands keep the value from before.
        acc = isa.access(instr.opcode)
        for pos, operand in enumerate(instr.explicit):
            if isinstance(operand, RegOp) and acc[pos] is Access.W:
                slot_values[pos][0] = thread.regs[operand.reg]
        for reg, _ in isa.IMPLICIT_REGS.get(instr.opcode, ()):
            slot_values.append([thread.regs[reg], 0, 0, 0])
        for flag in isa.FLAGS_READ.get(instr.opcode, ()):
            slot_values.append([thread.flags[flag], 0, 0, 0])
        for event in self.pending:
            self._emit(event)
        self.pending = []
        self._emit(ev.InstructionEvent(
            instr, tuple(tuple(slot) for slot in slot_values)))

    def _alu(self, thread, op, width, a, b):
        result = alu_result(op, width, a, b)
        if op is Opcode.MUL:
            return result  # no flag effects
        mask = width_mask(width)
        flags = thread.flags
        if op is Opcode.ADD:
            flags[CF] = int(a + b > mask)
            flags[OF] = int(_msb(a, width) == _msb(b, width)
                            and _msb(result, width) != _msb(a, width))
        elif op is Opcode.SUB:
            flags[CF] = int(a < b)
            flags[OF] = int(_msb(a, width) != _msb(b, width)
                            and _msb(result, width) != _msb(a, width))
        elif op in (Opcode.AND, Opcode.OR, Opcode.XOR):
            flags[CF] = 0
            flags[OF] = 0
        else:  # shifts; count folds mod width, CF holds last bit out
            count = b & (width - 1)
            if op is Opcode.SHL:
                flags[CF] = (a >> ((width - count) & (width - 1))) & 1
            else:
                flags[CF] = (a >> ((count - 1) & (width - 1))) & 1
            flags[OF] = 0
        flags[ZF] = int(result == 0)
        flags[SF] = _msb(result, width)
        return result

    def _sys_read(self, thread, fd, buf, length):
        if fd not in self.fd_pos:
            raise _Trap(ST_TRAP_IO)
        pos = self.fd_pos[fd]
        n = min(length, len(self.image) - pos)
        if n < 0:
            n = 0
        for i in range(n):
            a = (buf + i) & MASK64
            if a not in self.memory:
                raise _Trap(ST_TRAP_MEM)
        for i in range(n):
            self.memory[(buf + i) & MASK64] = self.image[pos + i]
        self.fd_pos[fd] = pos + n
        self.file_reads += 1
        self._write_reg(thread, 0, n, 64)
        if n:
            self.pending.append(ev.ReadSymbolicInput(buf & MASK64, n, pos))

    def _sys_write(self, thread, fd, buf, length):
        if length > MAX_IO_LENGTH:
            raise _Trap(ST_TRAP_IO)
        data = bytearray()
        for i in range(length):
            a = (buf + i) & MASK64
            if a not in self.memory:
                raise _Trap(ST_TRAP_MEM)
            data.append(self.memory[a])
        if fd == 1:
            self.stdout += data
        elif fd == 2:
            self.stderr += data
        elif fd in self.fd_pos:
            pos = self.fd_pos[fd]
            if pos + length > len(self.image):
                raise _Trap(ST_TRAP_IO)
            self.image[pos:pos + length] = data
            self.fd_pos[fd] = pos + length
            self.file_writes += 1
            if length:
                self.pending.append(
                    ev.WriteSymbolicInput(buf & MASK64, length, pos))
        else:
            raise _Trap(ST_TRAP_IO)
        self._write_reg(thread, 0, length, 64)


_ALU_BINARY = {Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.AND, Opcode.OR,
               Opcode.XOR, Opcode.SHL, Opcode.SHR, Opcode.SAR}


def run_program(program, seed, **kwargs):
    """Run to completion, collecting events unless a sink is given."""
    return MiniVm(program, seed, **kwargs).run()
