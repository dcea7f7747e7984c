"""Instruction set model for the mini virtual machine.

Eight 64-bit general registers r0..r7 with byte/word/dword views, four
arithmetic flags, a flat byte-addressed data space, and a code space
starting at CODE_BASE with one address unit per instruction.  This module
defines the opcode table, operand shapes, per-operand access
classification, flag usage tables, and the binary instruction codec
shared by the program container and the event stream.

Width is a property of the instruction (suffix .b/.w/.d/.q, default .q),
not of the register operand: register view names such as r3d are surface
syntax that the assembler folds into the instruction width.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

CODE_BASE = 0x1000
NUM_REGS = 8
MASK64 = (1 << 64) - 1

# Flag identifiers, used as indices everywhere flags are stored.
ZF, SF, CF, OF = 0, 1, 2, 3
FLAG_NAMES = ("zf", "sf", "cf", "of")

WIDTH_BITS = {"b": 8, "w": 16, "d": 32, "q": 64}
WIDTH_LOG2 = {8: 0, 16: 1, 32: 2, 64: 3}
LOG2_WIDTH = {v: k for k, v in WIDTH_LOG2.items()}

VALID_SCALES = (1, 2, 4, 8)


def width_mask(width):
    return (1 << width) - 1


class Opcode(enum.IntEnum):
    MOV = 0x01
    LOAD = 0x02
    STORE = 0x03
    ADDR = 0x04

    ADD = 0x10
    SUB = 0x11
    MUL = 0x12
    AND = 0x13
    OR = 0x14
    XOR = 0x15
    NOT = 0x16
    NEG = 0x17
    SHL = 0x18
    SHR = 0x19
    SAR = 0x1A

    CMP = 0x20
    TEST = 0x21

    JZ = 0x30
    JNZ = 0x31
    JL = 0x32
    JLE = 0x33
    JG = 0x34
    JGE = 0x35
    JB = 0x36
    JBE = 0x37
    JA = 0x38
    JAE = 0x39
    JMP = 0x3F

    SPAWN = 0x40
    JOIN = 0x41
    YIELD = 0x42

    OPEN = 0x50
    READ = 0x51
    WRITE = 0x52
    EXIT = 0x53


MNEMONICS = {op.name.lower(): op for op in Opcode}


class Access(enum.Enum):
    R = "r"
    W = "w"
    RW = "rw"
    # Address-only: the effective address is computed but memory is not
    # touched (the addr instruction).
    ADDR = "addr"


@dataclass(frozen=True)
class RegOp:
    reg: int


@dataclass(frozen=True)
class ImmOp:
    value: int  # masked to 64 bits


@dataclass(frozen=True)
class MemOp:
    base: int | None
    index: int | None
    scale: int
    disp: int  # signed


@dataclass(frozen=True)
class Instruction:
    address: int
    opcode: Opcode
    width: int  # operation width in bits
    explicit: tuple


# Operand signatures: per position, the set of allowed operand kinds and
# the access the instruction performs on that position.
_R = (frozenset({"reg"}), Access.R)
_W = (frozenset({"reg"}), Access.W)
_RW = (frozenset({"reg"}), Access.RW)
_RI = (frozenset({"reg", "imm"}), Access.R)
_IMM = (frozenset({"imm"}), Access.R)
_MEM_R = (frozenset({"mem"}), Access.R)
_MEM_W = (frozenset({"mem"}), Access.W)
_MEM_A = (frozenset({"mem"}), Access.ADDR)
_ANY_R = (frozenset({"reg", "imm", "mem"}), Access.R)

_ALU2 = (_RW, _RI)

SIGNATURES = {
    Opcode.MOV: (_W, _RI),
    Opcode.LOAD: (_W, _MEM_R),
    Opcode.STORE: (_RI, _MEM_W),
    Opcode.ADDR: (_W, _MEM_A),
    Opcode.ADD: _ALU2,
    Opcode.SUB: _ALU2,
    Opcode.MUL: _ALU2,
    Opcode.AND: _ALU2,
    Opcode.OR: _ALU2,
    Opcode.XOR: _ALU2,
    Opcode.NOT: (_RW,),
    Opcode.NEG: (_RW,),
    Opcode.SHL: _ALU2,
    Opcode.SHR: _ALU2,
    Opcode.SAR: _ALU2,
    Opcode.CMP: (_R, _RI),
    Opcode.TEST: (_R, _RI),
    Opcode.JZ: (_IMM,),
    Opcode.JNZ: (_IMM,),
    Opcode.JL: (_IMM,),
    Opcode.JLE: (_IMM,),
    Opcode.JG: (_IMM,),
    Opcode.JGE: (_IMM,),
    Opcode.JB: (_IMM,),
    Opcode.JBE: (_IMM,),
    Opcode.JA: (_IMM,),
    Opcode.JAE: (_IMM,),
    Opcode.JMP: (_ANY_R,),
    Opcode.SPAWN: (_W, _IMM),
    Opcode.JOIN: (_RI,),
    Opcode.YIELD: (),
    Opcode.OPEN: (_W,),
    Opcode.READ: (_RI, _R, _RI),
    Opcode.WRITE: (_RI, _R, _RI),
    Opcode.EXIT: (_RI,),
}


def access(opcode):
    """Access classification for each explicit operand position."""
    return tuple(a for _, a in SIGNATURES[opcode])


CONDITIONAL_JUMPS = frozenset({
    Opcode.JZ, Opcode.JNZ, Opcode.JL, Opcode.JLE, Opcode.JG,
    Opcode.JGE, Opcode.JB, Opcode.JBE, Opcode.JA, Opcode.JAE,
})

JUMPS = CONDITIONAL_JUMPS | {Opcode.JMP}

# Instructions that end a basic block for slicing purposes: anything that
# can transfer control or switch threads.
BLOCK_ENDERS = JUMPS | {
    Opcode.SPAWN, Opcode.JOIN, Opcode.YIELD, Opcode.EXIT,
}

WIDTH_SUFFIX_OK = frozenset({
    Opcode.MOV, Opcode.LOAD, Opcode.STORE, Opcode.ADDR,
    Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.AND, Opcode.OR,
    Opcode.XOR, Opcode.NOT, Opcode.NEG, Opcode.SHL, Opcode.SHR,
    Opcode.SAR, Opcode.CMP, Opcode.TEST,
})

SYSCALLS = frozenset({Opcode.OPEN, Opcode.READ, Opcode.WRITE, Opcode.EXIT})

# Flags each conditional jump reads.  Only jumps read flags.
FLAGS_READ = {
    Opcode.JZ: (ZF,),
    Opcode.JNZ: (ZF,),
    Opcode.JL: (SF, OF),
    Opcode.JGE: (SF, OF),
    Opcode.JLE: (ZF, SF, OF),
    Opcode.JG: (ZF, SF, OF),
    Opcode.JB: (CF,),
    Opcode.JAE: (CF,),
    Opcode.JBE: (CF, ZF),
    Opcode.JA: (CF, ZF),
}

# Flags each instruction writes.  add/sub/cmp produce all four from the
# arithmetic; the bitwise group and shifts clear what they do not
# compute; neg derives ZF/SF and clears CF/OF; mul and not leave flags
# alone.
_ARITH_FLAGS = (ZF, SF, CF, OF)
FLAGS_WRITTEN = {
    Opcode.ADD: _ARITH_FLAGS,
    Opcode.SUB: _ARITH_FLAGS,
    Opcode.CMP: _ARITH_FLAGS,
    Opcode.AND: _ARITH_FLAGS,
    Opcode.OR: _ARITH_FLAGS,
    Opcode.XOR: _ARITH_FLAGS,
    Opcode.TEST: _ARITH_FLAGS,
    Opcode.SHL: _ARITH_FLAGS,
    Opcode.SHR: _ARITH_FLAGS,
    Opcode.SAR: _ARITH_FLAGS,
    Opcode.NEG: _ARITH_FLAGS,
}

# Implicit register operands, by opcode: (register, access).  The read
# and write syscalls deposit their result length in r0.
IMPLICIT_REGS = {
    Opcode.READ: ((0, Access.W),),
    Opcode.WRITE: ((0, Access.W),),
}


def snapshot_slots(instr):
    """Ordered layout of the value snapshot attached to instruction events.

    One slot per explicit operand, then one per implicit register result,
    then one per flag the opcode reads.  Producer and consumer iterate
    this same order; the event payload carries only the raw values.
    """
    slots = [("op", i) for i in range(len(instr.explicit))]
    for reg, _ in IMPLICIT_REGS.get(instr.opcode, ()):
        slots.append(("reg", reg))
    for flag in FLAGS_READ.get(instr.opcode, ()):
        slots.append(("flag", flag))
    return slots


# Binary instruction codec.  Little-endian throughout:
#   u64 address, u8 opcode, u8 log2(width bytes), u8 operand count,
#   then per operand a tag byte (0 reg, 1 imm, 2 mem) and its payload.
_HEADER = struct.Struct("<QBBB")
_MEM_BODY = struct.Struct("<BBBBq")
_U64 = struct.Struct("<Q")


def encode_instruction(instr):
    out = bytearray(_HEADER.pack(instr.address, instr.opcode,
                                 WIDTH_LOG2[instr.width],
                                 len(instr.explicit)))
    for op in instr.explicit:
        if isinstance(op, RegOp):
            out.append(0)
            out.append(op.reg)
        elif isinstance(op, ImmOp):
            out.append(1)
            out += _U64.pack(op.value & MASK64)
        elif isinstance(op, MemOp):
            out.append(2)
            present = (op.base is not None) | ((op.index is not None) << 1)
            out += _MEM_BODY.pack(present,
                                  0 if op.base is None else op.base,
                                  0 if op.index is None else op.index,
                                  op.scale, op.disp)
        else:
            raise TypeError("unknown operand type %r" % (op,))
    return bytes(out)


def decode_instruction(data, offset=0):
    """Decode one instruction, returning (instruction, next offset).

    Raises ValueError on truncated or malformed input.
    """
    try:
        address, opcode_v, wlog, count = _HEADER.unpack_from(data, offset)
        offset += _HEADER.size
        opcode = Opcode(opcode_v)
        width = LOG2_WIDTH[wlog]
        ops = []
        for _ in range(count):
            tag = data[offset]
            offset += 1
            if tag == 0:
                reg = data[offset]
                offset += 1
                if reg >= NUM_REGS:
                    raise ValueError("register index out of range")
                ops.append(RegOp(reg))
            elif tag == 1:
                (value,) = _U64.unpack_from(data, offset)
                offset += _U64.size
                ops.append(ImmOp(value))
            elif tag == 2:
                present, base, index, scale, disp = _MEM_BODY.unpack_from(
                    data, offset)
                offset += _MEM_BODY.size
                if scale not in VALID_SCALES:
                    raise ValueError("bad scale %d" % scale)
                ops.append(MemOp(base if present & 1 else None,
                                 index if present & 2 else None,
                                 scale, disp))
            else:
                raise ValueError("bad operand tag %d" % tag)
    except (struct.error, IndexError, KeyError) as exc:
        raise ValueError("truncated or malformed instruction") from exc
    return Instruction(address, opcode, width, tuple(ops)), offset


_SUFFIX = {8: ".b", 16: ".w", 32: ".d", 64: ""}


def format_operand(op):
    if isinstance(op, RegOp):
        return "r%d" % op.reg
    if isinstance(op, ImmOp):
        v = op.value
        return hex(v) if v > 9 else str(v)
    parts = []
    if op.base is not None:
        parts.append("r%d" % op.base)
    if op.index is not None:
        parts.append("r%d*%d" % (op.index, op.scale)
                     if op.scale != 1 else "r%d" % op.index)
    if op.disp or not parts:
        parts.append(hex(op.disp) if op.disp >= 0 else "-" + hex(-op.disp))
    return "[%s]" % " + ".join(parts).replace("+ -", "- ")


def format_instruction(instr):
    """Render an instruction in assembler syntax, for logs and dumps."""
    name = instr.opcode.name.lower()
    if instr.opcode in WIDTH_SUFFIX_OK:
        name += _SUFFIX[instr.width]
    if not instr.explicit:
        return name
    return name + " " + ", ".join(format_operand(op) for op in instr.explicit)
