"""Assembler, instruction codec, and program container tests.

Expected values are hand computed from the documented grammar: code
starts at 0x1000 with one address unit per instruction, data items are
little endian, and label arithmetic is plain integer + and -.
"""

import random

import pytest

from minidse import asm, isa
from minidse.asm import AsmError, ContainerError, Program, assemble
from minidse.isa import (
    CODE_BASE, ImmOp, Instruction, MemOp, Opcode, RegOp,
)


def test_basic_program_layout():
    prog = assemble(
        "        mov r1, 10\n"
        "loop:   sub r1, 1\n"
        "        jnz loop\n"
        "        exit 0\n")
    assert [i.address for i in prog.instructions] == [
        0x1000, 0x1001, 0x1002, 0x1003]
    assert prog.instructions[0] == Instruction(
        0x1000, Opcode.MOV, 64, (RegOp(1), ImmOp(10)))
    assert prog.instructions[2].explicit == (ImmOp(0x1001),)
    assert prog.labels == {"loop": 0x1001}
    assert prog.code_range() == (0x1000, 0x1004)
    assert prog.instruction_at(0x1003).opcode == Opcode.EXIT
    assert prog.instruction_at(0x0FFF) is None
    assert prog.instruction_at(0x1004) is None


def test_width_suffixes_and_views():
    prog = assemble(
        "mov.b r1, 0xFF\n"
        "mov.w r2, r3\n"
        "add.d r4, 1\n"
        "sub r5, r6\n"
        "mov r1d, r2d\n"
        "cmp r3w, 0\n"
        "store.b r1b, [r2]\n")
    widths = [i.width for i in prog.instructions]
    assert widths == [8, 16, 32, 64, 32, 16, 8]
    # views are surface syntax only; operands keep the plain register
    assert prog.instructions[4].explicit == (RegOp(1), RegOp(2))


def test_memory_operand_forms():
    prog = assemble(
        "load r1, [r2]\n"
        "load.b r1, [r2 + 8]\n"
        "store.w r3, [r4 + r5*4]\n"
        "addr r6, [r7*8 + table]\n"
        "load r0, [r1 + r2]\n"
        "load r2, [r1 - 8]\n"
        "store 7, [buf + 16]\n"
        "load r3, [8*r3 + 4]\n"
        "jmp [r1]\n"
        ".data 0x3000\n"
        "table: .zero 64\n"
        "buf: .zero 32\n")
    mems = [i.explicit[-1] for i in prog.instructions]
    assert mems[0] == MemOp(2, None, 1, 0)
    assert mems[1] == MemOp(2, None, 1, 8)
    assert mems[2] == MemOp(4, 5, 4, 0)
    assert mems[3] == MemOp(None, 7, 8, 0x3000)
    assert mems[4] == MemOp(1, 2, 1, 0)
    assert mems[5] == MemOp(1, None, 1, -8)
    assert mems[6] == MemOp(None, None, 1, 0x3050)
    assert mems[7] == MemOp(None, 3, 8, 4)
    assert mems[8] == MemOp(1, None, 1, 0)
    assert prog.instructions[6].explicit[0] == ImmOp(7)


def test_data_directives_and_label_arithmetic():
    prog = assemble(
        ".data 0x2000\n"
        "vals: .byte 1, 0xFF, 'A', '\\n', -1\n"
        "pair: .word vals, end - vals\n"
        "nums: .long -2, 0x12345678\n"
        "big:  .quad end - vals + 2\n"
        "end:\n")
    assert prog.labels == {
        "vals": 0x2000, "pair": 0x2005, "nums": 0x2009,
        "big": 0x2011, "end": 0x2019,
    }
    mem = prog.initial_memory()
    assert [mem[0x2000 + i] for i in range(5)] == [1, 0xFF, 65, 10, 0xFF]
    assert mem[0x2005] == 0x00 and mem[0x2006] == 0x20
    assert mem[0x2007] == 25 and mem[0x2008] == 0
    assert [mem[0x2009 + i] for i in range(4)] == [0xFE, 0xFF, 0xFF, 0xFF]
    assert [mem[0x200D + i] for i in range(4)] == [0x78, 0x56, 0x34, 0x12]
    assert mem[0x2011] == 27
    assert all(mem[0x2012 + i] == 0 for i in range(7))
    assert len(prog.segments) == 1
    start, blob = prog.segments[0]
    assert start == 0x2000 and len(blob) == 0x19


def test_ascii_and_char_escapes():
    prog = assemble(
        ".data 0x2000\n"
        'msg: .ascii "AB\\n\\0"\n'
        "tick: .byte '\\\\', ';', ','\n"
        "len: .quad tick - msg\n")
    mem = prog.initial_memory()
    assert [mem[0x2000 + i] for i in range(4)] == [65, 66, 10, 0]
    assert [mem[0x2004 + i] for i in range(3)] == [92, 59, 44]
    assert mem[0x2007] == 4


def test_comment_and_quote_interaction():
    prog = assemble("mov r1, ';'   ; a real comment, with a comma\n")
    assert prog.instructions[0].explicit[1] == ImmOp(59)


def test_labels_share_lines_and_stack():
    prog = assemble(
        "a: b: mov r1, 1\n"
        "c:\n"
        "   exit 0\n")
    assert prog.labels == {"a": 0x1000, "b": 0x1000, "c": 0x1001}


@pytest.mark.parametrize("source,line,fragment", [
    ("bogus r1, 2", 1, "unknown instruction"),
    ("mov r1", 1, "takes 2 operands"),
    ("yield 1", 1, "takes 0 operands"),
    ("mov 5, r1", 1, "operand 1 of mov must be a register"),
    ("load r1, r2", 1, "operand 2 of load must be a memory operand"),
    ("mov r1, [r2]", 1, "must be an immediate or a register"),
    ("jz r1", 1, "operand 1 of jz must be an immediate"),
    ("spawn r1, r2", 1, "operand 2 of spawn must be an immediate"),
    ("mov.x r1, 2", 1, "unknown width suffix"),
    ("jz.b somewhere", 1, "does not take a width suffix"),
    ("jmp r1d", 1, "register view not allowed"),
    ("mov r1w, r2d", 1, "conflicting operand widths"),
    ("mov.d r1w, 2", 1, "conflicting operand widths"),
    ("nop: mov r1, 1\nnop: exit 0", 2, "duplicate label"),
    ("jmp nowhere", 1, "unknown label"),
    ("r1: exit 0", 1, "shadows a register"),
    ("load r1, [r2 + r3*3]", 1, "scale must be 1, 2, 4 or 8"),
    ("load r1, [r2 + r3 + r4]", 1, "too many registers"),
    ("load r1, [r2*2 + r3*4]", 1, "two scaled registers"),
    ("load r1, [r2b]", 1, "views not allowed in memory"),
    ("load r1, [ - r2]", 1, "cannot subtract a register"),
    ("load r1, []", 1, "empty memory operand"),
    (".data 0x2000\n.byte", 2, "at least one value"),
    (".byte 5", 1, "outside a .data section"),
    (".data 0x2000\n.byte 256", 2, "does not fit in 1 byte"),
    (".data 0x2000\n.word 65536", 2, "does not fit in 2 bytes"),
    (".data 0x2000\n.zero count", 2, "unknown label"),
    (".data 0x2000\nmov r1, 1", 2, "instruction inside a .data"),
    (".data\n", 1, ".data needs an address"),
    (".blob 1", 1, "unknown directive"),
    ('.data 0x2000\n.ascii "oops', 2, "unterminated"),
    ("mov r1, 'ab'", 1, "cannot parse"),
    ("mov r1, 1 +", 1, "empty operand"),
])
def test_errors_carry_line_numbers(source, line, fragment):
    with pytest.raises(AsmError) as err:
        assemble(source)
    assert err.value.line_no == line
    assert fragment in str(err.value)


def test_overlap_detection():
    with pytest.raises(AsmError) as err:
        assemble(".data 0x2000\n.zero 8\n.data 0x2004\n.byte 1")
    assert "overlaps" in str(err.value)
    with pytest.raises(AsmError) as err:
        assemble("mov r1, 1\n.data 0x1000\n.byte 1")
    assert "overlaps" in str(err.value)
    # exact adjacency is fine
    prog = assemble("mov r1, 1\n.data 0x1001\n.byte 9")
    assert prog.initial_memory()[0x1001] == 9


def test_unary_minus_and_plus_fold():
    prog = assemble(
        "mov r1, -1\n"
        "mov r2, 1 - -3\n"
        "mov r3, +5\n")
    vals = [i.explicit[1].value for i in prog.instructions]
    assert vals == [(1 << 64) - 1, 4, 5]


def _random_instruction(rng, address):
    opcode = rng.choice(list(Opcode))
    width = rng.choice([8, 16, 32, 64]) if opcode in isa.WIDTH_SUFFIX_OK else 64
    ops = []
    for allowed, _ in isa.SIGNATURES[opcode]:
        kind = rng.choice(sorted(allowed))
        if kind == "reg":
            ops.append(RegOp(rng.randrange(8)))
        elif kind == "imm":
            ops.append(ImmOp(rng.getrandbits(64)))
        else:
            base = rng.choice([None, rng.randrange(8)])
            index = rng.choice([None, rng.randrange(8)])
            scale = rng.choice([1, 2, 4, 8]) if index is not None else 1
            disp = rng.randrange(-(1 << 40), 1 << 40)
            ops.append(MemOp(base, index, scale, disp))
    return Instruction(address, opcode, width, tuple(ops))


def test_instruction_codec_roundtrip():
    rng = random.Random(20240817)
    for i in range(500):
        instr = _random_instruction(rng, CODE_BASE + i)
        blob = isa.encode_instruction(instr)
        decoded, offset = isa.decode_instruction(blob)
        assert decoded == instr
        assert offset == len(blob)


def test_instruction_codec_rejects_junk():
    good = isa.encode_instruction(
        Instruction(CODE_BASE, Opcode.MOV, 64, (RegOp(1), ImmOp(2))))
    with pytest.raises(ValueError):
        isa.decode_instruction(good[:-3])
    bad_opcode = bytearray(good)
    bad_opcode[8] = 0x7F
    with pytest.raises(ValueError):
        isa.decode_instruction(bytes(bad_opcode))
    bad_tag = bytearray(good)
    bad_tag[11] = 9
    with pytest.raises(ValueError):
        isa.decode_instruction(bytes(bad_tag))


def test_container_roundtrip(tmp_path):
    prog = assemble(
        "start: mov.d r1, 0x41\n"
        "  load.b r2, [r1 + r3*2 - 5]\n"
        "  spawn r4, start\n"
        "  jmp [r4]\n"
        "  exit 0\n"
        ".data 0x4000\n"
        "buf: .zero 16\n"
        ".data 0x5000\n"
        "tab: .quad start, buf\n",
        name="roundtrip.masm")
    path = tmp_path / "prog.mprog"
    asm.save_program(prog, str(path))
    loaded = asm.load_program(str(path))
    assert loaded.instructions == prog.instructions
    assert loaded.segments == prog.segments
    assert loaded.labels == prog.labels
    assert loaded.meta["source"] == "roundtrip.masm"


def test_container_rejects_corruption(tmp_path):
    prog = assemble("exit 0\n")
    path = tmp_path / "prog.mprog"
    asm.save_program(prog, str(path))
    blob = path.read_bytes()

    bad = tmp_path / "bad.mprog"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ContainerError):
        asm.load_program(str(bad))

    bad.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(ContainerError):
        asm.load_program(str(bad))


def test_snapshot_slot_layout():
    read_instr = assemble("read r1, r2, r3\n").instructions[0]
    assert isa.snapshot_slots(read_instr) == [
        ("op", 0), ("op", 1), ("op", 2), ("reg", 0)]
    jle_instr = assemble("jle t\nt: exit 0\n").instructions[0]
    assert isa.snapshot_slots(jle_instr) == [
        ("op", 0), ("flag", isa.ZF), ("flag", isa.SF), ("flag", isa.OF)]
    add_instr = assemble("add r1, r2\n").instructions[0]
    assert isa.snapshot_slots(add_instr) == [("op", 0), ("op", 1)]


def test_format_instruction():
    prog = assemble(
        "mov.d r1, 0x41\n"
        "load r2, [r3 + r4*4 + 16]\n"
        "store.b r5, [r6 - 1]\n"
        "yield\n")
    texts = [isa.format_instruction(i) for i in prog.instructions]
    assert texts[0] == "mov.d r1, 0x41"
    assert texts[1] == "load r2, [r3 + r4*4 + 0x10]"
    assert texts[2] == "store.b r5, [r6 - 0x1]"
    assert texts[3] == "yield"
