"""Jump table recovery tests.

Table decoding is tested directly against hand-built data images, and
end to end by running switch-style programs, brute-forcing the
recorded alternative-target conditions over one input byte, and
re-running the interpreter to confirm the jump really lands there.
"""

import struct

import pytest

from minidse import expr as E
from minidse.asm import assemble
from minidse.events import InstructionEvent
from minidse.isa import CODE_BASE, ImmOp, Instruction, MemOp, Opcode, RegOp
from minidse.jumptab import (
    build_branch_condition, locate_table_load, recover_table,
)
from minidse.symex import SymbolicExecutor
from minidse.vm import run_program

CODE_RANGE = (0x1000, 0x1100)


def image_with(base, fmt, *values):
    data = struct.pack(fmt, *values)
    return {base + i: b for i, b in enumerate(data)}


# ----------------------------------------------------------------------
# table decoding

def test_address_table_recovered_around_touched_slot():
    image = image_with(0x2000, "<5Q", 0x9999, 0x1010, 0x1020, 0x1030, 0x5)
    table = recover_table(image, 0x2010, 64, 0x1020, CODE_RANGE)
    assert table is not None
    assert table.kind == "address"
    assert table.base == 0
    assert table.stride == 8
    assert [e[0] for e in table.entries] == [0x2008, 0x2010, 0x2018]
    assert [e[2] for e in table.entries] == [0x1010, 0x1020, 0x1030]


def test_table_needs_three_entries():
    image = image_with(0x2000, "<4Q", 0x9999, 0x1010, 0x1020, 0x5)
    assert recover_table(image, 0x2008, 64, 0x1010, CODE_RANGE) is None


def test_table_rejected_when_image_disagrees_with_run():
    image = image_with(0x2000, "<3Q", 0x1010, 0x1020, 0x1030)
    assert recover_table(image, 0x2008, 64, 0x1099, CODE_RANGE) is None


def test_table_stops_at_absent_bytes():
    image = image_with(0x2000, "<4Q", 0x1010, 0x1020, 0x1030, 0x1040)
    table = recover_table(image, 0x2008, 64, 0x1020, CODE_RANGE)
    assert len(table.entries) == 4
    assert table.entries[0][0] == 0x2000


def test_partially_materialized_slots_bound_the_table():
    image = image_with(0x2000, "<3Q", 0x1010, 0x1020, 0x1030)
    image[0x1FFF] = 0x10  # stray byte below; slot 0x1FF8 is mostly absent
    table = recover_table(image, 0x2000, 64, 0x1010, CODE_RANGE)
    assert [e[0] for e in table.entries] == [0x2000, 0x2008, 0x2010]


def test_offset_table_base_recovered_from_run():
    offsets = [-0x20, -0x10, 0x8, 0x30]
    image = image_with(0x2000, "<4i", *offsets)
    # The run touched slot 1 and landed at 0x1040, so base is 0x1050.
    table = recover_table(image, 0x2004, 32, 0x1040, CODE_RANGE)
    assert table.kind == "offset"
    assert table.base == 0x1050
    assert table.stride == 4
    assert [e[2] for e in table.entries] == [0x1030, 0x1040, 0x1058, 0x1080]


def test_offset_table_drops_out_of_code_entries():
    offsets = [-0x5000, -0x10, 0x8, 0x20, 0x7000]
    image = image_with(0x2000, "<5i", *offsets)
    table = recover_table(image, 0x2004, 32, 0x1040, CODE_RANGE)
    assert [e[0] for e in table.entries] == [0x2004, 0x2008, 0x200C]
    # Two valid neighbours are not enough to call it a table.
    narrow = image_with(0x2000, "<4i", -0x5000, -0x10, 0x8, 0x7000)
    assert recover_table(narrow, 0x2004, 32, 0x1040, CODE_RANGE) is None


def test_dword_absolute_table_is_offset_with_zero_base():
    image = image_with(0x2000, "<4i", 0x1010, 0x1020, 0x1030, 0x1040)
    table = recover_table(image, 0x2000, 32, 0x1010, CODE_RANGE)
    assert table.kind == "offset"
    assert table.base == 0
    assert [e[2] for e in table.entries] == [0x1010, 0x1020, 0x1030, 0x1040]


def test_unsupported_access_width_gives_no_table():
    image = image_with(0x2000, "<4Q", 0x1010, 0x1020, 0x1030, 0x1040)
    assert recover_table(image, 0x2000, 16, 0x1010, CODE_RANGE) is None


def test_wide_table_truncates_to_window_around_touched_slot():
    values = [0x1000 + i for i in range(100)]
    image = image_with(0x2000, "<100Q", *values)
    touched = 0x2000 + 50 * 8
    table = recover_table(image, touched, 64, 0x1000 + 50, CODE_RANGE,
                          max_entries=9)
    assert len(table.entries) == 9
    addresses = [e[0] for e in table.entries]
    assert touched in addresses
    assert addresses == sorted(addresses)
    assert addresses[0] == touched - 4 * 8


def test_truncation_window_clamps_at_table_edges():
    values = [0x1000 + i for i in range(20)]
    image = image_with(0x2000, "<20Q", *values)
    table = recover_table(image, 0x2008, 64, 0x1001, CODE_RANGE,
                          max_entries=8)
    assert len(table.entries) == 8
    assert table.entries[0][0] == 0x2000  # window pinned at the low edge


# ----------------------------------------------------------------------
# locating the table fetch in a block

def _instr(opcode, *explicit, width=64, address=0x1000):
    return Instruction(address, opcode, width, tuple(explicit))


def _entry(instr, addr_expr=None):
    return InstructionEvent(instr, ((0, 0, 0, 0),) * len(instr.explicit)), addr_expr


PTR = E.add(E.zero_extend(56, E.var(0)), E.const(64, 0x2000))


def test_locate_finds_direct_load():
    journal = [_entry(_instr(Opcode.LOAD, RegOp(2),
                             MemOp(None, 0, 8, 0x2000)), PTR)]
    event, found = locate_table_load(journal, 2)
    assert found is PTR
    assert event is journal[0][0]


def test_locate_follows_mov_and_add():
    journal = [
        _entry(_instr(Opcode.LOAD, RegOp(2), MemOp(None, 0, 8, 0x2000)), PTR),
        _entry(_instr(Opcode.ADD, RegOp(2), RegOp(5))),
        _entry(_instr(Opcode.MOV, RegOp(3), RegOp(2))),
    ]
    event, found = locate_table_load(journal, 3)
    assert found is PTR


def test_locate_follows_addr_operands():
    journal = [
        _entry(_instr(Opcode.LOAD, RegOp(6), MemOp(None, 0, 8, 0x2000)), PTR),
        _entry(_instr(Opcode.ADDR, RegOp(2), MemOp(5, 6, 2, 0))),
    ]
    event, found = locate_table_load(journal, 2)
    assert found is PTR


def test_locate_gives_up_on_other_defining_ops():
    journal = [
        _entry(_instr(Opcode.LOAD, RegOp(2), MemOp(None, 0, 8, 0x2000)), PTR),
        _entry(_instr(Opcode.MUL, RegOp(2), RegOp(5))),
    ]
    assert locate_table_load(journal, 2) is None


def test_locate_gives_up_when_chain_dies_in_a_constant():
    journal = [
        _entry(_instr(Opcode.LOAD, RegOp(2), MemOp(None, 0, 8, 0x2000)), PTR),
        _entry(_instr(Opcode.MOV, RegOp(2), ImmOp(0x1005))),
    ]
    assert locate_table_load(journal, 2) is None


def test_locate_gives_up_when_a_syscall_defines_the_register():
    journal = [
        _entry(_instr(Opcode.LOAD, RegOp(0), MemOp(None, 0, 8, 0x2000)), PTR),
        _entry(_instr(Opcode.READ, RegOp(3), RegOp(4), ImmOp(8))),
    ]
    assert locate_table_load(journal, 0) is None


def test_locate_takes_the_latest_load():
    early = E.add(E.zero_extend(56, E.var(1)), E.const(64, 0x3000))
    journal = [
        _entry(_instr(Opcode.LOAD, RegOp(2), MemOp(None, 0, 8, 0x3000)), early),
        _entry(_instr(Opcode.LOAD, RegOp(2), MemOp(None, 0, 8, 0x2000)), PTR),
    ]
    event, found = locate_table_load(journal, 2)
    assert found is PTR


# ----------------------------------------------------------------------
# condition construction

def test_branch_condition_groups_slots_by_target():
    from minidse.jumptab import JumpTable
    table = JumpTable("address", 0, 8, (
        (0x2000, 0x1010, 0x1010),
        (0x2008, 0x1020, 0x1020),
        (0x2010, 0x1020, 0x1020),
        (0x2018, 0x1030, 0x1030),
    ))
    cond, alts = build_branch_condition(table, PTR, 0x1020)
    assert E.eval(cond, {0: 0x08}) == 1
    assert E.eval(cond, {0: 0x10}) == 1
    assert E.eval(cond, {0: 0x00}) == 0
    assert [t for t, _ in alts] == [0x1010, 0x1030]
    lookup = dict(alts)
    assert E.eval(lookup[0x1010], {0: 0x00}) == 1
    assert E.eval(lookup[0x1030], {0: 0x18}) == 1
    assert E.eval(lookup[0x1030], {0: 0x08}) == 0


# ----------------------------------------------------------------------
# end to end through the mirror

SWITCH8 = (
    "open r1\n"
    "mov r2, buf\n"
    "read r1, r2, 1\n"
    "load.b r3, [buf]\n"
    "and r3, 7\n"
    "load r4, [table + r3*8]\n"
    "jmp r4\n"
    "c0: exit 10\n"
    "c1: exit 11\n"
    "c2: exit 12\n"
    "c3: exit 13\n"
    "c4: exit 14\n"
    "c5: exit 15\n"
    "c6: exit 16\n"
    "c7: exit 17\n"
    ".data 0x2000\n"
    "buf: .zero 1\n"
    "table: .quad c0, c1, c2, c3, c4, c5, c6, c7\n")


def _mirror(src, seed, **kwargs):
    program = assemble(src)
    result = run_program(program, seed)
    sx = SymbolicExecutor(program, seed, **kwargs).run(result.events)
    return program, result, sx


def _flip_byte(cond):
    for v in range(256):
        if E.eval(cond, {0: v}) == 1:
            return v
    return None


def test_switch_records_one_indirect_constraint():
    _, result, sx = _mirror(SWITCH8, b"\x02")
    assert result.exit_code == 12
    assert len(sx.path) == 1
    pc = sx.path[0]
    assert pc.kind == "indirect"
    assert pc.taken is None
    assert len(pc.alt_targets) == 7
    assert sx.stats.tables == 1
    index = result.first_read_branch_pos + pc.trace_pos
    assert result.branch_trace[index] == (pc.site, pc.next_pc)


def test_switch_every_alternative_is_reachable():
    program = assemble(SWITCH8)
    _, result, sx = _mirror(SWITCH8, b"\x02")
    pc = sx.path[0]
    index = result.first_read_branch_pos + pc.trace_pos
    seen_codes = set()
    for target, cond in pc.alt_targets:
        v = _flip_byte(cond)
        assert v is not None
        redo = run_program(program, bytes([v]))
        assert redo.branch_trace[index] == (pc.site, target)
        seen_codes.add(redo.exit_code)
    assert seen_codes == {10, 11, 13, 14, 15, 16, 17}


def test_switch_slots_sharing_a_target_merge_into_one_alternative():
    src = SWITCH8.replace(".quad c0, c1, c2, c3, c4, c5, c6, c7",
                          ".quad c0, c1, c1, c3, c4, c5, c6, c7")
    _, _, sx = _mirror(src, b"\x00")
    pc = sx.path[0]
    assert len(pc.alt_targets) == 6
    shared = dict(pc.alt_targets)
    c1_cond = [cond for t, cond in pc.alt_targets
               if E.eval(cond, {0: 1}) == 1]
    assert len(c1_cond) == 1
    assert E.eval(c1_cond[0], {0: 2}) == 1  # both slots satisfy it


def test_switch_through_memory_operand_jump():
    src = SWITCH8.replace("load r4, [table + r3*8]\njmp r4\n",
                          "jmp [table + r3*8]\n")
    program = assemble(src)
    _, result, sx = _mirror(src, b"\x05")
    assert result.exit_code == 15
    assert len(sx.path) == 1
    pc = sx.path[0]
    index = result.first_read_branch_pos + pc.trace_pos
    target, cond = pc.alt_targets[0]
    v = _flip_byte(cond)
    redo = run_program(program, bytes([v]))
    assert redo.branch_trace[index] == (pc.site, target)


def test_switch_through_mov_alias():
    src = SWITCH8.replace("jmp r4\n", "mov r5, r4\njmp r5\n")
    _, _, sx = _mirror(src, b"\x03")
    assert len(sx.path) == 1
    assert sx.path[0].kind == "indirect"


OFFSET_SWITCH = (
    "open r1\n"
    "mov r2, buf\n"
    "read r1, r2, 1\n"
    "load.b r3, [buf]\n"
    "and r3, 3\n"
    "mov r5, anchor\n"
    "load.d r4, [offs + r3*4]\n"
    "add.d r4, r5\n"
    "jmp r4\n"
    "c0: exit 20\n"
    "c1: exit 21\n"
    "c2: exit 22\n"
    "anchor: exit 29\n"
    "c3: exit 23\n"
    ".data 0x2000\n"
    "buf: .zero 1\n"
    "offs: .long c0 - anchor, c1 - anchor, c2 - anchor, c3 - anchor\n")


def test_offset_switch_recovers_base_and_flips():
    program = assemble(OFFSET_SWITCH)
    _, result, sx = _mirror(OFFSET_SWITCH, b"\x01")
    assert result.exit_code == 21
    assert len(sx.path) == 1
    pc = sx.path[0]
    assert len(pc.alt_targets) == 3
    index = result.first_read_branch_pos + pc.trace_pos
    codes = set()
    for target, cond in pc.alt_targets:
        v = _flip_byte(cond)
        assert v is not None
        redo = run_program(program, bytes([v]))
        assert redo.branch_trace[index] == (pc.site, target)
        codes.add(redo.exit_code)
    assert codes == {20, 22, 23}


def test_jump_tables_can_be_disabled():
    _, _, sx = _mirror(SWITCH8, b"\x02", jump_tables=False)
    assert sx.path == []
    assert sx.stats.tables == 0
    assert sx.stats.concretizations >= 1


def test_small_table_budget_truncates_alternatives():
    _, _, sx = _mirror(SWITCH8, b"\x02", max_table_size=4)
    pc = sx.path[0]
    # Window of four slots around the touched one: indexes 0..3.
    assert len(pc.alt_targets) == 3
    assert {t for t, _ in pc.alt_targets} == {
        CODE_BASE + 7, CODE_BASE + 8, CODE_BASE + 10}


def test_guarded_switch_records_guard_and_table():
    src = SWITCH8.replace(
        "and r3, 7\n",
        "cmp r3, 7\n"
        "ja c7\n")
    _, result, sx = _mirror(src, b"\x04")
    assert result.exit_code == 14
    kinds = [pc.kind for pc in sx.path]
    assert kinds == ["conditional", "indirect"]
    guard, table = sx.path
    assert guard.trace_pos == 0
    assert table.trace_pos == 1
