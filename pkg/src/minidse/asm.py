"""Two-pass assembler and on-disk program container.

Source grammar, line oriented:

    ; comment to end of line
    label:                 ; labels may share a line with what follows
    .code                  ; switch to code emission (the default)
    .data 0x4000           ; switch to data emission at a fixed address
    .byte e [, e ...]      ; 1-byte data items
    .word e [, e ...]      ; 2-byte items
    .long e [, e ...]      ; 4-byte items
    .quad e [, e ...]      ; 8-byte items
    .zero N                ; N literal zero bytes
    .ascii "text\\n"       ; raw bytes, escapes \\n \\t \\r \\0 \\\\ \\" \\'
    mov.d r1, 0x41         ; instructions, width suffix .b/.w/.d/.q

Data item expressions combine numbers, character literals and labels
with + and -.  Memory operands take the form [base + index*scale + disp]
where scale is 1, 2, 4 or 8 and disp is an expression.  Register views
r3b/r3w/r3d select an operation width of 8/16/32 bits and must agree
with the mnemonic suffix when both appear.

Code occupies [CODE_BASE, CODE_BASE + instruction count) in the flat
address space, one unit per instruction; data regions must not overlap
code or each other.  The first instruction is the program entry.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field

from . import isa
from .isa import (
    CODE_BASE, MASK64, ImmOp, Instruction, MemOp, Opcode, RegOp,
)


class AsmError(Exception):
    """Assembly failure, carrying the 1-based source line number."""

    def __init__(self, line_no, message):
        super().__init__("line %d: %s" % (line_no, message))
        self.line_no = line_no
        self.message = message


class ContainerError(Exception):
    """Malformed program container file."""


@dataclass
class Program:
    instructions: list
    segments: list  # (start address, bytes), sorted, non-overlapping
    labels: dict
    meta: dict = field(default_factory=dict)

    def code_range(self):
        return (CODE_BASE, CODE_BASE + len(self.instructions))

    def instruction_at(self, address):
        lo, hi = self.code_range()
        if lo <= address < hi:
            return self.instructions[address - lo]
        return None

    def initial_memory(self):
        mem = {}
        for start, blob in self.segments:
            for i, b in enumerate(blob):
                mem[start + i] = b
        return mem


_LABEL_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*:")
_REG_RE = re.compile(r"^r([0-7])([bwd])?$")
_DIRECTIVE_WIDTHS = {".byte": 1, ".word": 2, ".long": 4, ".quad": 8}
_ESCAPES = {"n": 10, "t": 9, "r": 13, "0": 0, "\\": 92, '"': 34, "'": 39}

_EXPR_TOKEN = re.compile(
    r"\s*(?:(?P<num>0[xX][0-9a-fA-F]+|\d+)"
    r"|(?P<char>'(?:\\.|[^'\\])')"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[+\-])"
    r"|(?P<star>\*))")


def _strip_comment(line):
    quote = None
    escaped = False
    for i, ch in enumerate(line):
        if quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == ";":
            return line[:i]
    return line


def _split_operands(text, line_no):
    parts = []
    cur = []
    quote = None
    escaped = False
    for ch in text:
        if quote:
            cur.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
            cur.append(ch)
        elif ch == ",":
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if quote:
        raise AsmError(line_no, "unterminated quote")
    parts.append("".join(cur).strip())
    if parts == [""]:
        return []
    if any(p == "" for p in parts):
        raise AsmError(line_no, "empty operand")
    return parts


def _char_value(token, line_no):
    body = token[1:-1]
    if body.startswith("\\"):
        if body[1] not in _ESCAPES:
            raise AsmError(line_no, "unknown escape %r" % body)
        return _ESCAPES[body[1]]
    return ord(body)


def _tokenize_expr(text, line_no):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _EXPR_TOKEN.match(text, pos)
        if not m or m.end() == pos:
            rest = text[pos:].strip()
            if not rest:
                break
            raise AsmError(line_no, "cannot parse %r" % rest)
        pos = m.end()
        for kind in ("num", "char", "ident", "op", "star"):
            val = m.group(kind)
            if val is not None:
                tokens.append((kind, val))
                break
    return tokens


def _eval_tokens(tokens, labels, line_no, what="expression"):
    total = 0
    sign = 1
    have_term = False
    for kind, val in tokens:
        if kind == "op":
            if have_term:
                sign = 1 if val == "+" else -1
                have_term = False
            elif val == "-":
                sign = -sign
            # a leading "+" is harmless
        elif kind == "star":
            raise AsmError(line_no, "'*' not allowed in %s" % what)
        else:
            if have_term:
                raise AsmError(line_no, "expected + or - in %s" % what)
            if kind == "num":
                total += sign * int(val, 0)
            elif kind == "char":
                total += sign * _char_value(val, line_no)
            else:
                if _REG_RE.match(val):
                    raise AsmError(
                        line_no, "register %s not valid in %s" % (val, what))
                if val not in labels:
                    raise AsmError(line_no, "unknown label %r" % val)
                total += sign * labels[val]
            sign = 1
            have_term = True
    if not have_term:
        raise AsmError(line_no, "empty %s" % what)
    return total


def _eval_expr(text, labels, line_no, what="expression"):
    return _eval_tokens(_tokenize_expr(text, line_no), labels, line_no, what)


def _parse_string(text, line_no):
    text = text.strip()
    if not text.startswith('"'):
        raise AsmError(line_no, ".ascii expects a quoted string")
    out = bytearray()
    i = 1
    while i < len(text):
        ch = text[i]
        if ch == '"':
            if text[i + 1:].strip():
                raise AsmError(line_no, "trailing input after string")
            return bytes(out)
        if ch == "\\":
            if i + 1 >= len(text) or text[i + 1] not in _ESCAPES:
                raise AsmError(line_no, "unknown escape in string")
            out.append(_ESCAPES[text[i + 1]])
            i += 2
        else:
            code = ord(ch)
            if code > 0xFF:
                raise AsmError(line_no, "non byte character in string")
            out.append(code)
            i += 1
    raise AsmError(line_no, "unterminated string")


def _parse_mem(text, labels, line_no):
    inner = text[1:-1].strip()
    tokens = _tokenize_expr(inner, line_no)
    if not tokens:
        raise AsmError(line_no, "empty memory operand")

    # Split into groups at top level +/-, folding the sign of each group.
    groups = []
    cur = []
    cur_sign = 1
    for kind, val in tokens:
        if kind == "op" and cur:
            groups.append((cur_sign, cur))
            cur = []
            cur_sign = 1 if val == "+" else -1
        elif kind == "op":
            if val == "-":
                cur_sign = -cur_sign
        else:
            cur.append((kind, val))
    if not cur:
        raise AsmError(line_no, "dangling operator in memory operand")
    groups.append((cur_sign, cur))

    base = index = None
    scale = 1
    disp = 0
    for sign, group in groups:
        is_reg = (len(group) == 1 and group[0][0] == "ident"
                  and _REG_RE.match(group[0][1]))
        is_scaled = (len(group) == 3 and group[1][0] == "star")
        if is_reg or is_scaled:
            if sign < 0:
                raise AsmError(line_no, "cannot subtract a register")
        if is_reg:
            m = _REG_RE.match(group[0][1])
            if m.group(2):
                raise AsmError(
                    line_no, "register views not allowed in memory operands")
            if base is None:
                base = int(m.group(1))
            elif index is None:
                index = int(m.group(1))
            else:
                raise AsmError(line_no, "too many registers in address")
        elif is_scaled:
            a, _, b = group
            if a[0] == "num" and b[0] == "ident":
                a, b = b, a  # accept scale*reg as well as reg*scale
            if a[0] != "ident" or not _REG_RE.match(a[1]) or b[0] != "num":
                raise AsmError(line_no, "bad scaled index")
            m = _REG_RE.match(a[1])
            if m.group(2):
                raise AsmError(
                    line_no, "register views not allowed in memory operands")
            s = int(b[1], 0)
            if s not in isa.VALID_SCALES:
                raise AsmError(line_no, "scale must be 1, 2, 4 or 8")
            if index is not None:
                raise AsmError(line_no, "two scaled registers in address")
            index = int(m.group(1))
            scale = s
        else:
            disp += sign * _eval_tokens(group, labels, line_no,
                                        "displacement")
    if not -(1 << 63) <= disp < (1 << 63):
        raise AsmError(line_no, "displacement out of range")
    return MemOp(base, index, scale, disp)


def _parse_operand(text, labels, line_no):
    """Returns (kind, operand, view width or None)."""
    if text.startswith("["):
        if not text.endswith("]"):
            raise AsmError(line_no, "unterminated memory operand")
        return "mem", _parse_mem(text, labels, line_no), None
    m = _REG_RE.match(text)
    if m:
        view = isa.WIDTH_BITS[m.group(2)] if m.group(2) else None
        return "reg", RegOp(int(m.group(1))), view
    value = _eval_expr(text, labels, line_no, "operand")
    if not -(1 << 63) <= value < (1 << 64):
        raise AsmError(line_no, "immediate out of range")
    return "imm", ImmOp(value & MASK64), None


_KIND_WORDS = {"reg": "a register", "imm": "an immediate",
               "mem": "a memory operand"}


def _kinds_text(kinds):
    return " or ".join(_KIND_WORDS[k] for k in sorted(kinds))


def assemble(text, name="<asm>"):
    """Assemble source text into a Program.  Raises AsmError."""
    labels = {}
    label_lines = {}
    instrs = []  # (line_no, mnemonic, [operand strings], address)
    regions = []  # [start, bytearray]
    patches = []  # (line_no, region idx, offset, width, expr text)
    section = "code"
    code_cursor = CODE_BASE

    def define(label, value, line_no):
        if _REG_RE.match(label):
            raise AsmError(line_no, "label %r shadows a register" % label)
        if label in labels:
            raise AsmError(
                line_no, "duplicate label %r (first defined on line %d)"
                % (label, label_lines[label]))
        labels[label] = value
        label_lines[label] = line_no

    for line_no, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        while True:
            m = _LABEL_RE.match(line)
            if not m:
                break
            value = code_cursor if section == "code" else (
                regions[-1][0] + len(regions[-1][1]))
            define(m.group(1), value, line_no)
            line = line[m.end():]
        stmt = line.strip()
        if not stmt:
            continue

        if stmt.startswith("."):
            head, _, args = stmt.partition(" ")
            head = head.lower()
            args = args.strip()
            if head == ".code":
                if args:
                    raise AsmError(line_no, ".code takes no argument")
                section = "code"
            elif head == ".data":
                if not args:
                    raise AsmError(line_no, ".data needs an address")
                start = _eval_expr(args, {}, line_no, ".data address")
                if start < 0:
                    raise AsmError(line_no, ".data address must not be negative")
                section = "data"
                regions.append([start, bytearray()])
            elif head in _DIRECTIVE_WIDTHS:
                if section != "data":
                    raise AsmError(line_no,
                                   "%s outside a .data section" % head)
                width = _DIRECTIVE_WIDTHS[head]
                items = _split_operands(args, line_no)
                if not items:
                    raise AsmError(line_no, "%s needs at least one value" % head)
                region = regions[-1]
                for item in items:
                    patches.append((line_no, len(regions) - 1,
                                    len(region[1]), width, item))
                    region[1].extend(b"\0" * width)
            elif head == ".zero":
                if section != "data":
                    raise AsmError(line_no, ".zero outside a .data section")
                count = _eval_expr(args, {}, line_no, ".zero count")
                if count < 0:
                    raise AsmError(line_no, ".zero count must not be negative")
                regions[-1][1].extend(b"\0" * count)
            elif head == ".ascii":
                if section != "data":
                    raise AsmError(line_no, ".ascii outside a .data section")
                regions[-1][1].extend(_parse_string(args, line_no))
            else:
                raise AsmError(line_no, "unknown directive %s" % head)
            continue

        if section != "code":
            raise AsmError(line_no, "instruction inside a .data section")
        mnemonic, _, rest = stmt.partition(" ")
        instrs.append((line_no, mnemonic.lower(),
                       _split_operands(rest.strip(), line_no), code_cursor))
        code_cursor += 1

    # Second pass: data values and instruction operands see all labels.
    for line_no, ridx, offset, width, expr in patches:
        value = _eval_expr(expr, labels, line_no, "data value")
        if not -(1 << (width * 8 - 1)) <= value < (1 << (width * 8)):
            raise AsmError(line_no, "value does not fit in %d bytes" % width)
        blob = struct.pack("<Q", value & MASK64)[:width]
        regions[ridx][1][offset:offset + width] = blob

    instructions = []
    for line_no, mnemonic, operand_texts, address in instrs:
        name_part, _, suffix = mnemonic.partition(".")
        opcode = isa.MNEMONICS.get(name_part)
        if opcode is None:
            raise AsmError(line_no, "unknown instruction %r" % name_part)
        width = None
        if suffix:
            if suffix not in isa.WIDTH_BITS:
                raise AsmError(line_no, "unknown width suffix .%s" % suffix)
            if opcode not in isa.WIDTH_SUFFIX_OK:
                raise AsmError(line_no,
                               "%s does not take a width suffix" % name_part)
            width = isa.WIDTH_BITS[suffix]

        signature = isa.SIGNATURES[opcode]
        if len(operand_texts) != len(signature):
            raise AsmError(line_no, "%s takes %d operand%s" %
                           (name_part, len(signature),
                            "" if len(signature) == 1 else "s"))
        operands = []
        for pos, (otext, (allowed, _)) in enumerate(
                zip(operand_texts, signature), 1):
            kind, op, view = _parse_operand(otext, labels, line_no)
            if kind not in allowed:
                raise AsmError(line_no, "operand %d of %s must be %s" %
                               (pos, name_part, _kinds_text(allowed)))
            if view is not None:
                if opcode not in isa.WIDTH_SUFFIX_OK:
                    raise AsmError(line_no,
                                   "register view not allowed on %s" % name_part)
                if width is not None and width != view:
                    raise AsmError(line_no, "conflicting operand widths")
                width = view
            operands.append(op)
        instructions.append(Instruction(address, opcode,
                                        width or 64, tuple(operands)))

    segments = sorted(((start, bytes(blob)) for start, blob in regions
                       if blob), key=lambda seg: seg[0])
    spans = [(start, start + len(blob), "data region") for start, blob in segments]
    if instructions:
        spans.append((CODE_BASE, CODE_BASE + len(instructions), "code"))
        spans.sort()
    for (lo1, hi1, what1), (lo2, hi2, what2) in zip(spans, spans[1:]):
        if hi1 > lo2:
            raise AsmError(0, "%s at 0x%x overlaps %s at 0x%x" %
                           (what2, lo2, what1, lo1))

    return Program(instructions, segments, dict(labels), {"source": name})


def assemble_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return assemble(fh.read(), os.path.basename(path))


# Program container: "MVM1" magic, then (u8 tag, u32 length, payload)
# sections.  Unknown tags are skipped on load.
MAGIC = b"MVM1"
SEC_CODE, SEC_DATA, SEC_LABELS, SEC_META = 1, 2, 3, 4
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


def _pack_str(s):
    raw = s.encode("utf-8")
    return _U16.pack(len(raw)) + raw


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ContainerError("truncated container")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def u16(self):
        return _U16.unpack(self.take(2))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def string(self):
        return self.take(self.u16()).decode("utf-8")

    @property
    def done(self):
        return self.pos >= len(self.data)


def save_program(program, path):
    code = bytearray(_U32.pack(len(program.instructions)))
    for instr in program.instructions:
        code += isa.encode_instruction(instr)

    data = bytearray(_U32.pack(len(program.segments)))
    for start, blob in program.segments:
        data += struct.pack("<QI", start, len(blob))
        data += blob

    labels = bytearray(_U32.pack(len(program.labels)))
    for label in sorted(program.labels):
        labels += _pack_str(label)
        labels += struct.pack("<Q", program.labels[label])

    meta = bytearray(_U32.pack(len(program.meta)))
    for key in sorted(program.meta):
        meta += _pack_str(key)
        meta += _pack_str(str(program.meta[key]))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for tag, payload in ((SEC_CODE, code), (SEC_DATA, data),
                             (SEC_LABELS, labels), (SEC_META, meta)):
            fh.write(bytes([tag]))
            fh.write(_U32.pack(len(payload)))
            fh.write(payload)


def load_program(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError("not a program container (bad magic)")
    outer = _Reader(blob)
    outer.take(4)
    instructions = []
    segments = []
    labels = {}
    meta = {}
    saw_code = False
    while not outer.done:
        tag = outer.take(1)[0]
        body = _Reader(outer.take(outer.u32()))
        if tag == SEC_CODE:
            saw_code = True
            count = body.u32()
            offset = body.pos
            for _ in range(count):
                try:
                    instr, offset = isa.decode_instruction(body.data, offset)
                except ValueError as exc:
                    raise ContainerError(str(exc)) from exc
                instructions.append(instr)
            if offset != len(body.data):
                raise ContainerError("trailing bytes in code section")
        elif tag == SEC_DATA:
            for _ in range(body.u32()):
                start = body.u64()
                segments.append((start, bytes(body.take(body.u32()))))
        elif tag == SEC_LABELS:
            for _ in range(body.u32()):
                name = body.string()
                labels[name] = body.u64()
        elif tag == SEC_META:
            for _ in range(body.u32()):
                key = body.string()
                meta[key] = body.string()
        # unknown tags: skip
    if not saw_code:
        raise ContainerError("container has no code section")
    for i, instr in enumerate(instructions):
        if instr.address != CODE_BASE + i:
            raise ContainerError("instruction addresses not contiguous")
    return Program(instructions, segments, labels, meta)
