"""Event stream connecting the concrete machine to the symbolic side.

The virtual machine produces a flat sequence of events; the symbolic
executor consumes it, either live through a bounded channel or from a
recorded dump.  Five kinds exist:

    0x01 ReadSymbolicInput   input file bytes entered memory
    0x02 WriteSymbolicInput  memory bytes entered the input file
    0x03 InstructionEvent    one executed instruction plus value snapshot
    0x04 ThreadSwitch        the scheduler moved to another thread
    0x05 ExitEvent           the program ended normally

Wire format per frame: one tag byte, a little endian u32 payload
length, then the payload.  Instruction payloads carry the encoded
instruction followed by a u32 slot count and four u64 values per slot;
the slot order is isa.snapshot_slots.  Read and read/write operands
snapshot values from before execution, written operands from after, so
a spawn's new thread id and a syscall's result length are visible.

Instruction events are only emitted once the first ReadSymbolicInput
has occurred (nothing before that point can depend on the input); the
other four kinds are always emitted.
"""

from __future__ import annotations

import queue
import struct
from dataclasses import dataclass

from . import isa

TAG_READ_INPUT = 0x01
TAG_WRITE_INPUT = 0x02
TAG_INSTRUCTION = 0x03
TAG_THREAD_SWITCH = 0x04
TAG_EXIT = 0x05

FILE_MAGIC = b"MEV1"


class EventDecodeError(Exception):
    """Malformed event frame or event file."""


@dataclass(frozen=True)
class ReadSymbolicInput:
    addr: int
    length: int
    offset: int


@dataclass(frozen=True)
class WriteSymbolicInput:
    addr: int
    length: int
    offset: int


@dataclass(frozen=True)
class InstructionEvent:
    instruction: isa.Instruction
    values: tuple  # one (a, b, c, d) of u64 per snapshot slot


@dataclass(frozen=True)
class ThreadSwitch:
    from_tid: int
    to_tid: int


@dataclass(frozen=True)
class ExitEvent:
    code: int


_IO_BODY = struct.Struct("<QIQ")
_SWITCH_BODY = struct.Struct("<II")
_EXIT_BODY = struct.Struct("<I")
_U32 = struct.Struct("<I")
_U64X4 = struct.Struct("<QQQQ")


def encode_event(event):
    if isinstance(event, ReadSymbolicInput):
        tag, payload = TAG_READ_INPUT, _IO_BODY.pack(
            event.addr, event.length, event.offset)
    elif isinstance(event, WriteSymbolicInput):
        tag, payload = TAG_WRITE_INPUT, _IO_BODY.pack(
            event.addr, event.length, event.offset)
    elif isinstance(event, InstructionEvent):
        body = bytearray(isa.encode_instruction(event.instruction))
        body += _U32.pack(len(event.values))
        for slot in event.values:
            body += _U64X4.pack(*slot)
        tag, payload = TAG_INSTRUCTION, bytes(body)
    elif isinstance(event, ThreadSwitch):
        tag, payload = TAG_THREAD_SWITCH, _SWITCH_BODY.pack(
            event.from_tid, event.to_tid)
    elif isinstance(event, ExitEvent):
        tag, payload = TAG_EXIT, _EXIT_BODY.pack(event.code)
    else:
        raise TypeError("not an event: %r" % (event,))
    return bytes([tag]) + _U32.pack(len(payload)) + payload


def decode_event(data, offset=0):
    """Decode one frame, returning (event, next offset)."""
    if offset + 5 > len(data):
        raise EventDecodeError("truncated frame header")
    tag = data[offset]
    (length,) = _U32.unpack_from(data, offset + 1)
    start = offset + 5
    end = start + length
    if end > len(data):
        raise EventDecodeError("truncated frame payload")
    payload = data[start:end]
    try:
        if tag == TAG_READ_INPUT:
            return ReadSymbolicInput(*_IO_BODY.unpack(payload)), end
        if tag == TAG_WRITE_INPUT:
            return WriteSymbolicInput(*_IO_BODY.unpack(payload)), end
        if tag == TAG_INSTRUCTION:
            instr, pos = isa.decode_instruction(payload, 0)
            (count,) = _U32.unpack_from(payload, pos)
            pos += 4
            values = []
            for _ in range(count):
                values.append(_U64X4.unpack_from(payload, pos))
                pos += _U64X4.size
            if pos != len(payload):
                raise EventDecodeError("trailing bytes in instruction event")
            return InstructionEvent(instr, tuple(values)), end
        if tag == TAG_THREAD_SWITCH:
            return ThreadSwitch(*_SWITCH_BODY.unpack(payload)), end
        if tag == TAG_EXIT:
            return ExitEvent(*_EXIT_BODY.unpack(payload)), end
    except (struct.error, ValueError) as exc:
        raise EventDecodeError("malformed frame payload: %s" % exc) from exc
    raise EventDecodeError("unknown event tag 0x%02x" % tag)


def write_events(path, events):
    with open(path, "wb") as fh:
        fh.write(FILE_MAGIC)
        for event in events:
            fh.write(encode_event(event))


def read_events(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FILE_MAGIC:
        raise EventDecodeError("not an event file (bad magic)")
    events = []
    offset = 4
    while offset < len(blob):
        event, offset = decode_event(blob, offset)
        events.append(event)
    return events


_CLOSE = object()


class EventChannel:
    """Bounded pipe between a producing machine and a consuming listener.

    The bound gives backpressure: a producer thread blocks once the
    consumer falls `capacity` events behind, so memory stays flat no
    matter how long the run is.
    """

    def __init__(self, capacity=4096):
        self._queue = queue.Queue(maxsize=capacity)

    def send(self, event):
        self._queue.put(event)

    def close(self):
        self._queue.put(_CLOSE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is _CLOSE:
                return
            yield item
