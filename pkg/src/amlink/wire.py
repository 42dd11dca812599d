"""Active-message frame encoding and decoding.

Frame layout (little-endian throughout):

    ┌────────────┬─────────────┬──────┬──────┬─────────┬─────────┬─────┐
    │ header 24B │ got n × u64 │ code │ args │ payload │ padding │ SIG │
    └────────────┴─────────────┴──────┴──────┴─────────┴─────────┴─────┘

Header (24 bytes):

    offset  size  field
    0       u16   magic       0x2C41
    2       u8    version     1
    3       u8    flags       bit0 INJECTED, bit1 RESPOND, bit2 RECEIVER_PATCH
    4       u16   element_id
    6       u16   got_count   number of indirection-table entries
    8       u32   code_len    bytes
    12      u32   args_len    bytes
    16      u32   payload_len bytes
    20      u8    bank
    21      u8    slot
    22      u8    reserved    0
    23      u8    header_mag  0xA5 (always the final header byte)

The signal byte (SIG_MAG, 0x5A) is always the highest-addressed byte of the
frame.  A waiter that sees it set may read the whole frame: the transport
ordering contract guarantees every other byte of the frame landed first.
Frames are padded with zeros to a multiple of 64 bytes; in fixed mode they
are padded all the way to the configured frame size.

Indirection-table entries are u64 values: resolved receiver handles in
sender-patch mode, or 64-bit symbol-name hashes in receiver-patch mode
(flags bit2 says which).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAGIC = 0x2C41
VERSION = 1
HDR_MAG = 0xA5
SIG_MAG = 0x5A

HEADER_SIZE = 24
GOT_ENTRY_SIZE = 8
LINE = 64

FLAG_INJECTED = 0x01
FLAG_RESPOND = 0x02
FLAG_RECEIVER_PATCH = 0x04

_HDR = struct.Struct("<HBBHHIIIBBBB")
assert _HDR.size == HEADER_SIZE

_U32_MAX = 0xFFFFFFFF


class WireError(Exception):
    """Base class for frame encode/decode failures."""


class SizeOverflow(WireError):
    """Frame size does not fit in 32 bits."""


class FrameTooLarge(WireError):
    """Message does not fit the configured fixed frame size."""


class EncodeError(WireError):
    """MessageParts are internally inconsistent."""


class BadMagic(WireError):
    """Header magic, header mag byte, or signal byte is wrong."""


class BadVersion(WireError):
    """Unsupported frame format version."""


class LengthMismatch(WireError):
    """Declared section lengths disagree with the byte count on hand."""


class InjectedFlagViolation(WireError):
    """Frame carries code or got entries without the INJECTED flag."""


@dataclass(frozen=True)
class FrameHeader:
    flags: int = 0
    element_id: int = 0
    got_count: int = 0
    code_len: int = 0
    args_len: int = 0
    payload_len: int = 0
    bank: int = 0
    slot: int = 0
    reserved: int = 0

    @property
    def injected(self) -> bool:
        return bool(self.flags & FLAG_INJECTED)

    @property
    def respond(self) -> bool:
        return bool(self.flags & FLAG_RESPOND)

    @property
    def receiver_patch(self) -> bool:
        return bool(self.flags & FLAG_RECEIVER_PATCH)


@dataclass(frozen=True)
class MessageParts:
    header: FrameHeader
    got_entries: tuple[int, ...] = ()
    code: bytes = b""
    args: bytes = b""
    payload: bytes = b""


@dataclass(frozen=True)
class FrameConfig:
    frame_size: int = 4096
    mode: str = "fixed"  # "fixed" | "variable"

    def __post_init__(self):
        if self.frame_size < LINE or self.frame_size % LINE != 0:
            raise ValueError(f"frame_size must be a positive multiple of {LINE}")
        if self.mode not in ("fixed", "variable"):
            raise ValueError(f"unknown frame mode {self.mode!r}")


def make_parts(
    *,
    flags: int = 0,
    element_id: int = 0,
    got_entries: tuple[int, ...] = (),
    code: bytes = b"",
    args: bytes = b"",
    payload: bytes = b"",
    bank: int = 0,
    slot: int = 0,
) -> MessageParts:
    """Build MessageParts with header counts derived from the sections."""
    header = FrameHeader(
        flags=flags,
        element_id=element_id,
        got_count=len(got_entries),
        code_len=len(code),
        args_len=len(args),
        payload_len=len(payload),
        bank=bank,
        slot=slot,
    )
    return MessageParts(header, tuple(got_entries), bytes(code), bytes(args), bytes(payload))


def frame_size(got_count: int, code_len: int, args_len: int, payload_len: int) -> int:
    """Padded wire size for a message: header + sections + signal byte,
    rounded up to the next 64-byte multiple."""
    raw = HEADER_SIZE + GOT_ENTRY_SIZE * got_count + code_len + args_len + payload_len + 1
    size = (raw + LINE - 1) // LINE * LINE
    if size > _U32_MAX:
        raise SizeOverflow(f"frame of {raw} bytes exceeds 32-bit sizing")
    return size


def parts_frame_size(parts: MessageParts) -> int:
    h = parts.header
    return frame_size(h.got_count, h.code_len, h.args_len, h.payload_len)


def _check_consistent(parts: MessageParts) -> None:
    h = parts.header
    if len(parts.got_entries) != h.got_count:
        raise EncodeError(f"got_count {h.got_count} != {len(parts.got_entries)} entries")
    if len(parts.code) != h.code_len:
        raise EncodeError(f"code_len {h.code_len} != {len(parts.code)} bytes")
    if len(parts.args) != h.args_len:
        raise EncodeError(f"args_len {h.args_len} != {len(parts.args)} bytes")
    if len(parts.payload) != h.payload_len:
        raise EncodeError(f"payload_len {h.payload_len} != {len(parts.payload)} bytes")
    if not h.injected and (h.got_count or h.code_len):
        raise EncodeError("code or got entries present without INJECTED flag")


def encode_frame(parts: MessageParts, cfg: FrameConfig) -> bytes:
    """Serialize a message to one frame; the final byte is the signal byte."""
    _check_consistent(parts)
    h = parts.header
    need = parts_frame_size(parts)
    if cfg.mode == "fixed":
        if need > cfg.frame_size:
            raise FrameTooLarge(f"message needs {need}B, frame is {cfg.frame_size}B")
        size = cfg.frame_size
    else:
        size = need

    buf = bytearray(size)
    _HDR.pack_into(
        buf,
        0,
        MAGIC,
        VERSION,
        h.flags,
        h.element_id,
        h.got_count,
        h.code_len,
        h.args_len,
        h.payload_len,
        h.bank,
        h.slot,
        h.reserved,
        HDR_MAG,
    )
    off = HEADER_SIZE
    if parts.got_entries:
        struct.pack_into(f"<{h.got_count}Q", buf, off, *parts.got_entries)
        off += GOT_ENTRY_SIZE * h.got_count
    buf[off : off + h.code_len] = parts.code
    off += h.code_len
    buf[off : off + h.args_len] = parts.args
    off += h.args_len
    buf[off : off + h.payload_len] = parts.payload
    buf[size - 1] = SIG_MAG
    return bytes(buf)


def decode_header(raw: bytes | bytearray | memoryview) -> FrameHeader:
    """Decode and validate the 24-byte header at the start of `raw`."""
    if len(raw) < HEADER_SIZE:
        raise LengthMismatch(f"{len(raw)} bytes is shorter than a header")
    magic, version, flags, element_id, got_count, code_len, args_len, payload_len, bank, slot, reserved, hmag = _HDR.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagic(f"header magic 0x{magic:04X}")
    if hmag != HDR_MAG:
        raise BadMagic(f"header mag byte 0x{hmag:02X}")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    return FrameHeader(flags, element_id, got_count, code_len, args_len, payload_len, bank, slot, reserved)


def decode_frame(raw: bytes | bytearray | memoryview, cfg: FrameConfig) -> MessageParts:
    """Inverse of encode_frame.  `raw` must be the full frame, signal byte
    included."""
    header = decode_header(raw)
    need = frame_size(header.got_count, header.code_len, header.args_len, header.payload_len)
    if cfg.mode == "fixed":
        if len(raw) != cfg.frame_size:
            raise LengthMismatch(f"fixed frame is {len(raw)}B, expected {cfg.frame_size}B")
        if need > cfg.frame_size:
            raise LengthMismatch(f"declared sections need {need}B > frame {cfg.frame_size}B")
    elif len(raw) != need:
        raise LengthMismatch(f"variable frame is {len(raw)}B, expected {need}B")
    if raw[len(raw) - 1] != SIG_MAG:
        raise BadMagic(f"signal byte 0x{raw[len(raw) - 1]:02X}")
    if not header.injected and (header.got_count or header.code_len):
        raise InjectedFlagViolation("code or got entries without INJECTED flag")

    off = HEADER_SIZE
    if header.got_count:
        got = struct.unpack_from(f"<{header.got_count}Q", raw, off)
        off += GOT_ENTRY_SIZE * header.got_count
    else:
        got = ()
    code = bytes(raw[off : off + header.code_len])
    off += header.code_len
    args = bytes(raw[off : off + header.args_len])
    off += header.args_len
    payload = bytes(raw[off : off + header.payload_len])
    return MessageParts(header, got, code, args, payload)
