"""Toolchain and linker: assemble portable function sources, build and
load package files, register receiver symbols, and patch per-message
indirection tables.

Terminology used throughout the runtime:

    jam      one portable function, written in the small assembly below,
             shipped as bytecode inside a message or a package
    package  a named bundle of jams with dense element IDs
    ried     a named bundle of host-side symbol registrations (the
             receiver functions jams call through the indirection table)

Assembly grammar, one statement per line:

    .extern NAME              declare an external symbol; declaration
                              order is the indirection-table order
    label:                    define a label (may prefix an instruction)
    OP operands               ; or # starts a comment

    LDI   rd, imm             MOV  rd, rs1
    ADD   rd, rs1, rs2        (SUB MUL DIVU AND OR XOR SHL SHR alike)
    LD4   rd, region[rs1+imm] (LD1 LD2 LD8; region: args|payload|scratch)
    ST4   rd, region[rs1+imm] (ST1 ST2 ST8; stores low bytes of rd)
    JMP   label_or_offset     BEQ rs1, rs2, label_or_offset (BNE BLTU BGEU)
    CALLX rd, NAME            call a declared extern, result into rd
    HALT

Package file layout (little-endian; strings are u16 length + UTF-8):

    magic "2CPK" | version u16 | package_name str | element_count u16
    then per element:
      id u16 | name str | extern_count u16 | extern names str... |
      code_len u32 | code bytes

Element IDs are assigned densely from 0 in sorted-name order, so a
loaded package doubles as the ID-indexed dispatch vector for local mode.
"""

from __future__ import annotations

import re
import struct
import threading
from dataclasses import dataclass, replace

from . import picvm

PACKAGE_MAGIC = b"2CPK"
PACKAGE_VERSION = 1

# Control-channel opcode for the link handshake (first payload byte).
CTRL_RESOLVE = 0x01

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

SENDER_PATCH = "sender"
RECEIVER_PATCH = "receiver"

_SOURCE_NAME_RE = re.compile(r"^jam_(\w+)\.amc$")


def fnv1a64(name: str | bytes) -> int:
    """FNV-1a over the UTF-8 symbol name, 64-bit."""
    data = name.encode() if isinstance(name, str) else name
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


# --------------------------------------------------------------------------
# Errors

class AssembleError(Exception):
    """Base for assembler rejections; carries the 1-based source line."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(message)
        self.line = line
        self.filename: str | None = None

    def __str__(self):
        prefix = f"{self.filename}:" if self.filename else ""
        return f"{prefix}{self.line}: {self.args[0]}" if self.line else f"{prefix} {self.args[0]}"


class ParseError(AssembleError):
    pass


class UnknownMnemonic(AssembleError):
    pass


class DuplicateLabel(AssembleError):
    pass


class UndefinedLabel(AssembleError):
    pass


class UndeclaredExtern(AssembleError):
    pass


class DuplicateElementName(Exception):
    pass


class PackageError(Exception):
    """Base for package file rejections."""


class BadPackageMagic(PackageError):
    pass


class CorruptElement(PackageError):
    def __init__(self, element_id: int, message: str = ""):
        super().__init__(f"element {element_id}: {message}" if message else f"element {element_id}")
        self.element_id = element_id


class ValidationFailed(PackageError):
    def __init__(self, element_id: int, cause: Exception):
        super().__init__(f"element {element_id}: {cause}")
        self.element_id = element_id


class UnresolvedSymbol(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


class UnknownSymbolHash(KeyError):
    def __init__(self, value: int):
        super().__init__(f"0x{value:016x}")
        self.value = value


class SymbolHashCollision(Exception):
    pass


# --------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class Element:
    element_id: int
    element_name: str
    code: picvm.CodeObject


@dataclass(frozen=True)
class Package:
    package_name: str
    elements: tuple[Element, ...]  # index == element_id

    def by_name(self, name: str) -> Element:
        for el in self.elements:
            if el.element_name == name:
                return el
        raise KeyError(name)

    def by_id(self, element_id: int) -> Element:
        return self.elements[element_id]


@dataclass(frozen=True)
class Ried:
    """A named bundle of symbol registrations installed as one unit."""

    name: str
    symbols: dict[str, object]  # symbol name -> host function

    def install(self, table: SymbolTable) -> dict[str, int]:
        return {name: table.register(name, fn) for name, fn in self.symbols.items()}


class SymbolTable:
    """Receiver-side symbol registry.

    Handles start at 1 and are never reused; re-registering a name
    yields a fresh handle and invalidates the old one, so a stale
    handle held by a peer dispatches to nothing rather than to the
    wrong function.  Lookups are lock-free; registration is exclusive.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._next_handle = 1
        self._by_name: dict[str, int] = {}
        self._by_hash: dict[int, str] = {}
        self._functions: dict[int, object] = {}  # live handle -> fn

    def register(self, name: str, host_fn) -> int:
        if not name:
            raise ValueError("symbol name must be non-empty")
        with self._lock:
            h = fnv1a64(name)
            clash = self._by_hash.get(h)
            if clash is not None and clash != name:
                raise SymbolHashCollision(f"{name!r} collides with {clash!r}")
            old = self._by_name.get(name)
            if old is not None:
                del self._functions[old]
            handle = self._next_handle
            self._next_handle += 1
            self._by_name[name] = handle
            self._by_hash[h] = name
            self._functions[handle] = host_fn
            return handle

    def resolve(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnresolvedSymbol(name) from None

    def resolve_hash(self, value: int) -> int:
        name = self._by_hash.get(value)
        if name is None:
            raise UnknownSymbolHash(value)
        return self._by_name[name]

    def dispatch(self, handle: int):
        """Handle -> host function; the picvm CALLX callback."""
        try:
            return self._functions[handle]
        except KeyError:
            raise picvm.InvalidHandle(f"handle {handle}") from None

    def names(self) -> tuple[str, ...]:
        return tuple(self._by_name)


def register_symbol(table: SymbolTable, name: str, host_fn) -> int:
    return table.register(name, host_fn)


# --------------------------------------------------------------------------
# Assembler

_REG_RE = re.compile(r"^[rR](\d+)$")
_MEM_RE = re.compile(r"^(args|payload|scratch)\[([rR]\d+)(?:([+-])(0[xX][0-9a-fA-F]+|\d+))?\]$")
_LABEL_RE = re.compile(r"^([A-Za-z_]\w*):(.*)$")
_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")

_REGIONS = {"args": picvm.REGION_ARGS, "payload": picvm.REGION_PAYLOAD, "scratch": picvm.REGION_SCRATCH}

_ALU_MNEMONICS = ("ADD", "SUB", "MUL", "DIVU", "AND", "OR", "XOR", "SHL", "SHR")
_LOAD_MNEMONICS = ("LD1", "LD2", "LD4", "LD8")
_STORE_MNEMONICS = ("ST1", "ST2", "ST4", "ST8")
_BRANCH_MNEMONICS = ("BEQ", "BNE", "BLTU", "BGEU")


def _parse_reg(text: str, line: int) -> int:
    m = _REG_RE.match(text)
    if not m or int(m.group(1)) >= picvm.NUM_REGS:
        raise ParseError(f"bad register {text!r}", line)
    return int(m.group(1))


def _parse_imm(text: str, line: int) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise ParseError(f"bad immediate {text!r}", line) from None
    if not -(2**31) <= value < 2**31:
        raise ParseError(f"immediate {value} out of 32-bit range", line)
    return value


def _parse_mem(text: str, line: int) -> tuple[int, int, int]:
    m = _MEM_RE.match(text)
    if not m:
        raise ParseError(f"bad memory operand {text!r}", line)
    region = _REGIONS[m.group(1)]
    base = _parse_reg(m.group(2), line)
    imm = 0
    if m.group(3):
        imm = _parse_imm(m.group(4), line)
        if m.group(3) == "-":
            imm = -imm
    return region, base, imm


def assemble_jam(source_text: str) -> picvm.CodeObject:
    """Assemble one jam source into validated code plus its extern list."""
    externs: list[str] = []
    labels: dict[str, int] = {}
    # (line_no, mnemonic, operand list) after label stripping
    statements: list[tuple[int, str, list[str]]] = []

    for line_no, raw in enumerate(source_text.splitlines(), start=1):
        text = re.split(r"[;#]", raw, maxsplit=1)[0].strip()
        if not text:
            continue
        if text.startswith(".extern"):
            parts = text.split()
            if len(parts) != 2 or not _NAME_RE.match(parts[1]):
                raise ParseError(f"bad extern declaration {text!r}", line_no)
            if parts[1] not in externs:
                externs.append(parts[1])
            continue
        m = _LABEL_RE.match(text)
        if m:
            label = m.group(1)
            if label in labels:
                raise DuplicateLabel(f"label {label!r} redefined", line_no)
            labels[label] = len(statements)
            text = m.group(2).strip()
            if not text:
                continue
        fields = text.split(None, 1)
        mnemonic = fields[0].upper()
        operands = [op.strip() for op in fields[1].split(",")] if len(fields) > 1 else []
        statements.append((line_no, mnemonic, operands))

    instructions: list[picvm.Instruction] = []
    for pos, (line_no, mnemonic, ops) in enumerate(statements):
        def need(count: int):
            if len(ops) != count:
                raise ParseError(f"{mnemonic} takes {count} operands, got {len(ops)}", line_no)

        def branch_imm(text: str) -> int:
            if _NAME_RE.match(text):
                if text not in labels:
                    raise UndefinedLabel(f"label {text!r} is not defined", line_no)
                return labels[text] - pos
            return _parse_imm(text, line_no)

        if mnemonic == "HALT":
            need(0)
            instructions.append(picvm.Instruction(picvm.OP_HALT))
        elif mnemonic == "LDI":
            need(2)
            instructions.append(picvm.Instruction(picvm.OP_LDI, rd=_parse_reg(ops[0], line_no),
                                                  imm=_parse_imm(ops[1], line_no)))
        elif mnemonic == "MOV":
            need(2)
            instructions.append(picvm.Instruction(picvm.OP_MOV, rd=_parse_reg(ops[0], line_no),
                                                  rs1=_parse_reg(ops[1], line_no)))
        elif mnemonic in _ALU_MNEMONICS:
            need(3)
            instructions.append(picvm.Instruction(picvm.OPCODES[mnemonic],
                                                  rd=_parse_reg(ops[0], line_no),
                                                  rs1=_parse_reg(ops[1], line_no),
                                                  rs2=_parse_reg(ops[2], line_no)))
        elif mnemonic in _LOAD_MNEMONICS or mnemonic in _STORE_MNEMONICS:
            need(2)
            region, base, imm = _parse_mem(ops[1], line_no)
            instructions.append(picvm.Instruction(picvm.OPCODES[mnemonic],
                                                  rd=_parse_reg(ops[0], line_no),
                                                  rs1=base, rs2=region, imm=imm))
        elif mnemonic == "JMP":
            need(1)
            instructions.append(picvm.Instruction(picvm.OP_JMP, imm=branch_imm(ops[0])))
        elif mnemonic in _BRANCH_MNEMONICS:
            need(3)
            instructions.append(picvm.Instruction(picvm.OPCODES[mnemonic],
                                                  rs1=_parse_reg(ops[0], line_no),
                                                  rs2=_parse_reg(ops[1], line_no),
                                                  imm=branch_imm(ops[2])))
        elif mnemonic == "CALLX":
            need(2)
            if ops[1] not in externs:
                raise UndeclaredExtern(f"extern {ops[1]!r} not declared", line_no)
            instructions.append(picvm.Instruction(picvm.OP_CALLX, rd=_parse_reg(ops[0], line_no),
                                                  imm=externs.index(ops[1])))
        else:
            raise UnknownMnemonic(f"unknown mnemonic {mnemonic!r}", line_no)

    code = picvm.validate(picvm.encode_code(instructions), len(externs))
    return replace(code, extern_names=tuple(externs))


# --------------------------------------------------------------------------
# Package files

def _pack_str(out: bytearray, text: str) -> None:
    data = text.encode()
    out += struct.pack("<H", len(data))
    out += data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise EOFError(f"needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode()


def element_name_for(filename: str) -> str:
    """Canonical source filename -> element name (jam_ssum.amc -> ssum)."""
    m = _SOURCE_NAME_RE.match(filename.rsplit("/", 1)[-1])
    if not m:
        raise ValueError(f"source file {filename!r} does not match jam_<name>.amc")
    return m.group(1)


def build_package(name: str, sources: list[tuple[str, str]]) -> tuple[bytes, str]:
    """sources: (canonical filename, source text) pairs.

    Returns (package bytes, manifest text).  IDs are assigned 0..n-1 in
    sorted element-name order.  Manifest lines are
    `id name code_bytes extern1,extern2` with `-` when no externs.
    """
    if not name:
        raise ValueError("package name must be non-empty")
    if not sources:
        raise ValueError("a package needs at least one source")

    named: dict[str, picvm.CodeObject] = {}
    for filename, text in sources:
        element_name = element_name_for(filename)
        if element_name in named:
            raise DuplicateElementName(element_name)
        try:
            named[element_name] = assemble_jam(text)
        except AssembleError as err:
            err.filename = filename
            raise

    out = bytearray(PACKAGE_MAGIC)
    out += struct.pack("<H", PACKAGE_VERSION)
    _pack_str(out, name)
    out += struct.pack("<H", len(named))
    manifest_lines = []
    for element_id, element_name in enumerate(sorted(named)):
        code = named[element_name]
        raw = code.code_bytes
        out += struct.pack("<H", element_id)
        _pack_str(out, element_name)
        out += struct.pack("<H", len(code.extern_names))
        for extern in code.extern_names:
            _pack_str(out, extern)
        out += struct.pack("<I", len(raw))
        out += raw
        externs = ",".join(code.extern_names) or "-"
        manifest_lines.append(f"{element_id} {element_name} {len(raw)} {externs}")
    return bytes(out), "\n".join(manifest_lines) + "\n"


def load_package(data: bytes) -> Package:
    """Parse and revalidate a package file; nothing is trusted."""
    r = _Reader(data)
    try:
        if r.take(4) != PACKAGE_MAGIC:
            raise BadPackageMagic("wrong magic")
        if r.u16() != PACKAGE_VERSION:
            raise BadPackageMagic("unsupported version")
        package_name = r.string()
        count = r.u16()
    except (EOFError, UnicodeDecodeError) as err:
        raise BadPackageMagic(str(err)) from None
    if not package_name:
        raise BadPackageMagic("empty package name")

    elements = []
    seen_names = set()
    for expected_id in range(count):
        try:
            element_id = r.u16()
            element_name = r.string()
            extern_count = r.u16()
            externs = tuple(r.string() for _ in range(extern_count))
            code_bytes = r.take(r.u32())
        except (EOFError, UnicodeDecodeError) as err:
            raise CorruptElement(expected_id, str(err)) from None
        if element_id != expected_id:
            raise CorruptElement(expected_id, f"id {element_id} out of order")
        if not element_name or element_name in seen_names:
            raise CorruptElement(element_id, f"bad or duplicate name {element_name!r}")
        seen_names.add(element_name)
        try:
            code = picvm.validate(code_bytes, len(externs))
        except picvm.ValidateError as err:
            raise ValidationFailed(element_id, err) from err
        elements.append(Element(element_id, element_name, replace(code, extern_names=externs)))
    if r.pos != len(data):
        raise CorruptElement(count - 1 if count else 0, f"{len(data) - r.pos} trailing bytes")
    return Package(package_name, tuple(elements))


def save_package(path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)


def load_package_file(path) -> Package:
    with open(path, "rb") as f:
        return load_package(f.read())


# --------------------------------------------------------------------------
# Link handshake and indirection-table patching

def encode_resolve_request(names: list[str]) -> bytes:
    out = bytearray([CTRL_RESOLVE])
    out += struct.pack("<H", len(names))
    for name in names:
        _pack_str(out, name)
    return bytes(out)


def handle_resolve_request(table: SymbolTable, payload: bytes) -> bytes:
    """Server side of the handshake: request payload -> reply payload."""
    r = _Reader(payload)
    if r.take(1)[0] != CTRL_RESOLVE:
        raise ValueError("not a resolve request")
    names = [r.string() for _ in range(r.u16())]
    try:
        handles = [table.resolve(name) for name in names]
    except UnresolvedSymbol as err:
        out = bytearray([0x00])
        _pack_str(out, err.name)
        return bytes(out)
    reply = bytearray([0x01])
    for handle in handles:
        reply += struct.pack("<Q", handle)
    return bytes(reply)


def resolve_symbols(endpoint, names: list[str]) -> list[int]:
    """The link handshake: ask the peer for its handles, positionally.

    `endpoint` needs only a control_rpc(bytes) -> bytes method.  The
    resolution is atomic: one unknown name fails the whole batch.
    """
    if not names:
        return []
    reply = endpoint.control_rpc(encode_resolve_request(list(names)))
    r = _Reader(reply)
    status = r.take(1)[0]
    if status != 0x01:
        raise UnresolvedSymbol(r.string())
    return [struct.unpack("<Q", r.take(8))[0] for _ in names]


def patch_got(code: picvm.CodeObject, mode: str,
              peer_cache: dict[str, int] | None = None) -> tuple[int, ...]:
    """Build the indirection table that rides in the frame.

    sender mode: peer handles (already resolved via the handshake).
    receiver mode: symbol-name hashes, swapped for local handles by the
    receiver just before execution.
    """
    if mode == SENDER_PATCH:
        cache = peer_cache or {}
        try:
            return tuple(cache[name] for name in code.extern_names)
        except KeyError as err:
            raise UnresolvedSymbol(err.args[0]) from None
    if mode == RECEIVER_PATCH:
        return tuple(fnv1a64(name) for name in code.extern_names)
    raise ValueError(f"unknown patch mode {mode!r}")


def resolve_hashes(table: SymbolTable, entries) -> list[int]:
    """Receiver-patch arrival step: hash entries -> live local handles."""
    return [table.resolve_hash(h) for h in entries]
