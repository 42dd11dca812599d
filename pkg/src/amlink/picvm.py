"""Portable register bytecode: validation and interpretation.

Instructions are fixed 8-byte records, little-endian:

    offset  size  field
    0       u8    opcode
    1       u8    rd    destination register
    2       u8    rs1   source register
    3       u8    rs2   source register / region selector
    4       i32   imm   signed immediate

Sixteen 64-bit unsigned registers, wrapping arithmetic.  Code is position
independent: control flow is relative (imm counts instructions from the
branching instruction itself) and every external call goes through the
per-message indirection table, never a direct address.

Memory is three bounds-checked regions selected by rs2 on LD/ST:
0 = args, 1 = payload, 2 = scratch.  args is read-only, payload is
read-only unless the context enables writes, scratch is 4096 zeroed
bytes per execution.  Effective address = regs[rs1] + imm.

Opcodes:

    0x00 HALT
    0x01 LDI   rd, imm            rd = sign-extended imm
    0x02 MOV   rd, rs1
    0x10 ADD   0x11 SUB  0x12 MUL  0x13 DIVU  0x14 AND
    0x15 OR    0x16 XOR  0x17 SHL  0x18 SHR   (rd, rs1, rs2)
    0x20-0x23  LD1/LD2/LD4/LD8  rd, region(rs2)[rs1+imm]  zero-extend
    0x28-0x2B  ST1/ST2/ST4/ST8  rd, region(rs2)[rs1+imm]  low bytes of rd
    0x30 JMP   imm                pc += imm
    0x31 BEQ   0x32 BNE  0x33 BLTU  0x34 BGEU  (rs1, rs2, imm)
    0x40 CALLX rd, imm            rd = external(indirection[imm])(r1..r6)

DIVU traps on a zero divisor; shift counts are masked to 6 bits.
Execution is metered: each instruction spends one unit of fuel and the
run stops with fuel_exhausted when it hits zero, so hostile or buggy
code cannot spin forever.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

INSTRUCTION_SIZE = 8
NUM_REGS = 16
SCRATCH_SIZE = 4096
DEFAULT_FUEL = 1_000_000

REGION_ARGS = 0
REGION_PAYLOAD = 1
REGION_SCRATCH = 2

_MASK64 = (1 << 64) - 1
_INS = struct.Struct("<BBBBi")
assert _INS.size == INSTRUCTION_SIZE

OP_HALT = 0x00
OP_LDI = 0x01
OP_MOV = 0x02
OP_ADD = 0x10
OP_SUB = 0x11
OP_MUL = 0x12
OP_DIVU = 0x13
OP_AND = 0x14
OP_OR = 0x15
OP_XOR = 0x16
OP_SHL = 0x17
OP_SHR = 0x18
OP_LD1 = 0x20
OP_LD2 = 0x21
OP_LD4 = 0x22
OP_LD8 = 0x23
OP_ST1 = 0x28
OP_ST2 = 0x29
OP_ST4 = 0x2A
OP_ST8 = 0x2B
OP_JMP = 0x30
OP_BEQ = 0x31
OP_BNE = 0x32
OP_BLTU = 0x33
OP_BGEU = 0x34
OP_CALLX = 0x40

OPCODES = {
    "HALT": OP_HALT,
    "LDI": OP_LDI,
    "MOV": OP_MOV,
    "ADD": OP_ADD,
    "SUB": OP_SUB,
    "MUL": OP_MUL,
    "DIVU": OP_DIVU,
    "AND": OP_AND,
    "OR": OP_OR,
    "XOR": OP_XOR,
    "SHL": OP_SHL,
    "SHR": OP_SHR,
    "LD1": OP_LD1,
    "LD2": OP_LD2,
    "LD4": OP_LD4,
    "LD8": OP_LD8,
    "ST1": OP_ST1,
    "ST2": OP_ST2,
    "ST4": OP_ST4,
    "ST8": OP_ST8,
    "JMP": OP_JMP,
    "BEQ": OP_BEQ,
    "BNE": OP_BNE,
    "BLTU": OP_BLTU,
    "BGEU": OP_BGEU,
    "CALLX": OP_CALLX,
}
MNEMONICS = {v: k for k, v in OPCODES.items()}

_ALU_OPS = frozenset(range(OP_ADD, OP_SHR + 1))
_LOAD_OPS = frozenset(range(OP_LD1, OP_LD8 + 1))
_STORE_OPS = frozenset(range(OP_ST1, OP_ST8 + 1))
_BRANCH_OPS = frozenset((OP_BEQ, OP_BNE, OP_BLTU, OP_BGEU))
_WIDTH = {
    OP_LD1: 1, OP_LD2: 2, OP_LD4: 4, OP_LD8: 8,
    OP_ST1: 1, OP_ST2: 2, OP_ST4: 4, OP_ST8: 8,
}

# Exit kinds.
HALTED = "halted"
TRAPPED = "trapped"
FUEL_EXHAUSTED = "fuel_exhausted"

# Trap reasons.
OUT_OF_BOUNDS_ACCESS = "out_of_bounds_access"
READ_ONLY_VIOLATION = "read_only_violation"
DIVIDE_BY_ZERO = "divide_by_zero"
EXTERNAL_FAILED = "external_failed"
PC_OUT_OF_RANGE = "pc_out_of_range"
BAD_HANDLE = "bad_handle"


class ValidateError(Exception):
    """Base class for static code rejection."""


class BadOpcode(ValidateError):
    """Unknown opcode, bad register index, or bad region selector."""


class BranchOutOfRange(ValidateError):
    pass


class ExternIndexOutOfRange(ValidateError):
    pass


class TruncatedCode(ValidateError):
    """Byte length not a positive multiple of the instruction size."""


class ExternalFailure(Exception):
    """Raised by an external function to abort with a 32-bit failure code."""

    def __init__(self, code: int, message: str = ""):
        super().__init__(message or f"external failure code {code}")
        self.code = code & 0xFFFFFFFF


class InvalidHandle(Exception):
    """Raised by the dispatch callback for a zero, stale, or unknown handle."""


@dataclass(frozen=True, slots=True)
class Instruction:
    opcode: int
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0


@dataclass(frozen=True)
class CodeObject:
    instructions: tuple[Instruction, ...]
    extern_names: tuple[str, ...]

    @property
    def code_bytes(self) -> bytes:
        return encode_code(self.instructions)


@dataclass(frozen=True)
class ExitStatus:
    kind: str
    reason: str | None = None
    code: int = 0  # external failure code when reason == external_failed

    @property
    def halted(self) -> bool:
        return self.kind == HALTED

    @property
    def trapped(self) -> bool:
        return self.kind == TRAPPED


_HALT_STATUS = ExitStatus(HALTED)
_FUEL_STATUS = ExitStatus(FUEL_EXHAUSTED)


@dataclass
class ExecContext:
    """Per-execution machine state.  Confined to one thread."""

    args: bytes = b""
    payload: bytes | bytearray = b""
    scratch: bytearray = field(default_factory=lambda: bytearray(SCRATCH_SIZE))
    regs: list[int] = field(default_factory=lambda: [0] * NUM_REGS)
    indirection: list[int] = field(default_factory=list)
    fuel: int = DEFAULT_FUEL
    host: object = None
    # handle -> callable(host, a1..a6) -> int; raises InvalidHandle/ExternalFailure
    dispatch: Callable[[int], Callable] | None = None
    payload_writable: bool = False


def encode_code(instructions) -> bytes:
    buf = bytearray(len(instructions) * INSTRUCTION_SIZE)
    for i, ins in enumerate(instructions):
        _INS.pack_into(buf, i * INSTRUCTION_SIZE, ins.opcode, ins.rd, ins.rs1, ins.rs2, ins.imm)
    return bytes(buf)


def _check_reg(value: int, pos: int) -> None:
    if value >= NUM_REGS:
        raise BadOpcode(f"instruction {pos}: register index {value}")


def validate(code_bytes: bytes, extern_count: int) -> CodeObject:
    """Statically check a code blob; returns a CodeObject or raises.

    Only the operand fields an opcode actually uses are constrained;
    unused fields may hold any byte value.  extern_count bounds CALLX
    indices (the CodeObject's extern_names are attached by the loader).
    """
    n, rem = divmod(len(code_bytes), INSTRUCTION_SIZE)
    if rem or n == 0:
        raise TruncatedCode(f"{len(code_bytes)} bytes is not a positive multiple of {INSTRUCTION_SIZE}")

    out = []
    for pos in range(n):
        opcode, rd, rs1, rs2, imm = _INS.unpack_from(code_bytes, pos * INSTRUCTION_SIZE)
        if opcode == OP_HALT:
            pass
        elif opcode == OP_LDI:
            _check_reg(rd, pos)
        elif opcode == OP_MOV:
            _check_reg(rd, pos)
            _check_reg(rs1, pos)
        elif opcode in _ALU_OPS:
            _check_reg(rd, pos)
            _check_reg(rs1, pos)
            _check_reg(rs2, pos)
        elif opcode in _LOAD_OPS or opcode in _STORE_OPS:
            _check_reg(rd, pos)
            _check_reg(rs1, pos)
            if rs2 not in (REGION_ARGS, REGION_PAYLOAD, REGION_SCRATCH):
                raise BadOpcode(f"instruction {pos}: region selector {rs2}")
        elif opcode == OP_JMP:
            if not 0 <= pos + imm < n:
                raise BranchOutOfRange(f"instruction {pos}: target {pos + imm}")
        elif opcode in _BRANCH_OPS:
            _check_reg(rs1, pos)
            _check_reg(rs2, pos)
            if not 0 <= pos + imm < n:
                raise BranchOutOfRange(f"instruction {pos}: target {pos + imm}")
        elif opcode == OP_CALLX:
            _check_reg(rd, pos)
            if not 0 <= imm < extern_count:
                raise ExternIndexOutOfRange(f"instruction {pos}: extern index {imm} of {extern_count}")
        else:
            raise BadOpcode(f"instruction {pos}: opcode 0x{opcode:02X}")
        out.append(Instruction(opcode, rd, rs1, rs2, imm))
    return CodeObject(tuple(out), ())


def execute(code: CodeObject, ctx: ExecContext) -> ExitStatus:
    """Run validated code to completion, a trap, or fuel exhaustion.

    Traps never raise: every abnormal outcome is an ExitStatus so a
    hostile message cannot unwind the serve loop.  regs[0] carries the
    result by convention when the program halts.
    """
    ins = code.instructions
    n = len(ins)
    regs = ctx.regs
    regions = (ctx.args, ctx.payload, ctx.scratch)
    writable = (False, ctx.payload_writable, True)
    indirection = ctx.indirection
    pc = 0

    while True:
        if ctx.fuel <= 0:
            return _FUEL_STATUS
        if not 0 <= pc < n:
            return ExitStatus(TRAPPED, PC_OUT_OF_RANGE)
        ctx.fuel -= 1
        i = ins[pc]
        op = i.opcode

        if op == OP_HALT:
            return _HALT_STATUS

        if op == OP_LDI:
            regs[i.rd] = i.imm & _MASK64
        elif op == OP_MOV:
            regs[i.rd] = regs[i.rs1]
        elif op in _LOAD_OPS:
            region = regions[i.rs2]
            addr = regs[i.rs1] + i.imm
            width = _WIDTH[op]
            if addr < 0 or addr + width > len(region):
                return ExitStatus(TRAPPED, OUT_OF_BOUNDS_ACCESS)
            regs[i.rd] = int.from_bytes(region[addr : addr + width], "little")
        elif op in _STORE_OPS:
            region = regions[i.rs2]
            addr = regs[i.rs1] + i.imm
            width = _WIDTH[op]
            if not writable[i.rs2]:
                return ExitStatus(TRAPPED, READ_ONLY_VIOLATION)
            if addr < 0 or addr + width > len(region):
                return ExitStatus(TRAPPED, OUT_OF_BOUNDS_ACCESS)
            region[addr : addr + width] = (regs[i.rd] & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
        elif op == OP_ADD:
            regs[i.rd] = (regs[i.rs1] + regs[i.rs2]) & _MASK64
        elif op == OP_SUB:
            regs[i.rd] = (regs[i.rs1] - regs[i.rs2]) & _MASK64
        elif op == OP_MUL:
            regs[i.rd] = (regs[i.rs1] * regs[i.rs2]) & _MASK64
        elif op == OP_DIVU:
            if regs[i.rs2] == 0:
                return ExitStatus(TRAPPED, DIVIDE_BY_ZERO)
            regs[i.rd] = regs[i.rs1] // regs[i.rs2]
        elif op == OP_AND:
            regs[i.rd] = regs[i.rs1] & regs[i.rs2]
        elif op == OP_OR:
            regs[i.rd] = regs[i.rs1] | regs[i.rs2]
        elif op == OP_XOR:
            regs[i.rd] = regs[i.rs1] ^ regs[i.rs2]
        elif op == OP_SHL:
            regs[i.rd] = (regs[i.rs1] << (regs[i.rs2] & 63)) & _MASK64
        elif op == OP_SHR:
            regs[i.rd] = regs[i.rs1] >> (regs[i.rs2] & 63)
        elif op == OP_JMP:
            pc += i.imm
            continue
        elif op == OP_BEQ:
            if regs[i.rs1] == regs[i.rs2]:
                pc += i.imm
                continue
        elif op == OP_BNE:
            if regs[i.rs1] != regs[i.rs2]:
                pc += i.imm
                continue
        elif op == OP_BLTU:
            if regs[i.rs1] < regs[i.rs2]:
                pc += i.imm
                continue
        elif op == OP_BGEU:
            if regs[i.rs1] >= regs[i.rs2]:
                pc += i.imm
                continue
        elif op == OP_CALLX:
            handle = indirection[i.imm]
            try:
                fn = ctx.dispatch(handle)
                result = fn(ctx.host, regs[1], regs[2], regs[3], regs[4], regs[5], regs[6])
            except InvalidHandle:
                return ExitStatus(TRAPPED, BAD_HANDLE)
            except ExternalFailure as exc:
                return ExitStatus(TRAPPED, EXTERNAL_FAILED, exc.code)
            regs[i.rd] = (result or 0) & _MASK64
        pc += 1
