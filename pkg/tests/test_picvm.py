"""Bytecode validation, interpretation, traps, and sandbox properties."""

from __future__ import annotations

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amlink import picvm
from amlink.picvm import Instruction as I


def _code(*instructions) -> picvm.CodeObject:
    return picvm.validate(picvm.encode_code(instructions), extern_count=8)


def _run(code, **ctx_kwargs):
    ctx = picvm.ExecContext(**ctx_kwargs)
    status = picvm.execute(code, ctx)
    return status, ctx


def test_encoding_is_8_bytes_le():
    raw = picvm.encode_code([I(picvm.OP_LDI, rd=3, imm=-2)])
    assert raw == struct.pack("<BBBBi", 0x01, 3, 0, 0, -2)


def test_validate_single_halt():
    code = picvm.validate(picvm.encode_code([I(picvm.OP_HALT)]), 0)
    assert len(code.instructions) == 1


def test_validate_callx_index_out_of_range():
    raw = picvm.encode_code([I(picvm.OP_CALLX, rd=0, imm=2), I(picvm.OP_HALT)])
    picvm.validate(raw, 3)
    with pytest.raises(picvm.ExternIndexOutOfRange):
        picvm.validate(raw, 2)  # imm == extern_count


def test_validate_branch_out_of_range():
    with pytest.raises(picvm.BranchOutOfRange):
        picvm.validate(picvm.encode_code([I(picvm.OP_JMP, imm=-1)]), 0)
    with pytest.raises(picvm.BranchOutOfRange):
        picvm.validate(picvm.encode_code([I(picvm.OP_JMP, imm=1)]), 0)
    with pytest.raises(picvm.BranchOutOfRange):
        picvm.validate(
            picvm.encode_code([I(picvm.OP_BEQ, rs1=0, rs2=0, imm=5), I(picvm.OP_HALT)]), 0
        )


def test_validate_truncated():
    with pytest.raises(picvm.TruncatedCode):
        picvm.validate(b"\x00" * 7, 0)
    with pytest.raises(picvm.TruncatedCode):
        picvm.validate(b"", 0)


def test_validate_bad_opcode_and_operands():
    with pytest.raises(picvm.BadOpcode):
        picvm.validate(struct.pack("<BBBBi", 0x99, 0, 0, 0, 0), 0)
    with pytest.raises(picvm.BadOpcode):  # register index 16
        picvm.validate(picvm.encode_code([I(picvm.OP_LDI, rd=16)]), 0)
    with pytest.raises(picvm.BadOpcode):  # region selector 3
        picvm.validate(picvm.encode_code([I(picvm.OP_LD4, rd=0, rs1=0, rs2=3)]), 0)


def test_validate_ignores_unused_operand_fields():
    # JMP reads only imm; rd/rs1/rs2 are don't-care bytes.
    raw = picvm.encode_code([I(picvm.OP_JMP, rd=200, rs1=99, rs2=77, imm=1), I(picvm.OP_HALT)])
    assert len(picvm.validate(raw, 0).instructions) == 2


def test_add_program():
    code = _code(
        I(picvm.OP_LDI, rd=1, imm=2),
        I(picvm.OP_LDI, rd=2, imm=3),
        I(picvm.OP_ADD, rd=0, rs1=1, rs2=2),
        I(picvm.OP_HALT),
    )
    status, ctx = _run(code)
    assert status.halted
    assert ctx.regs[0] == 5


def test_payload_sum_loop():
    # r1 cursor, r2 limit, r4 accumulator; sums payload as 32-bit words.
    code = _code(
        I(picvm.OP_LDI, rd=2, imm=16),
        I(picvm.OP_LDI, rd=3, imm=4),
        I(picvm.OP_LDI, rd=1, imm=0),
        I(picvm.OP_LDI, rd=4, imm=0),
        I(picvm.OP_BGEU, rs1=1, rs2=2, imm=5),
        I(picvm.OP_LD4, rd=5, rs1=1, rs2=picvm.REGION_PAYLOAD),
        I(picvm.OP_ADD, rd=4, rs1=4, rs2=5),
        I(picvm.OP_ADD, rd=1, rs1=1, rs2=3),
        I(picvm.OP_JMP, imm=-4),
        I(picvm.OP_MOV, rd=0, rs1=4),
        I(picvm.OP_HALT),
    )
    status, ctx = _run(code, payload=struct.pack("<4I", 1, 2, 3, 4))
    assert status.halted
    assert ctx.regs[0] == 10  # 1+2+3+4, recomputed by hand


def test_fuel_exhaustion_is_exact():
    code = _code(
        I(picvm.OP_LDI, rd=1, imm=2),
        I(picvm.OP_LDI, rd=2, imm=3),
        I(picvm.OP_ADD, rd=0, rs1=1, rs2=2),
        I(picvm.OP_HALT),
    )
    status, _ = _run(code, fuel=2)
    assert status.kind == picvm.FUEL_EXHAUSTED
    status, ctx = _run(code, fuel=4)  # HALT itself costs one unit
    assert status.halted
    assert ctx.fuel == 0
    status, _ = _run(code, fuel=3)
    assert status.kind == picvm.FUEL_EXHAUSTED


def test_infinite_loop_terminates_by_fuel():
    code = _code(I(picvm.OP_JMP, imm=0))
    status, ctx = _run(code, fuel=1000)
    assert status.kind == picvm.FUEL_EXHAUSTED
    assert ctx.fuel == 0


def test_ldi_sign_extends():
    code = _code(I(picvm.OP_LDI, rd=0, imm=-1), I(picvm.OP_HALT))
    _, ctx = _run(code)
    assert ctx.regs[0] == 2**64 - 1


def test_wrapping_arithmetic():
    code = _code(
        I(picvm.OP_LDI, rd=1, imm=-1),  # 2^64-1
        I(picvm.OP_LDI, rd=2, imm=2),
        I(picvm.OP_ADD, rd=3, rs1=1, rs2=2),
        I(picvm.OP_LDI, rd=4, imm=0),
        I(picvm.OP_SUB, rd=5, rs1=4, rs2=2),
        I(picvm.OP_MUL, rd=6, rs1=1, rs2=1),
        I(picvm.OP_HALT),
    )
    _, ctx = _run(code)
    assert ctx.regs[3] == 1
    assert ctx.regs[5] == 2**64 - 2
    assert ctx.regs[6] == 1  # (2^64-1)^2 mod 2^64


def test_shift_count_masked_to_6_bits():
    code = _code(
        I(picvm.OP_LDI, rd=1, imm=1),
        I(picvm.OP_LDI, rd=2, imm=65),  # acts as 1
        I(picvm.OP_SHL, rd=3, rs1=1, rs2=2),
        I(picvm.OP_SHR, rd=4, rs1=3, rs2=2),
        I(picvm.OP_HALT),
    )
    _, ctx = _run(code)
    assert ctx.regs[3] == 2
    assert ctx.regs[4] == 1


def test_divu():
    code = _code(
        I(picvm.OP_LDI, rd=1, imm=7),
        I(picvm.OP_LDI, rd=2, imm=2),
        I(picvm.OP_DIVU, rd=0, rs1=1, rs2=2),
        I(picvm.OP_HALT),
    )
    status, ctx = _run(code)
    assert status.halted and ctx.regs[0] == 3

    code = _code(
        I(picvm.OP_LDI, rd=2, imm=0),
        I(picvm.OP_DIVU, rd=0, rs1=1, rs2=2),
        I(picvm.OP_HALT),
    )
    status, _ = _run(code)
    assert status.trapped and status.reason == picvm.DIVIDE_BY_ZERO


def test_loads_zero_extend_and_stores_truncate():
    code = _code(
        I(picvm.OP_LDI, rd=1, imm=-1),
        I(picvm.OP_LDI, rd=2, imm=0),
        I(picvm.OP_ST2, rd=1, rs1=2, rs2=picvm.REGION_SCRATCH),
        I(picvm.OP_LD2, rd=3, rs1=2, rs2=picvm.REGION_SCRATCH),
        I(picvm.OP_LD8, rd=4, rs1=2, rs2=picvm.REGION_SCRATCH),
        I(picvm.OP_HALT),
    )
    _, ctx = _run(code)
    assert ctx.regs[3] == 0xFFFF
    assert ctx.regs[4] == 0xFFFF  # bytes beyond the ST2 stayed zero


def test_out_of_bounds_traps():
    code = _code(I(picvm.OP_LD4, rd=0, rs1=1, rs2=picvm.REGION_PAYLOAD, imm=0), I(picvm.OP_HALT))
    status, _ = _run(code, payload=b"abc")  # 4-byte read of a 3-byte region
    assert status.trapped and status.reason == picvm.OUT_OF_BOUNDS_ACCESS

    code = _code(I(picvm.OP_LD1, rd=0, rs1=1, rs2=picvm.REGION_SCRATCH, imm=-1), I(picvm.OP_HALT))
    status, _ = _run(code)  # regs start 0, address -1
    assert status.trapped and status.reason == picvm.OUT_OF_BOUNDS_ACCESS

    code = _code(I(picvm.OP_ST8, rd=0, rs1=1, rs2=picvm.REGION_SCRATCH, imm=4090), I(picvm.OP_HALT))
    status, _ = _run(code)
    assert status.trapped and status.reason == picvm.OUT_OF_BOUNDS_ACCESS


def test_scratch_edge_access_ok():
    code = _code(
        I(picvm.OP_ST8, rd=1, rs1=0, rs2=picvm.REGION_SCRATCH, imm=4088),
        I(picvm.OP_HALT),
    )
    status, _ = _run(code)
    assert status.halted


def test_read_only_regions():
    code = _code(I(picvm.OP_ST1, rd=0, rs1=0, rs2=picvm.REGION_ARGS), I(picvm.OP_HALT))
    status, _ = _run(code, args=b"1234")
    assert status.trapped and status.reason == picvm.READ_ONLY_VIOLATION

    code = _code(I(picvm.OP_ST1, rd=0, rs1=0, rs2=picvm.REGION_PAYLOAD), I(picvm.OP_HALT))
    status, _ = _run(code, payload=bytearray(4))
    assert status.trapped and status.reason == picvm.READ_ONLY_VIOLATION

    status, ctx = _run(code, payload=bytearray(b"\xff" * 4), payload_writable=True)
    assert status.halted
    assert ctx.payload == bytearray(b"\x00\xff\xff\xff")


def test_pc_past_end_traps():
    code = _code(I(picvm.OP_LDI, rd=0, imm=1))  # no HALT
    status, _ = _run(code)
    assert status.trapped and status.reason == picvm.PC_OUT_OF_RANGE


def _dispatch_for(table):
    def dispatch(handle):
        try:
            return table[handle]
        except KeyError:
            raise picvm.InvalidHandle(str(handle))

    return dispatch


def test_callx_abi():
    seen = {}

    def ext(host, a1, a2, a3, a4, a5, a6):
        seen["args"] = (a1, a2, a3, a4, a5, a6)
        seen["host"] = host
        return a1 + a6

    code = _code(
        I(picvm.OP_LDI, rd=1, imm=10),
        I(picvm.OP_LDI, rd=6, imm=32),
        I(picvm.OP_CALLX, rd=7, imm=0),
        I(picvm.OP_MOV, rd=0, rs1=7),
        I(picvm.OP_HALT),
    )
    status, ctx = _run(
        code, indirection=[5], dispatch=_dispatch_for({5: ext}), host="the-host"
    )
    assert status.halted
    assert ctx.regs[0] == 42
    assert seen["args"] == (10, 0, 0, 0, 0, 32)
    assert seen["host"] == "the-host"


def test_callx_result_wraps_and_none_is_zero():
    code = _code(I(picvm.OP_CALLX, rd=0, imm=0), I(picvm.OP_HALT))
    status, ctx = _run(code, indirection=[1], dispatch=_dispatch_for({1: lambda *a: 2**64 + 3}))
    assert status.halted and ctx.regs[0] == 3
    status, ctx = _run(code, indirection=[1], dispatch=_dispatch_for({1: lambda *a: None}))
    assert status.halted and ctx.regs[0] == 0


def test_callx_external_failure_code():
    def failing(host, *args):
        raise picvm.ExternalFailure(7, "no room")

    code = _code(I(picvm.OP_CALLX, rd=0, imm=0), I(picvm.OP_HALT))
    status, _ = _run(code, indirection=[2], dispatch=_dispatch_for({2: failing}))
    assert status.trapped
    assert status.reason == picvm.EXTERNAL_FAILED
    assert status.code == 7


def test_callx_bad_handle_traps():
    code = _code(I(picvm.OP_CALLX, rd=0, imm=0), I(picvm.OP_HALT))
    status, _ = _run(code, indirection=[0], dispatch=_dispatch_for({}))
    assert status.trapped and status.reason == picvm.BAD_HANDLE


def test_determinism():
    code = _code(
        I(picvm.OP_LDI, rd=1, imm=123456),
        I(picvm.OP_LDI, rd=2, imm=7),
        I(picvm.OP_MUL, rd=3, rs1=1, rs2=2),
        I(picvm.OP_ST8, rd=3, rs1=0, rs2=picvm.REGION_SCRATCH, imm=16),
        I(picvm.OP_HALT),
    )
    runs = [_run(code, args=b"xy", payload=b"z" * 8) for _ in range(2)]
    (s1, c1), (s2, c2) = runs
    assert s1 == s2
    assert c1.regs == c2.regs
    assert c1.scratch == c2.scratch


# ---------------------------------------------------------------------------
# Sandbox fuzzing: structurally generated programs that pass validate must
# always come back with a clean ExitStatus, in-range registers, intact
# input regions, and a 4096-byte scratch.

_FUZZ_PROGRAM_LEN = 12


def _fuzz_instruction(draw, pos: int, length: int, extern_count: int):
    group = draw(st.integers(0, 6))
    reg = st.integers(0, picvm.NUM_REGS - 1)
    if group == 0:
        return I(picvm.OP_HALT)
    if group == 1:
        return I(picvm.OP_LDI, rd=draw(reg), imm=draw(st.integers(-(2**31), 2**31 - 1)))
    if group == 2:
        op = draw(st.sampled_from(sorted(picvm._ALU_OPS)))
        return I(op, rd=draw(reg), rs1=draw(reg), rs2=draw(reg))
    if group == 3:
        op = draw(st.sampled_from([picvm.OP_LD1, picvm.OP_LD2, picvm.OP_LD4, picvm.OP_LD8,
                                   picvm.OP_ST1, picvm.OP_ST2, picvm.OP_ST4, picvm.OP_ST8]))
        return I(op, rd=draw(reg), rs1=draw(reg), rs2=draw(st.integers(0, 2)),
                 imm=draw(st.integers(-64, 8192)))
    if group == 4:
        target = draw(st.integers(0, length - 1))
        return I(picvm.OP_JMP, imm=target - pos)
    if group == 5:
        op = draw(st.sampled_from(sorted(picvm._BRANCH_OPS)))
        target = draw(st.integers(0, length - 1))
        return I(op, rs1=draw(reg), rs2=draw(reg), imm=target - pos)
    return I(picvm.OP_CALLX, rd=draw(reg), imm=draw(st.integers(0, extern_count - 1)))


@st.composite
def _fuzz_programs(draw):
    return [
        _fuzz_instruction(draw, pos, _FUZZ_PROGRAM_LEN, extern_count=2)
        for pos in range(_FUZZ_PROGRAM_LEN)
    ]


@settings(max_examples=300, deadline=None)
@given(
    program=_fuzz_programs(),
    args=st.binary(max_size=32),
    payload=st.binary(max_size=64),
)
def test_sandbox_fuzz(program, args, payload):
    code = picvm.validate(picvm.encode_code(program), extern_count=2)

    def pure(host, a1, *rest):
        return (a1 * 2654435761) & (2**64 - 1)

    ctx = picvm.ExecContext(
        args=args,
        payload=payload,
        indirection=[1, 1],
        dispatch=_dispatch_for({1: pure}),
        fuel=2000,
    )
    status = picvm.execute(code, ctx)
    assert status.kind in (picvm.HALTED, picvm.TRAPPED, picvm.FUEL_EXHAUSTED)
    assert len(ctx.regs) == 16
    assert all(0 <= r < 2**64 for r in ctx.regs)
    assert len(ctx.scratch) == picvm.SCRATCH_SIZE
    assert ctx.args == args and ctx.payload == payload
