"""Assembler, package format, symbol tables, handshake, and patching."""

from __future__ import annotations

import struct
import threading

import pytest

from amlink import linkpkg, picvm

SUM_SOURCE = """\
.extern ssum_store
        LDI  r2, 16
        LDI  r3, 4
        LDI  r1, 0
        LDI  r4, 0
loop:   BGEU r1, r2, done
        LD4  r5, payload[r1+0]
        ADD  r4, r4, r5
        ADD  r1, r1, r3
        JMP  loop
done:   MOV  r1, r4
        CALLX r0, ssum_store
        HALT
"""


# FNV-1a 64 checked against published vectors and a second implementation.
def _fnv_reference(data: bytes) -> int:
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % 2**64
    return h


@pytest.mark.parametrize(
    "text,expected",
    [
        ("", 0xCBF29CE484222325),
        ("a", 0xAF63DC4C8601EC8C),
        ("foobar", 0x85944171F73967E8),
    ],
)
def test_fnv1a64_known_vectors(text, expected):
    assert linkpkg.fnv1a64(text) == expected


def test_fnv1a64_matches_reference():
    for name in ("ssum_store", "ipt_hash_put", "ipt_copy", "x" * 100):
        assert linkpkg.fnv1a64(name) == _fnv_reference(name.encode())


# -- assembler --------------------------------------------------------------

def test_assemble_halt():
    code = linkpkg.assemble_jam("HALT")
    assert len(code.instructions) == 1
    assert code.instructions[0].opcode == picvm.OP_HALT
    assert code.extern_names == ()


def test_assemble_sum_loop():
    code = linkpkg.assemble_jam(SUM_SOURCE)
    assert code.extern_names == ("ssum_store",)
    callx = [i for i in code.instructions if i.opcode == picvm.OP_CALLX]
    assert len(callx) == 1 and callx[0].imm == 0
    # label math: loop at 4, done at 9
    bgeu = code.instructions[4]
    assert bgeu.opcode == picvm.OP_BGEU and bgeu.imm == 5
    jmp = code.instructions[8]
    assert jmp.opcode == picvm.OP_JMP and jmp.imm == -4


def test_assembled_code_executes():
    code = linkpkg.assemble_jam(SUM_SOURCE)
    stored = []
    table = linkpkg.SymbolTable()
    handle = table.register("ssum_store", lambda host, v, *rest: stored.append(v))
    ctx = picvm.ExecContext(
        payload=struct.pack("<4I", 10, 20, 30, 40),
        indirection=[handle],
        dispatch=table.dispatch,
    )
    status = picvm.execute(code, ctx)
    assert status.halted
    assert stored == [100]


def test_assemble_syntax_forms():
    code = linkpkg.assemble_jam(
        """
        # leading comment
        ldi r1, 0x10      ; lower-case mnemonic, hex imm
        LD8 r2, scratch[r1-8]
        ST4 r2, scratch[r1]
        JMP 1
        HALT
        """
    )
    assert [i.opcode for i in code.instructions] == [
        picvm.OP_LDI, picvm.OP_LD8, picvm.OP_ST4, picvm.OP_JMP, picvm.OP_HALT
    ]
    assert code.instructions[0].imm == 16
    assert code.instructions[1].imm == -8
    assert code.instructions[1].rs2 == picvm.REGION_SCRATCH
    assert code.instructions[2].imm == 0


def test_assemble_forward_and_bare_labels():
    code = linkpkg.assemble_jam(
        """
        JMP end
        LDI r0, 1
        end:
        HALT
        """
    )
    assert code.instructions[0].imm == 2


@pytest.mark.parametrize(
    "source,error,line",
    [
        ("FROB r1, r2", linkpkg.UnknownMnemonic, 1),
        ("LDI r16, 0", linkpkg.ParseError, 1),
        ("LDI r1", linkpkg.ParseError, 1),
        ("\nLD4 r1, heap[r0+0]\nHALT", linkpkg.ParseError, 2),
        ("x: HALT\nx: HALT", linkpkg.DuplicateLabel, 2),
        ("JMP nowhere\nHALT", linkpkg.UndefinedLabel, 1),
        ("CALLX r0, mystery\nHALT", linkpkg.UndeclaredExtern, 1),
        (".extern 9bad\nHALT", linkpkg.ParseError, 1),
        ("LDI r0, 0x1FFFFFFFF\nHALT", linkpkg.ParseError, 1),
    ],
)
def test_assemble_errors_carry_line(source, error, line):
    with pytest.raises(error) as exc_info:
        linkpkg.assemble_jam(source)
    assert exc_info.value.line == line


def test_assemble_rejects_bad_branch_math():
    with pytest.raises(picvm.BranchOutOfRange):
        linkpkg.assemble_jam("JMP 5\nHALT")


def test_extern_declaration_order_is_table_order():
    src_ab = ".extern alpha\n.extern beta\nCALLX r0, beta\nHALT"
    src_ba = ".extern beta\n.extern alpha\nCALLX r0, beta\nHALT"
    code_ab = linkpkg.assemble_jam(src_ab)
    code_ba = linkpkg.assemble_jam(src_ba)
    assert code_ab.extern_names == ("alpha", "beta")
    assert code_ba.extern_names == ("beta", "alpha")
    assert code_ab.instructions[0].imm == 1
    assert code_ba.instructions[0].imm == 0


# -- package files ----------------------------------------------------------

def _two_sources():
    return [
        ("jam_ssum.amc", SUM_SOURCE),
        ("jam_ipt.amc", ".extern ipt_hash_put\nCALLX r0, ipt_hash_put\nHALT"),
    ]


def test_build_package_single_source_gets_id_zero():
    data, manifest = linkpkg.build_package("p", [("jam_only.amc", "HALT")])
    pkg = linkpkg.load_package(data)
    assert pkg.package_name == "p"
    assert pkg.elements[0].element_id == 0
    assert pkg.elements[0].element_name == "only"
    assert manifest == "0 only 8 -\n"


def test_build_package_ids_follow_sorted_names():
    data, manifest = linkpkg.build_package("demo", _two_sources())
    pkg = linkpkg.load_package(data)
    assert [(el.element_id, el.element_name) for el in pkg.elements] == [(0, "ipt"), (1, "ssum")]
    lines = manifest.splitlines()
    assert lines[0] == "0 ipt 16 ipt_hash_put"
    assert lines[1].startswith("1 ssum ") and lines[1].endswith(" ssum_store")


def test_build_package_round_trip_bit_exact():
    data, _ = linkpkg.build_package("demo", _two_sources())
    pkg = linkpkg.load_package(data)
    by_name = {el.element_name: el for el in pkg.elements}
    for filename, source in _two_sources():
        name = linkpkg.element_name_for(filename)
        direct = linkpkg.assemble_jam(source)
        assert by_name[name].code.code_bytes == direct.code_bytes
        assert by_name[name].code.extern_names == direct.extern_names


def test_build_package_rejects_duplicates_and_bad_names():
    with pytest.raises(linkpkg.DuplicateElementName):
        linkpkg.build_package("p", [("jam_x.amc", "HALT"), ("a/jam_x.amc", "HALT")])
    with pytest.raises(ValueError):
        linkpkg.build_package("p", [("notajam.txt", "HALT")])
    with pytest.raises(ValueError):
        linkpkg.build_package("", [("jam_x.amc", "HALT")])
    with pytest.raises(ValueError):
        linkpkg.build_package("p", [])


def test_assemble_error_carries_filename():
    with pytest.raises(linkpkg.UnknownMnemonic) as exc_info:
        linkpkg.build_package("p", [("jam_bad.amc", "WAT")])
    assert exc_info.value.filename == "jam_bad.amc"
    assert "jam_bad.amc:1" in str(exc_info.value)


def test_load_package_bad_magic_and_truncation():
    data, _ = linkpkg.build_package("demo", _two_sources())
    with pytest.raises(linkpkg.BadPackageMagic):
        linkpkg.load_package(b"NOPE" + data[4:])
    with pytest.raises(linkpkg.BadPackageMagic):
        linkpkg.load_package(data[:3])
    with pytest.raises((linkpkg.BadPackageMagic, linkpkg.CorruptElement)):
        linkpkg.load_package(data[: len(data) // 2])
    with pytest.raises(linkpkg.CorruptElement):
        linkpkg.load_package(data + b"\x00")


def test_load_package_rejects_unknown_version():
    data, _ = linkpkg.build_package("p", [("jam_x.amc", "HALT")])
    bad = data[:4] + struct.pack("<H", 99) + data[6:]
    with pytest.raises(linkpkg.BadPackageMagic):
        linkpkg.load_package(bad)


def test_load_package_tampered_opcode_fails_validation():
    data, _ = linkpkg.build_package("p", [("jam_x.amc", "LDI r1, 5\nHALT")])
    # flip the last element's final instruction opcode to garbage
    tampered = bytearray(data)
    tampered[-8] = 0x99
    with pytest.raises(linkpkg.ValidationFailed) as exc_info:
        linkpkg.load_package(bytes(tampered))
    assert exc_info.value.element_id == 0


def test_load_package_out_of_order_ids():
    data, _ = linkpkg.build_package("demo", _two_sources())
    # first element id field sits right after magic+version+name+count
    offset = 4 + 2 + 2 + len("demo") + 2
    tampered = bytearray(data)
    struct.pack_into("<H", tampered, offset, 5)
    with pytest.raises(linkpkg.CorruptElement):
        linkpkg.load_package(bytes(tampered))


# -- symbol table -----------------------------------------------------------

def test_register_symbol_handles_start_at_one():
    table = linkpkg.SymbolTable()
    assert linkpkg.register_symbol(table, "f", lambda *a: 0) == 1
    assert table.register("g", lambda *a: 0) == 2


def test_reregistration_replaces_and_invalidates():
    table = linkpkg.SymbolTable()
    old = table.register("f", lambda *a: 1)
    new = table.register("f", lambda *a: 2)
    assert new != old
    assert table.resolve("f") == new
    assert table.dispatch(new)(None) == 2
    with pytest.raises(picvm.InvalidHandle):
        table.dispatch(old)


def test_resolve_unknown_and_hash_lookup():
    table = linkpkg.SymbolTable()
    handle = table.register("ipt_copy", lambda *a: 0)
    assert table.resolve_hash(linkpkg.fnv1a64("ipt_copy")) == handle
    with pytest.raises(linkpkg.UnresolvedSymbol):
        table.resolve("nope")
    with pytest.raises(linkpkg.UnknownSymbolHash):
        table.resolve_hash(12345)
    with pytest.raises(picvm.InvalidHandle):
        table.dispatch(0)  # handle 0 is reserved invalid


def test_hash_collision_rejected(monkeypatch):
    table = linkpkg.SymbolTable()
    monkeypatch.setattr(linkpkg, "fnv1a64", lambda name: 42)
    table.register("first", lambda *a: 0)
    with pytest.raises(linkpkg.SymbolHashCollision):
        table.register("second", lambda *a: 0)
    table.register("first", lambda *a: 1)  # same name is replacement, fine


def test_symbol_table_concurrent_register_and_resolve():
    table = linkpkg.SymbolTable()
    table.register("shared", lambda *a: 0)
    errors = []

    def writer(i):
        for k in range(50):
            table.register(f"w{i}_{k}", lambda *a: 0)

    def reader():
        for _ in range(200):
            try:
                assert table.resolve("shared") >= 1
            except Exception as exc:  # noqa: BLE001 - collecting for the assert below
                errors.append(exc)

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(4)]
    threads += [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    handles = [table.resolve(f"w{i}_{k}") for i in range(4) for k in range(50)]
    assert len(set(handles)) == len(handles)


def test_ried_install():
    table = linkpkg.SymbolTable()
    ried = linkpkg.Ried("testlib", {"a": lambda *x: 1, "b": lambda *x: 2})
    handles = ried.install(table)
    assert set(handles) == {"a", "b"}
    assert table.dispatch(handles["a"])(None) == 1


# -- handshake and patching -------------------------------------------------

class FakeEndpoint:
    def __init__(self, table):
        self.table = table
        self.calls = 0

    def control_rpc(self, payload: bytes) -> bytes:
        self.calls += 1
        return linkpkg.handle_resolve_request(self.table, payload)


def test_resolve_symbols_round_trip():
    table = linkpkg.SymbolTable()
    h1 = table.register("ssum_store", lambda *a: 0)
    h2 = table.register("ipt_copy", lambda *a: 0)
    ep = FakeEndpoint(table)
    assert linkpkg.resolve_symbols(ep, []) == []
    assert ep.calls == 0  # empty query never hits the wire
    assert linkpkg.resolve_symbols(ep, ["ipt_copy", "ssum_store"]) == [h2, h1]


def test_resolve_symbols_atomic_failure():
    table = linkpkg.SymbolTable()
    table.register("ssum_store", lambda *a: 0)
    ep = FakeEndpoint(table)
    with pytest.raises(linkpkg.UnresolvedSymbol) as exc_info:
        linkpkg.resolve_symbols(ep, ["ssum_store", "nope"])
    assert exc_info.value.name == "nope"


def test_patch_got_modes():
    code = linkpkg.assemble_jam(
        ".extern a\n.extern b\nCALLX r0, a\nCALLX r0, b\nHALT"
    )
    assert linkpkg.patch_got(code, linkpkg.SENDER_PATCH, {"a": 7, "b": 9}) == (7, 9)
    hashes = linkpkg.patch_got(code, linkpkg.RECEIVER_PATCH)
    assert hashes == (linkpkg.fnv1a64("a"), linkpkg.fnv1a64("b"))
    with pytest.raises(linkpkg.UnresolvedSymbol):
        linkpkg.patch_got(code, linkpkg.SENDER_PATCH, {"a": 7})
    with pytest.raises(ValueError):
        linkpkg.patch_got(code, "magic")
    no_externs = linkpkg.assemble_jam("HALT")
    assert linkpkg.patch_got(no_externs, linkpkg.SENDER_PATCH, {}) == ()


def test_patch_order_follows_extern_permutation():
    cache = {"a": 11, "b": 22}
    ab = linkpkg.assemble_jam(".extern a\n.extern b\nHALT")
    ba = linkpkg.assemble_jam(".extern b\n.extern a\nHALT")
    assert linkpkg.patch_got(ab, linkpkg.SENDER_PATCH, cache) == (11, 22)
    assert linkpkg.patch_got(ba, linkpkg.SENDER_PATCH, cache) == (22, 11)


def test_resolve_hashes_arrival_step():
    table = linkpkg.SymbolTable()
    handle = table.register("ipt_copy", lambda *a: 0)
    entries = linkpkg.patch_got(
        linkpkg.assemble_jam(".extern ipt_copy\nCALLX r0, ipt_copy\nHALT"),
        linkpkg.RECEIVER_PATCH,
    )
    assert linkpkg.resolve_hashes(table, entries) == [handle]
    with pytest.raises(linkpkg.UnknownSymbolHash):
        linkpkg.resolve_hashes(table, [999])
