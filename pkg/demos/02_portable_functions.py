"""The portable function format: position-independent bytecode for a
16-register virtual machine, safe to run on bytes that just arrived
from the network.

Every memory access names one of four regions (args, payload, scratch,
indirection table) and is bounds-checked; external calls go through the
per-message indirection table; a fuel budget bounds execution time.

Run: python3 demos/02_portable_functions.py
"""

from amlink import linkpkg, picvm

# Assembly for a function that sums the payload's little-endian u32s
# and hands the total to the host through an external call.
SOURCE = """
    .extern total_sink
    ld4 r2, args[r0+0]      ; element count
    ldi r5, 2
    shl r2, r2, r5          ; count * 4 = byte extent
    ldi r6, 4
    ldi r3, 0               ; cursor
    ldi r1, 0               ; running sum
loop:
    bgeu r3, r2, done
    ld4 r4, payload[r3+0]
    add r1, r1, r4
    add r3, r3, r6
    jmp loop
done:
    callx r0, total_sink    ; host receives r1 (first argument register)
    halt
"""

code = linkpkg.assemble_jam(SOURCE)
print(f"assembled {len(code.instructions)} instructions "
      f"({len(code.code_bytes)} bytes), externals: {code.extern_names}")

# The receiver's side: register host functions, build the indirection
# table this message's external references resolve through.
table = linkpkg.SymbolTable()
seen = []
linkpkg.register_symbol(table, "total_sink", lambda host, total, *_: seen.append(total) or 0)

payload = bytes(range(16))  # four u32s
args = (4).to_bytes(4, "little")
ctx = picvm.ExecContext(args=args, payload=payload,
                        indirection=[table.resolve("total_sink")],
                        dispatch=table.dispatch, fuel=1000)
status = picvm.execute(code, ctx)
print(f"exit: {status.kind}, host saw total {seen[0]:#010x}")

# Safety: out-of-bounds reads trap instead of reading the host's memory.
evil = linkpkg.assemble_jam("""
    ldi r1, 4096
    ld4 r2, payload[r1+0]
    halt
""")
status = picvm.execute(evil, picvm.ExecContext(payload=b"tiny", fuel=100))
print(f"out-of-bounds load: {status.kind} ({status.reason})")

# Safety: infinite loops run out of fuel instead of hanging the server.
spinner = linkpkg.assemble_jam("""
top:
    jmp top
""")
status = picvm.execute(spinner, picvm.ExecContext(fuel=100))
print(f"endless loop: {status.kind} after the fuel budget")

# Safety: code that arrives malformed never starts executing.
try:
    picvm.validate(b"\xff" * 8, extern_count=0)
except picvm.ValidateError as err:
    print(f"malformed code rejected up front: {type(err).__name__}: {err}")
