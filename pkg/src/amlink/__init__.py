"""amlink: an active-message runtime for Python.

A message carries portable function code and its data in one frame.  The
frame is put one-sidedly into a slot of the receiver's mailbox; the final
signal byte makes it visible, and the receiver's serve loop executes the
carried code on arrival.  External functions are reached through a small
per-message indirection table patched either by the sender (pre-resolved
handles) or by the receiver (symbol-name hashes resolved locally).

Submodules:

    wire       frame layout, encode/decode, sizing
    picvm      the portable register bytecode interpreter
    linkpkg    assembler, package file format, symbol tables, patching
    transport  one-sided put transports (in-process and TCP)
    mailbox    slot geometry, credit flow, signal waiting
    runtime    nodes, endpoints, the serve loop, link handshake
    testpkg    the bundled test package (ssum, ipt) and native oracles
    bench      ping-pong and injection-rate benchmarks, stats, CSV
"""

__version__ = "0.1.0"
