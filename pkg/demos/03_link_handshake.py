"""Linking a shipped function against the receiver's symbols.

A package bundles named functions; each carries the names of the
external host calls it makes.  Before (or as) a message crosses the
wire, every name must become the receiver's live handle.  Two ways:

  sender-patch    the sender asks the receiver for handles over the
                  control channel once, caches them, and writes them
                  into each outgoing message's indirection table
  receiver-patch  the sender writes 64-bit name hashes instead and the
                  receiver swaps in its own handles on arrival

Run: python3 demos/03_link_handshake.py
"""

from amlink import linkpkg, testpkg

package = testpkg.load_test_package()
for element in (package.by_id(0), package.by_id(1)):
    print(f"element {element.element_id} {element.element_name!r} "
          f"externals {list(element.code.extern_names)}")

# The receiver owns a symbol table.  Installing an interface bundle
# registers each host function under a never-reused integer handle.
table = linkpkg.SymbolTable()
handles = testpkg.make_ried().install(table)
print(f"receiver handles: {handles}")

ssum = package.by_name("ssum")

# Sender-patch: resolve names to handles (here directly against the
# table; over a live connection this is one control round-trip), then
# stamp them into the message.
resolved = {name: table.resolve(name) for name in ssum.code.extern_names}
got = linkpkg.patch_got(ssum.code, "sender", peer_cache=resolved)
print(f"sender-patched indirection table: {got}")

# Receiver-patch: the message carries name hashes; the receiver turns
# them back into handles by hash lookup.
hashed = linkpkg.patch_got(ssum.code, "receiver")
print(f"hash-carrying indirection table: {[hex(h) for h in hashed]}")
print(f"  (fnv1a64('ssum_store') == {hex(linkpkg.fnv1a64('ssum_store'))})")
restored = linkpkg.resolve_hashes(table, hashed)
assert tuple(restored) == tuple(got)
print(f"receiver restored the same handles: {tuple(restored)}")

# A name the receiver never registered fails loudly, not silently.
try:
    linkpkg.resolve_hashes(table, [linkpkg.fnv1a64("no_such_call")])
except linkpkg.UnknownSymbolHash as err:
    print(f"unknown external rejected: {err}")

# Packages survive the byte round-trip that ships them.
blob, manifest = linkpkg.build_package("workloads", testpkg.jam_sources())
reloaded = linkpkg.load_package(blob)
print("package manifest:")
for line in manifest.splitlines():
    print(f"  {line}")
assert reloaded.by_name("ssum").code.code_bytes == ssum.code.code_bytes
print(f"rebuilt package round-trips ({len(blob)} bytes)")
