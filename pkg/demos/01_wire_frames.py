"""A message on the wire is one frame: a 24-byte header, an external-
reference table, the function code, its arguments, the payload, and a
single trailing signal byte that makes the whole thing self-announcing.

Run: python3 demos/01_wire_frames.py
"""

from amlink import wire

# A "local" message carries no code: it names a pre-installed function
# by element id and ships only arguments and payload.
local = wire.make_parts(element_id=7, args=b"\x04\x00\x00\x00", payload=b"abcd")
print("local message, 4B payload:")
print(f"  raw bytes needed : {wire.parts_frame_size(local)}  "
      f"(header 24 + args 4 + payload 4 + signal 1, rounded up to 64)")

# An "injected" message carries the function itself: code plus one
# 8-byte external-reference entry per call target.
injected = wire.make_parts(
    flags=wire.FLAG_INJECTED,
    got_entries=(0x1111, 0x2222),
    code=bytes(1408),
    args=b"",
    payload=b"abcd",
)
print("injected message, 1408B code + 2 externals + 4B payload:")
print(f"  raw bytes needed : {wire.parts_frame_size(injected)}")

# Encoding pads to the configured slot size (fixed mode) or to the
# 64-byte-aligned minimum (variable mode).  The signal byte is always
# the last byte of the sized frame.
cfg = wire.FrameConfig(frame_size=4096, mode="fixed")
frame = wire.encode_frame(local, cfg)
print(f"fixed-mode encoding fills the slot: {len(frame)} bytes, "
      f"signal byte 0x{frame[-1]:02X} at the end")

cfg_var = wire.FrameConfig(frame_size=4096, mode="variable")
frame_var = wire.encode_frame(local, cfg_var)
print(f"variable-mode encoding stops early: {len(frame_var)} bytes")

# Decoding gives back exactly what went in.
assert wire.decode_frame(frame, cfg) == local
assert wire.decode_frame(frame_var, cfg_var) == local
print("decode(encode(m)) == m for both modes")

# Corruption is rejected, never misread: flip a header byte and the
# decoder raises a typed error instead of returning garbage.
broken = bytearray(frame)
broken[0] ^= 0xFF
try:
    wire.decode_frame(bytes(broken), cfg)
except wire.WireError as err:
    print(f"corrupt header rejected: {type(err).__name__}: {err}")
