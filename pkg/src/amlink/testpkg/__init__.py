"""Reference workloads: receiver state, host externals, portable
elements, and plain-Python equivalents.

Two workloads exercise the send/execute pipeline end to end:

ssum    streaming sum.  The element adds up the payload's u32 values
        and appends the total to the receiver's result log through the
        ``ssum_store`` extern.

ipt     indexed put table.  The element asks ``ipt_hash_put`` for the
        heap slot owning a u64 key (multiplicative hashing + linear
        probing over a power-of-two table), then bulk-copies the
        payload into that slot via ``ipt_copy``.

Each workload exists twice: as portable assembly (the ``.amc`` sources
shipped next to this module, compiled by :func:`load_test_package`) and
as a plain-Python function (:func:`native_ssum`, :func:`native_ipt`)
with identical observable effects.  Any state divergence between the
two is a correctness bug in the interpreter, the assembler, or the
frame plumbing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .. import linkpkg, picvm
from ..runtime import Host

RIED_NAME = "workloads"
ITEM_SIZE = 4  # the payload data type everywhere: little-endian u32

# ipt defaults and failure codes
TABLE_CAPACITY = 4096
SLOT_SIZE = 4096
HASH_MULTIPLIER = 0x9E3779B97F4A7C15
COPY_CLAMP = 4096  # the element never copies more than this per message
FAIL_TABLE_FULL = 1
FAIL_OUT_OF_BOUNDS = 2

_MASK64 = (1 << 64) - 1


# -- receiver state ------------------------------------------------------------


@dataclass
class SsumState:
    """Result log for the streaming-sum workload."""

    results: list[int] = field(default_factory=list)
    cursor: int = 0


class IptState:
    """Open-addressed key -> heap-slot table plus its flat heap."""

    __slots__ = ("capacity", "slot_size", "shift", "keys", "occupied", "heap", "used")

    def __init__(self, capacity: int = TABLE_CAPACITY, slot_size: int = SLOT_SIZE):
        if capacity <= 0 or capacity & (capacity - 1):
            raise ValueError(f"capacity {capacity} is not a power of two")
        if slot_size <= 0:
            raise ValueError(f"slot size {slot_size} must be positive")
        self.capacity = capacity
        self.slot_size = slot_size
        self.shift = 64 - (capacity.bit_length() - 1)
        self.keys = [0] * capacity
        self.occupied = [False] * capacity
        self.heap = bytearray(capacity * slot_size)
        self.used = 0

    def home_slot(self, key: int) -> int:
        """Multiplicative hash: top log2(capacity) bits of key * odd constant."""
        return ((key * HASH_MULTIPLIER) & _MASK64) >> self.shift


@dataclass
class TestState:
    """One receiver's worth of workload state, as runtime host state."""

    ssum: SsumState = field(default_factory=SsumState)
    ipt: IptState = field(default_factory=IptState)


# -- host externals --------------------------------------------------------------


def ext_ssum_store(host, value, *_):
    """Append a finished sum; returns the cursor it landed at."""
    state = host.state.ssum
    slot = state.cursor
    state.results.append(value)
    state.cursor += 1
    return slot


def ext_ipt_hash_put(host, key, *_):
    """Find-or-claim the table slot for `key`; returns its heap offset.

    Repeated keys land on their original slot (idempotent).  A full
    table fails with code FAIL_TABLE_FULL.
    """
    state = host.state.ipt
    index = state.home_slot(key)
    for _probe in range(state.capacity):
        if not state.occupied[index]:
            state.occupied[index] = True
            state.keys[index] = key
            state.used += 1
            return index * state.slot_size
        if state.keys[index] == key:
            return index * state.slot_size
        index = (index + 1) % state.capacity
    raise picvm.ExternalFailure(FAIL_TABLE_FULL)


def ext_ipt_copy(host, offset, payload_offset, length, *_):
    """Copy message payload bytes into the heap; fails with code
    FAIL_OUT_OF_BOUNDS when either side of the copy is out of range."""
    state = host.state.ipt
    payload = host.payload
    if offset + length > len(state.heap) or payload_offset + length > len(payload):
        raise picvm.ExternalFailure(FAIL_OUT_OF_BOUNDS)
    state.heap[offset : offset + length] = payload[payload_offset : payload_offset + length]
    return 0


def make_ried() -> linkpkg.Ried:
    """The externals above, bundled for a symbol table."""
    return linkpkg.Ried(
        RIED_NAME,
        {
            "ssum_store": ext_ssum_store,
            "ipt_hash_put": ext_ipt_hash_put,
            "ipt_copy": ext_ipt_copy,
        },
    )


# -- portable elements -------------------------------------------------------------


def jam_sources() -> list[tuple[str, str]]:
    """The shipped assembly sources as (filename, text) pairs."""
    root = resources.files(__package__)
    names = ("jam_ipt.amc", "jam_ssum.amc")
    return [(name, (root / name).read_text()) for name in names]


@lru_cache(maxsize=1)
def load_test_package() -> linkpkg.Package:
    """Assemble the shipped sources into the workload package."""
    data, _manifest = linkpkg.build_package(RIED_NAME, jam_sources())
    return linkpkg.load_package(data)


def ssum_args(payload: bytes) -> bytes:
    """Argument block the ssum element expects for this payload."""
    return struct.pack("<I", len(payload) // ITEM_SIZE)


def ipt_args(key: int, length: int) -> bytes:
    """Argument block the ipt element expects."""
    return struct.pack("<QI", key, length)


# -- plain-Python equivalents --------------------------------------------------------


def native_ssum(state: TestState, payload: bytes) -> int:
    """Same observable effect as executing the ssum element."""
    count = len(payload) // ITEM_SIZE
    total = sum(struct.unpack_from(f"<{count}I", payload)) & _MASK64 if count else 0
    host = Host(state)
    host.payload = payload
    ext_ssum_store(host, total)
    return total


def native_ipt(state: TestState, key: int, payload: bytes, length: int | None = None) -> int:
    """Same observable effect as executing the ipt element; returns the
    heap offset the payload landed at."""
    if length is None:
        length = len(payload)
    length = min(length, COPY_CLAMP)
    host = Host(state)
    host.payload = payload
    offset = ext_ipt_hash_put(host, key)
    ext_ipt_copy(host, offset, 0, length)
    return offset
