"""Reactive mailboxes: slot geometry, signal waiting, consumption, credits.

A mailbox region is M banks of N fixed-pitch slots; message k lands in
bank (k // N) % M, slot k % N, so a sender walks a bank's slots in order
and rotates banks every N messages.  Arrival is announced by the frame's
final signal byte; the receiver clears it on consumption.

Flow control is one credit flag byte per bank living in a sender-local
region: 1 means the bank is open, 0 means a cycle is in flight.  The
sender waits for 1 and claims the bank by writing 0 before the first
send of a cycle; the receiver re-opens the bank with a one-sided put of
1 after consuming all N slots.  The sender therefore never has more
than N unacknowledged messages per bank.

Two wait strategies watch a byte:

    spin    poll as fast as the interpreter allows, yielding every 64
            checks; once a wait outlives a short grace period each
            yield becomes a one-quantum nap, because a bare sleep(0)
            cannot reliably hand the GIL to the writer thread
    hybrid  poll for spin_iterations, then block on the region's
            condition variable (the transport notifies it after every
            applied put), trading a wakeup latency for idle CPU

Waiting can be accounted: busy_ns accumulates time spent polling,
sleeps counts how often hybrid actually blocked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import wire
from .transport import LocalRegion


class NotSignaled(Exception):
    """Slot consumed without (or before) its signal byte."""


@dataclass(frozen=True)
class MailboxGeometry:
    banks: int = 4
    slots_per_bank: int = 16
    frame_size: int = 4096

    def __post_init__(self):
        if not 1 <= self.banks <= 256:
            raise ValueError("banks must be in 1..256")
        if not 1 <= self.slots_per_bank <= 256:
            raise ValueError("slots_per_bank must be in 1..256")
        if self.frame_size < 64 or self.frame_size % 64:
            raise ValueError("frame_size must be a positive multiple of 64")

    @property
    def total_size(self) -> int:
        return self.banks * self.slots_per_bank * self.frame_size

    def slot_offset(self, bank: int, slot: int) -> int:
        if not 0 <= bank < self.banks:
            raise ValueError(f"bank {bank} of {self.banks}")
        if not 0 <= slot < self.slots_per_bank:
            raise ValueError(f"slot {slot} of {self.slots_per_bank}")
        return (bank * self.slots_per_bank + slot) * self.frame_size

    def placement(self, k: int) -> tuple[int, int]:
        """Message index -> (bank, slot)."""
        return (k // self.slots_per_bank) % self.banks, k % self.slots_per_bank


@dataclass(frozen=True)
class WaitStrategy:
    kind: str = "spin"  # "spin" | "hybrid"
    spin_iterations: int = 1000

    def __post_init__(self):
        if self.kind not in ("spin", "hybrid"):
            raise ValueError(f"unknown wait strategy {self.kind!r}")
        if self.spin_iterations < 0:
            raise ValueError("spin_iterations must be >= 0")


SPIN = WaitStrategy("spin")
HYBRID = WaitStrategy("hybrid")


@dataclass
class WaitAccounting:
    busy_ns: int = 0  # time spent actively polling
    sleeps: int = 0  # times a hybrid wait actually blocked
    waits: int = 0  # wait_signal calls observed


def wait_signal(
    region: LocalRegion,
    byte_offset: int,
    expected: int,
    strategy: WaitStrategy = SPIN,
    timeout: float | None = None,
    accounting: WaitAccounting | None = None,
) -> bool:
    """Wait until region[byte_offset] == expected; False on timeout.

    When this returns True after a transport put, every lower-addressed
    byte of that put is already visible (ordering contract)."""
    buf = region.buf
    start = time.perf_counter_ns()
    if accounting is not None:
        accounting.waits += 1
    if buf[byte_offset] == expected:
        return True
    deadline = None if timeout is None else time.monotonic() + timeout

    spin_limit = None if strategy.kind == "spin" else strategy.spin_iterations
    i = 0
    while spin_limit is None or i < spin_limit:
        if buf[byte_offset] == expected:
            if accounting is not None:
                accounting.busy_ns += time.perf_counter_ns() - start
            return True
        i += 1
        if not i & 63:
            if deadline is not None and time.monotonic() >= deadline:
                if accounting is not None:
                    accounting.busy_ns += time.perf_counter_ns() - start
                return False
            # sleep(0) cannot reliably hand the GIL to a writer thread
            # (the releaser usually wins the reacquire race), so after a
            # grace period of pure polling each burst parks for one short
            # scheduler quantum.  The wait stays a busy wait: the whole
            # interval is billed to busy_ns.
            time.sleep(0.0 if i < 1024 else 0.00005)

    # Hybrid tail: block on the region's wake event.  The predicate is
    # re-checked under the lock, so a notify between the spin phase and
    # here cannot be lost.
    if accounting is not None:
        accounting.busy_ns += time.perf_counter_ns() - start
        accounting.sleeps += 1
    with region.cond:
        remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
        return region.cond.wait_for(lambda: buf[byte_offset] == expected, timeout=remaining)


def consume_slot(
    region: LocalRegion,
    geometry: MailboxGeometry,
    bank: int,
    slot: int,
    cfg: wire.FrameConfig | None = None,
) -> bytes:
    """Copy a signaled slot's frame out and clear its signal.

    Fixed mode clears just the signal byte.  Variable mode zeroes the
    whole consumed extent: a later, shorter frame must not find stale
    bytes where its own header mag or signal byte will live."""
    if cfg is None:
        cfg = wire.FrameConfig(frame_size=geometry.frame_size)
    offset = geometry.slot_offset(bank, slot)
    buf = region.buf
    if cfg.mode == "fixed":
        end = offset + geometry.frame_size
        if buf[end - 1] != wire.SIG_MAG:
            raise NotSignaled(f"bank {bank} slot {slot}")
        frame = bytes(buf[offset:end])
        buf[end - 1] = 0
        return frame

    if buf[offset + wire.HEADER_SIZE - 1] != wire.HDR_MAG:
        raise NotSignaled(f"bank {bank} slot {slot} (no header)")
    header = wire.decode_header(buf[offset : offset + wire.HEADER_SIZE])
    need = wire.frame_size(header.got_count, header.code_len, header.args_len, header.payload_len)
    if need > geometry.frame_size:
        raise wire.LengthMismatch(f"frame needs {need}B, slot is {geometry.frame_size}B")
    if buf[offset + need - 1] != wire.SIG_MAG:
        raise NotSignaled(f"bank {bank} slot {slot} (no signal)")
    frame = bytes(buf[offset : offset + need])
    buf[offset : offset + need] = bytes(need)
    return frame


def init_credit_flags(region: LocalRegion, banks: int) -> None:
    """Sender-local setup: every bank starts open."""
    region.buf[0:banks] = b"\x01" * banks


def acquire_bank(
    credit_region: LocalRegion,
    bank: int,
    strategy: WaitStrategy = SPIN,
    timeout: float | None = None,
    accounting: WaitAccounting | None = None,
) -> bool:
    """Sender side: wait for the bank's flag to be 1, claim it with 0.

    False means the timeout expired (callers treat that as an abort)."""
    if not wait_signal(credit_region, bank, 1, strategy, timeout, accounting):
        return False
    credit_region.buf[bank] = 0  # single sender thread owns this transition
    return True


def release_bank(endpoint, credit_region_id: int, key: int, bank: int) -> None:
    """Receiver side: one-sided put re-opening the sender's bank."""
    endpoint.put(credit_region_id, key, bank, b"\x01")
