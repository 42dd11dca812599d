"""The reactive mailbox: banks of slots written remotely, announced by
a trailing signal byte, flow-controlled by credit flags the receiver
hands back one bank at a time.

The sender never asks permission per message — it owns a bank until it
has filled every slot, then waits for the receiver to re-open it.

Run: python3 demos/04_reactive_mailbox.py
"""

import struct
import threading

from amlink import mailbox, transport, wire

BANKS, SLOTS, FRAME = 2, 4, 64
geometry = mailbox.MailboxGeometry(BANKS, SLOTS, frame_size=FRAME)
print(f"geometry: {BANKS} banks x {SLOTS} slots x {FRAME}B "
      f"= {geometry.total_size}B of mailbox")

# Two in-process nodes standing in for two machines.
sender_node = transport.ShmNode("sender")
receiver_node = transport.ShmNode("receiver")
forward = sender_node.connect(receiver_node)   # one-sided writes ->
backward = forward.reverse                      # <- credit returns

inbox = receiver_node.register_region(geometry.total_size)
credit = sender_node.register_region(BANKS)
mailbox.init_credit_flags(credit, BANKS)

# Message k lands at a fixed, globally known position.
for k in (0, 3, 4, 7, 8):
    print(f"  message {k} -> bank/slot {geometry.placement(k)}")

TOTAL = 24
strategy = mailbox.WaitStrategy("hybrid", spin_iterations=64)
received = []

def consume():
    acct = mailbox.WaitAccounting()
    for k in range(TOTAL):
        bank, slot = geometry.placement(k)
        signal_at = geometry.slot_offset(bank, slot) + FRAME - 1
        mailbox.wait_signal(inbox, signal_at, wire.SIG_MAG, strategy, timeout=10,
                            accounting=acct)
        frame = mailbox.consume_slot(inbox, geometry, bank, slot)
        received.append(struct.unpack_from("<Q", frame)[0])
        if slot == SLOTS - 1:  # last slot: hand the bank back
            mailbox.release_bank(backward, credit.region_id, credit.key, bank)
    print(f"consumer waited {acct.waits} times, slept {acct.sleeps} times")

worker = threading.Thread(target=consume)
worker.start()

acct = mailbox.WaitAccounting()
for k in range(TOTAL):
    bank, slot = geometry.placement(k)
    if slot == 0:  # first slot of a bank: need the credit flag
        assert mailbox.acquire_bank(credit, bank, strategy, timeout=10,
                                    accounting=acct)
    frame = struct.pack("<Q", k) + bytes(FRAME - 9) + bytes([wire.SIG_MAG])
    forward.put(inbox.region_id, inbox.key, geometry.slot_offset(bank, slot), frame)
worker.join()

assert received == list(range(TOTAL))
print(f"{TOTAL} messages through {BANKS * SLOTS} slots of standing buffer, "
      f"exactly once, in order")
print(f"sender acquired banks {acct.waits} times")
