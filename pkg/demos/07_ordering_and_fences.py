"""Why the signal byte can be trusted — and what happens on a fabric
that reorders writes.

Ordered transports apply each put's bytes so the highest-addressed byte
lands last: seeing the signal means the body is complete.  A weakly
ordered fabric scatters chunks; the signal can land first, exposing a
torn frame — unless the sender fences between body and signal.

Run: python3 demos/07_ordering_and_fences.py
"""

import threading

from amlink import mailbox, transport, wire

FRAME = 64
ROUNDS = 60


def observe(put_round):
    """Run `put_round(endpoint, region, fill)` repeatedly against a
    concurrent reader; count torn observations."""
    writer_node = transport.ShmNode("writer")
    reader_node = transport.ShmNode("reader")
    # ordered=False models the reordering fabric: every put is split
    # into chunks that land shuffled giving a worst-case schedule.
    ep = writer_node.connect(reader_node, ordered=False, chunk_size=8, seed=7)
    region = reader_node.register_region(FRAME)
    strategy = mailbox.WaitStrategy("hybrid", spin_iterations=64)
    go = threading.Event()
    torn = 0

    def write_rounds():
        for r in range(ROUNDS):
            go.wait()
            go.clear()
            put_round(ep, region, (r % 250) + 1)

    writer = threading.Thread(target=write_rounds)
    writer.start()
    for r in range(ROUNDS):
        region.buf[:] = bytes(FRAME)
        go.set()
        assert mailbox.wait_signal(region, FRAME - 1, wire.SIG_MAG, strategy,
                                   timeout=10)
        if bytes(region.buf[:FRAME - 1]) != bytes([(r % 250) + 1]) * (FRAME - 1):
            torn += 1
        ep.fence()  # drain stragglers before resetting the slot
    writer.join()
    ep.close()
    return torn


def naive(ep, region, fill):
    # Body and signal in one put: on this fabric the signal chunk can
    # arrive before the body is complete.
    frame = bytes([fill]) * (FRAME - 1) + bytes([wire.SIG_MAG])
    ep.put(region.region_id, region.key, 0, frame)


def fenced(ep, region, fill):
    # Body, then a fence, then the signal: the fence guarantees every
    # body byte is applied before the signal byte is even sent.
    ep.put(region.region_id, region.key, 0, bytes([fill]) * (FRAME - 1))
    ep.fence()
    ep.put(region.region_id, region.key, FRAME - 1, bytes([wire.SIG_MAG]))


torn_naive = observe(naive)
print(f"weak fabric, no fence : {torn_naive}/{ROUNDS} signaled frames were torn")
torn_fenced = observe(fenced)
print(f"weak fabric, fenced   : {torn_fenced}/{ROUNDS} torn")
assert torn_naive > 0 and torn_fenced == 0

# The runtime does this automatically: its send path splits body and
# signal around a fence whenever the endpoint does not promise order.
print("the runtime fences sends on weakly ordered endpoints for exactly "
      "this reason")
