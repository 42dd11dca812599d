"""The full runtime: two nodes, one attach handshake, then functions
travel inside messages and run against the receiver's state the moment
their signal byte lands.

Run: python3 demos/05_runtime_roundtrip.py
"""

import struct

from amlink import runtime, testpkg, transport

package = testpkg.load_test_package()

server = runtime.AmNode(transport.ShmNode("server"),
                        runtime.RuntimeConfig(pong="echo"),
                        package=package, state=testpkg.TestState())
client = runtime.AmNode(transport.ShmNode("client"),
                        runtime.RuntimeConfig(pong="echo"),
                        package=package, state=testpkg.TestState())
server.install_ried(testpkg.make_ried())
client.install_ried(testpkg.make_ried())

endpoint = runtime.connect_shm(client, server)
print(f"attached: {endpoint.geometry.banks} banks x "
      f"{endpoint.geometry.slots_per_bank} slots x "
      f"{endpoint.geometry.frame_size}B frames")

ssum = package.by_name("ssum")

# Inject: the function rides inside the message.  respond=True asks the
# server to pong; with pong="echo" the pong carries the same function
# back, so the client executes it too, against its own state.
payload = struct.pack("<8I", *range(8))
bank, slot = endpoint.send_injected(ssum, args=testpkg.ssum_args(payload),
                                    payload=payload, respond=True)
reply = endpoint.wait_reply(bank, slot)
print(f"injected ssum: reply ok={reply.ok}")
print(f"  server state: {server.state.ssum.results}")
print(f"  client state (echo ran here too): {client.state.ssum.results}")

# Local dispatch: same function, but pre-installed — the message only
# names it, nothing is shipped or validated per call.
payload = struct.pack("<4I", 10, 20, 30, 40)
endpoint.send_local(ssum.element_id, args=testpkg.ssum_args(payload),
                    payload=payload)

# The other workload: an idempotent hash-table put keyed by a 64-bit id.
ipt = package.by_name("ipt")
endpoint.send_injected(ipt, args=testpkg.ipt_args(0xFEED, 5), payload=b"hello")
endpoint.send_injected(ipt, args=testpkg.ipt_args(0xFEED, 5), payload=b"again")

# One responded message drains everything sent before it.
bank, slot = endpoint.send_injected(ssum, args=testpkg.ssum_args(b""),
                                    payload=b"", respond=True)
endpoint.wait_reply(bank, slot)

home = server.state.ipt.home_slot(0xFEED)
stored = bytes(server.state.ipt.heap[home * 4096:home * 4096 + 5])
print(f"server totals now {server.state.ssum.results}")
print(f"key 0xFEED lives at its home slot {home}: {stored!r} "
      f"(second put overwrote in place)")
print(f"server processed {server.stats.executed} messages, "
      f"{server.stats.errors} errors, {server.stats.pongs} pongs")

# An element id the server does not have reports back as a typed error
# frame instead of poisoning the stream.
bank, slot = endpoint.send_local(99, respond=True)
reply = endpoint.wait_reply(bank, slot)
print(f"unknown element id -> ok={reply.ok}, error={reply.error!r}")

# Ids reserved for the reply protocol are refused before they reach
# the wire at all.
try:
    endpoint.send_local(runtime.NOOP_PONG_ID)
except ValueError as err:
    print(f"reserved id refused locally: {err}")

endpoint.close()
server.close()
client.close()
