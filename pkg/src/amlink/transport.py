"""One-sided put transports with an ordering contract and a control channel.

Two implementations of one abstraction:

    ShmNode   in-process regions written directly by peer threads; the
              default ordered mode applies a put's bytes in ascending
              address order so the highest-addressed byte lands last,
              and an optional weak mode shuffles chunk application to
              emulate a weakly-ordered fabric (fence restores safety)
    TcpNode   remote-agent model: a socket reader thread applies puts
              into local regions in arrival order; application code on
              the target never participates in a put

The ordering contract every endpoint honors in ordered mode: of one
put's bytes, the highest-addressed byte becomes visible to the target
last.  Waiters poll a region byte or block on the region's condition
variable; every completed application notifies it.  Both transports
actually apply bytes in ascending address order, which the two-phase
header-then-signal wait additionally relies on.

Regions are guarded by a 32-bit random access key picked at
registration; a put must present the matching key and stay in bounds,
and the target enforces both regardless of what the sender believes.

TCP wire format, little-endian, each message length-prefixed (u32 of
what follows):

    0x01 PUT        region_id u32 | key u32 | offset u64 | len u32 | bytes
    0x02 CTRL       payload (opaque request)
    0x03 CTRL-REPLY payload (opaque response; empty means the remote
                    handler failed)
"""

from __future__ import annotations

import queue
import random
import secrets
import socket
import struct
import threading
import time

_MAX_MESSAGE = 64 * 1024 * 1024
_PUT_BODY = struct.Struct("<IIQI")

MSG_PUT = 0x01
MSG_CTRL = 0x02
MSG_CTRL_REPLY = 0x03


class TransportError(Exception):
    pass


class BadKey(TransportError):
    pass


class OutOfBounds(TransportError):
    pass


class PeerDisconnected(TransportError):
    pass


class MalformedControlMessage(TransportError):
    pass


class LocalRegion:
    """A registered, remotely writable span of zeroed bytes.

    `cond` is the wake-event channel: delivery agents notify it after
    applying bytes, hybrid waiters block on it.  `version` counts
    applications so waiters can detect activity cheaply.
    """

    __slots__ = ("region_id", "key", "buf", "cond", "version")

    def __init__(self, region_id: int, key: int, length: int):
        self.region_id = region_id
        self.key = key
        self.buf = bytearray(length)
        self.cond = threading.Condition()
        self.version = 0

    def __len__(self) -> int:
        return len(self.buf)

    def apply(self, offset: int, data: bytes, notify: bool = True) -> None:
        """Apply bytes atomically (single slice store) and raise the wake
        event.  Used by delivery agents and local writers alike."""
        with self.cond:
            self.buf[offset : offset + len(data)] = data
            self.version += 1
            if notify:
                self.cond.notify_all()


class _NodeCore:
    """Region registry shared by both transports."""

    def __init__(self, name: str):
        self.name = name
        self.rejected_puts = 0  # target-side key/bounds rejections
        self._lock = threading.Lock()
        self._regions: dict[int, LocalRegion] = {}
        self._next_region_id = 1
        self._control_handler = None

    def register_region(self, length: int) -> LocalRegion:
        if length <= 0:
            raise ValueError("region length must be positive")
        with self._lock:
            region_id = self._next_region_id
            self._next_region_id += 1
            region = LocalRegion(region_id, secrets.randbits(32) or 1, length)
            self._regions[region_id] = region
            return region

    def region(self, region_id: int) -> LocalRegion:
        try:
            return self._regions[region_id]
        except KeyError:
            raise OutOfBounds(f"no region {region_id}") from None

    def set_control_handler(self, handler) -> None:
        """handler(reply_endpoint, request: bytes) -> response bytes."""
        self._control_handler = handler

    def check_put(self, region_id: int, key: int, offset: int, length: int) -> LocalRegion:
        region = self.region(region_id)
        if key != region.key:
            raise BadKey(f"region {region_id}")
        if offset < 0 or offset + length > len(region.buf):
            raise OutOfBounds(f"[{offset}, {offset + length}) in {len(region.buf)}B region")
        return region

    def close(self) -> None:
        """Release transport resources; in-process nodes hold none."""


def _split(offset: int, data: bytes, chunk_size: int):
    return [
        (offset + i, bytes(data[i : i + chunk_size]))
        for i in range(0, len(data), chunk_size)
    ]


# ---------------------------------------------------------------------------
# In-process shared-memory transport

class ShmNode(_NodeCore):
    def connect(
        self,
        peer: "ShmNode",
        *,
        ordered: bool = True,
        chunk_size: int | None = None,
        seed: int | None = None,
    ) -> "ShmEndpoint":
        """Connect to another in-process node; returns the local->peer
        endpoint whose .reverse goes the other way with the same mode."""
        forward = ShmEndpoint(self, peer, ordered=ordered, chunk_size=chunk_size, seed=seed)
        backward = ShmEndpoint(peer, self, ordered=ordered, chunk_size=chunk_size,
                               seed=None if seed is None else seed + 1)
        forward.reverse = backward
        backward.reverse = forward
        return forward


_STOP = object()


class ShmEndpoint:
    def __init__(self, local: ShmNode, peer: ShmNode, *, ordered: bool,
                 chunk_size: int | None, seed: int | None):
        self.local = local
        self.peer = peer
        self.ordered = ordered
        self.chunk_size = chunk_size
        self.reverse: ShmEndpoint | None = None
        self._advertised: dict[int, tuple[int, int]] = {}
        self._closed = False
        self._rpc_lock = threading.Lock()
        if not ordered:
            self._rng = random.Random(seed)
            self._queue: queue.Queue = queue.Queue()
            self._agent = threading.Thread(
                target=self._deliver_loop, name=f"shm-weak-{local.name}->{peer.name}", daemon=True
            )
            self._agent.start()

    # -- peer region advertisements (filled from control traffic) ----------

    def add_peer_region(self, region_id: int, length: int, key: int) -> None:
        self._advertised[region_id] = (length, key)

    def peer_region(self, region_id: int) -> tuple[int, int]:
        return self._advertised[region_id]

    # -- data plane ---------------------------------------------------------

    def put(self, region_id: int, key: int, offset: int, data: bytes) -> None:
        if self._closed:
            raise PeerDisconnected("endpoint closed")
        if not data:
            return
        region = self.peer.check_put(region_id, key, offset, len(data))
        if self.ordered:
            self._apply_ordered(region, offset, data)
        else:
            self._queue.put(("put", _split(offset, data, self.chunk_size or 16), region))

    def _apply_ordered(self, region: LocalRegion, offset: int, data: bytes) -> None:
        # Ascending application; the final byte goes last, under the region
        # lock, with the wake event.  Body stores need no lock: waiters only
        # read the body after observing the final byte.
        if self.chunk_size and len(data) > 1:
            for chunk_offset, chunk in _split(offset, data[:-1], self.chunk_size):
                region.buf[chunk_offset : chunk_offset + len(chunk)] = chunk
                time.sleep(0)  # invite adversarial interleaving
        elif len(data) > 1:
            region.buf[offset : offset + len(data) - 1] = data[:-1]
        region.apply(offset + len(data) - 1, data[-1:])

    def fence(self) -> None:
        """Weak mode: everything put so far is applied before this returns
        (stronger than the minimum ordering barrier, and simpler).  A no-op
        in ordered mode and on an idle endpoint."""
        if self._closed:
            raise PeerDisconnected("endpoint closed")
        if self.ordered:
            return
        done = threading.Event()
        self._queue.put(("fence", done))
        if not done.wait(timeout=30):
            raise TransportError("fence stalled")

    def _deliver_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            fences = []
            chunks = []
            while True:
                if item is _STOP:
                    self._queue.put(_STOP)  # keep the stop for the next pass
                    break
                kind = item[0]
                if kind == "fence":
                    fences.append(item[1])
                    break
                _, pieces, region = item
                chunks.extend((region, off, data) for off, data in pieces)
                try:
                    item = self._queue.get_nowait()
                except queue.Empty:
                    break
            # Weakly ordered fabric: chunks of every put gathered between
            # fences land in random order.  The microsleeps force real
            # scheduler interleaving; sleep(0) alone rarely hands the GIL
            # to a polling waiter mid-batch.
            self._rng.shuffle(chunks)
            for region, off, data in chunks:
                region.apply(off, data)
                time.sleep(self._rng.random() * 0.0002)
            for done in fences:
                done.set()

    # -- control plane ------------------------------------------------------

    def control_rpc(self, request: bytes) -> bytes:
        if self._closed:
            raise PeerDisconnected("endpoint closed")
        handler = self.peer._control_handler
        if handler is None:
            raise MalformedControlMessage(f"{self.peer.name} has no control handler")
        with self._rpc_lock:
            reply = handler(self.reverse, bytes(request))
        if reply is None:
            raise MalformedControlMessage("handler returned nothing")
        return reply

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if not self.ordered:
            self._queue.put(_STOP)
            self._agent.join(timeout=5)


# ---------------------------------------------------------------------------
# TCP remote-agent transport

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    view = memoryview(bytearray(n))
    got = 0
    while got < n:
        r = sock.recv_into(view[got:], n - got)
        if r == 0:
            raise ConnectionError("peer closed")
        got += r
    return bytes(view)


class TcpNode(_NodeCore):
    def __init__(self, name: str = "tcp"):
        super().__init__(name)
        self.endpoints: list[TcpEndpoint] = []
        self.on_connect = None  # optional callback(endpoint) for accepted peers
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None

    def listen(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(16)
        self._listener = sock
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"{self.name}-accept", daemon=True
        )
        self._accept_thread.start()
        return sock.getsockname()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            endpoint = TcpEndpoint(self, conn)
            self.endpoints.append(endpoint)
            if self.on_connect is not None:
                self.on_connect(endpoint)

    def connect(self, host: str, port: int) -> "TcpEndpoint":
        sock = socket.create_connection((host, port), timeout=30)
        endpoint = TcpEndpoint(self, sock)
        self.endpoints.append(endpoint)
        return endpoint

    def close(self) -> None:
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for endpoint in list(self.endpoints):
            endpoint.close()


class TcpEndpoint:
    """One connection; puts go out, the reader thread applies what comes in.

    The reader never blocks on application work: control requests are
    handed to a per-connection worker so a handler that itself issues a
    control_rpc back over this connection cannot deadlock the read loop.
    """

    def __init__(self, node: TcpNode, sock: socket.socket):
        self.node = node
        self.sock = sock
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.reverse = self  # one socket serves both directions
        self._advertised: dict[int, tuple[int, int]] = {}
        self._closed = False
        self._send_lock = threading.Lock()
        self._rpc_lock = threading.Lock()
        self._replies: queue.Queue = queue.Queue()
        self._ctrl_jobs: queue.Queue = queue.Queue()
        peer = sock.getpeername()
        self._reader = threading.Thread(
            target=self._read_loop, name=f"{node.name}-read-{peer[1]}", daemon=True
        )
        self._worker = threading.Thread(
            target=self._ctrl_loop, name=f"{node.name}-ctrl-{peer[1]}", daemon=True
        )
        self._reader.start()
        self._worker.start()

    def add_peer_region(self, region_id: int, length: int, key: int) -> None:
        self._advertised[region_id] = (length, key)

    def peer_region(self, region_id: int) -> tuple[int, int]:
        return self._advertised[region_id]

    def _send(self, msg_type: int, body: bytes) -> None:
        frame = struct.pack("<IB", 1 + len(body), msg_type) + body
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError as err:
                self._shutdown()
                raise PeerDisconnected(str(err)) from None

    def put(self, region_id: int, key: int, offset: int, data: bytes) -> None:
        if self._closed:
            raise PeerDisconnected("endpoint closed")
        if not data:
            return
        advertised = self._advertised.get(region_id)
        if advertised is not None:
            length, advertised_key = advertised
            if key != advertised_key:
                raise BadKey(f"region {region_id}")
            if offset < 0 or offset + len(data) > length:
                raise OutOfBounds(f"[{offset}, {offset + len(data)}) in {length}B region")
        self._send(MSG_PUT, _PUT_BODY.pack(region_id, key, offset, len(data)) + data)

    def fence(self) -> None:
        if self._closed:
            raise PeerDisconnected("endpoint closed")
        # TCP applies in arrival order; the contract holds by construction.

    def control_rpc(self, request: bytes) -> bytes:
        if self._closed:
            raise PeerDisconnected("endpoint closed")
        with self._rpc_lock:
            self._send(MSG_CTRL, request)
            try:
                reply = self._replies.get(timeout=30)
            except queue.Empty:
                raise PeerDisconnected("control reply timed out") from None
        if reply is _STOP:
            raise PeerDisconnected("connection lost mid-rpc")
        if reply == b"":
            raise MalformedControlMessage("remote handler failed")
        return reply

    def _read_loop(self) -> None:
        try:
            while True:
                size = struct.unpack("<I", _recv_exact(self.sock, 4))[0]
                if not 1 <= size <= _MAX_MESSAGE:
                    raise ConnectionError(f"bad message size {size}")
                message = _recv_exact(self.sock, size)
                msg_type = message[0]
                body = message[1:]
                if msg_type == MSG_PUT:
                    self._apply_put(body)
                elif msg_type == MSG_CTRL:
                    self._ctrl_jobs.put(body)
                elif msg_type == MSG_CTRL_REPLY:
                    self._replies.put(body)
                else:
                    raise ConnectionError(f"unknown message type {msg_type}")
        except (ConnectionError, OSError):
            pass
        finally:
            self._shutdown()

    def _apply_put(self, body: bytes) -> None:
        region_id, key, offset, length = _PUT_BODY.unpack_from(body, 0)
        data = body[_PUT_BODY.size :]
        if len(data) != length:
            raise ConnectionError("put length mismatch")
        try:
            region = self.node.check_put(region_id, key, offset, length)
        except TransportError:
            self.node.rejected_puts += 1  # one-sided: reject silently
            return
        region.apply(offset, data)

    def _ctrl_loop(self) -> None:
        while True:
            body = self._ctrl_jobs.get()
            if body is _STOP:
                return
            handler = self.node._control_handler
            reply = b""
            if handler is not None:
                try:
                    reply = handler(self, bytes(body)) or b""
                except Exception:  # noqa: BLE001 - a bad request must not kill the agent
                    reply = b""
            try:
                self._send(MSG_CTRL_REPLY, reply)
            except PeerDisconnected:
                return

    def _shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._replies.put(_STOP)
        self._ctrl_jobs.put(_STOP)
        try:
            # shutdown (not just close) wakes a reader blocked in recv and
            # pushes the FIN out even while that syscall holds the socket
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def close(self) -> None:
        self._shutdown()
