"""Send and receive paths for active messages.

A server (AmNode wrapping a transport node) accepts attachments.  Each
attach allocates that client a private mailbox region and starts a
serve-loop thread for it.  The client allocates a credit-flag region
and a mirror reply mailbox, tells the server about both, and then sends
frames one-sidedly under credit flow control.

The serve loop walks slots in placement order: wait for the signal
byte, copy the frame out, clear the signal, execute what the frame
carries, release the bank's credit after its last slot, and put a pong
into the initiator's reply mailbox when the frame asked to RESPOND.
Pongs land at the same (bank, slot) the request occupied; the initiator
is expected to consume a slot's pong before reusing that slot index, so
pongs need no credit protocol of their own.

Execution of a frame:

    INJECTED set    validate the carried code, build the indirection
                    table (frame handles as-is in sender-patch mode,
                    hash lookup against the local symbol table in
                    receiver-patch mode), interpret
    INJECTED clear  look the element up in the locally loaded package
                    by id and interpret that copy with locally resolved
                    externs (the id-indexed dispatch vector)

Both paths mutate receiver state only through registered externals, so
a workload sent injected and the same workload sent local must leave
identical state.

Pong styles: "echo" re-sends the request so the initiator executes it
too (symmetric work on both sides); "noop" answers with the reserved
no-op element.  Echoing a sender-patched frame needs handles valid on
the initiator, so the responder resolves the element's extern names
back across the control channel (cached per session) and falls back to
a noop pong when it cannot.

Failures while serving never kill the loop and never stall flow
control: they are counted, an error frame (reserved element id) answers
frames that wanted a response, and credits are still released.

Control channel opcodes (first byte of a control_rpc payload):

    0x01 RESOLVE         symbol names -> handles (the link handshake)
    0x02 ATTACH          -> geometry + mailbox region advertisement
    0x03 CLIENT_REGIONS  credit + reply region advertisement -> ack
"""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field, replace

from . import linkpkg, mailbox, picvm, wire
from .mailbox import MailboxGeometry, WaitAccounting, WaitStrategy
from .transport import LocalRegion, TransportError

log = logging.getLogger(__name__)

CTRL_ATTACH = 0x02
CTRL_CLIENT_REGIONS = 0x03

NOOP_PONG_ID = 0xFFFF
ERROR_FRAME_ID = 0xFFFE
RESERVED_IDS = (NOOP_PONG_ID, ERROR_FRAME_ID)

_ATTACH_REPLY = struct.Struct("<BBHHIBII")
_CLIENT_REGIONS = struct.Struct("<BIIII")


class UnknownElementId(Exception):
    pass


class ReplyTimeout(TransportError):
    pass


@dataclass(frozen=True)
class RuntimeConfig:
    geometry: MailboxGeometry = MailboxGeometry()
    frame_mode: str = "fixed"  # see wire.FrameConfig
    patch_mode: str = linkpkg.SENDER_PATCH
    wait: WaitStrategy = mailbox.SPIN
    fuel: int = picvm.DEFAULT_FUEL
    payload_writable: bool = False
    pong: str = "noop"  # "noop" | "echo"

    @property
    def frame_config(self) -> wire.FrameConfig:
        return wire.FrameConfig(frame_size=self.geometry.frame_size, mode=self.frame_mode)


@dataclass
class ServeStats:
    executed: int = 0
    errors: int = 0
    pongs: int = 0


class Host:
    """What an external function sees as its first argument: receiver
    state plus the message being executed."""

    __slots__ = ("state", "args", "payload")

    def __init__(self, state):
        self.state = state
        self.args = b""
        self.payload = b""


@dataclass
class Reply:
    ok: bool
    parts: wire.MessageParts | None = None
    status: picvm.ExitStatus | None = None
    error: str | None = None


@dataclass
class _Session:
    endpoint: object  # transport endpoint back to the client
    inbox: LocalRegion
    host: Host
    credit: tuple[int, int] | None = None  # client's (region_id, key)
    reply: tuple[int, int] | None = None  # client's (region_id, key)
    client_handles: dict[str, int] = field(default_factory=dict)
    acct: WaitAccounting = field(default_factory=WaitAccounting)
    thread: threading.Thread | None = None


def _put_frame(endpoint, region_id: int, key: int, offset: int, frame: bytes) -> None:
    """Put one frame.  On a weakly ordered endpoint the signal byte gets
    its own put behind a fence, the alternative protocol for fabrics
    that do not deliver the highest-addressed byte last."""
    if getattr(endpoint, "ordered", True):
        endpoint.put(region_id, key, offset, frame)
        return
    endpoint.put(region_id, key, offset, frame[:-1])
    endpoint.fence()
    endpoint.put(region_id, key, offset + len(frame) - 1, frame[-1:])


class AmNode:
    """One process-side identity: symbol table, optional loaded package,
    receiver state, and (when attached to) serve loops."""

    def __init__(self, transport_node, config: RuntimeConfig | None = None,
                 package: linkpkg.Package | None = None, state=None):
        self.node = transport_node
        self.config = config or RuntimeConfig()
        self.package = package
        self.state = state
        self.table = linkpkg.SymbolTable()
        self.stats = ServeStats()
        self.sessions: dict[object, _Session] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        transport_node.set_control_handler(self._handle_control)

    # -- setup ---------------------------------------------------------------

    def install_ried(self, ried: linkpkg.Ried) -> dict[str, int]:
        return ried.install(self.table)

    def load_package(self, package: linkpkg.Package) -> None:
        self.package = package

    def close(self) -> None:
        self._stop.set()
        with self._lock:
            threads = [s.thread for s in self.sessions.values() if s.thread]
        for t in threads:
            t.join(timeout=5)

    # -- control plane -------------------------------------------------------

    def _handle_control(self, endpoint, payload: bytes) -> bytes:
        opcode = payload[0]
        if opcode == linkpkg.CTRL_RESOLVE:
            return linkpkg.handle_resolve_request(self.table, payload)
        if opcode == CTRL_ATTACH:
            return self._handle_attach(endpoint)
        if opcode == CTRL_CLIENT_REGIONS:
            return self._handle_client_regions(endpoint, payload)
        raise ValueError(f"unknown control opcode 0x{opcode:02X}")

    def _handle_attach(self, endpoint) -> bytes:
        geo = self.config.geometry
        inbox = self.node.register_region(geo.total_size)
        session = _Session(endpoint=endpoint, inbox=inbox, host=Host(self.state))
        with self._lock:
            self.sessions[endpoint] = session
        session.thread = threading.Thread(
            target=self._serve_loop, args=(session,),
            name=f"serve-{self.node.name}-{inbox.region_id}", daemon=True,
        )
        session.thread.start()
        mode = 1 if self.config.frame_mode == "variable" else 0
        return _ATTACH_REPLY.pack(
            CTRL_ATTACH, 1, geo.banks, geo.slots_per_bank, geo.frame_size,
            mode, inbox.region_id, inbox.key,
        )

    def _handle_client_regions(self, endpoint, payload: bytes) -> bytes:
        _, credit_id, credit_key, reply_id, reply_key = _CLIENT_REGIONS.unpack(payload)
        with self._lock:
            session = self.sessions.get(endpoint)
        if session is None:
            raise ValueError("client regions before attach")
        geo = self.config.geometry
        endpoint.add_peer_region(credit_id, geo.banks, credit_key)
        endpoint.add_peer_region(reply_id, geo.total_size, reply_key)
        session.credit = (credit_id, credit_key)
        session.reply = (reply_id, reply_key)
        return bytes([CTRL_CLIENT_REGIONS, 1])

    # -- execution (shared by the serve loop and the reply path) -------------

    def execute_parts(self, parts: wire.MessageParts, host: Host) -> picvm.ExitStatus:
        header = parts.header
        host.args = parts.args
        host.payload = parts.payload
        if header.injected:
            code = picvm.validate(parts.code, header.got_count)
            if header.receiver_patch:
                indirection = linkpkg.resolve_hashes(self.table, parts.got_entries)
            else:
                indirection = list(parts.got_entries)
        else:
            if self.package is None or not 0 <= header.element_id < len(self.package.elements):
                raise UnknownElementId(str(header.element_id))
            code = self.package.by_id(header.element_id).code
            indirection = [self.table.resolve(name) for name in code.extern_names]
        payload: bytes | bytearray = parts.payload
        if self.config.payload_writable:
            payload = bytearray(payload)
        ctx = picvm.ExecContext(
            args=parts.args,
            payload=payload,
            indirection=indirection,
            fuel=self.config.fuel,
            host=host,
            dispatch=self.table.dispatch,
            payload_writable=self.config.payload_writable,
        )
        return picvm.execute(code, ctx)

    # -- serve loop ------------------------------------------------------------

    def _poison_slot(self, session: _Session, bank: int, slot: int, err: Exception) -> None:
        """A frame whose size fields cannot be trusted: count it, zero the
        whole slot back to empty, and move on."""
        self.stats.errors += 1
        log.debug("unsizable frame in bank %d slot %d: %s", bank, slot, err)
        geo = self.config.geometry
        start = geo.slot_offset(bank, slot)
        session.inbox.buf[start : start + geo.frame_size] = bytes(geo.frame_size)

    def _wait_frame(self, session: _Session, bank: int, slot: int) -> bytes | None:
        """Wait for the slot's frame; None when the stop signal arrived
        during an idle wait, b"" when the slot held garbage.  Variable mode
        waits on the header mag, sizes the frame, then waits on its signal
        byte."""
        geo = self.config.geometry
        offset = geo.slot_offset(bank, slot)
        cfg = self.config.frame_config
        while not self._stop.is_set():
            if cfg.mode == "variable":
                if not mailbox.wait_signal(session.inbox, offset + wire.HEADER_SIZE - 1,
                                           wire.HDR_MAG, self.config.wait,
                                           timeout=0.05, accounting=session.acct):
                    continue
                try:
                    header = wire.decode_header(
                        bytes(session.inbox.buf[offset : offset + wire.HEADER_SIZE])
                    )
                    need = wire.frame_size(header.got_count, header.code_len,
                                           header.args_len, header.payload_len)
                    if need > geo.frame_size:
                        raise wire.FrameTooLarge(f"{need}B frame in {geo.frame_size}B slot")
                except wire.WireError as err:
                    self._poison_slot(session, bank, slot, err)
                    return b""
                watch = offset + need - 1
            else:
                watch = offset + geo.frame_size - 1
            if not mailbox.wait_signal(session.inbox, watch, wire.SIG_MAG, self.config.wait,
                                       timeout=0.05, accounting=session.acct):
                continue
            try:
                return mailbox.consume_slot(session.inbox, geo, bank, slot, cfg)
            except mailbox.NotSignaled:
                continue  # raced with a partial write; re-wait
            except wire.WireError as err:
                self._poison_slot(session, bank, slot, err)
                return b""
        return None

    def _serve_loop(self, session: _Session) -> None:
        geo = self.config.geometry
        k = 0
        while not self._stop.is_set():
            bank, slot = geo.placement(k)
            frame = self._wait_frame(session, bank, slot)
            if frame is None:
                return
            if frame:
                self._process_frame(session, frame)
            if slot == geo.slots_per_bank - 1 and session.credit is not None:
                region_id, key = session.credit
                mailbox.release_bank(session.endpoint, region_id, key, bank)
            k += 1

    def _process_frame(self, session: _Session, frame: bytes) -> None:
        try:
            parts = wire.decode_frame(frame, self.config.frame_config)
        except wire.WireError as err:
            self.stats.errors += 1
            log.debug("undecodable frame: %s", err)
            return
        header = parts.header
        if header.element_id in RESERVED_IDS and not header.injected:
            return  # pong/error frames are for initiators, not servers
        try:
            status = self.execute_parts(parts, session.host)
        except (picvm.ValidateError, linkpkg.UnknownSymbolHash, linkpkg.UnresolvedSymbol,
                UnknownElementId) as err:
            self.stats.errors += 1
            log.debug("frame rejected: %s", err)
            if header.respond:
                self._send_error_pong(session, parts, repr(err))
            return
        if status.halted:
            self.stats.executed += 1
        else:
            self.stats.errors += 1
            log.debug("execution did not halt: %s", status)
            if header.respond:
                self._send_error_pong(session, parts, f"{status.kind}:{status.reason}")
            return
        if header.respond:
            self._send_pong(session, parts)

    # -- pong paths ------------------------------------------------------------

    def _reply_slot_offset(self, header: wire.FrameHeader) -> int:
        return self.config.geometry.slot_offset(header.bank, header.slot)

    def _send_error_pong(self, session: _Session, parts: wire.MessageParts, reason: str) -> None:
        if session.reply is None:
            return
        header = parts.header
        # The original args echoed back for correlation always fit (they
        # arrived in a same-sized slot); the reason text takes what's left.
        room = self.config.geometry.frame_size - wire.HEADER_SIZE - len(parts.args) - 1
        pong = wire.make_parts(
            element_id=ERROR_FRAME_ID,
            args=parts.args,
            payload=reason.encode()[: max(room, 0)],
            bank=header.bank,
            slot=header.slot,
        )
        self._put_pong(session, pong)

    def _send_pong(self, session: _Session, parts: wire.MessageParts) -> None:
        if session.reply is None:
            return
        pong = None
        if self.config.pong == "echo":
            pong = self._echo_pong(session, parts)
        if pong is None:
            header = parts.header
            pong = wire.make_parts(
                element_id=NOOP_PONG_ID, args=parts.args,
                bank=header.bank, slot=header.slot,
            )
        self._put_pong(session, pong)

    def _echo_pong(self, session: _Session, parts: wire.MessageParts) -> wire.MessageParts | None:
        """Re-send the request so the initiator executes it too.  Returns
        None when a valid echo cannot be built (caller falls back to noop)."""
        header = parts.header
        flags = header.flags & ~wire.FLAG_RESPOND
        if not header.injected:
            return replace(parts, header=replace(header, flags=flags))
        if header.receiver_patch:
            return replace(parts, header=replace(header, flags=flags))
        # Sender-patched: the carried handles are OURS; the initiator needs
        # its own.  Recover the extern names from our copy of the element.
        if self.package is None or not 0 <= header.element_id < len(self.package.elements):
            return None
        names = self.package.by_id(header.element_id).code.extern_names
        if len(names) != header.got_count:
            return None
        try:
            missing = [n for n in names if n not in session.client_handles]
            if missing:
                resolved = linkpkg.resolve_symbols(session.endpoint, missing)
                session.client_handles.update(zip(missing, resolved))
            got = tuple(session.client_handles[n] for n in names)
        except (linkpkg.UnresolvedSymbol, TransportError):
            return None
        return replace(parts, header=replace(header, flags=flags), got_entries=got)

    def _put_pong(self, session: _Session, pong: wire.MessageParts) -> None:
        region_id, key = session.reply
        frame = wire.encode_frame(pong, self.config.frame_config)
        try:
            _put_frame(session.endpoint, region_id, key,
                       self._reply_slot_offset(pong.header), frame)
            self.stats.pongs += 1
        except TransportError as err:
            self.stats.errors += 1
            log.debug("pong put failed: %s", err)


class AmEndpoint:
    """Client-side sending half: placement, credits, patching, replies."""

    def __init__(self, node: AmNode, endpoint):
        self.node = node
        self.ep = endpoint
        self.handle_cache: dict[str, int] = {}
        self.acct = WaitAccounting()
        self.k = 0  # next message index
        self.geometry: MailboxGeometry | None = None
        self.frame_config: wire.FrameConfig | None = None
        self._inbox_info: tuple[int, int] | None = None
        self.credit: LocalRegion | None = None
        self.reply: LocalRegion | None = None
        self.host = Host(node.state)

    # -- handshake -------------------------------------------------------------

    def attach(self) -> "AmEndpoint":
        reply = self.ep.control_rpc(bytes([CTRL_ATTACH]))
        opcode, ok, banks, slots, frame_size, mode, region_id, key = _ATTACH_REPLY.unpack(reply)
        if opcode != CTRL_ATTACH or not ok:
            raise TransportError("attach refused")
        self.geometry = MailboxGeometry(banks, slots, frame_size)
        self.frame_config = wire.FrameConfig(
            frame_size=frame_size, mode="variable" if mode else "fixed"
        )
        self._inbox_info = (region_id, key)
        self.ep.add_peer_region(region_id, self.geometry.total_size, key)

        self.credit = self.node.node.register_region(banks)
        mailbox.init_credit_flags(self.credit, banks)
        self.reply = self.node.node.register_region(self.geometry.total_size)
        ack = self.ep.control_rpc(
            _CLIENT_REGIONS.pack(CTRL_CLIENT_REGIONS, self.credit.region_id,
                                 self.credit.key, self.reply.region_id, self.reply.key)
        )
        if ack != bytes([CTRL_CLIENT_REGIONS, 1]):
            raise TransportError("client region registration refused")
        return self

    def resolve(self, names: list[str]) -> dict[str, int]:
        """Run (or extend) the link handshake for these symbol names."""
        missing = [n for n in names if n not in self.handle_cache]
        if missing:
            handles = linkpkg.resolve_symbols(self.ep, missing)
            self.handle_cache.update(zip(missing, handles))
        return {n: self.handle_cache[n] for n in names}

    # -- sends -----------------------------------------------------------------

    def send_injected(self, element: linkpkg.Element, args: bytes = b"",
                      payload: bytes = b"", respond: bool = False,
                      timeout: float | None = 30.0) -> tuple[int, int]:
        flags = wire.FLAG_INJECTED | (wire.FLAG_RESPOND if respond else 0)
        if self.node.config.patch_mode == linkpkg.RECEIVER_PATCH:
            flags |= wire.FLAG_RECEIVER_PATCH
            got = linkpkg.patch_got(element.code, linkpkg.RECEIVER_PATCH)
        else:
            self.resolve(list(element.code.extern_names))
            got = linkpkg.patch_got(element.code, linkpkg.SENDER_PATCH, self.handle_cache)
        bank, slot = self.geometry.placement(self.k)
        parts = wire.make_parts(
            flags=flags, element_id=element.element_id, got_entries=got,
            code=element.code.code_bytes, args=args, payload=payload,
            bank=bank, slot=slot,
        )
        return self._send_parts(parts, timeout)

    def send_local(self, element_id: int, args: bytes = b"", payload: bytes = b"",
                   respond: bool = False, timeout: float | None = 30.0) -> tuple[int, int]:
        if element_id in RESERVED_IDS:
            raise ValueError(f"element id 0x{element_id:04X} is reserved")
        bank, slot = self.geometry.placement(self.k)
        parts = wire.make_parts(
            flags=wire.FLAG_RESPOND if respond else 0,
            element_id=element_id, args=args, payload=payload, bank=bank, slot=slot,
        )
        return self._send_parts(parts, timeout)

    def _send_parts(self, parts: wire.MessageParts, timeout: float | None) -> tuple[int, int]:
        frame = wire.encode_frame(parts, self.frame_config)  # FrameTooLarge before any put
        header = parts.header
        if header.slot == 0 and not mailbox.acquire_bank(
            self.credit, header.bank, self.node.config.wait, timeout, self.acct
        ):
            raise TransportError(f"credit acquire timed out on bank {header.bank}")
        region_id, key = self._inbox_info
        offset = self.geometry.slot_offset(header.bank, header.slot)
        _put_frame(self.ep, region_id, key, offset, frame)
        self.k += 1
        return header.bank, header.slot

    # -- replies ---------------------------------------------------------------

    def wait_reply(self, bank: int, slot: int, timeout: float | None = 30.0,
                   execute: bool = True) -> Reply:
        """Consume the pong at (bank, slot); execute echoes by default."""
        geo = self.geometry
        cfg = self.frame_config
        offset = geo.slot_offset(bank, slot)
        if cfg.mode == "fixed":
            watch, expect = offset + geo.frame_size - 1, wire.SIG_MAG
        else:
            watch, expect = offset + wire.HEADER_SIZE - 1, wire.HDR_MAG
        if not mailbox.wait_signal(self.reply, watch, expect, self.node.config.wait,
                                   timeout, self.acct):
            raise ReplyTimeout(f"no reply in bank {bank} slot {slot}")
        if cfg.mode == "variable":
            header = wire.decode_header(self.reply.buf[offset : offset + wire.HEADER_SIZE])
            need = wire.frame_size(header.got_count, header.code_len,
                                   header.args_len, header.payload_len)
            if not mailbox.wait_signal(self.reply, offset + need - 1, wire.SIG_MAG,
                                       self.node.config.wait, timeout, self.acct):
                raise ReplyTimeout(f"reply body stalled in bank {bank} slot {slot}")
        frame = mailbox.consume_slot(self.reply, geo, bank, slot, cfg)
        parts = wire.decode_frame(frame, cfg)
        header = parts.header
        if header.element_id == ERROR_FRAME_ID and not header.injected:
            return Reply(ok=False, parts=parts, error=parts.payload.decode(errors="replace"))
        if header.element_id == NOOP_PONG_ID and not header.injected:
            return Reply(ok=True, parts=parts)
        if not execute:
            return Reply(ok=True, parts=parts)
        try:
            status = self.node.execute_parts(parts, self.host)
        except (picvm.ValidateError, linkpkg.UnknownSymbolHash, linkpkg.UnresolvedSymbol,
                UnknownElementId) as err:
            return Reply(ok=False, parts=parts, error=repr(err))
        if not status.halted:
            return Reply(ok=False, parts=parts, status=status,
                         error=f"{status.kind}:{status.reason}")
        return Reply(ok=True, parts=parts, status=status)

    def close(self) -> None:
        self.ep.close()


# -- wiring helpers -----------------------------------------------------------

def connect_shm(client: AmNode, server: AmNode, *, ordered: bool = True,
                chunk_size: int | None = None, seed: int | None = None) -> AmEndpoint:
    ep = client.node.connect(server.node, ordered=ordered, chunk_size=chunk_size, seed=seed)
    return AmEndpoint(client, ep).attach()


def connect_tcp(client: AmNode, host: str, port: int) -> AmEndpoint:
    ep = client.node.connect(host, port)
    return AmEndpoint(client, ep).attach()
