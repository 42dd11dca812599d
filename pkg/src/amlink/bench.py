"""Benchmark harness: round-trip latency and injection-rate runs over
the two reference workloads, with percentile/tail statistics and CSV
output.

Shapes:

pingpong   one message in flight.  Every message asks for a response;
           the latency sample is half the measured round trip.  The
           server echoes the request so both sides execute it (the
           symmetric-work convention for round-trip runs).

rate       fire-and-forget as fast as credit allows.  Only the final
           message asks for a response, which marks completion; the
           sample recorded per message is the send-side cost (credit
           stalls included).  After an in-process run the receiver
           state is audited against a native replay of the exact
           stream: every message exactly once, in order.

Percentiles use the nearest-rank rule (1-based): the p-th percentile of
n ordered samples is the value at rank ceil(p/100 * n).  The rank is
computed in exact rational arithmetic; going through binary floats
would round `99.9/100 * 1000` up to rank 1000 and silently report the
maximum instead of the 999th sample.
"""

from __future__ import annotations

import csv
import io
import math
import random
import statistics
import struct
import time
from dataclasses import dataclass
from fractions import Fraction

from . import linkpkg, mailbox, runtime, testpkg, transport

SHAPES = ("pingpong", "rate")
FUNCS = ("ssum", "ipt")
MODES = ("injected", "local")
TRANSPORTS = ("shm", "tcp")
WAITS = (mailbox.SPIN.kind, mailbox.HYBRID.kind)

CSV_COLUMNS = (
    "shape", "func", "mode", "payload", "wait",
    "p50_ns", "p999_ns", "tail_spread", "mean_ns",
    "messages_per_sec", "wall_time_ns", "busy_wait_time_ns", "errors",
)


class BenchError(Exception):
    pass


class EmptySamples(BenchError):
    pass


class ZeroTypical(BenchError):
    pass


class SequenceAuditError(BenchError):
    pass


# -- statistics ----------------------------------------------------------------


def percentile(samples, p) -> int:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not samples:
        raise EmptySamples("no samples")
    if not 0 < float(p) <= 100:
        raise ValueError(f"percentile {p} outside (0, 100]")
    ordered = sorted(samples)
    rank = math.ceil(Fraction(str(p)) * len(ordered) / 100)
    return ordered[max(rank, 1) - 1]


def tail_spread(tail, typical) -> float:
    """How far the tail sits above the typical value, as a fraction of it."""
    if typical == 0:
        raise ZeroTypical("typical value is zero")
    return (tail - typical) / typical


@dataclass(frozen=True)
class BenchStats:
    p50_ns: int
    p999_ns: int
    tail_spread: float
    mean_ns: float
    messages_per_sec: float
    wall_time_ns: int
    busy_wait_time_ns: int
    errors: int


def summarize(samples, wall_time_ns: int, busy_wait_time_ns: int = 0,
              errors: int = 0, messages: int | None = None) -> BenchStats:
    """Fold raw per-message samples into the published statistics."""
    p50 = percentile(samples, 50)
    p999 = percentile(samples, 99.9)
    if messages is None:
        messages = len(samples)
    rate = messages * 1e9 / wall_time_ns if wall_time_ns > 0 else 0.0
    return BenchStats(
        p50_ns=p50,
        p999_ns=p999,
        tail_spread=tail_spread(p999, p50),
        mean_ns=statistics.fmean(samples),
        messages_per_sec=rate,
        wall_time_ns=wall_time_ns,
        busy_wait_time_ns=busy_wait_time_ns,
        errors=errors,
    )


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    shape: str = "pingpong"
    func: str = "ssum"
    mode: str = "injected"
    payload_sizes: tuple[int, ...] = (4, 64, 1024)
    warmup: int = 1000
    iters: int = 100_000
    wait: str = "spin"
    spin_iterations: int = 1000
    banks: int = 4
    slots: int = 16
    frame_size: int = 4096
    transport: str = "shm"
    peer: str | None = None  # "host:port" to use an already-running server
    inter_arrival_ns: int = 0
    patch_mode: str = linkpkg.SENDER_PATCH
    seed: int = 2026

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape {self.shape!r} not in {SHAPES}")
        if self.func not in FUNCS:
            raise ValueError(f"func {self.func!r} not in {FUNCS}")
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not in {MODES}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport {self.transport!r} not in {TRANSPORTS}")
        if self.wait not in WAITS:
            raise ValueError(f"wait {self.wait!r} not in {WAITS}")
        if self.iters < 1000:
            raise ValueError(f"iters {self.iters} below the 1000 minimum")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not self.payload_sizes:
            raise ValueError("payload_sizes is empty")
        if any(size < 4 for size in self.payload_sizes):
            raise ValueError("payload sizes below 4 bytes are not supported")

    @property
    def wait_strategy(self) -> mailbox.WaitStrategy:
        return mailbox.WaitStrategy(kind=self.wait, spin_iterations=self.spin_iterations)

    @property
    def geometry(self) -> mailbox.MailboxGeometry:
        return mailbox.MailboxGeometry(self.banks, self.slots, self.frame_size)


@dataclass(frozen=True)
class BenchRow:
    shape: str
    func: str
    mode: str
    payload: int
    wait: str
    stats: BenchStats

    def as_csv(self) -> list:
        s = self.stats
        return [
            self.shape, self.func, self.mode, self.payload, self.wait,
            s.p50_ns, s.p999_ns, s.tail_spread, s.mean_ns,
            s.messages_per_sec, s.wall_time_ns, s.busy_wait_time_ns, s.errors,
        ]


def write_csv(target, rows) -> None:
    """Write rows to a path or file object, header included."""
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        with open(target, "w", newline="") as handle:
            write_csv(handle, rows)
        return
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv())


def rows_as_csv_text(rows) -> str:
    buffer = io.StringIO()
    write_csv(buffer, rows)
    return buffer.getvalue()


# -- environment -------------------------------------------------------------------


class _Env:
    """One wired pair (or a client onto a remote server) for one run."""

    def __init__(self, config: BenchConfig):
        runtime_cfg = runtime.RuntimeConfig(
            geometry=config.geometry,
            wait=config.wait_strategy,
            patch_mode=config.patch_mode,
            pong="echo" if config.shape == "pingpong" else "noop",
        )
        package = testpkg.load_test_package()
        self.server: runtime.AmNode | None = None
        self._nodes = []
        if config.transport == "shm":
            self.server = runtime.AmNode(transport.ShmNode("bench-server"), runtime_cfg,
                                         package=package, state=testpkg.TestState())
            client = runtime.AmNode(transport.ShmNode("bench-client"), runtime_cfg,
                                    package=package, state=testpkg.TestState())
            self.server.install_ried(testpkg.make_ried())
            client.install_ried(testpkg.make_ried())
            self._nodes = [self.server, client]
            self.client = client
            self.ep = runtime.connect_shm(client, self.server)
        else:
            client = runtime.AmNode(transport.TcpNode("bench-client"), runtime_cfg,
                                    package=package, state=testpkg.TestState())
            client.install_ried(testpkg.make_ried())
            self.client = client
            self._nodes = [client]
            if config.peer:
                host, _, port = config.peer.rpartition(":")
                self.ep = runtime.connect_tcp(client, host or "127.0.0.1", int(port))
            else:
                self.server = runtime.AmNode(transport.TcpNode("bench-server"), runtime_cfg,
                                             package=package, state=testpkg.TestState())
                self.server.install_ried(testpkg.make_ried())
                self._nodes.append(self.server)
                host, port = self.server.node.listen("127.0.0.1", 0)
                self.ep = runtime.connect_tcp(client, host, port)

    def busy_ns(self) -> int:
        total = self.ep.acct.busy_ns
        if self.server is not None:
            total += sum(s.acct.busy_ns for s in self.server.sessions.values())
        return total

    def close(self) -> None:
        self.ep.close()
        for node in self._nodes:
            node.close()
            node.node.close()


# -- message streams -----------------------------------------------------------------


class _Stream:
    """Deterministic per-run message generator, replayable for audits."""

    def __init__(self, config: BenchConfig, size: int):
        self.func = config.func
        self.size = size
        rng = random.Random((config.seed << 16) ^ size)
        self.template = bytearray(rng.randbytes(size))
        # ipt keys cycle through half the table so it never fills.
        self.keys = [rng.getrandbits(64) for _ in range(min(2048, testpkg.TABLE_CAPACITY // 2))]

    def message(self, seq: int) -> tuple[bytes, bytes]:
        """(args, payload) for the seq-th message of the stream."""
        payload = self.template.copy()
        struct.pack_into("<I", payload, 0, seq & 0xFFFFFFFF)
        payload = bytes(payload)
        if self.func == "ssum":
            return testpkg.ssum_args(payload), payload
        key = self.keys[seq % len(self.keys)]
        return testpkg.ipt_args(key, len(payload)), payload

    def replay(self, state: testpkg.TestState, total: int) -> None:
        for seq in range(total):
            _args, payload = self.message(seq)
            if self.func == "ssum":
                testpkg.native_ssum(state, payload)
            else:
                testpkg.native_ipt(state, self.keys[seq % len(self.keys)], payload)


def _audit(env: _Env, stream: _Stream, total: int) -> None:
    """Receiver state must equal a native replay: exactly once, in order."""
    if env.server is None:
        return  # remote peer: its state is not observable from here
    expected = testpkg.TestState()
    stream.replay(expected, total)
    actual = env.server.state
    if stream.func == "ssum":
        if actual.ssum.results != expected.ssum.results:
            got, want = actual.ssum.results, expected.ssum.results
            for i, (g, w) in enumerate(zip(got, want)):
                if g != w:
                    raise SequenceAuditError(
                        f"result {i}: got {g}, expected {w} (of {len(got)}/{len(want)})"
                    )
            raise SequenceAuditError(f"result count {len(got)}, expected {len(want)}")
    else:
        if actual.ipt.keys != expected.ipt.keys or actual.ipt.occupied != expected.ipt.occupied:
            raise SequenceAuditError("table placement diverged from the replay")
        if actual.ipt.heap != expected.ipt.heap:
            raise SequenceAuditError("heap contents diverged from the replay")


# -- the runs ---------------------------------------------------------------------


def _send(env: _Env, config: BenchConfig, element, args, payload, respond):
    if config.mode == "injected":
        return env.ep.send_injected(element, args=args, payload=payload, respond=respond)
    return env.ep.send_local(element.element_id, args=args, payload=payload, respond=respond)


def _run_pingpong(env: _Env, config: BenchConfig, stream: _Stream) -> BenchStats:
    element = testpkg.load_test_package().by_name(config.func)
    throttle = config.inter_arrival_ns / 1e9
    total = config.warmup + config.iters
    samples = []
    errors = 0
    wall_start = time.perf_counter_ns()
    busy_start = env.busy_ns()
    for seq in range(total):
        if seq == config.warmup:
            wall_start = time.perf_counter_ns()
            busy_start = env.busy_ns()
        args, payload = stream.message(seq)
        t0 = time.perf_counter_ns()
        bank, slot = _send(env, config, element, args, payload, respond=True)
        reply = env.ep.wait_reply(bank, slot, timeout=60)
        elapsed = time.perf_counter_ns() - t0
        if seq >= config.warmup:
            if reply.ok:
                samples.append(elapsed // 2)
            else:
                errors += 1
        if throttle:
            time.sleep(throttle)
    wall = time.perf_counter_ns() - wall_start
    busy = env.busy_ns() - busy_start
    return summarize(samples, wall, busy, errors, messages=config.iters)


def _run_rate(env: _Env, config: BenchConfig, stream: _Stream) -> BenchStats:
    element = testpkg.load_test_package().by_name(config.func)
    throttle = config.inter_arrival_ns / 1e9
    total = config.warmup + config.iters
    samples = []
    wall_start = time.perf_counter_ns()
    busy_start = env.busy_ns()
    for seq in range(total):
        if seq == config.warmup:
            wall_start = time.perf_counter_ns()
            busy_start = env.busy_ns()
        args, payload = stream.message(seq)
        last = seq == total - 1
        t0 = time.perf_counter_ns()
        bank, slot = _send(env, config, element, args, payload, respond=last)
        if seq >= config.warmup:
            samples.append(time.perf_counter_ns() - t0)
        if throttle:
            time.sleep(throttle)
        if last:
            env.ep.wait_reply(bank, slot, timeout=60)
    wall = time.perf_counter_ns() - wall_start
    busy = env.busy_ns() - busy_start
    errors = env.server.stats.errors if env.server is not None else 0
    _audit(env, stream, total)
    return summarize(samples, wall, busy, errors, messages=config.iters)


def run(config: BenchConfig) -> list[BenchRow]:
    """One row per payload size, each on a freshly wired pair."""
    rows = []
    for size in config.payload_sizes:
        env = _Env(config)
        try:
            stream = _Stream(config, size)
            if config.shape == "pingpong":
                stats = _run_pingpong(env, config, stream)
            else:
                stats = _run_rate(env, config, stream)
        finally:
            env.close()
        rows.append(BenchRow(config.shape, config.func, config.mode,
                             size, config.wait, stats))
    return rows
