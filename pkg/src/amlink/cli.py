"""Command-line front end.

    amlink pkg-build DIR -o OUT       assemble jam_*.amc sources into a package
    amlink serve --listen HOST:PORT   host workloads for remote peers
    amlink bench ...                  run a benchmark, print/CSV the rows
    amlink resolve --peer HOST:PORT NAME...   query a server's symbol handles

Exit codes: 0 success, 1 bad usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading
from pathlib import Path

from . import bench, linkpkg, mailbox, runtime, testpkg, transport
from .transport import TransportError


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the convention here
    reserves 2 for runtime failures, so usage problems remap to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"{text!r} is not HOST:PORT")
    return host or "127.0.0.1", int(port)


def _sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(piece) for piece in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated size list")
    return sizes


# -- subcommands -----------------------------------------------------------------


def _cmd_pkg_build(args) -> int:
    directory = Path(args.directory)
    paths = sorted(directory.glob("jam_*.amc"))
    if not paths:
        print(f"error: no jam_*.amc sources in {directory}", file=sys.stderr)
        return 2
    sources = [(path.name, path.read_text()) for path in paths]
    data, manifest = linkpkg.build_package(args.name or directory.name, sources)
    Path(args.output).write_bytes(data)
    print(manifest, end="" if manifest.endswith("\n") else "\n")
    print(f"wrote {len(data)} bytes to {args.output}", file=sys.stderr)
    return 0


def _serve_config(args) -> runtime.RuntimeConfig:
    return runtime.RuntimeConfig(
        geometry=mailbox.MailboxGeometry(args.banks, args.slots, args.frame_size),
        wait=mailbox.WaitStrategy(kind=args.wait),
        pong="echo",
    )


def _cmd_serve(args) -> int:
    if args.pkg:
        package = linkpkg.load_package_file(args.pkg)
    else:
        package = testpkg.load_test_package()
    node = runtime.AmNode(transport.TcpNode("serve"), _serve_config(args),
                          package=package, state=testpkg.TestState())
    node.install_ried(testpkg.make_ried())
    host, port = node.node.listen(*args.listen)
    print(f"serving {package.package_name} on {host}:{port}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        node.close()
        node.node.close()
    print(f"served: executed={node.stats.executed} errors={node.stats.errors}")
    return 0


def _cmd_bench(args) -> int:
    config = bench.BenchConfig(
        shape=args.shape,
        func=args.func,
        mode=args.mode,
        payload_sizes=args.payload_sizes,
        warmup=args.warmup,
        iters=args.iters,
        wait=args.wait,
        spin_iterations=args.spin_iterations,
        banks=args.banks,
        slots=args.slots,
        frame_size=args.frame_size,
        transport=args.transport,
        peer=args.peer,
        inter_arrival_ns=args.inter_arrival_ns,
        patch_mode=args.patch,
    )
    rows = bench.run(config)
    for row in rows:
        s = row.stats
        print(
            f"shape={row.shape} func={row.func} mode={row.mode} "
            f"payload={row.payload} wait={row.wait} "
            f"p50={s.p50_ns}ns p99.9={s.p999_ns}ns spread={s.tail_spread:.3f} "
            f"mean={s.mean_ns:.1f}ns rate={s.messages_per_sec:.1f}/s "
            f"busy={s.busy_wait_time_ns}ns errors={s.errors}"
        )
    if args.csv:
        bench.write_csv(args.csv, rows)
        print(f"wrote {args.csv}", file=sys.stderr)
    return 0


def _cmd_resolve(args) -> int:
    node = transport.TcpNode("resolve")
    endpoint = node.connect(*args.peer)
    try:
        handles = linkpkg.resolve_symbols(endpoint, args.names)
    finally:
        endpoint.close()
        node.close()
    for name, handle in zip(args.names, handles):
        print(f"{name}\t{handle}")
    return 0


# -- wiring ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="amlink", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = commands.add_parser("pkg-build", help="assemble jam_*.amc sources into a package")
    p.add_argument("directory", help="directory holding jam_*.amc sources")
    p.add_argument("-o", "--output", required=True, help="package file to write")
    p.add_argument("--name", help="package name (default: the directory name)")
    p.set_defaults(fn=_cmd_pkg_build)

    p = commands.add_parser("serve", help="host workloads for remote peers")
    p.add_argument("--listen", type=_address, default=("127.0.0.1", 0),
                   metavar="HOST:PORT")
    p.add_argument("--pkg", help="package file to host (default: built-in workloads)")
    p.add_argument("--banks", type=int, default=4)
    p.add_argument("--slots", type=int, default=16)
    p.add_argument("--frame-size", type=int, default=4096)
    p.add_argument("--wait", choices=["spin", "hybrid"], default="spin")
    p.set_defaults(fn=_cmd_serve)

    p = commands.add_parser("bench", help="run a benchmark")
    p.add_argument("--shape", choices=list(bench.SHAPES), default="pingpong")
    p.add_argument("--func", choices=list(bench.FUNCS), default="ssum")
    p.add_argument("--mode", choices=list(bench.MODES), default="injected")
    p.add_argument("--payload-sizes", type=_sizes, default=(4, 64, 1024),
                   metavar="N[,N...]")
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--iters", type=int, default=100_000)
    p.add_argument("--wait", choices=["spin", "hybrid"], default="spin")
    p.add_argument("--spin-iterations", type=int, default=1000)
    p.add_argument("--banks", type=int, default=4)
    p.add_argument("--slots", type=int, default=16)
    p.add_argument("--frame-size", type=int, default=4096)
    p.add_argument("--transport", choices=list(bench.TRANSPORTS), default="shm")
    p.add_argument("--peer", metavar="HOST:PORT",
                   help="already-running server (tcp transport only)")
    p.add_argument("--inter-arrival-ns", type=int, default=0,
                   help="throttle: sleep this long between sends")
    p.add_argument("--patch", choices=[linkpkg.SENDER_PATCH, linkpkg.RECEIVER_PATCH],
                   default=linkpkg.SENDER_PATCH)
    p.add_argument("--csv", help="also write rows to this CSV file")
    p.set_defaults(fn=_cmd_bench)

    p = commands.add_parser("resolve", help="query a server's symbol handles")
    p.add_argument("--peer", type=_address, required=True, metavar="HOST:PORT")
    p.add_argument("names", nargs="+", metavar="NAME")
    p.set_defaults(fn=_cmd_resolve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ValueError as err:  # bad flag combinations (config validation)
        print(f"amlink: error: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0
    except (TransportError, bench.BenchError, linkpkg.AssembleError,
            linkpkg.PackageError, linkpkg.UnresolvedSymbol, OSError) as err:
        print(f"amlink: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
