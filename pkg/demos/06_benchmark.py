"""The measurement harness: round-trip and one-way message shapes over
the in-process transport, with nearest-rank percentiles and a
tail-to-typical spread that survive exact arithmetic.

(Desk-scale runs; rates here say nothing about real hardware.)

Run: python3 demos/06_benchmark.py
"""

from amlink import bench

# Round-trip shape: every message asks for a response; one sample is
# half a round trip.
config = bench.BenchConfig(shape="pingpong", func="ssum", mode="injected",
                           payload_sizes=(4, 1024), iters=1000, warmup=200)
rows = bench.run(config)
for row in rows:
    s = row.stats
    print(f"pingpong injected {row.payload:>5}B: p50 {s.p50_ns:>8}ns   "
          f"p99.9 {s.p999_ns:>8}ns   spread {s.tail_spread:.2f}   "
          f"{s.messages_per_sec:>7.0f} msg/s")

# One-way shape: fire a stream, confirm only the last message, then
# audit the receiver's state against a native replay of the stream.
config = bench.BenchConfig(shape="rate", func="ipt", mode="local",
                           payload_sizes=(256,), iters=2000, warmup=200)
(row,) = bench.run(config)
s = row.stats
print(f"rate     local    {row.payload:>5}B: p50 {s.p50_ns:>8}ns   "
      f"p99.9 {s.p999_ns:>8}ns   spread {s.tail_spread:.2f}   "
      f"{s.messages_per_sec:>7.0f} msg/s")

# Rows serialize to a stable CSV schema for downstream tooling.
print()
print(bench.rows_as_csv_text(rows).rstrip())

# The percentile is nearest-rank, computed in exact arithmetic: for
# 1000 samples, p99.9 is the 999th ordered value, not the 1000th that
# float rounding would pick.
samples = list(range(1, 1001))
print(f"\np99.9 of [1..1000] = {bench.percentile(samples, 99.9)}")
print(f"tail spread (282 vs 100) = {bench.tail_spread(282, 100)}")
