"""Traffic per message type against the raw scan bytes the agents generated."""

from multisgraph.scenario import benchmark_scenario, run

rep = run(benchmark_scenario())
for kind, v in rep.bytes_sent.items():
    print(f"{kind:12s} {v['messages']:4d} msgs {v['bytes']:9d} B")
print(f"raw scans    {rep.raw_scan_bytes:d} B")
print(f"semantic / raw = {rep.semantic_ratio:.4%}")
