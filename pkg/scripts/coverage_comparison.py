"""Coverage ticks of the two-agent benchmark against one agent covering the same floor."""

import json

from multisgraph.scenario import benchmark_scenario, compare, run, single_agent_scenario

single = run(single_agent_scenario(), "out/single")
multi = run(benchmark_scenario(), "out/benchmark")
print(json.dumps(compare(single, multi), indent=1, sort_keys=True))
