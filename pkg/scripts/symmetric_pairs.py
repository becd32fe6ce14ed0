"""Every aligned room pair in the symmetric corridor with its ground truth and gate outcome."""

from multisgraph.scenario import run_agents, symmetric_scenario

res = run_agents(symmetric_scenario())
by_id = {a.agent_id: a for a in res.agents}
print("agent peer local remote same_room sc_dist fitness inliers accepted")
for a in res.agents:
    for pid, peer in sorted(a.broker.peers.items()):
        for (lid, rid), pr in sorted(peer.pairs.items()):
            if pr.alignment is None:
                continue
            here = a.plan.room_at(a.start.act([*a.broker.local[lid].center, 0.0])[:2])
            there = a.plan.room_at(by_id[pid].start.act([*peer.descriptors[rid].center, 0.0])[:2])
            al = pr.alignment
            print(
                f"{a.agent_id} {pid} {lid} {rid} {here == there} {pr.sc_distance:.3f} "
                f"{al.fitness:.4f} {al.inlier_fraction:.3f} {pr.accepted is not None}"
            )
for t in res.report.transforms:
    print(f"T[{t['local']}<-{t['remote']}] {t['error_m']:.3f} m {t['yaw_error_deg']:.2f} deg")
