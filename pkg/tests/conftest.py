from torpush_sim.gossip import DiscoveryDirectory, build_mesh
from torpush_sim.model import derive_rng


def isolated_receiver(cfg, hosts):
    """A node that is neither one of ``hosts`` nor a mesh peer of any of them,
    using the same mesh a run with ``cfg`` would build."""
    n = cfg.n_nonTor_nodes
    mesh = build_mesh(cfg, DiscoveryDirectory(n), derive_rng(cfg.rng_seed, "mesh"))
    banned = set(hosts)
    for h in hosts:
        banned.update(mesh.peers[h])
    free = [x for x in range(n) if x not in banned]
    if not free:
        raise LookupError("no isolated receiver for this seed")
    return free[0]


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
