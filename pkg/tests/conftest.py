import numpy as np
import pytest

from pfqn.topology import Topology, TrafficProfile, linear_network


def random_topology(rng, J, I, cap_range=(0.5, 3.0)):
    routes = []
    for _ in range(I):
        length = rng.integers(1, J + 1)
        routes.append(tuple(rng.permutation(J)[:length].tolist()))
    return Topology(tuple(rng.uniform(*cap_range, J)), tuple(routes))


def random_instances(count, seed=1, max_j=4, max_i=5, n_hi=5.0, integer=False, zero_frac=0.2):
    """(topology, n, traffic) triples with stable traffic at 90% of the tightest queue."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        J, I = rng.integers(1, max_j + 1), rng.integers(1, max_i + 1)
        topo = random_topology(rng, J, I)
        if integer:
            n = rng.integers(0, int(n_hi) + 1, I)
        else:
            n = rng.uniform(0, n_hi, I)
            n[rng.random(I) < zero_frac] = 0
            if not (n > 0).any():
                n[0] = 1.0
        rho = rng.uniform(0.1, 1.0, I)
        rho *= 0.9 * np.min(topo.capacity_array / np.maximum(topo.incidence_matrix @ rho, 1e-9))
        yield topo, n, TrafficProfile.from_rho(rho)


@pytest.fixture
def linear():
    return linear_network()


@pytest.fixture
def quarter_load():
    return TrafficProfile.from_rho([0.25, 0.25, 0.25])


# one (criterion, verdict, detail) line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
