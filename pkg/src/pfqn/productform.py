"""Exact product-form quantities for multi-class processor-sharing networks.

The closed-network weight of a packet state ``m`` is

    w(m) = prod_j  m_j! / prod_i m_ji!  *  prod_i C_j ** -m_ji

and ``B_n`` is the sum of ``w`` over all states with route sums ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .errors import (
    PfqnError,
    StateNotInSn,
    TableMiss,
    TableTooLarge,
    UnstableNetwork,
)
from .topology import (
    DEFAULT_STATE_CAP,
    PacketVector,
    Topology,
    TrafficProfile,
    as_doc_counts,
    enumerate_state_array,
    queue_loads,
)

DEFAULT_TABLE_CAP = 2 * 10**7
FEASIBILITY_TOL = 1e-9
_RESCALE_HI = 2.0**512
_RESCALE_LO = 2.0**-512


class NumericOverflow(PfqnError):
    pass


def log_weights(topo: Topology, states, ratios=None) -> np.ndarray:
    """log of the product-form weight for each row of ``states``.

    ``ratios`` is a length-K vector of per-incidence factors; the default
    ``1/C_j`` gives the closed-network weight, ``rho_i/C_j`` the open one.
    """
    states = np.asarray(states, dtype=float)
    if ratios is None:
        ratios = 1.0 / topo.capacity_array[topo.inc_queue]
    totals = topo.queue_totals(states)
    logw = gammaln(totals + 1.0).sum(axis=-1) - gammaln(states + 1.0).sum(axis=-1)
    return logw + xlogy(states, ratios).sum(axis=-1)


def bn_bruteforce(topo: Topology, n, cap: int = DEFAULT_STATE_CAP) -> float:
    """B_n summed directly over S(n)."""
    states = enumerate_state_array(topo, n, cap)
    return math.fsum(np.exp(log_weights(topo, states)))


@dataclass(frozen=True)
class NormalizingTable:
    """B_n for every 0 <= n <= n_max.

    ``scaled[n]`` holds ``B_n * prod_i route_scale_i**n_i * 2**-log2_offset``.
    The per-route factors keep entries of one table within a few hundred
    binary orders of each other; the shared offset keeps the largest near 1.
    Ratios such as the spinning allocation never need the offset.
    """

    topo: Topology
    n_max: tuple[int, ...]
    scaled: np.ndarray
    route_scale: np.ndarray
    log2_offset: int

    def covers(self, n) -> bool:
        n = np.asarray(n)
        return bool(np.all(n >= 0) and np.all(n <= np.array(self.n_max)))

    def _check(self, n):
        if not self.covers(n):
            raise TableMiss(f"n={tuple(int(x) for x in n)} outside table bound {self.n_max}")

    def log_value(self, n) -> float:
        n = as_doc_counts(self.topo, n)
        self._check(n)
        s = self.scaled[tuple(n)]
        return math.log(s) - float(np.dot(n, np.log(self.route_scale))) + self.log2_offset * math.log(2.0)

    def value(self, n) -> float:
        return math.exp(self.log_value(n))

    def __getitem__(self, n) -> float:
        return self.value(n)

    def ratio(self, n, i: int) -> float:
        """B_{n - e_i} / B_n."""
        n = np.asarray(n, dtype=np.int64)
        self._check(n)
        down = n.copy()
        down[i] -= 1
        self._check(down)
        return float(self.route_scale[i] * self.scaled[tuple(down)] / self.scaled[tuple(n)])

    def log_values(self) -> np.ndarray:
        """log B_n over the whole box."""
        grids = np.indices(self.scaled.shape)
        shift = sum(g * math.log(s) for g, s in zip(grids, self.route_scale))
        return np.log(self.scaled) - shift + self.log2_offset * math.log(2.0)


def _route_scales(topo: Topology, n_max) -> np.ndarray:
    # single-bottleneck fair share at n_max, a cheap stand-in for B_{n-e_i}/B_n
    n_max = np.asarray(n_max, dtype=float)
    load = topo.incidence_matrix @ n_max
    scales = np.ones(topo.I)
    for i, r in enumerate(topo.routes):
        if n_max[i] > 0:
            scales[i] = min(topo.capacities[j] * n_max[i] / load[j] for j in r)
    return scales


def bn_table(topo: Topology, n_max, cap: int = DEFAULT_TABLE_CAP) -> NormalizingTable:
    """Normalizing constants on the box [0, n_max] by convolution over queues.

    Queue k multiplies the generating function by 1 / (1 - sum_{i on k} x_i / C_k),
    i.e. G_k(n) = G_{k-1}(n) + sum_{i on k} G_k(n - e_i) / C_k, G_0 = [n == 0].
    Within a queue, entries are filled level by level in sum_{i on k} n_i.
    """
    n_max = tuple(int(x) for x in as_doc_counts(topo, n_max))
    shape = tuple(x + 1 for x in n_max)
    size = math.prod(shape)
    if size > cap:
        raise TableTooLarge(f"table of {size} entries exceeds cap {cap}")

    gamma = _route_scales(topo, n_max)
    strides = np.array([math.prod(shape[i + 1:]) for i in range(topo.I)], dtype=np.int64)
    coords = np.indices(shape).reshape(topo.I, -1)
    flat_idx = np.arange(size, dtype=np.int64)

    g = np.zeros(size + 1)  # last slot is a permanent zero for out-of-box predecessors
    g[0] = 1.0
    offset = 0
    for k in range(topo.J):
        through = topo.routes_through(k)
        if not through:
            continue
        level = coords[list(through)].sum(axis=0)
        order = np.argsort(level, kind="stable")
        bounds = np.searchsorted(level[order], np.arange(level.max() + 2))
        preds = [np.where(coords[i] > 0, flat_idx - strides[i], size) for i in through]
        coefs = [gamma[i] / topo.capacities[k] for i in through]
        for s in range(1, level.max() + 1):
            idx = order[bounds[s]:bounds[s + 1]]
            acc = np.zeros(len(idx))
            for p, c in zip(preds, coefs):
                acc += c * g[p[idx]]
            g[idx] += acc
        top = g[:size].max()
        if not math.isfinite(top):
            raise NumericOverflow("normalizing table overflowed despite rescaling")
        if top > _RESCALE_HI or top < _RESCALE_LO:
            shift = math.frexp(top)[1]
            g[:size] = np.ldexp(g[:size], -shift)
            offset += shift

    scaled = g[:size].reshape(shape)
    if np.any(scaled <= 0):
        raise NumericOverflow("normalizing table underflowed")
    scaled.setflags(write=False)
    return NormalizingTable(topo, n_max, scaled, gamma, offset)


@dataclass(frozen=True)
class Allocation:
    """Per-route transfer rates."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if np.any(lam < 0):
            raise ValueError("allocations are nonnegative")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    def slacks(self, topo: Topology) -> np.ndarray:
        return topo.capacity_array - topo.incidence_matrix @ self.lam


@dataclass(frozen=True)
class FeasibilityReport:
    slacks: np.ndarray
    feasible: bool

    def __bool__(self):
        return self.feasible


def check_feasibility(topo: Topology, alloc: Allocation, tol: float = FEASIBILITY_TOL) -> FeasibilityReport:
    slacks = alloc.slacks(topo)
    return FeasibilityReport(slacks, bool(np.all(slacks >= -tol)))


def spinning_allocation(topo: Topology, n, table: NormalizingTable) -> Allocation:
    """Closed-network throughput B_{n-e_i} / B_n per route (0 where n_i = 0)."""
    n = as_doc_counts(topo, n)
    if not table.covers(n):
        raise TableMiss(f"n={tuple(n.tolist())} outside table bound {table.n_max}")
    lam = np.zeros(topo.I)
    for i in range(topo.I):
        if n[i] > 0:
            lam[i] = table.ratio(n, i)
    return Allocation(lam)


def open_normalizer(topo: Topology, traffic: TrafficProfile) -> float:
    """B = prod_j C_j / (C_j - load_j) for a stable open network."""
    return math.exp(log_open_normalizer(topo, traffic))


def log_open_normalizer(topo: Topology, traffic: TrafficProfile) -> float:
    loads = queue_loads(topo, traffic.rho)
    caps = topo.capacity_array
    if np.any(loads >= caps):
        raise UnstableNetwork(f"queue loads {loads.tolist()} not below capacities {caps.tolist()}")
    return float(np.sum(np.log(caps) - np.log(caps - loads)))


def open_packet_pmf(topo: Topology, traffic: TrafficProfile, m) -> float:
    """Stationary probability of packet state ``m`` in the open network."""
    values = m.values if isinstance(m, PacketVector) else np.asarray(m)
    if values.shape != (topo.K,) or np.any(values < 0):
        raise ValueError("packet state must be a nonnegative length-K vector")
    log_b = log_open_normalizer(topo, traffic)
    ratios = traffic.rho[topo.inc_route] / topo.capacity_array[topo.inc_queue]
    return math.exp(float(log_weights(topo, values, ratios)) - log_b)


def doc_pmf(topo: Topology, traffic: TrafficProfile, n, table: NormalizingTable | None = None) -> float:
    """P(N = n) = B_n / B * prod_i rho_i ** n_i."""
    n = as_doc_counts(topo, n)
    log_b = log_open_normalizer(topo, traffic)
    if table is None:
        table = bn_table(topo, n)
    log_rho = float(xlogy(n, traffic.rho).sum())
    return math.exp(table.log_value(n) + log_rho - log_b)


def doc_pmf_box(topo: Topology, traffic: TrafficProfile, box, table: NormalizingTable | None = None) -> np.ndarray:
    """P(N = n) for every n in the box [0, box], as an array of shape box + 1."""
    box = as_doc_counts(topo, box)
    log_b = log_open_normalizer(topo, traffic)
    if table is None or tuple(table.n_max) != tuple(box.tolist()):
        table = bn_table(topo, box)
    grids = np.indices(table.scaled.shape)
    log_rho = sum(xlogy(g, r) for g, r in zip(grids, traffic.rho))
    return np.exp(table.log_values() + log_rho - log_b)


def closed_distribution(topo: Topology, n, cap: int = DEFAULT_STATE_CAP):
    """All of S(n) with their closed-network probabilities."""
    states = enumerate_state_array(topo, n, cap)
    logw = log_weights(topo, states)
    return states, np.exp(logw - logsumexp(logw))


def closed_conditional_pmf(topo: Topology, n, m, table: NormalizingTable | None = None) -> float:
    """P_n(M = m) for the closed network holding ``n`` documents."""
    n = as_doc_counts(topo, n)
    values = m.values if isinstance(m, PacketVector) else np.asarray(m)
    if (
        values.shape != (topo.K,)
        or np.any(values < 0)
        or np.any(values != np.floor(values))
        or not np.array_equal(topo.route_totals(values), n.astype(float))
    ):
        raise StateNotInSn(f"{values.tolist()} is not in S({n.tolist()})")
    if table is None:
        table = bn_table(topo, n)
    return math.exp(float(log_weights(topo, values)) - table.log_value(n))


def conditional_mean_packets(
    topo: Topology, n, table: NormalizingTable | None = None, cap: int = DEFAULT_STATE_CAP
) -> np.ndarray:
    """E_n[M_ji] for every incidence, by enumeration of S(n).

    With a table covering ``n`` the weights are normalized by its B_n,
    otherwise by their own sum.
    """
    if table is None or not table.covers(as_doc_counts(topo, n)):
        states, probs = closed_distribution(topo, n, cap)
    else:
        states = enumerate_state_array(topo, n, cap)
        probs = np.exp(log_weights(topo, states) - table.log_value(n))
    return probs @ states


def little_identity_residual(
    topo: Topology, n, table: NormalizingTable | None = None, cap: int = DEFAULT_STATE_CAP
) -> dict[tuple[int, int], float]:
    """Lambda_i(n) * E_{n-e_i}[(M_j + 1) / C_j] - E_n[M_ji] for incidences with n_i > 0."""
    n = as_doc_counts(topo, n)
    if table is None:
        table = bn_table(topo, n)
    lam = spinning_allocation(topo, n, table).lam
    mean_n = conditional_mean_packets(topo, n, table, cap)
    out = {}
    for i in range(topo.I):
        if n[i] == 0:
            continue
        down = n.copy()
        down[i] -= 1
        states, probs = closed_distribution(topo, down, cap)
        totals = topo.queue_totals(states)
        for j in topo.routes[i]:
            sojourn = probs @ ((totals[:, j] + 1.0) / topo.capacities[j])
            out[(j, i)] = lam[i] * sojourn - mean_n[topo.incidence_index[(j, i)]]
    return out
