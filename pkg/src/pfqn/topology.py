"""Network model: queues, routes, queue-route incidences and packet states.

Incidences ``(j, i)`` (queue ``j`` lies on route ``i``) are kept in
lexicographic order of ``(queue, route)``.  Every per-incidence vector in the
package (packet counts, packet masses) is indexed in that order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateQueueInRoute,
    EmptyRoute,
    NoRoutes,
    StateSpaceTooLarge,
    TopologyError,
    UnknownQueueIndex,
)

DEFAULT_STATE_CAP = 10**7

SIZE_KINDS = ("exponential", "geometric", "deterministic", "hyperexponential")


@dataclass(frozen=True)
class Topology:
    """Queues with capacities and routes as ordered tuples of queue indices."""

    capacities: tuple[float, ...]
    routes: tuple[tuple[int, ...], ...]
    queue_names: tuple[str, ...] | None = None
    route_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "capacities", tuple(float(c) for c in self.capacities))
        object.__setattr__(self, "routes", tuple(tuple(int(j) for j in r) for r in self.routes))
        problems = _route_problems(len(self.capacities), self.routes)
        if any(not (c > 0 and math.isfinite(c)) for c in self.capacities):
            problems.append((TopologyError, "capacities must be positive and finite"))
        if not self.capacities:
            problems.append((TopologyError, "network needs at least one queue"))
        if problems:
            cls, msg = problems[0]
            raise cls(msg, [m for _, m in problems])
        if self.queue_names is None:
            object.__setattr__(self, "queue_names", tuple(f"q{j}" for j in range(self.J)))
        if self.route_names is None:
            object.__setattr__(self, "route_names", tuple(f"r{i}" for i in range(self.I)))

    @property
    def J(self) -> int:
        return len(self.capacities)

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.routes)

    @property
    def K(self) -> int:
        return len(self.incidences)

    @cached_property
    def incidences(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted((j, i) for i, r in enumerate(self.routes) for j in r))

    @cached_property
    def incidence_index(self) -> dict[tuple[int, int], int]:
        return {ji: k for k, ji in enumerate(self.incidences)}

    @cached_property
    def inc_queue(self) -> np.ndarray:
        return np.array([j for j, _ in self.incidences], dtype=np.intp)

    @cached_property
    def inc_route(self) -> np.ndarray:
        return np.array([i for _, i in self.incidences], dtype=np.intp)

    @cached_property
    def capacity_array(self) -> np.ndarray:
        arr = np.array(self.capacities, dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def incidence_matrix(self) -> np.ndarray:
        """J x I 0/1 matrix, entry (j, i) is 1 when queue j is on route i."""
        a = np.zeros((self.J, self.I))
        a[self.inc_queue, self.inc_route] = 1.0
        a.setflags(write=False)
        return a

    @cached_property
    def route_slots(self) -> tuple[tuple[int, ...], ...]:
        """For each route, incidence indices of its queues in route order."""
        return tuple(tuple(self.incidence_index[(j, i)] for j in r) for i, r in enumerate(self.routes))

    def routes_through(self, j: int) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.routes) if j in r)

    def queue_totals(self, m) -> np.ndarray:
        """m_j, the packet total at each queue, for one or many packet vectors."""
        m = np.asarray(m, dtype=float)
        out = np.zeros(m.shape[:-1] + (self.J,))
        for k, j in enumerate(self.inc_queue):
            out[..., j] += m[..., k]
        return out

    def route_totals(self, m) -> np.ndarray:
        """Document projection n_i = sum over queues of m_ji."""
        m = np.asarray(m, dtype=float)
        out = np.zeros(m.shape[:-1] + (self.I,))
        for k, i in enumerate(self.inc_route):
            out[..., i] += m[..., k]
        return out


def _route_problems(J, routes):
    problems = []
    if len(routes) == 0:
        problems.append((NoRoutes, "network has no routes"))
    for i, r in enumerate(routes):
        if len(r) == 0:
            problems.append((EmptyRoute, f"route {i} is empty"))
        if len(set(r)) != len(r):
            problems.append((DuplicateQueueInRoute, f"route {i} visits a queue more than once: {r}"))
        bad = [j for j in r if not 0 <= j < J]
        if bad:
            problems.append((UnknownQueueIndex, f"route {i} uses unknown queue indices {bad}"))
    return problems


def validate_topology(raw: Mapping) -> Topology:
    """Build a Topology from a JSON-style description.

    Queues may be given as ``{"name", "capacity"}`` objects or bare numbers;
    route members may be queue names or integer indices.  All problems found
    are collected on the raised error's ``diagnostics`` list.
    """
    queues = raw.get("queues")
    if queues is None:
        queues = [{"capacity": c} for c in raw.get("capacities", [])]
    caps, qnames = [], []
    for j, q in enumerate(queues):
        if isinstance(q, Mapping):
            caps.append(q.get("capacity"))
            qnames.append(str(q.get("name", f"q{j}")))
        else:
            caps.append(q)
            qnames.append(f"q{j}")
    lookup = {name: j for j, name in enumerate(qnames)}
    if len(lookup) != len(qnames):
        raise TopologyError("duplicate queue names")

    diagnostics = []
    routes, rnames = [], []
    for i, r in enumerate(raw.get("routes", [])):
        members = r.get("queues", []) if isinstance(r, Mapping) else r
        name = str(r.get("name", f"r{i}")) if isinstance(r, Mapping) else f"r{i}"
        idx = []
        for q in members:
            if isinstance(q, str):
                if q not in lookup:
                    diagnostics.append((UnknownQueueIndex, f"route {name} names unknown queue {q!r}"))
                    continue
                idx.append(lookup[q])
            else:
                idx.append(int(q))
        routes.append(tuple(idx))
        rnames.append(name)

    for c in caps:
        if not isinstance(c, (int, float)) or isinstance(c, bool):
            diagnostics.append((TopologyError, f"capacity {c!r} is not a number"))
    if diagnostics:
        cls, msg = diagnostics[0]
        raise cls(msg, [m for _, m in diagnostics])
    return Topology(tuple(caps), tuple(routes), tuple(qnames), tuple(rnames))


@dataclass(frozen=True)
class SizeDist:
    """Document-size law with mean 1/mu; ``param`` meaning depends on kind.

    geometric: the scale c (size = Geometric(mu/c) / c);
    hyperexponential: squared coefficient of variation (> 1), balanced means.
    """

    kind: str = "exponential"
    param: float | None = None

    def __post_init__(self):
        if self.kind not in SIZE_KINDS:
            raise TopologyError(f"unknown size distribution {self.kind!r}")
        if self.kind == "hyperexponential" and self.param is not None and self.param <= 1:
            raise TopologyError("hyperexponential scv must exceed 1")

    def sampler(self, mu: float):
        """Return ``draw(rng) -> size`` with mean 1/mu."""
        kind = self.kind
        if kind == "exponential":
            return lambda rng: rng.exponential(1.0 / mu)
        if kind == "deterministic":
            return lambda rng: 1.0 / mu
        if kind == "geometric":
            c = float(self.param or 1.0)
            p = mu / c
            if not 0 < p <= 1:
                raise TopologyError("geometric size needs mu/c in (0, 1]")
            return lambda rng: rng.geometric(p) / c
        scv = float(self.param or 4.0)
        p1 = 0.5 * (1.0 + math.sqrt((scv - 1.0) / (scv + 1.0)))
        r1, r2 = 2.0 * p1 * mu, 2.0 * (1.0 - p1) * mu
        return lambda rng: rng.exponential(1.0 / r1) if rng.random() < p1 else rng.exponential(1.0 / r2)


@dataclass(frozen=True)
class TrafficProfile:
    nu: tuple[float, ...]
    mu: tuple[float, ...]
    size_dist: tuple[SizeDist, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "nu", tuple(float(x) for x in self.nu))
        object.__setattr__(self, "mu", tuple(float(x) for x in self.mu))
        if len(self.nu) != len(self.mu):
            raise TopologyError("nu and mu lengths differ")
        if any(x < 0 for x in self.nu) or any(x <= 0 for x in self.mu):
            raise TopologyError("nu must be nonnegative and mu positive")
        if not self.size_dist:
            object.__setattr__(self, "size_dist", tuple(SizeDist() for _ in self.nu))
        elif len(self.size_dist) != len(self.nu):
            raise TopologyError("size_dist length differs from route count")

    @property
    def rho(self) -> np.ndarray:
        return np.array(self.nu) / np.array(self.mu)

    @classmethod
    def from_rho(cls, rho: Sequence[float], mu: float = 1.0) -> "TrafficProfile":
        return cls(tuple(r * mu for r in rho), tuple(mu for _ in rho))

    def with_sizes(self, dist: SizeDist) -> "TrafficProfile":
        return TrafficProfile(self.nu, self.mu, tuple(dist for _ in self.nu))

    def scaled_mu(self, factor: float) -> "TrafficProfile":
        return TrafficProfile(self.nu, tuple(m * factor for m in self.mu), self.size_dist)


class PacketVector:
    """Packet counts (or masses) per incidence, indexed like ``topo.incidences``."""

    __slots__ = ("topo", "values")

    def __init__(self, topo: Topology, values):
        values = np.array(values, dtype=float if not _is_int_like(values) else np.int64)
        if values.shape != (topo.K,):
            raise TopologyError(f"packet vector needs {topo.K} entries, got {values.shape}")
        if np.any(values < 0):
            raise TopologyError("packet counts must be nonnegative")
        values.setflags(write=False)
        self.topo = topo
        self.values = values

    @classmethod
    def from_mapping(cls, topo: Topology, m: Mapping[tuple[int, int], float]) -> "PacketVector":
        vals = [0] * topo.K
        for ji, v in m.items():
            if ji not in topo.incidence_index:
                raise TopologyError(f"{ji} is not a queue-route incidence")
            vals[topo.incidence_index[ji]] = v
        return cls(topo, vals)

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {ji: self.values[k].item() for k, ji in enumerate(self.topo.incidences)}

    def queue_totals(self) -> np.ndarray:
        return self.topo.queue_totals(self.values)

    def doc_counts(self) -> np.ndarray:
        return self.topo.route_totals(self.values)

    def __eq__(self, other):
        return isinstance(other, PacketVector) and other.topo == self.topo and np.array_equal(other.values, self.values)

    def __hash__(self):
        return hash((self.topo, self.values.tobytes()))

    def __repr__(self):
        return f"PacketVector({self.values.tolist()})"


def _is_int_like(values) -> bool:
    arr = np.asarray(values)
    return arr.dtype.kind in "iu"


def as_doc_counts(topo: Topology, n, integer: bool = True) -> np.ndarray:
    """Validate a document-count vector against ``topo``."""
    arr = np.asarray(n)
    if arr.shape != (topo.I,):
        raise TopologyError(f"document counts need {topo.I} entries, got {arr.shape}")
    if integer:
        if arr.dtype.kind not in "iu":
            if not np.all(np.asarray(arr, dtype=float) == np.floor(np.asarray(arr, dtype=float))):
                raise TopologyError("integer document counts required")
        arr = arr.astype(np.int64)
    else:
        arr = arr.astype(float)
    if np.any(arr < 0):
        raise TopologyError("document counts must be nonnegative")
    return arr


def count_states(topo: Topology, n) -> int:
    """|S(n)|: product over routes of weak compositions of n_i into |route| parts."""
    n = as_doc_counts(topo, n)
    return math.prod(math.comb(int(ni) + len(r) - 1, len(r) - 1) for ni, r in zip(n, topo.routes))


def compositions(total: int, parts: int) -> np.ndarray:
    """Weak compositions of ``total`` into ``parts``, descending lexicographic."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    rows = []
    for first in range(total, -1, -1):
        for rest in compositions(total - first, parts - 1):
            rows.append((first, *rest))
    return np.array(rows, dtype=np.int64)


def enumerate_state_array(topo: Topology, n, cap: int = DEFAULT_STATE_CAP) -> np.ndarray:
    """S(n) as an |S(n)| x K integer array (route 0 varies slowest)."""
    n = as_doc_counts(topo, n)
    size = count_states(topo, n)
    if size > cap:
        raise StateSpaceTooLarge(f"|S(n)| = {size} exceeds cap {cap}")
    per_route = [compositions(int(ni), len(r)) for ni, r in zip(n, topo.routes)]
    out = np.zeros((size, topo.K), dtype=np.int64)
    grids = np.meshgrid(*[np.arange(len(c)) for c in per_route], indexing="ij")
    for i, (comp, g) in enumerate(zip(per_route, grids)):
        out[:, list(topo.route_slots[i])] = comp[g.ravel()]
    return out


def enumerate_states(topo: Topology, n, cap: int = DEFAULT_STATE_CAP) -> list[PacketVector]:
    return [PacketVector(topo, row) for row in enumerate_state_array(topo, n, cap)]


@dataclass(frozen=True)
class StabilityReport:
    loads: np.ndarray
    capacities: np.ndarray
    stable: bool

    def __bool__(self):
        return self.stable


def queue_loads(topo: Topology, rho) -> np.ndarray:
    return topo.incidence_matrix @ np.asarray(rho, dtype=float)


def stability_check(topo: Topology, traffic: TrafficProfile) -> StabilityReport:
    """Per-queue offered load and whether it is strictly below capacity everywhere."""
    loads = queue_loads(topo, traffic.rho)
    caps = topo.capacity_array
    return StabilityReport(loads, caps, bool(np.all(loads < caps)))


def single_queue(capacity: float = 1.0, routes: int = 1) -> Topology:
    return Topology((capacity,), tuple((0,) for _ in range(routes)))


def linear_network(capacities: Iterable[float] = (1.0, 1.0)) -> Topology:
    """Two queues; a long route through both and one short route per queue."""
    return Topology(tuple(capacities), ((0, 1), (0,), (1,)))
