"""Seeded simulators for flow-level, packet-level and closed networks.

Every random stream comes from a Philox generator keyed by
``(seed, replica, purpose)`` so replicas can run in any order and still
reproduce bit for bit.
"""

from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import TableTooLarge, UnstableDrift
from .fairness import solve_pf
from .productform import DEFAULT_TABLE_CAP, bn_table
from .topology import Topology, TrafficProfile, as_doc_counts

PURPOSES = {"flow": 1, "sizes": 2, "packet": 3, "closed": 4, "sampling": 5}
DRIFT_WARN_FRACTION = 0.05
_BATCH = 1 << 14


def make_rng(seed: int, replica: int = 0, purpose: str = "flow") -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(replica), PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(seq))


class _Draws:
    """Buffered uniforms and unit exponentials as Python floats."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._u, self._e = [], []

    def uniform(self) -> float:
        if not self._u:
            self._u = self.rng.random(_BATCH).tolist()
            self._u.reverse()
        return self._u.pop()

    def expo(self) -> float:
        if not self._e:
            self._e = self.rng.standard_exponential(_BATCH).tolist()
            self._e.reverse()
        return self._e.pop()


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    warmup_fraction: float = 0.2
    seed: int = 0
    scale_c: int = 1
    box: int = 50
    max_events: int | None = None
    replica: int = 0
    initial: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if int(self.scale_c) < 1:
            raise ValueError("scale_c must be a positive integer")

    @property
    def warmup(self) -> float:
        return self.warmup_fraction * self.horizon


@dataclass
class Trajectory:
    """Document-count path plus post-warmup aggregates.

    ``pmf`` is the share of post-warmup time spent at each n in the box;
    ``outside_mass`` is the share spent outside it.
    """

    times: np.ndarray
    states: np.ndarray
    pmf: np.ndarray
    outside_mass: float
    mean_counts: np.ndarray
    departures: np.ndarray
    arrivals: np.ndarray
    observed_time: float
    events: int
    holding: dict = field(default_factory=dict)
    transitions: dict = field(default_factory=dict)
    final_packets: np.ndarray | None = None  # [queue, route] counts at the end of a packet-level run

    def departure_rates(self) -> np.ndarray:
        return self.departures / self.observed_time

    def mean_sojourn(self) -> np.ndarray:
        """Little's law estimate E[N_i] / departure rate_i."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.departures > 0, self.mean_counts / self.departure_rates(), np.nan)


class SpinningSource:
    """Spinning allocation with a normalizing table grown on demand."""

    def __init__(self, topo: Topology, n_max=None, cap: int = DEFAULT_TABLE_CAP):
        self.topo = topo
        self.cap = cap
        self.table = bn_table(topo, n_max if n_max is not None else (8,) * topo.I, cap)
        self._memo: dict[tuple, tuple] = {}

    def __call__(self, n: tuple) -> tuple:
        hit = self._memo.get(n)
        if hit is not None:
            return hit
        if any(x > b for x, b in zip(n, self.table.n_max)):
            grown = tuple(max(2 * b, x) if x > b else b for x, b in zip(n, self.table.n_max))
            if math.prod(g + 1 for g in grown) > self.cap:
                raise TableTooLarge(f"spinning table would need bound {grown}")
            self.table = bn_table(self.topo, grown, self.cap)
        arr = np.array(n, dtype=np.int64)
        rates = tuple(self.table.ratio(arr, i) if n[i] > 0 else 0.0 for i in range(self.topo.I))
        self._memo[n] = rates
        return rates


class PFSource:
    """Proportionally fair allocation, solved once per visited state."""

    def __init__(self, topo: Topology):
        self.topo = topo
        self._memo: dict[tuple, tuple] = {}

    def __call__(self, n: tuple) -> tuple:
        hit = self._memo.get(n)
        if hit is None:
            hit = tuple(solve_pf(self.topo, np.array(n, dtype=float)).lam.tolist())
            self._memo[n] = hit
        return hit


def allocation_source(topo: Topology, kind: str) -> Callable[[tuple], tuple]:
    if kind == "spinning":
        return SpinningSource(topo)
    if kind == "pf":
        return PFSource(topo)
    raise ValueError(f"unknown allocation source {kind!r}")


class _Recorder:
    """Accumulates time-at-state and event statistics after warmup."""

    def __init__(self, I: int, config: SimConfig, track_generator: bool):
        self.I = I
        self.warm = config.warmup
        self.box = config.box
        self.occupancy: dict[tuple, float] = {}
        self.departures = [0] * I
        self.arrivals = [0] * I
        self.events = 0
        self.times: list[float] = []
        self.states: list[tuple] = []
        self.track = track_generator
        self.transitions: dict[tuple, int] = {}

    def dwell(self, n: tuple, t0: float, t1: float):
        start = t0 if t0 > self.warm else self.warm
        if t1 > start:
            self.occupancy[n] = self.occupancy.get(n, 0.0) + (t1 - start)

    def jump(self, t: float, before: tuple, after: tuple, route: int, up: bool):
        self.times.append(t)
        self.states.append(after)
        if t > self.warm:
            self.events += 1
            if up:
                self.arrivals[route] += 1
            else:
                self.departures[route] += 1
            if self.track:
                key = (before, route, 1 if up else -1)
                self.transitions[key] = self.transitions.get(key, 0) + 1

    def finish(self, initial: tuple, t_end: float) -> Trajectory:
        observed = t_end - self.warm
        shape = (self.box + 1,) * self.I
        pmf = np.zeros(shape)
        outside = 0.0
        mean = np.zeros(self.I)
        for n, dt in sorted(self.occupancy.items()):
            if all(x <= self.box for x in n):
                pmf[n] += dt
            else:
                outside += dt
            mean += dt * np.array(n)
        if observed > 0:
            pmf /= observed
            outside /= observed
            mean /= observed
        if outside > DRIFT_WARN_FRACTION:
            warnings.warn(f"{outside:.1%} of time spent outside the truncation box", UnstableDrift, stacklevel=3)
        times = np.array([0.0] + self.times)
        states = np.array([initial] + self.states, dtype=np.int64).reshape(-1, self.I)
        return Trajectory(
            times=times,
            states=states,
            pmf=pmf,
            outside_mass=outside,
            mean_counts=mean,
            departures=np.array(self.departures, dtype=float),
            arrivals=np.array(self.arrivals, dtype=float),
            observed_time=observed,
            events=self.events,
            holding=dict(sorted(self.occupancy.items())) if self.track else {},
            transitions=dict(sorted(self.transitions.items())) if self.track else {},
        )


def _initial(topo: Topology, config: SimConfig) -> tuple:
    if config.initial is None:
        return (0,) * topo.I
    return tuple(int(x) for x in as_doc_counts(topo, config.initial))


def simulate_flow_level(
    topo: Topology,
    traffic: TrafficProfile,
    allocation: Callable[[tuple], tuple] | str,
    config: SimConfig,
    track_generator: bool = False,
) -> Trajectory:
    """Exact-jump simulation of the flow-level chain.

    Route i documents arrive at rate nu_i and leave at rate mu_i * Lambda_i(n).
    """
    source = allocation_source(topo, allocation) if isinstance(allocation, str) else allocation
    draws = _Draws(make_rng(config.seed, config.replica, "flow"))
    nu, mu = list(traffic.nu), list(traffic.mu)
    I = topo.I
    rec = _Recorder(I, config, track_generator)
    n = _initial(topo, config)
    start = n
    t = 0.0
    horizon = config.horizon
    total_nu = sum(nu)
    while True:
        lam = source(n)
        down = [mu[i] * lam[i] for i in range(I)]
        total = total_nu + sum(down)
        if total <= 0:
            rec.dwell(n, t, horizon)
            t = horizon
            break
        dt = draws.expo() / total
        if t + dt >= horizon:
            rec.dwell(n, t, horizon)
            t = horizon
            break
        rec.dwell(n, t, t + dt)
        t += dt
        u = draws.uniform() * total
        acc = 0.0
        route, up = I - 1, False
        for i in range(I):
            acc += nu[i]
            if u < acc:
                route, up = i, True
                break
        else:
            for i in range(I):
                acc += down[i]
                if u < acc:
                    route = i
                    break
            while down[route] <= 0:  # rounding guard on the last bucket
                route -= 1
        after = list(n)
        after[route] += 1 if up else -1
        after = tuple(after)
        rec.jump(t, n, after, route, up)
        n = after
        if config.max_events is not None and rec.events >= config.max_events:
            break
    return rec.finish(start, t)


def simulate_flow_level_general_sizes(
    topo: Topology,
    traffic: TrafficProfile,
    allocation: Callable[[tuple], tuple] | str,
    config: SimConfig,
) -> Trajectory:
    """Flow-level simulation with arbitrary document sizes.

    Every route-i document is served at rate Lambda_i(n) / n_i, so all of
    them gain attained service at the same speed; each route keeps a heap of
    the attained-service levels at which its documents finish.
    """
    source = allocation_source(topo, allocation) if isinstance(allocation, str) else allocation
    draws = _Draws(make_rng(config.seed, config.replica, "flow"))
    size_rng = make_rng(config.seed, config.replica, "sizes")
    samplers = [d.sampler(m) for d, m in zip(traffic.size_dist, traffic.mu)]
    nu = list(traffic.nu)
    total_nu = sum(nu)
    I = topo.I
    rec = _Recorder(I, config, False)
    heaps: list[list[float]] = [[] for _ in range(I)]
    attained = [0.0] * I
    start = _initial(topo, config)
    for i, k in enumerate(start):
        for _ in range(k):
            heapq.heappush(heaps[i], samplers[i](size_rng))
    n = start
    t = 0.0
    horizon = config.horizon
    while True:
        lam = source(n)
        speed = [lam[i] / n[i] if n[i] > 0 else 0.0 for i in range(I)]
        dt_arrival = draws.expo() / total_nu if total_nu > 0 else math.inf
        dt, who = dt_arrival, -1
        for i in range(I):
            if n[i] > 0 and speed[i] > 0:
                d = (heaps[i][0] - attained[i]) / speed[i]
                if d < dt:
                    dt, who = max(d, 0.0), i
        if t + dt >= horizon:
            rec.dwell(n, t, horizon)
            t = horizon
            break
        rec.dwell(n, t, t + dt)
        t += dt
        for i in range(I):
            if n[i] > 0:
                attained[i] += speed[i] * dt
        after = list(n)
        if who < 0:
            u = draws.uniform() * total_nu
            acc, route = 0.0, I - 1
            for i in range(I):
                acc += nu[i]
                if u < acc:
                    route = i
                    break
            while nu[route] <= 0:
                route -= 1
            heapq.heappush(heaps[route], attained[route] + samplers[route](size_rng))
            after[route] += 1
            up = True
        else:
            route, up = who, False
            attained[route] = heapq.heappop(heaps[route])
            after[route] -= 1
            if not heaps[route]:
                attained[route] = 0.0
        after = tuple(after)
        rec.jump(t, n, after, route, up)
        n = after
        if config.max_events is not None and rec.events >= config.max_events:
            break
    return rec.finish(start, t)


def simulate_open_packet(topo: Topology, traffic: TrafficProfile, config: SimConfig) -> Trajectory:
    """Packet-level open network sped up by ``config.scale_c``.

    Queue j serves at total rate c * C_j under processor sharing, sampled as
    "queue fires, a uniformly chosen resident packet completes".  A packet
    leaving the last queue of its route ends its document with probability
    mu_i / c and otherwise starts the route again.  Only document-count
    changes are recorded on the returned path.
    """
    c = int(config.scale_c)
    if any(m / c > 1 for m in traffic.mu):
        raise ValueError("scale_c must be at least max(mu) so mu/c is a probability")
    draws = _Draws(make_rng(config.seed, config.replica, "packet"))
    I, J = topo.I, topo.J
    nu = list(traffic.nu)
    stop = [m / c for m in traffic.mu]
    fire = [c * cap for cap in topo.capacities]
    routes = topo.routes
    through = [topo.routes_through(j) for j in range(J)]
    # packet counts indexed [j][i]; next hop per (j, i), None at the route end
    m = [[0] * I for _ in range(J)]
    hop = [[None] * I for _ in range(J)]
    for i, r in enumerate(routes):
        for a, b in zip(r, r[1:]):
            hop[a][i] = b
    mj = [0] * J
    rec = _Recorder(I, config, False)
    start = _initial(topo, config)
    for i, k in enumerate(start):
        m[routes[i][0]][i] += k
        mj[routes[i][0]] += k
    n = list(start)
    t = 0.0
    since = 0.0  # time of the last document-count change
    horizon = config.horizon
    total_nu = sum(nu)

    def busy_total():
        return sum(fire[j] for j in range(J) if mj[j] > 0)

    busy_rate = busy_total()
    while True:
        total = total_nu + busy_rate
        if total <= 0:
            t = horizon
            break
        t += draws.expo() / total
        if t >= horizon:
            break
        u = draws.uniform() * total
        if u < total_nu:
            acc, route = 0.0, I - 1
            for i in range(I):
                acc += nu[i]
                if u < acc:
                    route = i
                    break
            while nu[route] <= 0:
                route -= 1
            before = tuple(n)
            rec.dwell(before, since, t)
            since = t
            j = routes[route][0]
            m[j][route] += 1
            mj[j] += 1
            if mj[j] == 1:
                busy_rate = busy_total()
            n[route] += 1
            rec.jump(t, before, tuple(n), route, True)
        else:
            u -= total_nu
            busy = [x for x in range(J) if mj[x] > 0]
            j = busy[-1]
            for x in busy:
                if u < fire[x]:
                    j = x
                    break
                u -= fire[x]
            # pick a resident packet uniformly, then its route
            k = int(draws.uniform() * mj[j])
            for route in through[j]:
                k -= m[j][route]
                if k < 0:
                    break
            nxt = hop[j][route]
            if nxt is None and draws.uniform() < stop[route]:
                before = tuple(n)
                rec.dwell(before, since, t)
                since = t
                m[j][route] -= 1
                mj[j] -= 1
                if mj[j] == 0:
                    busy_rate = busy_total()
                n[route] -= 1
                rec.jump(t, before, tuple(n), route, False)
            else:
                if nxt is None:
                    nxt = routes[route][0]
                if nxt != j:
                    m[j][route] -= 1
                    mj[j] -= 1
                    m[nxt][route] += 1
                    mj[nxt] += 1
                    if mj[j] == 0 or mj[nxt] == 1:
                        busy_rate = busy_total()
        if config.max_events is not None and rec.events >= config.max_events:
            break
    end = min(t, horizon)
    rec.dwell(tuple(n), since, end)
    traj = rec.finish(start, end)
    traj.final_packets = np.array(m, dtype=np.int64)
    return traj


@dataclass(frozen=True)
class ClosedThroughput:
    estimate: np.ndarray
    half_width: np.ndarray
    observed_time: float
    batches: int


def simulate_closed_network(
    topo: Topology, n, config: SimConfig, batches: int = 20, z: float = 1.959963984540054
) -> ClosedThroughput:
    """Per-route packet throughput of the closed processor-sharing network.

    Packets start at the first queue of their route and cycle forever.
    Throughput counts completions at each route's last queue; the half-width
    is z times the batch-means standard error.
    """
    n = as_doc_counts(topo, n)
    draws = _Draws(make_rng(config.seed, config.replica, "closed"))
    I, J = topo.I, topo.J
    routes = topo.routes
    through = [topo.routes_through(j) for j in range(J)]
    m = [[0] * I for _ in range(J)]
    hop = [[None] * I for _ in range(J)]
    for i, r in enumerate(routes):
        for a, b in zip(r, r[1:] + r[:1]):
            hop[a][i] = b
        m[r[0]][i] = int(n[i])
    last = [r[-1] for r in routes]
    mj = [sum(row) for row in m]
    caps = list(topo.capacities)
    warm = config.warmup
    width = (config.horizon - warm) / batches
    counts = np.zeros((batches, I))
    t = 0.0
    while True:
        busy = [j for j in range(J) if mj[j] > 0]
        total = sum(caps[j] for j in busy)
        if total <= 0:
            break
        t += draws.expo() / total
        if t >= config.horizon:
            break
        u = draws.uniform() * total
        j = busy[-1]
        for x in busy:
            if u < caps[x]:
                j = x
                break
            u -= caps[x]
        k = int(draws.uniform() * mj[j])
        for route in through[j]:
            k -= m[j][route]
            if k < 0:
                break
        if j == last[route] and t > warm:
            counts[min(int((t - warm) / width), batches - 1), route] += 1
        nxt = hop[j][route]
        if nxt != j:
            m[j][route] -= 1
            mj[j] -= 1
            m[nxt][route] += 1
            mj[nxt] += 1
    rates = counts / width
    estimate = rates.mean(axis=0)
    half = z * rates.std(axis=0, ddof=1) / math.sqrt(batches)
    return ClosedThroughput(estimate, half, config.horizon - warm, batches)


@dataclass(frozen=True)
class TVReport:
    within: float
    outside_empirical: float
    outside_exact: float

    @property
    def total(self) -> float:
        """Upper bound on the full total-variation distance."""
        return min(1.0, self.within + 0.5 * (self.outside_empirical + self.outside_exact))

    def __float__(self):
        return self.total


def empirical_tv_distance(empirical, exact, box=None) -> TVReport:
    """Half the L1 distance over the box, with each side's mass outside it.

    ``exact`` is an array over the same box or a callable n -> probability.
    """
    p = np.asarray(empirical, dtype=float)
    if callable(exact):
        q = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            q[idx] = exact(idx)
    else:
        q = np.asarray(exact, dtype=float)
    if box is not None:
        sl = tuple(slice(0, b + 1) for b in np.broadcast_to(box, (p.ndim,)))
        p_out = max(0.0, 1.0 - p.sum()) + p.sum() - p[sl].sum()
        q_out = max(0.0, 1.0 - q.sum()) + q.sum() - q[sl].sum()
        p, q = p[sl], q[sl]
    else:
        p_out = max(0.0, 1.0 - p.sum())
        q_out = max(0.0, 1.0 - q.sum())
    if p.shape != q.shape:
        raise ValueError("empirical and exact pmfs cover different boxes")
    return TVReport(0.5 * float(np.abs(p - q).sum()), float(p_out), float(q_out))


def merge_trajectories(runs: list[tuple[int, Trajectory]]) -> Trajectory:
    """Pool replicas in ascending seed order, weighting by observed time."""
    runs = sorted(runs, key=lambda r: r[0])
    total = sum(r.observed_time for _, r in runs)
    pmf = sum(r.pmf * r.observed_time for _, r in runs) / total
    outside = sum(r.outside_mass * r.observed_time for _, r in runs) / total
    mean = sum(r.mean_counts * r.observed_time for _, r in runs) / total
    first = runs[0][1]
    return Trajectory(
        times=first.times,
        states=first.states,
        pmf=pmf,
        outside_mass=outside,
        mean_counts=mean,
        departures=sum(r.departures for _, r in runs),
        arrivals=sum(r.arrivals for _, r in runs),
        observed_time=total,
        events=sum(r.events for _, r in runs),
    )
