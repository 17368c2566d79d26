"""Experiment drivers, network-description loading and CSV/meta.json output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import fairness, productform, simulate
from .errors import ConfigError, StateSpaceTooLarge, TableTooLarge
from .productform import log_weights
from .topology import (
    SizeDist,
    Topology,
    TrafficProfile,
    as_doc_counts,
    count_states,
    enumerate_state_array,
    stability_check,
    validate_topology,
)

KINDS = ("validate", "exact", "pf", "rates", "converge", "collapse", "scaling", "insensitivity", "simulate")
CATEGORICAL_CAP = 10**6


# -- network description ----------------------------------------------------


@dataclass(frozen=True)
class Network:
    topo: Topology
    traffic: TrafficProfile | None
    raw: Mapping

    def require_traffic(self) -> TrafficProfile:
        if self.traffic is None:
            raise ConfigError("this experiment needs a 'traffic' section in the network description")
        return self.traffic


def parse_network(raw: Mapping) -> Network:
    """Resolve a JSON network description; route and queue names map to file order."""
    if not isinstance(raw, Mapping):
        raise ConfigError("network description must be a JSON object")
    topo = validate_topology(raw)
    entries = raw.get("traffic")
    if entries is None:
        return Network(topo, None, raw)
    lookup = {name: i for i, name in enumerate(topo.route_names)}
    nu = [None] * topo.I
    mu = [None] * topo.I
    sizes = [SizeDist()] * topo.I
    for e in entries:
        key = e.get("route")
        i = lookup.get(key) if isinstance(key, str) else key
        if i is None or not 0 <= int(i) < topo.I:
            raise ConfigError(f"traffic entry names unknown route {key!r}")
        i = int(i)
        try:
            nu[i], mu[i] = float(e["nu"]), float(e["mu"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"traffic entry for route {key!r} needs numeric nu and mu") from exc
        sd = e.get("size_dist")
        if sd:
            sizes[i] = SizeDist(sd.get("kind", "exponential"), sd.get("param"))
    missing = [topo.route_names[i] for i in range(topo.I) if nu[i] is None]
    if missing:
        raise ConfigError(f"no traffic given for routes {missing}")
    return Network(topo, TrafficProfile(tuple(nu), tuple(mu), tuple(sizes)), raw)


def load_network(path: str | Path) -> Network:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_network(raw)


# -- experiment description and results ------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    network: Network
    n: tuple[float, ...] | None = None
    h: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    c: tuple[int, ...] = (1, 4, 16)
    epsilon: float = 0.1
    seed: int = 0
    horizon: float = 60_000.0
    replicas: int = 1
    max_events: int | None = None
    samples: int = 20_000
    exact_max_h: int = 6
    box: int = 50
    allocation: str = "spinning"
    config_path: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        for name in ("h", "c"):
            seq = getattr(self, name)
            if not seq or any(int(x) != x or x <= 0 for x in seq) or any(b <= a for a, b in zip(seq, seq[1:])):
                raise ConfigError(f"{name} list must be strictly increasing positive integers")
        if self.n is not None and len(self.n) != self.network.topo.I:
            raise ConfigError(f"n has {len(self.n)} entries but the network has {self.network.topo.I} routes")
        if self.n is not None and any(x < 0 for x in self.n):
            raise ConfigError("n must be nonnegative")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if self.replicas < 1:
            raise ConfigError("replicas must be at least 1")

    def doc_counts(self) -> np.ndarray:
        if self.n is None:
            raise ConfigError("this experiment needs --n")
        return np.asarray(self.n, dtype=float)

    def params(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("network", "config_path", "out_dir")}
        return json.loads(json.dumps(d))

    def config_hash(self) -> str:
        blob = json.dumps({"network": self.network.raw, "params": self.params()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


Cell = str | int | float


@dataclass
class ResultTable:
    name: str
    columns: list[str]
    rows: list[list[Cell]] = field(default_factory=list)
    footer: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")

    def add(self, *cells: Cell):
        if len(cells) != len(self.columns):
            raise ValueError(f"row has {len(cells)} cells, table has {len(self.columns)} columns")
        self.rows.append(list(cells))

    def column(self, name: str) -> list[Cell]:
        k = self.columns.index(name)
        return [r[k] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(c) for c in row])
        return buf.getvalue()


def _fmt(cell: Cell) -> str:
    if isinstance(cell, (bool, np.bool_)):
        return "true" if cell else "false"
    if isinstance(cell, (int, np.integer)):
        return str(int(cell))
    if isinstance(cell, (float, np.floating)):
        x = float(cell)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    return str(cell)


def build_id() -> str:
    """Package version plus a digest of the installed sources."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "0+unknown"
    digest = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{version}+{digest.hexdigest()[:12]}"


CALIBRATION = {
    "converge": "no convergence rate is known; sweep endpoints are calibration choices",
    "collapse": "exceedance and L1 columns are expected to shrink with h; no rate is claimed",
    "scaling": "finite-c thresholds (TV <= 0.05) are engineering choices",
    "insensitivity": "TV <= 0.05 for matching means, negative control expected above 0.1",
}


def write_result(table: ResultTable, spec: ExperimentSpec, out_dir: str | Path, extra: Sequence[ResultTable] = ()) -> list[Path]:
    """Write ``<name>.csv`` per table plus a ``meta.json`` sidecar; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in (table, *extra):
        p = out / f"{t.name}.csv"
        p.write_bytes(t.to_csv().encode())
        written.append(p)
    meta = {
        "experiment": spec.kind,
        "seed": spec.seed,
        "build_id": build_id(),
        "config_hash": spec.config_hash(),
        "params": spec.params(),
        "files": [p.name for p in written],
        "footer": table.footer,
    }
    if spec.kind in CALIBRATION:
        meta["calibration"] = CALIBRATION[spec.kind]
    meta_path = out / "meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(meta_path)
    return written


def _table(spec: ExperimentSpec, name: str, columns: list[str]) -> ResultTable:
    return ResultTable(name, columns, footer={"seed": spec.seed, "build_id": build_id(), "config_hash": spec.config_hash()})


# -- drivers ----------------------------------------------------------------


def run_validate(spec: ExperimentSpec) -> ResultTable:
    topo = spec.network.topo
    t = _table(spec, "validate", ["entity", "name", "index", "value"])
    for j, (name, cap) in enumerate(zip(topo.queue_names, topo.capacities)):
        t.add("queue_capacity", name, j, cap)
    for i, (name, r) in enumerate(zip(topo.route_names, topo.routes)):
        t.add("route", name, i, " ".join(topo.queue_names[j] for j in r))
    t.add("incidences", "K", 0, topo.K)
    if spec.network.traffic is not None:
        report = stability_check(topo, spec.network.traffic)
        for j, load in enumerate(report.loads):
            t.add("queue_load", topo.queue_names[j], j, float(load))
        t.add("stable", "all", 0, "true" if report.stable else "false")
    return t


def run_exact(spec: ExperimentSpec) -> ResultTable:
    topo = spec.network.topo
    n = as_doc_counts(topo, spec.doc_counts())
    table = productform.bn_table(topo, n)
    alloc = productform.spinning_allocation(topo, n, table)
    bn = table.value(n)
    try:
        little = productform.little_identity_residual(topo, n, table)
    except StateSpaceTooLarge:
        little = None
    pmf = math.nan
    if spec.network.traffic is not None and stability_check(topo, spec.network.traffic).stable:
        pmf = productform.doc_pmf(topo, spec.network.traffic, n, table)
    feas = productform.check_feasibility(topo, alloc)
    t = _table(spec, "exact", ["route", "n", "B_n", "lambda_sn", "doc_pmf", "little_residual_max"])
    for i, name in enumerate(topo.route_names):
        if little is None:
            lr = math.nan
        else:
            vals = [abs(v) for (j, r), v in little.items() if r == i]
            lr = max(vals) if vals else 0.0
        t.add(name, int(n[i]), bn, float(alloc.lam[i]), pmf, lr)
    t.footer["min_slack"] = float(feas.slacks.min())
    return t


def run_pf(spec: ExperimentSpec) -> ResultTable:
    topo = spec.network.topo
    n = spec.doc_counts()
    sol = fairness.solve_pf(topo, n)
    kkt = fairness.kkt_residuals(topo, n, sol.allocation, sol.q)
    slack = sol.allocation.slacks(topo)
    t = _table(spec, "pf", ["entity", "name", "n", "lambda_pf", "q", "slack"])
    for i, name in enumerate(topo.route_names):
        t.add("route", name, float(n[i]), float(sol.lam[i]), math.nan, math.nan)
    for j, name in enumerate(topo.queue_names):
        t.add("queue", name, math.nan, math.nan, float(sol.q[j]), float(slack[j]))
    t.add("kkt", "stationarity", math.nan, math.nan, math.nan, kkt.stationarity)
    t.add("kkt", "complementary", math.nan, math.nan, math.nan, kkt.complementary)
    t.add("kkt", "primal_violation", math.nan, math.nan, math.nan, kkt.primal_violation)
    t.add("kkt", "dual_violation", math.nan, math.nan, math.nan, kkt.dual_violation)
    t.footer["objective"] = sol.objective
    return t


def run_rates(spec: ExperimentSpec) -> ResultTable:
    topo = spec.network.topo
    traffic = spec.network.require_traffic()
    n = spec.doc_counts()
    pf = fairness.solve_pf(topo, n)
    dual = fairness.alpha_dual(topo, traffic, n, pf)
    primal, argmin = fairness.alpha_primal(topo, traffic, n, pf)
    beta = fairness.beta_rate(topo, traffic.rho, argmin)
    kl = fairness.kl_decompose(topo, traffic, argmin)
    t = _table(spec, "rates", ["quantity", "name", "value"])
    t.add("alpha_primal", "all", primal.value)
    t.add("alpha_dual", "all", dual.value)
    t.add("duality_gap", "all", abs(primal.value - dual.value))
    t.add("beta_at_argmin", "all", float(beta.value))
    for j, name in enumerate(topo.queue_names):
        t.add("kl_term", name, float(kl.kl_terms[j]))
        t.add("offset_term", name, float(kl.offset_terms[j]))
    for k, (j, i) in enumerate(topo.incidences):
        t.add("argmin_m", f"{topo.queue_names[j]}:{topo.route_names[i]}", float(argmin.values[k]))
    return t


def run_converge(spec: ExperimentSpec) -> ResultTable:
    """Distance between the spinning allocation at floor(h n) and PF at n, per h."""
    topo = spec.network.topo
    n = spec.doc_counts()
    pf = fairness.solve_pf(topo, n)
    top = np.floor(max(spec.h) * n).astype(np.int64)
    try:
        table = productform.bn_table(topo, top)
    except TableTooLarge as exc:
        feasible = [h for h in spec.h if math.prod(int(x) + 1 for x in np.floor(h * n)) <= productform.DEFAULT_TABLE_CAP]
        raise TableTooLarge(f"{exc}; largest feasible h is {max(feasible) if feasible else 'none'}") from exc
    names = topo.route_names
    cols = ["h"] + [f"lambda_sn_{r}" for r in names] + [f"lambda_pf_{r}" for r in names] + ["error"]
    t = _table(spec, "converge", cols)
    for h in spec.h:
        nh = np.floor(h * n).astype(np.int64)
        sn = productform.spinning_allocation(topo, nh, table).lam
        err = float(np.max(np.abs(sn - pf.lam)))
        t.add(int(h), *[float(x) for x in sn], *[float(x) for x in pf.lam], err)
    return t


def sample_closed_states(topo: Topology, n, samples: int, rng: np.random.Generator, cap: int = CATEGORICAL_CAP):
    """Draws from the closed-network distribution of S(n).

    Direct categorical sampling when S(n) is enumerable within ``cap``,
    otherwise a Metropolis chain that moves one packet along its route.
    Returns (states, mode).
    """
    n = as_doc_counts(topo, n)
    if count_states(topo, n) <= cap:
        states = enumerate_state_array(topo, n, cap)
        logw = log_weights(topo, states)
        p = np.exp(logw - logw.max())
        p /= p.sum()
        return states[rng.choice(len(states), size=samples, p=p)], "categorical"
    return _metropolis(topo, n, samples, rng), "mcmc"


def _metropolis(topo: Topology, n: np.ndarray, samples: int, rng: np.random.Generator, thin: int = 10) -> np.ndarray:
    m = np.zeros(topo.K, dtype=np.int64)
    for i, slots in enumerate(topo.route_slots):
        m[slots[0]] = n[i]
    mj = topo.queue_totals(m).astype(np.int64)
    movable = [i for i in range(topo.I) if n[i] > 0 and len(topo.routes[i]) > 1]
    out = np.zeros((samples, topo.K), dtype=np.int64)
    if not movable:
        out[:] = m
        return out
    caps = topo.capacities
    burn = 50 * int(n.sum()) + 1000
    total_steps = burn + samples * thin
    picks = rng.integers(0, len(movable), total_steps)
    u1, u2, u3 = rng.random(total_steps), rng.random(total_steps), rng.random(total_steps)
    for step in range(total_steps):
        i = movable[picks[step]]
        slots = topo.route_slots[i]
        route = topo.routes[i]
        # packet chosen uniformly among the route's n_i packets
        k = int(u1[step] * n[i])
        a = 0
        while k >= m[slots[a]]:
            k -= m[slots[a]]
            a += 1
        b = int(u2[step] * (len(route) - 1))
        if b >= a:
            b += 1
        j, jj = route[a], route[b]
        ratio = caps[j] * (mj[jj] + 1) / (mj[j] * caps[jj])
        if u3[step] < ratio:
            m[slots[a]] -= 1
            m[slots[b]] += 1
            mj[j] -= 1
            mj[jj] += 1
        if step >= burn and (step - burn) % thin == thin - 1:
            out[(step - burn) // thin] = m
    return out


def run_collapse(spec: ExperimentSpec) -> ResultTable:
    """Concentration of the scaled packet state on the manifold as h grows."""
    topo = spec.network.topo
    n = spec.doc_counts()
    manifold = fairness.Manifold(topo, n)
    lam = manifold.pf.lam
    caps = topo.capacity_array[topo.inc_queue]
    labels = [f"{topo.queue_names[j]}:{topo.route_names[i]}" for j, i in topo.incidences]
    cols = ["h", "mode", "exceedance"] + [f"l1_{x}" for x in labels] + ["l1_max"]
    t = _table(spec, "collapse", cols)
    rng = simulate.make_rng(spec.seed, 0, "sampling")
    for h in spec.h:
        nh = np.floor(h * n).astype(np.int64)
        if h <= spec.exact_max_h and count_states(topo, nh) <= CATEGORICAL_CAP:
            states, probs = productform.closed_distribution(topo, nh)
            mode = "exact"
        else:
            states, mode = sample_closed_states(topo, nh, spec.samples, rng)
            probs = np.full(len(states), 1.0 / len(states))
            probs[-1] = 1.0 - probs[:-1].sum()
        scaled = states / h
        dist = np.atleast_1d(manifold.distance(scaled))
        exceed = float(probs @ (dist >= spec.epsilon - 1e-12))
        mj = topo.queue_totals(states)[:, topo.inc_queue]
        dev = np.abs(states * caps - mj * lam[topo.inc_route])
        l1 = (probs @ dev) / h
        t.add(int(h), mode, exceed, *[float(x) for x in l1], float(l1.max()))
    return t


def _sim_config(spec: ExperimentSpec, replica: int = 0, scale_c: int = 1) -> simulate.SimConfig:
    return simulate.SimConfig(
        horizon=spec.horizon,
        seed=spec.seed,
        replica=replica,
        scale_c=scale_c,
        box=spec.box,
        max_events=spec.max_events,
    )


def _replicated(spec: ExperimentSpec, run) -> simulate.Trajectory:
    runs = [(r, run(_sim_config(spec, r))) for r in range(spec.replicas)]
    return runs[0][1] if len(runs) == 1 else simulate.merge_trajectories(runs)


def _exact_box(topo: Topology, traffic: TrafficProfile, box: int) -> np.ndarray:
    return productform.doc_pmf_box(topo, traffic, (box,) * topo.I)


def run_scaling(spec: ExperimentSpec) -> ResultTable:
    """Packet-level document counts at each speed-up c against the exact and flow-level pmfs."""
    topo = spec.network.topo
    traffic = spec.network.require_traffic()
    exact = _exact_box(topo, traffic, spec.box)
    flow = _replicated(spec, lambda cfg: simulate.simulate_flow_level(topo, traffic, "spinning", cfg))
    names = topo.route_names
    cols = ["c", "tv_exact", "tv_flow", "events"] + [f"sojourn_{r}" for r in names]
    t = _table(spec, "scaling", cols)
    t.add("flow", simulate.empirical_tv_distance(flow.pmf, exact).total, 0.0, flow.events, *[float(x) for x in flow.mean_sojourn()])
    for c in spec.c:
        def run(cfg, c=c):
            cfg = simulate.SimConfig(**{**asdict(cfg), "scale_c": c})
            return simulate.simulate_open_packet(topo, traffic, cfg)

        pk = _replicated(spec, run)
        t.add(
            int(c),
            simulate.empirical_tv_distance(pk.pmf, exact).total,
            simulate.empirical_tv_distance(pk.pmf, flow.pmf).total,
            pk.events,
            *[float(x) for x in pk.mean_sojourn()],
        )
    return t


INSENSITIVITY_DISTS = (
    ("exponential", SizeDist("exponential")),
    ("deterministic", SizeDist("deterministic")),
    ("hyperexponential", SizeDist("hyperexponential", 4.0)),
)


def run_insensitivity(spec: ExperimentSpec) -> ResultTable:
    """Flow-level spinning network under several size laws with equal means.

    The last row halves mu (doubling mean sizes) and still compares against
    the original pmf, as a negative control.
    """
    topo = spec.network.topo
    traffic = spec.network.require_traffic()
    exact = _exact_box(topo, traffic, spec.box)
    t = _table(spec, "insensitivity", ["size_dist", "mu_factor", "tv_exact", "events", "outside_mass"])
    cases = [(name, dist, 1.0) for name, dist in INSENSITIVITY_DISTS] + [("exponential", SizeDist("exponential"), 0.5)]
    for name, dist, factor in cases:
        tr = traffic.with_sizes(dist).scaled_mu(factor)
        if not stability_check(topo, tr).stable:
            raise ConfigError("negative control needs the network to stay stable at doubled load")
        source = simulate.SpinningSource(topo)
        traj = _replicated(spec, lambda cfg: simulate.simulate_flow_level_general_sizes(topo, tr, source, cfg))
        t.add(name, factor, simulate.empirical_tv_distance(traj.pmf, exact).total, traj.events, traj.outside_mass)
    return t


def run_simulate(spec: ExperimentSpec) -> tuple[ResultTable, ResultTable]:
    """Flow-level run; returns (summary, trajectory) tables."""
    topo = spec.network.topo
    traffic = spec.network.require_traffic()
    if any(d.kind != "exponential" for d in traffic.size_dist):
        traj = simulate.simulate_flow_level_general_sizes(topo, traffic, spec.allocation, _sim_config(spec))
    else:
        traj = simulate.simulate_flow_level(topo, traffic, spec.allocation, _sim_config(spec))
    summary = _table(spec, "simulate", ["route", "mean_count", "departure_rate", "mean_sojourn"])
    for i, name in enumerate(topo.route_names):
        summary.add(name, float(traj.mean_counts[i]), float(traj.departure_rates()[i]), float(traj.mean_sojourn()[i]))
    if stability_check(topo, traffic).stable:
        tv = simulate.empirical_tv_distance(traj.pmf, _exact_box(topo, traffic, spec.box))
        summary.footer["tv_exact"] = tv.total
    summary.footer["events"] = traj.events
    path = ResultTable("trajectory", ["time"] + [f"n_{r}" for r in topo.route_names])
    for time, state in zip(traj.times, traj.states):
        path.add(float(time), *[int(x) for x in state])
    return summary, path


def run(spec: ExperimentSpec) -> list[ResultTable]:
    drivers = {
        "validate": run_validate,
        "exact": run_exact,
        "pf": run_pf,
        "rates": run_rates,
        "converge": run_converge,
        "collapse": run_collapse,
        "scaling": run_scaling,
        "insensitivity": run_insensitivity,
    }
    if spec.kind == "simulate":
        return list(run_simulate(spec))
    return [drivers[spec.kind](spec)]
