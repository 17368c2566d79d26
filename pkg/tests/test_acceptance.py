"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import math
import time
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from conftest import ACCEPTANCE_LINES, random_instances, random_topology
from pfqn import cli
from pfqn.experiments import ExperimentSpec, load_network, run_collapse, run_converge
from pfqn.fairness import (
    alpha_dual,
    alpha_primal,
    beta_rate,
    exponential_constraint_max,
    relative_entropy_min,
    manifold_point,
    solve_pf,
)
from pfqn.productform import bn_bruteforce, bn_table, doc_pmf_box, little_identity_residual, spinning_allocation
from pfqn.simulate import (
    SimConfig,
    empirical_tv_distance,
    simulate_closed_network,
    simulate_flow_level,
    simulate_flow_level_general_sizes,
    simulate_open_packet,
)
from pfqn.topology import SizeDist, TrafficProfile, linear_network, single_queue

LINEAR = Path(__file__).resolve().parent.parent / "configs" / "linear.json"


def record(number, title, ok, detail):
    line = f"[{number}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_table_matches_bruteforce():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(200):
        topo = random_topology(rng, rng.integers(1, 4), rng.integers(1, 4))
        n = rng.integers(0, 6, topo.I)
        table = bn_table(topo, n)
        worst = max(worst, abs(table[n] / bn_bruteforce(topo, n) - 1.0))
    elapsed = time.perf_counter() - start
    record(1, "normalizing table vs brute force", worst <= 1e-12 and elapsed < 10, f"max rel err {worst:.2e} over 200 instances, {elapsed:.1f}s")


def test_criterion_2_hand_constants():
    topo = linear_network()
    table = bn_table(topo, (1, 1, 1))
    checks = {
        "B(1,1,1)": abs(table[(1, 1, 1)] - 4.0) <= 1e-10,
        "spinning": np.allclose(spinning_allocation(topo, (1, 1, 1), table).lam, [0.25, 0.75, 0.75], rtol=0, atol=1e-10),
    }
    pf = solve_pf(topo, (1, 1, 1))
    checks["PF"] = np.allclose(pf.lam, [1 / 3, 2 / 3, 2 / 3], rtol=0, atol=1e-8)
    checks["prices"] = np.allclose(pf.q, [1.5, 1.5], rtol=0, atol=1e-8)
    checks["manifold point"] = np.allclose(manifold_point(topo, (1, 1, 1)).m_star.values, [0.5, 1, 0.5, 1], rtol=0, atol=1e-8)
    checks["Little (q0,r1)"] = abs(little_identity_residual(topo, (1, 1, 1), table)[(0, 1)]) <= 1e-10
    failed = [k for k, ok in checks.items() if not ok]
    record(2, "hand-derived constants", not failed, "all match" if not failed else f"mismatch in {failed}")


def test_criterion_3_strong_duality():
    start = time.perf_counter()
    worst = 0.0
    for topo, n, traffic in random_instances(100, seed=303, zero_frac=0.0):
        primal, _ = alpha_primal(topo, traffic, n)
        worst = max(worst, abs(primal.value - alpha_dual(topo, traffic, n).value))
    elapsed = time.perf_counter() - start
    record(3, "strong duality", worst <= 1e-6 and elapsed < 60, f"max |primal - dual| {worst:.2e} over 100 instances, {elapsed:.1f}s")


def test_criterion_4_spinning_approaches_pf():
    start = time.perf_counter()
    spec = ExperimentSpec(kind="converge", network=load_network(LINEAR), n=(1, 1, 1), h=(1, 2, 4, 8, 16, 32, 64))
    table = run_converge(spec)
    err = dict(zip(table.column("h"), table.column("error")))
    elapsed = time.perf_counter() - start
    ok = abs(err[1] - 1 / 12) <= 1e-10 and err[64] < err[4] and err[64] <= 0.05 and elapsed < 120
    record(4, "spinning to PF trend", ok, f"e(1)={err[1]:.12f} e(4)={err[4]:.4g} e(64)={err[64]:.4g}, {elapsed:.1f}s")


def test_criterion_5_state_space_collapse():
    spec = ExperimentSpec(
        kind="collapse", network=load_network(LINEAR), n=(1, 1, 1), h=(1, 2, 4, 6, 10, 20, 40), epsilon=0.1, seed=5
    )
    table = run_collapse(spec)
    h = table.column("h")
    modes = table.column("mode")
    exceed = table.column("exceedance")
    l1 = table.column("l1_max")
    ok = (
        all(m == "exact" for x, m in zip(h, modes) if x <= 6)
        and all(m != "exact" for x, m in zip(h, modes) if x > 6)
        and exceed[-1] < exceed[0]
        and l1[-1] < l1[0]
        and l1[-1] <= 0.1
    )
    record(5, "state space collapse trend", ok, f"P(h=1)={exceed[0]:.3f} P(h=40)={exceed[-1]:.3f} L1(h=1)={l1[0]:.3f} L1(h=40)={l1[-1]:.3f}")


def test_criterion_6_flow_level_product_form():
    topo = linear_network()
    traffic = TrafficProfile.from_rho([0.25] * 3)
    cfg = SimConfig(horizon=1e6, warmup_fraction=0.005, seed=6, max_events=100_000)
    traj = simulate_flow_level(topo, traffic, "spinning", cfg)
    tv = empirical_tv_distance(traj.pmf, doc_pmf_box(topo, traffic, (50, 50, 50))).total
    single = single_queue(2.0)
    straffic = TrafficProfile.from_rho([1.0])
    straj = simulate_flow_level(single, straffic, "spinning", cfg)
    stv = empirical_tv_distance(straj.pmf, 0.5 * 0.5 ** np.arange(51)).total
    ok = traj.events >= 100_000 and tv <= 0.05 and stv <= 0.02
    record(6, "flow-level simulation vs product form", ok, f"linear TV {tv:.4f} ({traj.events} events), single queue TV {stv:.4f}")


def test_criterion_7_insensitivity():
    topo = linear_network()
    base = TrafficProfile.from_rho([0.2] * 3)
    exact = doc_pmf_box(topo, base, (50, 50, 50))
    tvs = {}
    for name, dist, factor in [
        ("deterministic", SizeDist("deterministic"), 1.0),
        ("hyperexponential", SizeDist("hyperexponential", 4.0), 1.0),
        ("halved mu", SizeDist("exponential"), 0.5),
    ]:
        traffic = base.with_sizes(dist).scaled_mu(factor)
        traj = simulate_flow_level_general_sizes(topo, traffic, "spinning", SimConfig(horizon=70_000, seed=7))
        tvs[name] = empirical_tv_distance(traj.pmf, exact).total
    ok = tvs["deterministic"] <= 0.05 and tvs["hyperexponential"] <= 0.05 and tvs["halved mu"] > 0.1
    record(7, "insensitivity", ok, ", ".join(f"{k} TV {v:.4f}" for k, v in tvs.items()))


def test_criterion_8_packet_scaling_and_throughput():
    topo = linear_network()
    traffic = TrafficProfile.from_rho([0.25] * 3)
    exact = doc_pmf_box(topo, traffic, (50, 50, 50))
    tvs = {}
    for c in (1, 4, 16):
        traj = simulate_open_packet(topo, traffic, SimConfig(horizon=70_000, seed=8, scale_c=c))
        tvs[c] = empirical_tv_distance(traj.pmf, exact).total
    closed = simulate_closed_network(topo, (1, 1, 1), SimConfig(horizon=20_000, seed=8))
    z = np.abs(closed.estimate - [0.25, 0.75, 0.75]) / closed.half_width
    ok = all(v <= 0.05 for v in tvs.values()) and np.all(z <= 3)
    detail = ", ".join(f"c={c} TV {v:.4f}" for c, v in tvs.items())
    record(8, "packet-level scaling and closed throughput", ok, f"{detail}; throughput {np.round(closed.estimate, 4).tolist()} at {np.round(z, 2).tolist()} half-widths")


def _beta_convexity():
    rng = np.random.default_rng(909)
    worst = -math.inf
    for topo, _, traffic in random_instances(20, seed=909):
        a, b = rng.uniform(0, 4, (2, 500, topo.K))
        a[rng.random(a.shape) < 0.1] = 0.0
        fa = beta_rate(topo, traffic.rho, a).value
        fb = beta_rate(topo, traffic.rho, b).value
        mid = beta_rate(topo, traffic.rho, 0.5 * (a + b)).value
        worst = max(worst, float(np.max(mid - 0.5 * (fa + fb))))
    return worst


def _closed_form_errors():
    rng = np.random.default_rng(910)
    worst = 0.0
    for _ in range(50):
        k = rng.integers(1, 5)
        c, rho, m = rng.uniform(0.5, 3), rng.uniform(0.1, 2, k), rng.uniform(0.1, 4, k)
        res = minimize(
            lambda th: -th @ m,
            np.log(c / (k * rho)),
            jac=lambda th: -m,
            constraints=[{"type": "eq", "fun": lambda th: rho @ np.exp(th) - c, "jac": lambda th: rho * np.exp(th)}],
            method="SLSQP",
            options={"ftol": 1e-15, "maxiter": 500},
        )
        worst = max(worst, abs(exponential_constraint_max(c, rho, m) + res.fun))
        lam = rng.uniform(0.1, 2, k)
        value, _ = relative_entropy_min(c, lam)
        res = minimize(
            lambda x: float(np.sum(x * np.log(np.maximum(x, 1e-300) * c / lam))),
            np.full(k, 1 / k),
            jac=lambda x: np.log(np.maximum(x, 1e-300) * c / lam) + 1,
            constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1, "jac": lambda x: np.ones(k)}],
            bounds=[(0, 1)] * k,
            method="SLSQP",
            options={"ftol": 1e-15, "maxiter": 500},
        )
        worst = max(worst, abs(value - res.fun))
    return worst


def _pf_scale_error():
    worst = 0.0
    for topo, n, _ in random_instances(60, seed=911):
        base = solve_pf(topo, n).lam
        for h in (0.25, 2.0, 10.0, 100.0):
            worst = max(worst, float(np.max(np.abs(solve_pf(topo, h * n).lam - base))))
    return worst


def _spinning_min_slack():
    # every allocation in every table: Lambda_i(n) = gamma_i * G(n - e_i) / G(n)
    rng = np.random.default_rng(912)
    worst = math.inf
    for _ in range(100):
        topo = random_topology(rng, rng.integers(1, 4), rng.integers(1, 4))
        n = rng.integers(1, 9, topo.I)
        table = bn_table(topo, n)
        g = table.scaled
        lam = np.zeros((topo.I,) + g.shape)
        for i in range(topo.I):
            lo = [slice(None)] * topo.I
            hi = [slice(None)] * topo.I
            lo[i], hi[i] = slice(0, -1), slice(1, None)
            lam[i][tuple(hi)] = table.route_scale[i] * g[tuple(lo)] / g[tuple(hi)]
        load = np.tensordot(topo.incidence_matrix, lam, axes=1)
        slack = topo.capacity_array.reshape((-1,) + (1,) * topo.I) - load
        worst = min(worst, float(slack.min()))
    return worst


def _cli_bytes(out, capsys):
    args = ["scaling", "--config", str(LINEAR), "--horizon", "3000", "--c", "1,2", "--seed", "42", "--out", str(out)]
    assert cli.main(args) == 0
    capsys.readouterr()
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_criterion_9_property_suites(tmp_path, capsys):
    convex = _beta_convexity()
    closed_forms = _closed_form_errors()
    scale = _pf_scale_error()
    slack = _spinning_min_slack()
    deterministic = _cli_bytes(tmp_path / "a", capsys) == _cli_bytes(tmp_path / "b", capsys)
    ok = convex <= 1e-10 and closed_forms <= 1e-8 and scale <= 1e-8 and slack >= -1e-9 and deterministic
    detail = (
        f"convexity violation {convex:.1e} on 10000 triples, closed-form error {closed_forms:.1e}, "
        f"PF scale error {scale:.1e}, min spinning slack {slack:.1e}, byte-identical reruns {deterministic}"
    )
    record(9, "property suites", ok, detail)
