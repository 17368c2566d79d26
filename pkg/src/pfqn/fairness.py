"""Proportional fairness, its KKT certificate, and the rate functions around it.

The packet-state rate function is

    beta_rho(m) = sum_{(j,i): m_j > 0} m_ji * log(m_ji * C_j / (m_j * rho_i))

and the document rate function alpha_rho(n) is its minimum over packet
states with route sums n.  Its dual is sum_i n_i log(Lambda_i / rho_i)
maximized over the capacity polytope, whose maximizer is the proportionally
fair allocation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.special import xlogy

from .errors import DidNotConverge, NumericallySingular, SolverFault
from .productform import Allocation, check_feasibility
from .topology import PacketVector, Topology, TrafficProfile, as_doc_counts

KKT_TOL = 1e-8
SATURATION_RTOL = 1e-7
PRIMAL_AGREEMENT_TOL = 1e-5
_VANISHING = 1e-200


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    complementary: float
    primal_violation: float
    dual_violation: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.complementary, self.primal_violation, self.dual_violation)


@dataclass(frozen=True)
class PFSolution:
    allocation: Allocation
    q: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int

    @property
    def lam(self) -> np.ndarray:
        return self.allocation.lam


def kkt_residuals(topo: Topology, n, alloc: Allocation, q) -> KKTReport:
    """Residuals of the proportional-fairness optimality conditions.

    stationarity: max over n_i > 0 of |n_i / Lambda_i - sum_{j in i} q_j|
    (infinite when such a route gets nothing); complementary: max_j
    |q_j * slack_j|; the violations are positive parts of -slack, -q, -Lambda.
    """
    n = as_doc_counts(topo, n, integer=False)
    q = np.asarray(q, dtype=float)
    lam = alloc.lam
    path_q = topo.incidence_matrix.T @ q
    stat = 0.0
    for i in np.flatnonzero(n > 0):
        stat = max(stat, math.inf if lam[i] <= 0 else abs(n[i] / lam[i] - path_q[i]))
    slack = alloc.slacks(topo)
    return KKTReport(
        stationarity=stat,
        complementary=float(np.max(np.abs(q * slack))),
        primal_violation=float(max(0.0, -slack.min())),
        dual_violation=float(max(0.0, -q.min(), -lam.min())),
    )


class _PFDual:
    """Dual of max sum n_i log L_i s.t. A L <= C.

    Adds the bound L_i <= 2 min_{j in i} C_j: it keeps L finite when every
    price on a route is zero and is never active at an optimum.
    """

    def __init__(self, topo: Topology, n: np.ndarray):
        self.A = topo.incidence_matrix
        self.C = topo.capacity_array
        self.n = n
        self.active = n > 0
        self.cap = 2.0 * np.array([min(topo.capacities[j] for j in r) for r in topo.routes])

    def lam(self, q):
        s = self.A.T @ q
        with np.errstate(divide="ignore"):
            lam = np.where(s > 0, self.n / np.where(s > 0, s, 1.0), np.inf)
        lam = np.minimum(lam, self.cap)
        return np.where(self.active, lam, 0.0)

    def value(self, q):
        lam = self.lam(q)
        s = self.A.T @ q
        a = self.active
        return float(np.sum(self.n[a] * np.log(lam[a]) - s[a] * lam[a]) + q @ self.C)

    def grad(self, q):
        return self.C - self.A @ self.lam(q)


def solve_pf(topo: Topology, n, tol: float = KKT_TOL, max_iter: int = 100_000) -> PFSolution:
    """Proportionally fair allocation by projected gradient on the dual prices.

    Prices start at the per-queue document load over capacity.  Once the set
    of positive prices settles, a Newton step on that set polishes the
    solution to machine precision.
    """
    n = as_doc_counts(topo, n, integer=False)
    if not np.any(n > 0):
        zero = Allocation(np.zeros(topo.I))
        return PFSolution(zero, np.zeros(topo.J), 0.0, 0.0, 0)

    dual = _PFDual(topo, n)
    q = (topo.incidence_matrix @ n) / topo.capacity_array
    step = 1.0 / max(1.0, float(np.max(q)))
    g = dual.grad(q)
    f = dual.value(q)
    res = math.inf
    for it in range(1, max_iter + 1):
        res = _residual(topo, n, dual, q)
        if res <= tol:
            break
        if it % 20 == 0 or res < 1e-3:
            polished = _newton_polish(topo, n, dual, q)
            if polished is not None:
                q = polished
                res = _residual(topo, n, dual, q)
                if res <= tol:
                    break
                g, f = dual.grad(q), dual.value(q)
        while True:
            q_new = np.maximum(q - step * g, 0.0)
            f_new = dual.value(q_new)
            if f_new <= f - 1e-4 * g @ (q - q_new) or not step > 1e-300:
                break
            step *= 0.5
        g_new = dual.grad(q_new)
        dq, dg = q_new - q, g_new - g
        curv = dq @ dg
        step = float(dq @ dq / curv) if curv > 1e-300 else step * 2.0
        if not math.isfinite(step) or step <= 0:
            step = 1.0
        q, g, f = q_new, g_new, f_new
    else:
        res = _residual(topo, n, dual, q)
        if res > tol:
            raise DidNotConverge(f"PF solver stopped at residual {res:.3e} after {max_iter} iterations")
        it = max_iter

    lam = dual.lam(q)
    alloc = Allocation(lam)
    objective = float(np.sum(xlogy(n, lam)))
    return PFSolution(alloc, q, objective, res, it)


def _residual(topo, n, dual, q) -> float:
    return kkt_residuals(topo, n, Allocation(dual.lam(q)), q).max


def _newton_polish(topo, n, dual, q, iters: int = 50):
    support = np.flatnonzero(q > 1e-14)
    if support.size == 0:
        return None
    A = dual.A
    q = q.copy()
    for _ in range(iters):
        s = A.T @ q
        if np.any(s[dual.active] <= 0):
            return None
        lam = dual.lam(q)
        g = dual.C - A @ lam
        gs = g[support]
        if np.max(np.abs(gs)) < 1e-15 * max(1.0, float(np.max(dual.C))):
            break
        w = np.where(dual.active, n / np.where(s > 0, s, 1.0) ** 2, 0.0)
        w = np.where(lam < dual.cap, w, 0.0)
        H = (A[support] * w) @ A[support].T
        d = np.linalg.lstsq(H, gs, rcond=None)[0]
        t = 1.0
        while np.any(q[support] - t * d <= 0):
            t *= 0.5
            if t < 1e-12:
                return None
        q[support] -= t * d
    if np.any(q < 0):
        return None
    return q


@dataclass(frozen=True)
class RateValue:
    value: float
    kind: str

    def __float__(self):
        return float(self.value)


def beta_rate(topo: Topology, rho_like, m) -> RateValue:
    """beta_rho(m) with 0 log 0 = 0; ``rho_like`` of ones gives the unweighted beta."""
    values = m.values if isinstance(m, PacketVector) else np.asarray(m, dtype=float)
    values = np.asarray(values, dtype=float)
    rho = np.asarray(rho_like, dtype=float)
    return RateValue(_beta(topo, rho, values), "beta")


def _beta(topo: Topology, rho: np.ndarray, m: np.ndarray):
    mj = topo.queue_totals(m)[..., topo.inc_queue]
    log_cr = np.log(topo.capacity_array[topo.inc_queue] / rho[topo.inc_route])
    return np.sum(xlogy(m, m) - xlogy(m, mj) + m * log_cr, axis=-1)


def _beta_grad(topo: Topology, rho: np.ndarray, m: np.ndarray) -> np.ndarray:
    # at an empty queue the one-sided derivative is log(C_j / rho_i)
    mj = topo.queue_totals(m)[topo.inc_queue]
    log_cr = np.log(topo.capacity_array[topo.inc_queue] / rho[topo.inc_route])
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(mj > 0, np.log(m / np.where(mj > 0, mj, 1.0)), 0.0)
    return share + log_cr


def alpha_dual(topo: Topology, traffic: TrafficProfile, n, pf: PFSolution | None = None) -> RateValue:
    """sum_{n_i > 0} n_i log(Lambda^PF_i(n) / rho_i)."""
    n = as_doc_counts(topo, n, integer=False)
    pf = pf or solve_pf(topo, n)
    rho = traffic.rho
    a = n > 0
    return RateValue(float(np.sum(n[a] * np.log(pf.lam[a] / rho[a]))), "alpha_dual")


def minimize_beta_on_fiber(
    topo: Topology,
    rho,
    n,
    fixed: dict[int, float] | None = None,
    gap_tol: float = 1e-11,
    max_iter: int = 200_000,
) -> tuple[np.ndarray, float]:
    """Minimize beta_rho over packet masses with route sums ``n``.

    Mirror descent with unit step on each route's simplex: the mass of route
    i is redistributed over its free queues in proportion to m_j / C_j.
    Stops on the Frank-Wolfe gap, an upper bound on the suboptimality.
    ``fixed`` pins incidence coordinates to given values.
    Returns (argmin, Frank-Wolfe gap).
    """
    n = as_doc_counts(topo, n, integer=False)
    rho = np.asarray(rho, dtype=float)
    fixed = dict(fixed or {})
    free_mask = np.ones(topo.K, dtype=bool)
    m = np.zeros(topo.K)
    for k, v in fixed.items():
        free_mask[k] = False
        m[k] = v
    groups = []
    for i, slots in enumerate(topo.route_slots):
        free = [k for k in slots if free_mask[k]]
        rest = n[i] - sum(m[k] for k in slots if not free_mask[k])
        if rest < -1e-12 or (rest > 1e-15 and not free):
            raise ValueError("fixed coordinates are inconsistent with route sums")
        if free:
            m[free] = max(rest, 0.0) / len(free)
            groups.append((np.array(free), max(rest, 0.0)))
    groups = [(f, r) for f, r in groups if r > 0]
    if not groups:
        return m, 0.0

    inv_c = 1.0 / topo.capacity_array[topo.inc_queue]
    scale = float(n.sum())
    gap = math.inf
    for _ in range(max_iter):
        gap = _fw_gap(topo, rho, m, groups)
        if gap <= gap_tol:
            break
        mj = topo.queue_totals(m)[topo.inc_queue]
        for free, total in groups:
            w = mj[free] * inv_c[free]
            m[free] = total * w / w.sum()
        # queues draining toward empty would otherwise underflow one entry at a time
        m[free_mask & (topo.queue_totals(m)[topo.inc_queue] < _VANISHING * scale)] = 0.0
    return m, gap


def _fw_gap(topo, rho, m, groups) -> float:
    g = _beta_grad(topo, rho, m)
    gap = 0.0
    for free, total in groups:
        gf = g[free]
        if np.any(np.isneginf(gf)):
            return math.inf
        gap += float(m[free] @ gf - total * np.min(gf))
    return gap


def alpha_primal(
    topo: Topology, traffic: TrafficProfile, n, pf: PFSolution | None = None
) -> tuple[RateValue, PacketVector]:
    """Minimum of beta_rho over the fiber of ``n``, with its minimizer.

    Solved by mirror descent on the fiber; the point built from the PF
    allocation on the saturated queues is evaluated as a cross-check and a
    disagreement beyond 1e-5 raises SolverFault.
    """
    n = as_doc_counts(topo, n, integer=False)
    rho = traffic.rho
    if not np.any(n > 0):
        return RateValue(0.0, "alpha_primal"), PacketVector(topo, np.zeros(topo.K))
    m, _ = minimize_beta_on_fiber(topo, rho, n)
    value = float(_beta(topo, rho, m))
    point = manifold_point(topo, n, pf)
    check = float(_beta(topo, rho, point.m_star.values))
    if abs(check - value) > PRIMAL_AGREEMENT_TOL:
        raise SolverFault(f"primal routes disagree: mirror descent {value!r}, manifold point {check!r}")
    return RateValue(value, "alpha_primal"), PacketVector(topo, m)


@dataclass(frozen=True)
class ManifoldPoint:
    m_star: PacketVector
    saturated_queues: tuple[int, ...]
    lam: np.ndarray


class Manifold:
    """The set of packet masses with PF per-queue shares and route sums n.

    Points are parametrized by queue totals y_j on saturated queues:
    m_ji = y_j * Lambda_i / C_j.
    """

    def __init__(self, topo: Topology, n, pf: PFSolution | None = None):
        self.topo = topo
        self.n = as_doc_counts(topo, n, integer=False)
        self.pf = pf or solve_pf(topo, self.n)
        lam = self.pf.lam
        slack = self.pf.allocation.slacks(topo)
        self.saturated = tuple(int(j) for j in np.flatnonzero(slack <= SATURATION_RTOL * topo.capacity_array))
        # embedding: m = E @ y
        E = np.zeros((topo.K, len(self.saturated)))
        for col, j in enumerate(self.saturated):
            for i in topo.routes_through(j):
                E[topo.incidence_index[(j, i)], col] = lam[i] / topo.capacities[j]
        self.embed = E
        self.route_system = np.zeros((topo.I, len(self.saturated)))
        for k, (_, i) in enumerate(topo.incidences):
            self.route_system[i] += E[k]
        rank = np.linalg.matrix_rank(self.route_system) if self.saturated else 0
        self.unique = rank == len(self.saturated)
        self._point = None

    def point(self) -> ManifoldPoint:
        if self._point is None:
            y = self._min_norm_y()
            m = np.maximum(self.embed @ y, 0.0)
            self._point = ManifoldPoint(PacketVector(self.topo, m), self.saturated, self.pf.lam)
        return self._point

    def _min_norm_y(self) -> np.ndarray:
        A, b = self.route_system, self.n
        if not self.saturated:
            raise NumericallySingular("no saturated queue found for a nonzero n")
        y, *_ = np.linalg.lstsq(A, b, rcond=None)
        if np.any(y < -1e-12):
            res = minimize(
                lambda v: 0.5 * v @ v,
                np.maximum(y, 0.0),
                jac=lambda v: v,
                constraints=[{"type": "eq", "fun": lambda v: A @ v - b, "jac": lambda v: A}],
                bounds=[(0, None)] * len(y),
                method="SLSQP",
                options={"ftol": 1e-15, "maxiter": 1000},
            )
            y = np.maximum(res.x, 0.0)
            support = y > 1e-9
            y_s, *_ = np.linalg.lstsq(A[:, support], b, rcond=None)
            y = np.zeros_like(y)
            y[support] = y_s
        y = np.maximum(y, 0.0)
        resid = float(np.max(np.abs(A @ y - b)))
        if resid > 1e-8:
            cond = np.linalg.cond(A)
            raise NumericallySingular(f"saturated-queue system residual {resid:.2e} (condition {cond:.2e})")
        return y

    def distance(self, m) -> np.ndarray | float:
        """Sup-norm distance from one or many packet vectors to the manifold."""
        m = np.asarray(m, dtype=float)
        if self.unique:
            d = np.max(np.abs(m - self.point().m_star.values), axis=-1)
            return d if d.ndim else float(d)
        if m.ndim == 2:
            return np.array([self._lp_distance(row) for row in m])
        return self._lp_distance(m)

    def _lp_distance(self, m: np.ndarray) -> float:
        E, K, S = self.embed, self.topo.K, len(self.saturated)
        # variables (y, t); minimize t subject to |m - E y| <= t, route sums, y >= 0
        c = np.zeros(S + 1)
        c[-1] = 1.0
        ones = np.ones((K, 1))
        A_ub = np.vstack([np.hstack([-E, -ones]), np.hstack([E, -ones])])
        b_ub = np.concatenate([-m, m])
        A_eq = np.hstack([self.route_system, np.zeros((self.topo.I, 1))])
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=self.n, bounds=[(0, None)] * (S + 1), method="highs")
        if res.status != 0:
            raise NumericallySingular(f"manifold distance LP failed: {res.message}")
        return max(float(res.x[-1]), 0.0)


def manifold_point(topo: Topology, n, pf: PFSolution | None = None) -> ManifoldPoint:
    """Minimum-norm point of the invariant manifold for ``n``."""
    return Manifold(topo, n, pf).point()


def manifold_distance(topo: Topology, n, m, manifold: Manifold | None = None) -> float:
    values = m.values if isinstance(m, PacketVector) else m
    return (manifold or Manifold(topo, n)).distance(values)


@dataclass(frozen=True)
class KLDecomposition:
    kl_terms: np.ndarray
    offset_terms: np.ndarray

    @property
    def total(self) -> float:
        return float(self.kl_terms.sum() + self.offset_terms.sum())


def kl_decompose(topo: Topology, traffic: TrafficProfile, m) -> KLDecomposition:
    """Split beta_rho(m) per queue into m_j D(p^j || q^j) and m_j log(C_j / load_j)."""
    values = np.asarray(m.values if isinstance(m, PacketVector) else m, dtype=float)
    rho = traffic.rho
    mj = topo.queue_totals(values)
    kl = np.zeros(topo.J)
    off = np.zeros(topo.J)
    for j in range(topo.J):
        if mj[j] <= 0:
            continue
        through = topo.routes_through(j)
        load = sum(rho[i] for i in through)
        p = np.array([values[topo.incidence_index[(j, i)]] for i in through]) / mj[j]
        qd = np.array([rho[i] for i in through]) / load
        kl[j] = mj[j] * float(np.sum(xlogy(p, p) - xlogy(p, qd)))
        off[j] = mj[j] * math.log(topo.capacities[j] / load)
    return KLDecomposition(kl, off)


def exponential_constraint_max(capacity: float, rho_slice, m_slice) -> float:
    """Closed form of max sum theta_i m_i over sum rho_i e^theta_i = C."""
    m = np.asarray(m_slice, dtype=float)
    rho = np.asarray(rho_slice, dtype=float)
    total = m.sum()
    return float(np.sum(xlogy(m, m * capacity / (total * rho))))


def relative_entropy_min(capacity: float, lam_slice) -> tuple[float, np.ndarray]:
    """Closed form of min_p sum p_i log(p_i C / Lambda_i) over distributions p."""
    lam = np.asarray(lam_slice, dtype=float)
    return math.log(capacity / lam.sum()), lam / lam.sum()


def collapse_margin(
    topo: Topology,
    traffic: TrafficProfile,
    n,
    epsilon: float,
    starts: int = 32,
    seed: int = 0,
) -> float:
    """Estimate of min beta_rho over {route sums n, distance to manifold >= epsilon} minus alpha_rho(n).

    When the manifold is a single point the constraint set is a union of
    half-spaces, one per coordinate and sign, and each piece is a convex
    problem solved on its boundary.  Otherwise candidates are boundary points
    reached from random fiber points by bisection toward the manifold point,
    so the estimate may sit above the true value.  Returns inf when no
    feasible point is found.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if epsilon == 0:
        return 0.0
    n = as_doc_counts(topo, n, integer=False)
    rho = traffic.rho
    manifold = Manifold(topo, n)
    star = manifold.point().m_star.values
    base = float(_beta(topo, rho, star))
    best = math.inf
    for k, (_, i) in enumerate(topo.incidences):
        for sign in (1.0, -1.0):
            target = star[k] + sign * epsilon
            if target < -1e-12 or target > n[i] + 1e-12:
                continue
            if len(topo.routes[i]) == 1 and abs(target - n[i]) > 1e-12:
                continue
            m, _ = minimize_beta_on_fiber(topo, rho, n, fixed={k: min(max(target, 0.0), n[i])}, gap_tol=1e-10)
            if manifold.unique or manifold.distance(m) >= epsilon - 1e-9:
                best = min(best, float(_beta(topo, rho, m)))
    if not manifold.unique:
        rng = np.random.default_rng(seed)
        for _ in range(starts):
            m = np.zeros(topo.K)
            for i, slots in enumerate(topo.route_slots):
                m[list(slots)] = n[i] * rng.dirichlet(np.ones(len(slots)))
            if manifold.distance(m) < epsilon:
                continue
            lo, hi = 0.0, 1.0
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                if manifold.distance(star + mid * (m - star)) >= epsilon:
                    hi = mid
                else:
                    lo = mid
            best = min(best, float(_beta(topo, rho, star + hi * (m - star))))
    return max(best - base, 0.0) if math.isfinite(best) else math.inf


def pf_feasible(topo: Topology, sol: PFSolution) -> bool:
    return check_feasibility(topo, sol.allocation).feasible
