"""Exact solver for one coupled dispatch slot.

All per-slot programs in this package share one structure: minimize a sum of
per-coordinate convex terms subject to a single aggregate demand constraint
and nonnegativity,

    min sum_i g_i(s_i)   s.t.  sum_i s_i >= D,  0 <= s_i <= ub_i.

Each g_i is convex with a nondecreasing (possibly discontinuous) marginal, so
the dual problem reduces to a scalar search on the demand multiplier: for a
multiplier lam, each coordinate solves marginal_i(s) = lam, and lam is raised
by bisection until the coordinates jointly cover demand. Flat or jumping
marginals (kinks from hinge terms) are handled with subgradient intervals and
a deterministic lowest-index fill, which keeps the stationarity residual
within the bisection window.

Coordinate families implemented here:
  * entropic regularization of the switching cost (with or without an offset
    allowance folded into the regularized variable), and
  * hinge switching charges (the myopic program, and the slot program of the
    offline block-coordinate pass, which also carries a downhill hinge toward
    the following slot).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InfeasibleError
from .model import OperationalCost

_EXP_CAP = 700.0  # exp() overflow guard


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and iteration caps for the per-slot solver."""

    lambda_tol: float = 1e-10
    kkt_tol: float = 1e-8
    feas_tol: float = 1e-9
    max_bisect: int = 200
    max_inner: int = 100

    def __post_init__(self):
        if min(self.lambda_tol, self.kkt_tol, self.feas_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_bisect <= 0 or self.max_inner <= 0:
            raise ValueError("iteration caps must be positive")


def entropic_term(z: float, prev: float, eps_over_n: float) -> float:
    """Relative-entropy-plus-linear regularizer for one coordinate.

    (z + a) * ln((z + a) / (prev + a)) - z  with  a = eps_over_n > 0.
    """
    a = eps_over_n
    return (z + a) * math.log((z + a) / (prev + a)) - z


@dataclass(frozen=True)
class SubproblemSpec:
    """One regularized dispatch slot.

    When ``offset`` is present, the regularizer acts on
    z_i = max(s_i - offset_i, prev_i) instead of s_i directly, so increases
    within the allowance are not charged by the regularizer.
    """

    prev: np.ndarray
    demand: float
    eps: float
    eta: float
    beta: np.ndarray
    costs: tuple[OperationalCost, ...]
    offset: np.ndarray | None = None
    capacity: np.ndarray | None = None

    def __post_init__(self):
        prev = np.asarray(self.prev, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "prev", prev)
        object.__setattr__(self, "beta", beta)
        if self.offset is not None:
            object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        if self.capacity is not None:
            object.__setattr__(self, "capacity", np.asarray(self.capacity, dtype=float))
        if self.eps <= 0 or self.eta <= 0:
            raise ValueError("eps and eta must be positive")
        if np.any(prev < 0):
            raise ValueError("prev must be nonnegative")
        n = prev.size
        if beta.size != n or len(self.costs) != n:
            raise ValueError("prev, beta, and costs must have equal length")
        if self.offset is not None and self.offset.size != n:
            raise ValueError("offset length mismatch")
        if self.capacity is not None and self.capacity.size != n:
            raise ValueError("capacity length mismatch")


class _Coordinate:
    """One convex term g(s) seen through its marginal (subgradient) curve."""

    __slots__ = ("cost", "ub")

    def marginal_lo(self, s: float) -> float:
        raise NotImplementedError

    def marginal_hi(self, s: float) -> float:
        raise NotImplementedError

    def marginal_slope(self, s: float) -> float:
        """Derivative of the marginal where smooth; used to accelerate solves."""
        raise NotImplementedError

    def kink_points(self) -> tuple[float, ...]:
        """Interior points where the marginal jumps (subgradient intervals)."""
        return self.cost.kinks

    def guess(self, lam: float) -> float:
        """Cheap starting point for the inner solve; need not be accurate."""
        invert = getattr(self.cost, "invert_derivative", None)
        if invert is not None:
            return invert(lam)
        return -1.0  # caller replaces out-of-bracket guesses

    def solve(self, lam: float, prefer_low: bool, cfg: SolverConfig) -> float:
        """Point of the optimal-solution interval at multiplier ``lam``.

        ``prefer_low`` selects the smallest optimizer (used at lam = 0 so a
        slack demand constraint never over-provisions); otherwise the largest
        optimizer is returned, which makes the map monotone in lam for the
        bisection.
        """
        return _invert_marginal(self, lam, prefer_low, cfg)

    def objective(self, s: float) -> float:
        raise NotImplementedError


def _invert_marginal(coord: _Coordinate, lam: float, prefer_low: bool, cfg: SolverConfig) -> float:
    """Generic monotone inversion with a bracketed Newton and bisection fallback."""
    ub = coord.ub
    if ub <= 0:
        return 0.0
    if prefer_low:
        if coord.marginal_hi(0.0) >= lam:
            return 0.0
        if coord.marginal_hi(ub) < lam:
            return ub
    else:
        if coord.marginal_lo(0.0) > lam:
            return 0.0
        if coord.marginal_lo(ub) <= lam:
            return ub
    m = coord.marginal_hi if prefer_low else coord.marginal_lo
    lo, hi = 0.0, ub
    x = coord.guess(lam)
    if not lo < x < hi:
        x = 0.5 * (lo + hi)
    xtol = 1e-14 * (1.0 + ub)
    gtol = 1e-12 * (1.0 + abs(lam))
    for _ in range(max(cfg.max_inner, 60)):
        g = m(x) - lam
        if abs(g) <= gtol:
            return x
        if g <= 0:
            lo = x
        else:
            hi = x
        if hi - lo <= xtol:
            break
        slope = coord.marginal_slope(x)
        if slope > 0 and math.isfinite(slope):
            x_new = x - g / slope
            if not (lo + 0.1 * xtol < x_new < hi - 0.1 * xtol):
                x_new = 0.5 * (lo + hi)
        else:
            x_new = 0.5 * (lo + hi)
        x = x_new
    # At a jump of the marginal the bracket collapses without |g| vanishing.
    # Snap to the exact kink so the subgradient interval there contains lam.
    for k in coord.kink_points():
        if lo - xtol <= k <= hi + xtol and 0.0 <= k <= ub:
            if coord.marginal_lo(k) <= lam <= coord.marginal_hi(k):
                return k
    # otherwise the lo end realizes the sup semantics, the hi end the inf one
    return hi if prefer_low else lo


class _EntropicCoordinate(_Coordinate):
    """cost(s) + weight * [(z + a) ln((z + a)/(prev + a)) - z], z = s."""

    __slots__ = ("cost", "ub", "weight", "prev", "a")

    def __init__(self, cost, ub, weight, prev, a):
        self.cost = cost
        self.ub = ub
        self.weight = weight  # beta / eta
        self.prev = prev
        self.a = a

    def _reg_marginal(self, s: float) -> float:
        if self.weight == 0.0:
            return 0.0
        return self.weight * math.log((s + self.a) / (self.prev + self.a))

    def marginal_lo(self, s: float) -> float:
        return self.cost.derivative_lo(s) + self._reg_marginal(s)

    def marginal_hi(self, s: float) -> float:
        return self.cost.derivative(s) + self._reg_marginal(s)

    def marginal_slope(self, s: float) -> float:
        reg = self.weight / (s + self.a) if self.weight else 0.0
        return self.cost.curvature(s) + reg

    def solve(self, lam: float, prefer_low: bool, cfg: SolverConfig) -> float:
        if self.cost.is_linear:
            rate = self.cost.floor_rate
            if self.weight == 0.0:
                if lam < rate or (prefer_low and lam == rate):
                    return 0.0
                return self.ub
            arg = (lam - rate) / self.weight
            if arg > _EXP_CAP:
                return self.ub
            s = (self.prev + self.a) * math.exp(arg) - self.a
            return min(max(s, 0.0), self.ub)
        return _invert_marginal(self, lam, prefer_low, cfg)

    def objective(self, s: float) -> float:
        return self.cost.value(s) + self.weight * entropic_term(s, self.prev, self.a)


class _OffsetEntropicCoordinate(_Coordinate):
    """Entropic coordinate with the allowance folded in: z = max(s - r, prev).

    The regularizer is constant for s <= prev + r (its variable is pinned at
    prev there), so the marginal is cost'(s) on that range and picks up the
    logarithmic term beyond it; the marginal is continuous at the seam.
    """

    __slots__ = ("cost", "ub", "weight", "prev", "a", "r")

    def __init__(self, cost, ub, weight, prev, a, r):
        self.cost = cost
        self.ub = ub
        self.weight = weight
        self.prev = prev
        self.a = a
        self.r = r

    def _reg_marginal(self, s: float) -> float:
        if self.weight == 0.0 or s <= self.prev + self.r:
            return 0.0
        return self.weight * math.log((s - self.r + self.a) / (self.prev + self.a))

    def marginal_lo(self, s: float) -> float:
        return self.cost.derivative_lo(s) + self._reg_marginal(s)

    def marginal_hi(self, s: float) -> float:
        return self.cost.derivative(s) + self._reg_marginal(s)

    def marginal_slope(self, s: float) -> float:
        reg = 0.0
        if self.weight and s > self.prev + self.r:
            reg = self.weight / (s - self.r + self.a)
        return self.cost.curvature(s) + reg

    def solve(self, lam: float, prefer_low: bool, cfg: SolverConfig) -> float:
        if self.cost.is_linear:
            rate = self.cost.floor_rate
            if lam < rate or (prefer_low and lam == rate):
                return 0.0
            if self.weight == 0.0:
                return self.ub
            arg = (lam - rate) / self.weight
            if arg > _EXP_CAP:
                return self.ub
            s = self.r + (self.prev + self.a) * math.exp(arg) - self.a
            return min(max(s, self.prev + self.r), self.ub)
        return _invert_marginal(self, lam, prefer_low, cfg)

    def objective(self, s: float) -> float:
        z = max(s - self.r, self.prev)
        return self.cost.value(s) + self.weight * entropic_term(z, self.prev, self.a)


class _HingeCoordinate(_Coordinate):
    """cost(s) + beta * (s - k_up)^+ - optional downhill hinge beta * (k_dn - s)^+.

    With ``k_dn = -inf`` this is the myopic slot term (switching charged above
    prev + r); a finite ``k_dn`` adds the charge the next slot would save by
    raising s, used by the offline block-coordinate pass.
    """

    __slots__ = ("cost", "ub", "beta", "k_up", "beta_dn", "k_dn")

    def __init__(self, cost, ub, beta, k_up, beta_dn=0.0, k_dn=-math.inf):
        self.cost = cost
        self.ub = ub
        self.beta = beta
        self.k_up = k_up
        self.beta_dn = beta_dn
        self.k_dn = k_dn

    def marginal_lo(self, s: float) -> float:
        m = self.cost.derivative_lo(s)
        if s > self.k_up:
            m += self.beta
        if self.beta_dn and s <= self.k_dn:
            m -= self.beta_dn
        return m

    def marginal_hi(self, s: float) -> float:
        m = self.cost.derivative(s)
        if s >= self.k_up:
            m += self.beta
        if self.beta_dn and s < self.k_dn:
            m -= self.beta_dn
        return m

    def marginal_slope(self, s: float) -> float:
        return self.cost.curvature(s)

    def kink_points(self) -> tuple[float, ...]:
        pts = self.cost.kinks + (self.k_up,)
        if self.beta_dn and math.isfinite(self.k_dn):
            pts += (self.k_dn,)
        return pts

    def solve(self, lam: float, prefer_low: bool, cfg: SolverConfig) -> float:
        if self.cost.is_linear:
            rate = self.cost.floor_rate
            # nondecreasing ladder: level j holds on (boundary j, boundary j+1)
            if self.beta_dn:
                t1, t2 = sorted((self.k_up, self.k_dn))
                levels = [rate - self.beta_dn, rate, rate + self.beta]
                boundaries = [0.0, min(max(t1, 0.0), self.ub), min(max(t2, 0.0), self.ub)]
            else:
                levels = [rate, rate + self.beta]
                boundaries = [0.0, min(max(self.k_up, 0.0), self.ub)]
            for level, boundary in zip(levels, boundaries):
                if lam < level or (prefer_low and lam == level):
                    return boundary
            return self.ub
        return _invert_marginal(self, lam, prefer_low, cfg)

    def objective(self, s: float) -> float:
        val = self.cost.value(s) + self.beta * max(0.0, s - self.k_up)
        if self.beta_dn:
            val += self.beta_dn * max(0.0, self.k_dn - s)
        return val


@dataclass(frozen=True)
class StepSolution:
    """Assignment of one slot with its demand multiplier and sign duals."""

    assignment: np.ndarray
    lam: float
    lower_duals: np.ndarray
    max_residual: float
    objective: float


def _coordinate_ub(cost, cap, demand, prev_plus_r) -> float:
    ub = max(demand, prev_plus_r) * (1.0 + 1e-9) + 1e-12
    if cap is not None:
        ub = min(ub, cap)
    if math.isfinite(cost.domain_max):
        ub = min(ub, cost.domain_max * (1.0 - 1e-12))
    return max(ub, 0.0)


def _demand_multiplier_cap(coords: list[_Coordinate], demand: float) -> float:
    """Multiplier guaranteed to make the coordinates jointly cover demand.

    Uses the waterline level xi with sum_i min(ub_i, xi) >= demand, so the
    marginal is never probed at a capacity barrier where it blows up.
    """
    ubs = np.array([c.ub for c in coords])
    if ubs.sum() <= demand:
        xi = float(ubs.max())
    else:
        lo, hi = 0.0, float(ubs.max())
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if np.minimum(ubs, mid).sum() >= demand:
                hi = mid
            else:
                lo = mid
        xi = hi
    cap = max(c.marginal_hi(min(c.ub, xi)) for c in coords) + 1.0
    return cap if math.isfinite(cap) else 1e30


def _solve_coupled(coords: list[_Coordinate], demand: float, cfg: SolverConfig) -> StepSolution:
    """Dual search on the demand multiplier over arbitrary coordinates."""
    n = len(coords)
    ub_total = sum(c.ub for c in coords)
    if ub_total < demand - cfg.feas_tol:
        raise InfeasibleError(f"coordinate bounds cover {ub_total} < demand {demand}")

    def values(lam: float, prefer_low: bool) -> np.ndarray:
        return np.array([c.solve(lam, prefer_low, cfg) for c in coords])

    lo_vec = values(0.0, prefer_low=True)
    lam_lo = lam_hi = 0.0
    if lo_vec.sum() >= demand - cfg.feas_tol:
        hi_vec = lo_vec
        if lo_vec.sum() < demand:
            hi_vec = values(0.0, prefer_low=False)
    else:
        hi_vec = values(0.0, prefer_low=False)
        if hi_vec.sum() < demand:
            sum_lo = hi_vec.sum()
            lam_hi = _demand_multiplier_cap(coords, demand)
            hi_vec = values(lam_hi, prefer_low=False)
            sum_hi = hi_vec.sum()
            for _ in range(60):
                if sum_hi >= demand:
                    break
                lam_hi = lam_hi * 2.0 + 1.0
                hi_vec = values(lam_hi, prefer_low=False)
                sum_hi = hi_vec.sum()
            exact = None
            for it in range(cfg.max_bisect):
                if lam_hi - lam_lo <= cfg.lambda_tol:
                    break
                width = lam_hi - lam_lo
                if it % 2 == 0 and sum_hi > sum_lo:
                    # secant step, clamped away from the bracket ends;
                    # alternated with bisection so the bracket provably shrinks
                    cand = lam_lo + (demand - sum_lo) * width / (sum_hi - sum_lo)
                    cand = min(max(cand, lam_lo + 0.02 * width), lam_hi - 0.02 * width)
                else:
                    cand = lam_lo + 0.5 * width
                vec = values(cand, prefer_low=False)
                sm = vec.sum()
                if abs(sm - demand) <= max(1e-3 * cfg.feas_tol, 1e-15 * (1.0 + demand)):
                    exact = (cand, vec)
                    break
                if sm >= demand:
                    lam_hi, sum_hi, hi_vec = cand, sm, vec
                else:
                    lam_lo, sum_lo = cand, sm
            if exact is not None:
                lam_hi = exact[0]
                lo_vec = hi_vec = exact[1]
            else:
                lo_vec = values(lam_lo, prefer_low=False)

    # deterministic lowest-index fill inside the per-coordinate optimal ranges
    s = lo_vec.copy()
    need = demand - s.sum()
    if need > 0:
        for i in range(n):
            room = hi_vec[i] - s[i]
            if room <= 0:
                continue
            if room >= need:
                s[i] = min(s[i] + need, coords[i].ub)
                need = 0.0
                break
            s[i] = hi_vec[i]
            need -= room
        if need > cfg.feas_tol:
            raise ConvergenceError(
                f"demand fill left residual {need} (window {lam_hi - lam_lo})"
            )
    np.clip(s, 0.0, None, out=s)

    lam = lam_hi
    lower = np.zeros(n)
    worst = 0.0
    for i, c in enumerate(coords):
        m_lo, m_hi = c.marginal_lo(s[i]), c.marginal_hi(s[i])
        if s[i] <= cfg.feas_tol and m_hi >= lam:
            lower[i] = max(0.0, m_lo - lam)
            worst = max(worst, s[i] * lower[i])
            continue
        worst = max(worst, m_lo - lam, lam - m_hi, 0.0)
    slack = s.sum() - demand
    if slack < -cfg.feas_tol:
        raise ConvergenceError(f"demand violated by {-slack}")
    if lam > 0:
        worst = max(worst, lam * max(slack, 0.0))
    objective = sum(c.objective(s[i]) for i, c in enumerate(coords))
    return StepSolution(s, lam, lower, worst, objective)


def _cap(spec_capacity, i):
    return None if spec_capacity is None else float(spec_capacity[i])


def build_entropic_coords(spec: SubproblemSpec) -> list[_Coordinate]:
    a = spec.eps / spec.prev.size
    coords: list[_Coordinate] = []
    for i in range(spec.prev.size):
        prev_i = float(spec.prev[i])
        r_i = float(spec.offset[i]) if spec.offset is not None else 0.0
        ub = _coordinate_ub(spec.costs[i], _cap(spec.capacity, i), spec.demand, prev_i + r_i)
        weight = float(spec.beta[i]) / spec.eta
        if spec.offset is None:
            coords.append(_EntropicCoordinate(spec.costs[i], ub, weight, prev_i, a))
        else:
            coords.append(_OffsetEntropicCoordinate(spec.costs[i], ub, weight, prev_i, a, r_i))
    return coords


def solve_step(spec: SubproblemSpec, cfg: SolverConfig | None = None) -> StepSolution:
    """Minimize the regularized slot objective over the demand polytope.

    Returns the assignment together with the demand multiplier and the
    nonnegativity duals; the stationarity and complementary-slackness
    residuals of the returned point are at most ``cfg.kkt_tol``.
    """
    cfg = cfg or SolverConfig()
    coords = build_entropic_coords(spec)
    sol = _solve_coupled(coords, float(spec.demand), cfg)
    if sol.max_residual > cfg.kkt_tol:
        raise ConvergenceError(f"stationarity residual {sol.max_residual} > {cfg.kkt_tol}")
    return sol


def step_objective(spec: SubproblemSpec, s: np.ndarray) -> float:
    """Regularized slot objective at an arbitrary assignment."""
    coords = build_entropic_coords(spec)
    return float(sum(c.objective(float(s[i])) for i, c in enumerate(coords)))


def solve_hinge_step(
    prev: np.ndarray,
    demand: float,
    beta: np.ndarray,
    costs,
    offset: np.ndarray,
    capacity: np.ndarray | None,
    cfg: SolverConfig,
    next_row: np.ndarray | None = None,
    next_offset: np.ndarray | None = None,
) -> StepSolution:
    """Minimize the hinge-switching slot objective (myopic or offline-block form).

    Without ``next_row`` this is the myopic program: operational cost plus
    ``beta_i (s_i - prev_i - r_i)^+``. With it, the downhill charge
    ``beta_i (next_i - s_i - r_next_i)^+`` toward the following slot is
    included, which is the exact slot subproblem of the offline
    block-coordinate pass.
    """
    n = prev.size
    coords: list[_Coordinate] = []
    for i in range(n):
        k_up = float(prev[i] + offset[i])
        prev_plus = k_up
        if next_row is not None:
            prev_plus = max(prev_plus, float(next_row[i]))
        ub = _coordinate_ub(costs[i], _cap(capacity, i), demand, prev_plus)
        if next_row is None:
            coords.append(_HingeCoordinate(costs[i], ub, float(beta[i]), k_up))
        else:
            k_dn = float(next_row[i] - next_offset[i])
            coords.append(
                _HingeCoordinate(costs[i], ub, float(beta[i]), k_up, float(beta[i]), k_dn)
            )
    sol = _solve_coupled(coords, float(demand), cfg)
    if sol.max_residual > cfg.kkt_tol:
        raise ConvergenceError(f"stationarity residual {sol.max_residual} > {cfg.kkt_tol}")
    return sol
