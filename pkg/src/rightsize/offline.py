"""Offline benchmark solvers and duality certificates.

The hindsight problem minimizes total operational plus switching cost over
the whole horizon. With linear operational costs it is a linear program in
the assignments and per-slot increase variables, solved exactly. For general
convex costs a block-coordinate pass over slots (each block solved exactly
by the shared per-slot machinery, including the hinge toward the following
slot) runs to a fixed point, with a weak-duality gap certificate and an
optional joint polish on small horizons.

A grid dynamic program over discretized assignment vectors serves as an
independent validation oracle on small instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.sparse

from .algorithms import POLICY_REG, RunTrace
from .errors import DimensionError, InfeasibleError
from .model import CostBreakdown, Instance, Schedule, evaluate_cost
from .subproblem import SolverConfig, solve_hinge_step

_POLISH_LIMIT = 300   # max T*N for the joint polish pass
_MAX_SWEEPS = 200


@dataclass(frozen=True)
class OfflineSolution:
    """A feasible hindsight schedule and its exact objective."""

    schedule: Schedule
    objective: float
    method: str  # "ContinuousSolver" or "GridDP"
    certified_gap: float | None = None


def _all_linear(instance: Instance) -> bool:
    return instance.linear_rates is not None


def solve_offline(
    instance: Instance, cfg: SolverConfig | None = None, tol_rel: float = 1e-4
) -> OfflineSolution:
    """Hindsight-optimal schedule for the whole horizon.

    Linear-cost instances are solved exactly as a linear program; convex
    instances by block-coordinate descent with exact slot solves, a
    duality-gap stop, and a joint polish on small horizons.
    """
    cfg = cfg or SolverConfig()
    if instance.horizon == 0:
        return OfflineSolution(Schedule(np.zeros((0, instance.n_dc))), 0.0, "ContinuousSolver", 0.0)
    if _all_linear(instance):
        return _solve_offline_lp(instance, cfg)
    return _solve_offline_bcd(instance, cfg, tol_rel)


def _solve_offline_lp(instance: Instance, cfg: SolverConfig) -> OfflineSolution:
    t_len, n = instance.horizon, instance.n_dc
    nv = t_len * n
    rates = instance.linear_rates.reshape(-1)
    c = np.concatenate([rates, np.tile(instance.beta, t_len)])

    rows, cols, vals = [], [], []
    b_ub = []
    row = 0
    for t in range(t_len):  # -sum_i s_{t,i} <= -D(t)
        for i in range(n):
            rows.append(row)
            cols.append(t * n + i)
            vals.append(-1.0)
        b_ub.append(-float(instance.demand[t]))
        row += 1
    for t in range(t_len):  # s_{t,i} - s_{t-1,i} - x_{t,i} <= r_{t,i}
        for i in range(n):
            k = t * n + i
            rows.append(row)
            cols.append(k)
            vals.append(1.0)
            if t > 0:
                rows.append(row)
                cols.append(k - n)
                vals.append(-1.0)
            rows.append(row)
            cols.append(nv + k)
            vals.append(-1.0)
            b_ub.append(float(instance.offset[t, i]))
            row += 1
    a_ub = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(row, 2 * nv))
    if instance.capacity is not None:
        bounds = [(0.0, float(instance.capacity[i % n])) for i in range(nv)]
    else:
        bounds = [(0.0, None)] * nv
    bounds += [(0.0, None)] * nv
    res = scipy.optimize.linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        raise InfeasibleError(f"offline LP failed: {res.message}")
    s = np.clip(res.x[:nv].reshape(t_len, n), 0.0, None)
    schedule = Schedule(s)
    objective = evaluate_cost(instance, schedule, cfg.feas_tol * 10).total
    return OfflineSolution(schedule, objective, "ContinuousSolver", certified_gap=0.0)


def _conjugate_min(cost, w: float, hint: float) -> float:
    """min over s >= 0 of cost(s) + w * s, for the dual-value assembly."""
    if cost.derivative(0.0) + w >= 0:
        return cost.value(0.0)
    ub = max(hint, 1.0)
    if math.isfinite(cost.domain_max):
        ub = cost.domain_max * (1.0 - 1e-12)
    else:
        for _ in range(200):
            if cost.derivative(ub) + w >= 0:
                break
            ub *= 2.0
        else:
            return -math.inf
    lo, hi = 0.0, ub
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if cost.derivative(mid) + w < 0:
            lo = mid
        else:
            hi = mid
    s = 0.5 * (lo + hi)
    return cost.value(s) + w * s


def _bcd_dual_value(instance: Instance, s: np.ndarray, lams: np.ndarray) -> float:
    """Weak-duality lower bound assembled from the block pass's multipliers."""
    t_len, n = instance.horizon, instance.n_dc
    prev = np.vstack([np.zeros(n), s[:-1]])
    active = (s - prev - instance.offset) > 1e-9
    mu = active * instance.beta  # (T, N), each entry in [0, beta_i]
    mu_next = np.vstack([mu[1:], np.zeros(n)])
    value = float(lams @ instance.demand) - float((mu * instance.offset).sum())
    for t in range(t_len):
        for i in range(n):
            w = mu[t, i] - mu_next[t, i] - lams[t]
            value += _conjugate_min(instance.costs[t][i], w, hint=instance.d_max)
    return value


def _solve_offline_bcd(instance: Instance, cfg: SolverConfig, tol_rel: float) -> OfflineSolution:
    t_len, n = instance.horizon, instance.n_dc
    zero_off = np.zeros(n)

    def sweep(s, lams):
        for t in range(t_len):
            prev = s[t - 1] if t > 0 else np.zeros(n)
            nxt = s[t + 1] if t + 1 < t_len else None
            nxt_off = instance.offset[t + 1] if t + 1 < t_len else None
            sol = solve_hinge_step(
                prev, float(instance.demand[t]), instance.beta, instance.costs[t],
                instance.offset[t], instance.capacity, cfg,
                next_row=nxt, next_offset=nxt_off if nxt is not None else zero_off,
            )
            s[t] = sol.assignment
            lams[t] = sol.lam
        return s, lams

    # myopic warm start
    s = np.zeros((t_len, n))
    lams = np.zeros(t_len)
    prev = np.zeros(n)
    for t in range(t_len):
        sol = solve_hinge_step(
            prev, float(instance.demand[t]), instance.beta, instance.costs[t],
            instance.offset[t], instance.capacity, cfg,
        )
        s[t] = sol.assignment
        prev = s[t]

    best = evaluate_cost(instance, Schedule(s), cfg.feas_tol * 10).total
    gap = math.inf
    for _ in range(_MAX_SWEEPS):
        s, lams = sweep(s, lams)
        obj = evaluate_cost(instance, Schedule(s), cfg.feas_tol * 10).total
        dual = _bcd_dual_value(instance, s, lams)
        gap = obj - dual
        improved = best - obj
        best = min(best, obj)
        if gap <= tol_rel * max(1.0, abs(obj)):
            break
        if improved <= 1e-8 * max(1.0, abs(obj)):
            break

    if t_len * n <= _POLISH_LIMIT:
        polished = _polish(instance, s, cfg)
        if polished is not None:
            pol_obj = evaluate_cost(instance, Schedule(polished), cfg.feas_tol * 10).total
            if pol_obj < best:
                s, best = polished, pol_obj
                gap = min(gap, best - _bcd_dual_value(instance, s, lams))
    schedule = Schedule(s)
    objective = evaluate_cost(instance, schedule, cfg.feas_tol * 10).total
    return OfflineSolution(schedule, objective, "ContinuousSolver",
                           certified_gap=gap if math.isfinite(gap) else None)


def _polish(instance: Instance, s0: np.ndarray, cfg: SolverConfig) -> np.ndarray | None:
    """Joint descent on the increase-variable form, started from the block pass."""
    t_len, n = instance.horizon, instance.n_dc
    nv = t_len * n
    prev0 = np.vstack([np.zeros(n), s0[:-1]])
    z0 = np.clip(s0 - prev0 - instance.offset, 0.0, None)
    x0 = np.concatenate([s0.reshape(-1), z0.reshape(-1)])

    def objective(x):
        s = x[:nv].reshape(t_len, n)
        z = x[nv:]
        val = float(z @ np.tile(instance.beta, t_len))
        grad_s = np.zeros((t_len, n))
        for t in range(t_len):
            for i in range(n):
                c = instance.costs[t][i]
                si = min(max(s[t, i], 0.0), c.domain_max * (1 - 1e-12))
                val += c.value(si)
                grad_s[t, i] = c.derivative(si)
        return val, np.concatenate([grad_s.reshape(-1), np.tile(instance.beta, t_len)])

    demand_rows = np.zeros((t_len, 2 * nv))
    for t in range(t_len):
        demand_rows[t, t * n:(t + 1) * n] = 1.0
    ramp_rows = np.zeros((nv, 2 * nv))
    ramp_rhs = np.zeros(nv)
    for t in range(t_len):
        for i in range(n):
            k = t * n + i
            ramp_rows[k, nv + k] = 1.0
            ramp_rows[k, k] = -1.0
            if t > 0:
                ramp_rows[k, k - n] = 1.0
            ramp_rhs[k] = float(instance.offset[t, i])
    constraints = [
        {"type": "ineq", "fun": lambda x: demand_rows @ x - instance.demand,
         "jac": lambda x: demand_rows},
        {"type": "ineq", "fun": lambda x: ramp_rows @ x + ramp_rhs,
         "jac": lambda x: ramp_rows},
    ]
    ub_s = []
    for i in range(nv):
        hi = instance.costs[i // n][i % n].domain_max
        if instance.capacity is not None:
            hi = min(hi, float(instance.capacity[i % n]))
        ub_s.append(hi * (1 - 1e-12) if math.isfinite(hi) else None)
    bounds = [(0.0, hi) for hi in ub_s] + [(0.0, None)] * nv
    try:
        res = scipy.optimize.minimize(
            objective, x0, jac=True, bounds=bounds, constraints=constraints,
            method="SLSQP", options={"maxiter": 200, "ftol": 1e-12},
        )
    except (ValueError, OverflowError):
        return None
    if not res.success and res.status != 4:  # 4: not making progress, point still usable
        return None
    s = res.x[:nv].reshape(t_len, n)
    s = np.clip(s, 0.0, None)
    # feasibility repair within tolerance, then verify
    for t in range(t_len):
        short = instance.demand[t] - s[t].sum()
        if short > 0:
            s[t, int(np.argmax(s[t]))] += short
    try:
        evaluate_cost(instance, Schedule(s), cfg.feas_tol * 10)
    except (InfeasibleError, Exception):
        return None
    return s


def solve_offline_dp(instance: Instance, grid_step: float) -> OfflineSolution:
    """Exact optimum over assignments discretized to multiples of grid_step.

    Demands are rounded up to the grid, so the result is feasible for the
    original instance and upper-bounds its continuous optimum. Limited to
    two data centers and six slots; transitions use one-dimensional
    min-convolutions per coordinate, so the cost per slot is quadratic in
    the per-coordinate grid size rather than quartic.
    """
    if instance.n_dc > 2 or instance.horizon > 6:
        raise ValueError("instance too large for the DP oracle (need N <= 2, T <= 6)")
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    t_len, n = instance.horizon, instance.n_dc
    if t_len == 0:
        return OfflineSolution(Schedule(np.zeros((0, n))), 0.0, "GridDP")
    m = int(math.ceil(instance.d_max / grid_step - 1e-12))
    sizes = []
    for i in range(n):
        mi = m
        if instance.capacity is not None:
            mi = min(mi, int(math.floor(instance.capacity[i] / grid_step + 1e-12)))
        dom = min(c.domain_max for c in (instance.costs[t][i] for t in range(t_len)))
        if math.isfinite(dom):
            mi = min(mi, int(math.floor(dom / grid_step * (1 - 1e-12))))
        sizes.append(mi + 1)
    d_idx = [int(math.ceil(instance.demand[t] / grid_step - 1e-12)) for t in range(t_len)]
    if sum(sz - 1 for sz in sizes) < max(d_idx):
        raise InfeasibleError("grid too coarse to cover demand within bounds")

    grids = [np.arange(sz) * grid_step for sz in sizes]

    def slot_cost(t):
        cols = []
        for i in range(n):
            vals = np.empty(sizes[i])
            for k, x in enumerate(grids[i]):
                try:
                    vals[k] = instance.costs[t][i].value(float(x))
                except Exception:
                    vals[k] = math.inf
            cols.append(vals)
        if n == 1:
            return cols[0]
        return cols[0][:, None] + cols[1][None, :]

    def transform(v, beta, q, axis):
        """W(j) = min_k v(k) + beta*step*max(0, j - k - q) along one axis."""
        v = np.moveaxis(v, axis, -1)
        size = v.shape[-1]
        idx = np.arange(size)
        # suffix minima (k >= threshold): no switching charge
        rev = v[..., ::-1]
        suf_acc = np.minimum.accumulate(rev, axis=-1)
        new_best = rev < np.concatenate(
            [np.full(rev.shape[:-1] + (1,), np.inf), suf_acc[..., :-1]], axis=-1
        )
        suf_arg_rev = np.where(new_best, idx, 0)
        suf_arg_rev = np.maximum.accumulate(suf_arg_rev, axis=-1)
        suf_min = suf_acc[..., ::-1]
        suf_arg = size - 1 - suf_arg_rev[..., ::-1]
        # prefix minima of v(k) - beta*step*k: charged region
        shifted = v - beta * grid_step * idx
        pre_acc = np.minimum.accumulate(shifted, axis=-1)
        new_best = shifted < np.concatenate(
            [np.full(shifted.shape[:-1] + (1,), np.inf), pre_acc[..., :-1]], axis=-1
        )
        pre_arg = np.maximum.accumulate(np.where(new_best, idx, -1), axis=-1)
        thr = np.ceil(idx - q - 1e-12).astype(int)
        np.clip(thr, 0, size, out=thr)
        w = np.full(v.shape, np.inf)
        arg = np.zeros(v.shape, dtype=int)
        free_ok = thr < size
        t_free = np.clip(thr, 0, size - 1)
        w_free = np.take_along_axis(suf_min, np.broadcast_to(t_free, v.shape[:-1] + (size,)), -1)
        a_free = np.take_along_axis(suf_arg, np.broadcast_to(t_free, v.shape[:-1] + (size,)), -1)
        w = np.where(free_ok, w_free, w)
        arg = np.where(free_ok, a_free, arg)
        pay_ok = thr > 0
        t_pay = np.clip(thr - 1, 0, size - 1)
        w_pay = np.take_along_axis(pre_acc, np.broadcast_to(t_pay, v.shape[:-1] + (size,)), -1)
        a_pay = np.take_along_axis(pre_arg, np.broadcast_to(t_pay, v.shape[:-1] + (size,)), -1)
        w_pay = w_pay + beta * grid_step * (idx - q)
        better = pay_ok & (w_pay < w)
        w = np.where(better, w_pay, w)
        arg = np.where(better, a_pay, arg)
        return np.moveaxis(w, -1, axis), np.moveaxis(arg, -1, axis)

    if n == 1:
        value = np.full(sizes[0], np.inf)
        value[0] = 0.0
    else:
        value = np.full((sizes[0], sizes[1]), np.inf)
        value[0, 0] = 0.0
    args = []
    for t in range(t_len):
        q = [float(instance.offset[t, i] / grid_step) for i in range(n)]
        if n == 1:
            value, a0 = transform(value, float(instance.beta[0]), q[0], 0)
            value = value + slot_cost(t)
            idx0 = np.arange(sizes[0])
            value[idx0 < d_idx[t]] = np.inf
            args.append((a0,))
        else:
            value, a1 = transform(value, float(instance.beta[1]), q[1], 1)
            value, a0 = transform(value, float(instance.beta[0]), q[0], 0)
            value = value + slot_cost(t)
            i0 = np.arange(sizes[0])[:, None]
            i1 = np.arange(sizes[1])[None, :]
            value[(i0 + i1) < d_idx[t]] = np.inf
            args.append((a0, a1))

    if not np.isfinite(value.min()):
        raise InfeasibleError("DP found no feasible path")
    s = np.zeros((t_len, n))
    if n == 1:
        k = int(np.argmin(value))
        for t in range(t_len - 1, -1, -1):
            s[t, 0] = k * grid_step
            k = int(args[t][0][k])
    else:
        k0, k1 = np.unravel_index(int(np.argmin(value)), value.shape)
        for t in range(t_len - 1, -1, -1):
            s[t, 0] = k0 * grid_step
            s[t, 1] = k1 * grid_step
            a0, a1 = args[t]
            k0_new = int(a0[k0, k1])
            k1 = int(a1[k0_new, k1])
            k0 = k0_new
    schedule = Schedule(s)
    objective = evaluate_cost(instance, schedule).total
    return OfflineSolution(schedule, objective, "GridDP")


def dual_lower_bound(instance: Instance, trace: RunTrace) -> float:
    """Weak-duality lower bound on the offline optimum from a regularized run.

    Valid only for traces of the convex-regularized policy on instances with
    no offset allowance.
    """
    if trace.policy != POLICY_REG:
        raise ValueError("dual lower bound requires a convex-regularized trace")
    if np.any(instance.offset > 0):
        raise ValueError("dual lower bound requires zero offsets")
    s = trace.schedule.s
    if s.shape != (instance.horizon, instance.n_dc):
        raise DimensionError("trace does not match instance dimensions")
    if instance.horizon == 0:
        return 0.0
    if not math.isfinite(trace.eta_used):
        return 0.0  # zero-demand degenerate run: offline optimum is 0
    a = trace.eps_used / instance.n_dc
    prev = np.vstack([np.zeros(instance.n_dc), s[:-1]])
    logs = np.log((s + a) / (prev + a))
    weights = instance.beta / trace.eta_used
    value = float((logs * s * weights).sum())
    for t in range(instance.horizon):
        for i in range(instance.n_dc):
            value += instance.costs[t][i].value(float(s[t, i]))
    return value


def offline_breakdown(instance: Instance, solution: OfflineSolution) -> CostBreakdown:
    """Cost breakdown of an offline solution under its instance."""
    return evaluate_cost(instance, solution.schedule)
