"""Online dispatch policies: myopic greedy and two regularized variants.

Each policy consumes the instance strictly slot by slot (no look-ahead):
the assignment at slot t depends only on slots 1..t and the previous
assignment row. All three share the per-slot solver, so every step comes
with certified stationarity residuals and duals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .model import Instance, Schedule
from .subproblem import SolverConfig, SubproblemSpec, solve_hinge_step, solve_step
from .theory import CASE_LARGE_OFFSET, offset_case_constants

POLICY_GREEDY = "greedy"
POLICY_REG = "reg"
POLICY_REG_OFFSET = "reg-offset"


@dataclass(frozen=True)
class PolicyConfig:
    """Which policy to run and its regularization width.

    ``eps`` is required for the convex-regularized policy; the offset-aware
    policy defaults it to the smallest positive demand (falling back to 1.0
    on an all-zero-demand instance).
    """

    kind: str
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in (POLICY_GREEDY, POLICY_REG, POLICY_REG_OFFSET):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive when supplied")


@dataclass(frozen=True)
class RunTrace:
    """Everything recorded along one online run.

    ``lambdas`` and ``lower_duals`` are the per-slot demand multiplier and
    nonnegativity duals of each step's subproblem; ``kkt_residuals`` holds
    each slot's worst stationarity or complementary-slackness residual.
    ``eta_used``/``eps_used`` are NaN for the greedy policy, which does not
    regularize. ``case_branch`` is set only by the offset-aware policy.
    """

    policy: str
    schedule: Schedule
    lambdas: np.ndarray
    lower_duals: np.ndarray
    eta_used: float
    eps_used: float
    case_branch: str | None
    kkt_residuals: np.ndarray


def default_offset_eps(instance: Instance) -> tuple[float, bool]:
    """Default regularization width: smallest positive demand, 1.0 if none.

    Returns the width and a flag marking the degenerate all-zero-demand
    fallback.
    """
    if instance.d_min > 0:
        return instance.d_min, False
    return 1.0, True


def _run_slots(instance: Instance, cfg: SolverConfig, step_fn, policy, eta, eps, branch):
    t_len, n = instance.horizon, instance.n_dc
    rows = np.zeros((t_len, n))
    lams = np.zeros(t_len)
    lowers = np.zeros((t_len, n))
    resids = np.zeros(t_len)
    prev = np.zeros(n)
    for t in range(t_len):
        sol = step_fn(t, prev)
        rows[t] = sol.assignment
        lams[t] = sol.lam
        lowers[t] = sol.lower_duals
        resids[t] = sol.max_residual
        prev = sol.assignment
    if resids.size and resids.max() > cfg.kkt_tol:
        raise ConvergenceError(f"worst slot residual {resids.max()} > {cfg.kkt_tol}")
    return RunTrace(policy, Schedule(rows), lams, lowers, eta, eps, branch, resids)


def run_greedy(instance: Instance, cfg: SolverConfig | None = None) -> RunTrace:
    """Myopic policy: each slot minimizes its own operational-plus-switching cost.

    The slot program charges increases above the previous row plus the slot's
    offset allowance, so with zero offsets this is the plain one-shot greedy.
    """
    cfg = cfg or SolverConfig()

    def step(t, prev):
        return solve_hinge_step(
            prev,
            float(instance.demand[t]),
            instance.beta,
            instance.costs[t],
            instance.offset[t],
            instance.capacity,
            cfg,
        )

    return _run_slots(instance, cfg, step, POLICY_GREEDY, math.nan, math.nan, None)


def run_reg_convex(
    instance: Instance, policy: PolicyConfig, cfg: SolverConfig | None = None
) -> RunTrace:
    """Convex-cost regularized policy.

    Replaces the one-sided switching charge with an entropic pull toward the
    previous row, scaled by eta = ln(1 + N * d_max / eps). Offsets are
    ignored by the decisions (cost evaluation may still credit them).
    """
    cfg = cfg or SolverConfig()
    if policy.kind != POLICY_REG:
        raise ValueError(f"expected a {POLICY_REG!r} policy, got {policy.kind!r}")
    if policy.eps is None:
        raise ValueError("the regularized policy requires an explicit eps")
    eps = policy.eps
    if instance.d_max <= 0:
        zero = Schedule(np.zeros((instance.horizon, instance.n_dc)))
        empty = np.zeros((instance.horizon, instance.n_dc))
        return RunTrace(
            POLICY_REG, zero, np.zeros(instance.horizon), empty,
            math.nan, eps, None, np.zeros(instance.horizon),
        )
    eta = math.log(1.0 + instance.n_dc * instance.d_max / eps)

    def step(t, prev):
        spec = SubproblemSpec(
            prev=prev,
            demand=float(instance.demand[t]),
            eps=eps,
            eta=eta,
            beta=instance.beta,
            costs=instance.costs[t],
            offset=None,
            capacity=instance.capacity,
        )
        return solve_step(spec, cfg)

    return _run_slots(instance, cfg, step, POLICY_REG, eta, eps, None)


def run_reg_offset(
    instance: Instance, policy: PolicyConfig, cfg: SolverConfig | None = None
) -> RunTrace:
    """Offset-aware regularized policy.

    Picks its regime once, up front, from the case constants: with small
    offsets it runs exactly like the convex-regularized policy; with large
    ones it scales eta by the cap constant and regularizes
    z_i = max(s_i - r_i, prev_i) so increases inside the allowance are free
    to the regularizer as well.
    """
    cfg = cfg or SolverConfig()
    if policy.kind != POLICY_REG_OFFSET:
        raise ValueError(f"expected a {POLICY_REG_OFFSET!r} policy, got {policy.kind!r}")
    if instance.d_max <= 0:
        zero = Schedule(np.zeros((instance.horizon, instance.n_dc)))
        empty = np.zeros((instance.horizon, instance.n_dc))
        return RunTrace(
            POLICY_REG_OFFSET, zero, np.zeros(instance.horizon), empty,
            math.nan, policy.eps if policy.eps else math.nan, None,
            np.zeros(instance.horizon),
        )
    eps = policy.eps if policy.eps is not None else default_offset_eps(instance)[0]
    consts = offset_case_constants(instance, eps)
    base_eta = math.log(1.0 + instance.n_dc * instance.d_max / eps)
    if consts.branch == CASE_LARGE_OFFSET:
        if not math.isfinite(consts.cap):
            raise ConvergenceError(
                "degenerate case constants: infinite cap with inflation below 1 "
                "(offsets vanish somewhere but dominate elsewhere)"
            )
        eta = consts.cap * base_eta
    else:
        eta = base_eta
    use_offset = consts.branch == CASE_LARGE_OFFSET

    def step(t, prev):
        spec = SubproblemSpec(
            prev=prev,
            demand=float(instance.demand[t]),
            eps=eps,
            eta=eta,
            beta=instance.beta,
            costs=instance.costs[t],
            offset=instance.offset[t] if use_offset else None,
            capacity=instance.capacity,
        )
        return solve_step(spec, cfg)

    return _run_slots(instance, cfg, step, POLICY_REG_OFFSET, eta, eps, consts.branch)


def run_policy(
    instance: Instance, policy: PolicyConfig, cfg: SolverConfig | None = None
) -> RunTrace:
    """Dispatch on the policy kind."""
    if policy.kind == POLICY_GREEDY:
        return run_greedy(instance, cfg)
    if policy.kind == POLICY_REG:
        return run_reg_convex(instance, policy, cfg)
    return run_reg_offset(instance, policy, cfg)
