"""Closed-form constants, competitive bounds, and empirical ratios.

Everything here is a pure function of an instance plus, where needed, the
trajectory an online policy actually produced. The bounds are certificates:
tests and the validation harness evaluate them on concrete runs and check
that measured cost ratios stay below them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import EnergyDelayCost, Instance, unit_cost_floor

CASE_SMALL_OFFSET = "small-offset"
CASE_LARGE_OFFSET = "large-offset"


def _unit_price(cost) -> float:
    """Unit operational price used by the offset case constants.

    Exact for linear kinds. For the energy-plus-delay kind the energy price
    is used, which is the slope of its piecewise-linear energy component and
    reduces to the exact unit price when the delay term is absent.
    """
    if cost.is_linear:
        return cost.floor_rate
    if isinstance(cost, EnergyDelayCost):
        return cost.price
    return cost.floor_rate


@dataclass(frozen=True)
class CaseConstants:
    """Offset-regime constants and the branch they select.

    ``inflation`` blows up as the total offset allowance approaches the
    guaranteed operational revenue (it may be negative or infinite);
    ``cap`` is the alternative multiplier used when offsets are large.
    The branch is the small-offset case iff 1 <= inflation <= cap.
    """

    inflation: float  # K_s
    cap: float        # K_c
    branch: str


def offset_case_constants(instance: Instance, eps: float) -> CaseConstants:
    """Case constants for the offset-aware policy at regularization width eps."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d_min, d_max = instance.d_min, instance.d_max
    if d_min <= 0:
        raise ValueError("case constants require some strictly positive demand")
    prices = [_unit_price(c) for row in instance.costs for c in row]
    min_price = min(prices)
    if min_price <= 0:
        raise ValueError("case constants require a strictly positive minimum unit price")
    r = instance.offset
    min_r = float(r.min()) if r.size else 0.0
    max_r = float(r.max()) if r.size else 0.0
    beta_max = float(instance.beta.max())
    if min_r > 0:
        cap = max(2.0 * (1.0 + eps / d_min) * d_max * beta_max / (min_r * min_price), 1.0)
    else:
        cap = math.inf
    denom = 1.0 - instance.beta.sum() * max_r / (min_price * d_min)
    inflation = 1.0 / denom if denom > 0 else -math.inf
    branch = CASE_SMALL_OFFSET if 1.0 <= inflation <= cap else CASE_LARGE_OFFSET
    return CaseConstants(inflation, cap, branch)


def case_multiplier(inflation: float, cap: float) -> float:
    """Bound multiplier: the inflation constant in the small-offset case, else the cap."""
    return inflation if 1.0 <= inflation <= cap else cap


def entropy_charge(instance: Instance, trace) -> float:
    """Average regularizer charge per unit of demand along a trajectory.

    Computed from the schedule the convex-regularized policy produced,
    using the eta and eps that policy ran with. Lies in [0, beta_max] and
    tightens the greedy bound's denominator.
    """
    total_demand = float(instance.demand.sum())
    if total_demand <= 0:
        raise ValueError("entropy charge undefined for zero total demand")
    if not math.isfinite(trace.eta_used) or not math.isfinite(trace.eps_used):
        raise ValueError("trace does not carry regularization parameters")
    s = trace.schedule.s
    a = trace.eps_used / instance.n_dc
    prev = np.vstack([np.zeros(instance.n_dc), s[:-1]])
    logs = np.log((s + a) / (prev + a))
    weights = instance.beta / trace.eta_used
    return float((logs * s * weights).sum() / total_demand)


def greedy_bound(floor_rate: float, beta_max: float) -> float:
    """Competitive bound of the myopic policy: 1 + beta / floor."""
    if floor_rate <= 0:
        return math.inf
    return 1.0 + beta_max / floor_rate


def regularized_bound(floor_rate: float, beta_max: float, charge: float) -> float:
    """Bound of the convex-regularized policy: 1 + beta / (floor + charge)."""
    denom = floor_rate + charge
    if denom <= 0:
        return math.inf
    return 1.0 + beta_max / denom


def offset_bound(multiplier: float, n_dc: int, d_max: float, d_min: float) -> float:
    """Bound of the offset-aware policy: multiplier * (1 + 2 ln(1 + N d_max / d_min))."""
    if d_min <= 0 or multiplier < 0 or not math.isfinite(multiplier):
        return math.inf
    return multiplier * (1.0 + 2.0 * math.log(1.0 + n_dc * d_max / d_min))


def empirical_ratio(instance: Instance, online, offline) -> float:
    """Per-instance cost ratio of an online run against the offline benchmark."""
    off = offline.objective
    if off <= 0:
        return 1.0 if online.total <= 1e-12 else math.inf
    return online.total / off


@dataclass(frozen=True)
class SweepPoint:
    """One row of the bound-versus-offset curve."""

    r: float
    inflation: float
    cap: float
    multiplier: float
    branch: str
    bound: float


def bound_sweep(instance: Instance, r_values, eps: float | None = None) -> list[SweepPoint]:
    """Evaluate the offset-regime bound along uniform offsets r_i(t) = r.

    The sweep only reads aggregate statistics of the instance (demand range,
    switching weights, unit prices), so the instance's own offsets are
    ignored and replaced by each grid value in turn.
    """
    eps = instance.d_min if eps is None else eps
    points = []
    for r in r_values:
        uniform = instance.with_offset(np.full((instance.horizon, instance.n_dc), float(r)))
        consts = offset_case_constants(uniform, eps)
        mult = case_multiplier(consts.inflation, consts.cap)
        bound = offset_bound(mult, instance.n_dc, instance.d_max, instance.d_min)
        points.append(SweepPoint(float(r), consts.inflation, consts.cap, mult, consts.branch, bound))
    return points


@dataclass(frozen=True)
class TheoryReport:
    """All constants and bounds relevant to one instance and its runs.

    Fields that require a particular policy trace or cost structure are None
    when not applicable (for example the offset constants on an instance
    with zero minimum price, or the entropy charge without a regularized run).
    """

    floor_rate: float
    floor_vacuous: bool
    beta_max: float
    entropy_charge: float | None
    offset_inflation: float | None
    offset_cap: float | None
    case_multiplier: float | None
    bound_greedy: float
    bound_regularized: float | None
    bound_offset: float | None
    empirical_ratio: float | None


def compile_report(
    instance: Instance,
    reg_trace=None,
    online=None,
    offline=None,
    eps: float | None = None,
) -> TheoryReport:
    """Assemble the full report from whatever runs are available."""
    floors = unit_cost_floor(instance)
    beta_max = float(instance.beta.max()) if instance.n_dc else 0.0
    charge = None
    if reg_trace is not None and instance.demand.sum() > 0:
        charge = entropy_charge(instance, reg_trace)
    inflation = cap = mult = b_off = None
    try:
        consts = offset_case_constants(instance, instance.d_min if eps is None else eps)
        inflation, cap = consts.inflation, consts.cap
        mult = case_multiplier(inflation, cap)
        b_off = offset_bound(mult, instance.n_dc, instance.d_max, instance.d_min)
    except ValueError:
        pass
    ratio = None
    if online is not None and offline is not None:
        ratio = empirical_ratio(instance, online, offline)
    return TheoryReport(
        floor_rate=floors.overall,
        floor_vacuous=floors.vacuous,
        beta_max=beta_max,
        entropy_charge=charge,
        offset_inflation=inflation,
        offset_cap=cap,
        case_multiplier=mult,
        bound_greedy=greedy_bound(floors.overall, beta_max),
        bound_regularized=(
            regularized_bound(floors.overall, beta_max, charge) if charge is not None else None
        ),
        bound_offset=b_off,
        empirical_ratio=ratio,
    )
