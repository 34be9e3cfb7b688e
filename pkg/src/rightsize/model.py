"""Cost functions, problem instances, and exact schedule cost accounting.

An instance couples a demand series with a grid of per-slot, per-data-center
operational cost functions, one-sided switching weights, and optional
switching offsets (free increase allowances). All types are immutable after
construction; cost evaluation is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CostDomainError, DimensionError, InfeasibleError

SERVICE_RATE_PER_MS = 0.1    # jobs per ms one data center can absorb
DELAY_NUMERATOR_MS = 1000.0  # queueing-delay numerator in ms
CYCLIC_PENALTY_FACTOR = 10.0  # surcharge multiple on the base price


def cyclic_penalty_price(price: float, dc: int, slot: int, n_dc: int) -> float:
    """Unit price for a data center under the rotating penalty surcharge.

    Both ``dc`` and ``slot`` are 1-based. The surcharge adds
    ``CYCLIC_PENALTY_FACTOR * price`` whenever ``slot mod n_dc >= dc``,
    so high-index data centers are penalized on fewer slots.
    """
    if not 1 <= dc <= n_dc:
        raise ValueError(f"dc must be in 1..{n_dc}, got {dc}")
    if slot < 1:
        raise ValueError(f"slot must be >= 1, got {slot}")
    if slot % n_dc >= dc:
        return price + CYCLIC_PENALTY_FACTOR * price
    return price


@dataclass(frozen=True)
class LinearCost:
    """Operational cost ``rate * x`` with a constant unit rate."""

    rate: float
    domain_max = math.inf

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"rate must be nonnegative, got {self.rate}")

    def value(self, x: float) -> float:
        return self.rate * x

    def derivative(self, x: float) -> float:
        return self.rate

    def derivative_lo(self, x: float) -> float:
        return self.rate

    def curvature(self, x: float) -> float:
        return 0.0

    @property
    def is_linear(self) -> bool:
        return True

    @property
    def floor_rate(self) -> float:
        """Largest slope e with value(x) >= e * x for all x."""
        return self.rate

    @property
    def kinks(self) -> tuple[float, ...]:
        """Interior points where the derivative jumps."""
        return ()


@dataclass(frozen=True)
class CyclicPenaltyCost:
    """Linear cost whose unit price carries the rotating penalty surcharge.

    The effective price is fixed at construction from the (1-based) grid
    position of the handle, so evaluation stays a plain linear function.
    """

    base_price: float
    dc: int
    slot: int
    period: int
    domain_max = math.inf

    def __post_init__(self):
        if self.base_price < 0:
            raise ValueError("base_price must be nonnegative")
        # validates index ranges as a side effect
        cyclic_penalty_price(self.base_price, self.dc, self.slot, self.period)

    @cached_property
    def effective_rate(self) -> float:
        return cyclic_penalty_price(self.base_price, self.dc, self.slot, self.period)

    def value(self, x: float) -> float:
        return self.effective_rate * x

    def derivative(self, x: float) -> float:
        return self.effective_rate

    def derivative_lo(self, x: float) -> float:
        return self.effective_rate

    def curvature(self, x: float) -> float:
        return 0.0

    @property
    def is_linear(self) -> bool:
        return True

    @property
    def floor_rate(self) -> float:
        return self.effective_rate

    @property
    def kinks(self) -> tuple[float, ...]:
        return ()


@dataclass(frozen=True)
class QuadraticCost:
    """Operational cost ``a * x**2``; its unit cost vanishes near zero load."""

    curvature_coef: float
    domain_max = math.inf

    def __post_init__(self):
        if self.curvature_coef < 0:
            raise ValueError("curvature_coef must be nonnegative")

    def value(self, x: float) -> float:
        return self.curvature_coef * x * x

    def derivative(self, x: float) -> float:
        return 2.0 * self.curvature_coef * x

    def derivative_lo(self, x: float) -> float:
        return 2.0 * self.curvature_coef * x

    def curvature(self, x: float) -> float:
        return 2.0 * self.curvature_coef

    @property
    def is_linear(self) -> bool:
        return False

    @property
    def floor_rate(self) -> float:
        return 0.0

    @property
    def kinks(self) -> tuple[float, ...]:
        return ()


@dataclass(frozen=True)
class EnergyDelayCost:
    """Energy price above a renewable-covered share, plus load-weighted delay.

    value(x) = price * max(0, x - free_share)
             + delay_weight * x * (delay_ms + DELAY_NUMERATOR_MS / (service_rate - x))

    The function is finite, convex, and nondecreasing on [0, service_rate);
    workloads at or beyond ``service_rate`` raise :class:`CostDomainError`,
    which models an infinite capacity barrier. The energy term has a kink at
    ``free_share``; ``derivative`` returns the right derivative there. Setting
    ``smoothing`` > 0 replaces the kink with a softplus of that width, which
    some generic solvers prefer (off by default).
    """

    price: float
    free_share: float = 0.0
    delay_ms: float = 0.0
    service_rate: float = SERVICE_RATE_PER_MS
    delay_weight: float = 1.0
    smoothing: float = 0.0

    def __post_init__(self):
        if self.price < 0 or self.free_share < 0 or self.delay_ms < 0:
            raise ValueError("price, free_share, and delay_ms must be nonnegative")
        if self.service_rate <= 0:
            raise ValueError("service_rate must be positive")
        if self.delay_weight < 0 or self.smoothing < 0:
            raise ValueError("delay_weight and smoothing must be nonnegative")

    @property
    def domain_max(self) -> float:
        return self.service_rate

    def _check_domain(self, x: float) -> None:
        if x >= self.service_rate:
            raise CostDomainError(
                f"workload {x} at or beyond service rate {self.service_rate}"
            )

    def _energy(self, x: float) -> float:
        gap = x - self.free_share
        if self.smoothing > 0:
            w = self.smoothing
            return self.price * w * math.log1p(math.exp(min(gap / w, 700.0)))
        return self.price * max(0.0, gap)

    def _energy_slope(self, x: float, from_right: bool) -> float:
        gap = x - self.free_share
        if self.smoothing > 0:
            w = self.smoothing
            return self.price / (1.0 + math.exp(max(min(-gap / w, 700.0), -700.0)))
        if gap > 0 or (from_right and gap == 0):
            return self.price
        return 0.0

    def value(self, x: float) -> float:
        self._check_domain(x)
        delay = self.delay_ms + DELAY_NUMERATOR_MS / (self.service_rate - x)
        return self._energy(x) + self.delay_weight * x * delay

    def derivative(self, x: float) -> float:
        self._check_domain(x)
        mu = self.service_rate
        delay_slope = self.delay_ms + DELAY_NUMERATOR_MS * mu / (mu - x) ** 2
        return self._energy_slope(x, from_right=True) + self.delay_weight * delay_slope

    def derivative_lo(self, x: float) -> float:
        self._check_domain(x)
        mu = self.service_rate
        delay_slope = self.delay_ms + DELAY_NUMERATOR_MS * mu / (mu - x) ** 2
        return self._energy_slope(x, from_right=False) + self.delay_weight * delay_slope

    def curvature(self, x: float) -> float:
        self._check_domain(x)
        mu = self.service_rate
        curv = self.delay_weight * 2.0 * DELAY_NUMERATOR_MS * mu / (mu - x) ** 3
        if self.smoothing > 0:
            w = self.smoothing
            sig = 1.0 / (1.0 + math.exp(max(min(-(x - self.free_share) / w, 700.0), -700.0)))
            curv += self.price * sig * (1.0 - sig) / w
        return curv

    @property
    def is_linear(self) -> bool:
        return False

    @property
    def floor_rate(self) -> float:
        return self.derivative(0.0)

    @property
    def kinks(self) -> tuple[float, ...]:
        if self.smoothing == 0 and self.price > 0 and self.free_share > 0:
            return (self.free_share,)
        return ()

    def invert_derivative(self, y: float) -> float:
        """Smallest s with derivative(s) >= y; exact for the unsmoothed kink."""
        mu = self.service_rate
        k_num = self.delay_weight * DELAY_NUMERATOR_MS * mu

        def branch(extra):
            rhs = y - extra - self.delay_weight * self.delay_ms
            if rhs <= 0:
                return 0.0
            if k_num <= 0:
                return mu
            return mu - math.sqrt(k_num / rhs)

        hi = mu * (1.0 - 1e-12)
        lo_branch = branch(0.0)
        if self.smoothing > 0 or self.price == 0:
            return min(max(lo_branch, 0.0), hi)
        if lo_branch <= self.free_share:
            return min(max(lo_branch, 0.0), hi)
        return min(max(branch(self.price), self.free_share), hi)


OperationalCost = LinearCost | CyclicPenaltyCost | QuadraticCost | EnergyDelayCost


def energy_delay_cost(x: float, cost: EnergyDelayCost) -> float:
    """Evaluate an :class:`EnergyDelayCost` at workload ``x``."""
    return cost.value(x)


@dataclass(frozen=True)
class Instance:
    """A full right-sizing problem over a finite horizon.

    Attributes:
        demand: length-T nonnegative demand series.
        beta: length-N per-data-center switching weights.
        costs: T x N grid of operational cost handles, indexed [t][i].
        offset: T x N nonnegative free-increase allowances.
        capacity: optional length-N positive bounds; absent means unbounded.
    """

    demand: np.ndarray
    beta: np.ndarray
    costs: tuple[tuple[OperationalCost, ...], ...]
    offset: np.ndarray
    capacity: np.ndarray | None = None

    def __post_init__(self):
        demand = np.asarray(self.demand, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        offset = np.asarray(self.offset, dtype=float)
        costs = tuple(tuple(row) for row in self.costs)
        if demand.ndim != 1 or beta.ndim != 1 or offset.ndim != 2:
            raise DimensionError("demand must be 1-D, beta 1-D, offset 2-D")
        t, n = demand.size, beta.size
        if offset.shape != (t, n):
            raise DimensionError(f"offset shape {offset.shape} != ({t}, {n})")
        if len(costs) != t or any(len(row) != n for row in costs):
            raise DimensionError("cost grid shape does not match (T, N)")
        if np.any(demand < 0):
            raise ValueError("demand must be nonnegative")
        if np.any(beta < 0):
            raise ValueError("switching weights must be nonnegative")
        if np.any(offset < 0):
            raise ValueError("offsets must be nonnegative")
        capacity = self.capacity
        if capacity is not None:
            capacity = np.asarray(capacity, dtype=float)
            if capacity.shape != (n,):
                raise DimensionError(f"capacity shape {capacity.shape} != ({n},)")
            if np.any(capacity <= 0):
                raise ValueError("capacities must be positive")
            if t > 0 and capacity.sum() < demand.max():
                raise InfeasibleError(
                    f"total capacity {capacity.sum()} below peak demand {demand.max()}"
                )
            capacity.setflags(write=False)
        for arr in (demand, beta, offset):
            arr.setflags(write=False)
        object.__setattr__(self, "demand", demand)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "capacity", capacity)

    @property
    def horizon(self) -> int:
        return self.demand.size

    @property
    def n_dc(self) -> int:
        return self.beta.size

    @cached_property
    def d_max(self) -> float:
        return float(self.demand.max()) if self.horizon else 0.0

    @cached_property
    def d_min(self) -> float:
        """Smallest strictly positive demand; 0.0 when demand is all zero."""
        positive = self.demand[self.demand > 0]
        return float(positive.min()) if positive.size else 0.0

    @cached_property
    def linear_rates(self) -> np.ndarray | None:
        """T x N unit-rate grid when every cost handle is linear, else None."""
        if not all(c.is_linear for row in self.costs for c in row):
            return None
        rates = np.array([[c.floor_rate for c in row] for row in self.costs])
        rates.setflags(write=False)
        return rates

    def with_beta(self, beta) -> "Instance":
        return Instance(self.demand, beta, self.costs, self.offset, self.capacity)

    def with_offset(self, offset) -> "Instance":
        return Instance(self.demand, self.beta, self.costs, offset, self.capacity)


@dataclass(frozen=True)
class Schedule:
    """A T x N assignment matrix; the slot-0 row is implicitly all zeros."""

    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if s.ndim != 2:
            raise DimensionError("schedule must be a T x N matrix")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "s", s)


@dataclass(frozen=True)
class CostBreakdown:
    """Operational, switching, and total cost with per-slot detail."""

    operational: float
    switching: float
    total: float
    per_slot: np.ndarray  # (T, 2) columns: operational_t, switching_t


def _check_schedule(instance: Instance, schedule: Schedule, feas_tol: float) -> None:
    s = schedule.s
    if s.shape != (instance.horizon, instance.n_dc):
        raise DimensionError(
            f"schedule shape {s.shape} != ({instance.horizon}, {instance.n_dc})"
        )
    for t in range(instance.horizon):
        if np.any(s[t] < -feas_tol):
            raise InfeasibleError(f"slot {t + 1}: negative assignment")
        if s[t].sum() < instance.demand[t] - feas_tol:
            raise InfeasibleError(
                f"slot {t + 1}: assigned {s[t].sum()} < demand {instance.demand[t]}"
            )
        if instance.capacity is not None and np.any(s[t] > instance.capacity + feas_tol):
            raise InfeasibleError(f"slot {t + 1}: capacity exceeded")


def evaluate_cost(
    instance: Instance, schedule: Schedule, feas_tol: float = 1e-9
) -> CostBreakdown:
    """Exact cost of a feasible schedule under an instance.

    The switching charge at slot t is ``beta_i * max(0, s_i(t) - s_i(t-1) -
    r_i(t))`` with a virtual all-zero slot-0 row; decreases are free.
    """
    _check_schedule(instance, schedule, feas_tol)
    s = schedule.s
    t_len = instance.horizon
    prev = np.vstack([np.zeros(instance.n_dc), s[:-1]]) if t_len else s
    jumps = np.clip(s - prev - instance.offset, 0.0, None)
    switching_t = jumps @ instance.beta
    rates = instance.linear_rates
    if rates is not None:
        operational_t = np.einsum("ti,ti->t", rates, s)
    else:
        operational_t = np.array(
            [
                sum(instance.costs[t][i].value(s[t, i]) for i in range(instance.n_dc))
                for t in range(t_len)
            ]
        )
    per_slot = np.column_stack([operational_t, switching_t]) if t_len else np.zeros((0, 2))
    operational = float(operational_t.sum())
    switching = float(switching_t.sum())
    return CostBreakdown(operational, switching, operational + switching, per_slot)


@dataclass(frozen=True)
class FloorRates:
    """Per-data-center linear lower-bound slopes and their global minimum.

    ``vacuous`` is set when the global floor is zero (for example with purely
    quadratic costs, whose unit cost vanishes near zero load), in which case
    multiplicative guarantees built on the floor carry no information.
    """

    per_dc: np.ndarray
    overall: float
    vacuous: bool


def unit_cost_floor(instance: Instance, grid: int = 64) -> FloorRates:
    """Largest slopes e_i with cost(x) >= e_i * x on (0, d_max], per data center.

    Linear kinds admit a closed form (the minimum unit rate over slots);
    other kinds are handled by a geometric grid over (0, d_max] together with
    the right derivative at zero, which is the exact infimum for convex costs
    that vanish at zero.
    """
    n = instance.n_dc
    d_max = instance.d_max
    per_dc = np.zeros(n)
    for i in range(n):
        best = math.inf
        for t in range(instance.horizon):
            cost = instance.costs[t][i]
            if cost.is_linear or d_max <= 0:
                best = min(best, cost.floor_rate)
                continue
            x_hi = min(d_max, cost.domain_max * (1 - 1e-9))
            best = min(best, cost.derivative(0.0))
            for x in np.geomspace(max(x_hi * 1e-6, 1e-12), x_hi, grid):
                best = min(best, cost.value(x) / x)
        per_dc[i] = 0.0 if best == math.inf else best
    overall = float(per_dc.min()) if n else 0.0
    return FloorRates(per_dc, overall, vacuous=overall <= 0.0)
