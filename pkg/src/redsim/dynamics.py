"""Deterministic weight flow between stochastic events.

Edge currents follow a linear drain law: an edge moves weight from its
source to its target at ``rate(t) * source_weight(t - latency)``.  Between
reduction events the flow conserves the total weight exactly, which is what
lets the stochastic layer read accumulated inflow as probability.

Integration is fixed-step classical Runge-Kutta; latency is honored through
a per-label weight history sampled at step resolution with linear
interpolation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .labels import (
    BrainMode,
    Component,
    ComponentLabel,
    render,
    rule4_allows,
)

#: weight below which a source counts as depleted for phantom classification
EPS_DEPLETED = 1e-12

#: maximum relative weight drain allowed in one step
MAX_REL_STEP = 0.05


class ForbiddenEdgeError(ValueError):
    """Attempted to build an edge between two ready states of one observer."""


class StepTooLargeError(RuntimeError):
    """Step control bound exceeded; the caller must halve dt."""


class MissingHistoryError(RuntimeError):
    """A latency lookback fell outside the recorded weight history."""


class EdgeKind(enum.Enum):
    PRIMARY = "primary"
    PHYSIOLOGICAL = "physiological"
    DRIFT = "drift"


@dataclass(frozen=True)
class Const:
    k: float

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("rate must be nonnegative")


@dataclass(frozen=True)
class Window:
    k: float
    start: float
    end: float  # math.inf allowed

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("rate must be nonnegative")
        if not self.start < self.end:
            raise ValueError("window start must precede its end")


@dataclass(frozen=True)
class Pulse:
    """Rectangular pulse of height k centered on ``center``."""

    k: float
    center: float
    width: float

    def __post_init__(self):
        if self.k < 0 or self.width <= 0:
            raise ValueError("pulse needs k >= 0 and width > 0")


RateFunction = Const | Window | Pulse


def rate_at(rate: RateFunction, t: float) -> float:
    """Evaluate a rate function; zero outside its window."""
    if isinstance(rate, Const):
        return rate.k
    if isinstance(rate, Window):
        return rate.k if rate.start <= t < rate.end else 0.0
    half = rate.width / 2.0
    return rate.k if rate.center - half <= t < rate.center + half else 0.0


def rate_open_after(rate: RateFunction, t: float) -> bool:
    """Whether the rate can still be nonzero at any time >= t."""
    if isinstance(rate, Const):
        return rate.k > 0
    if isinstance(rate, Window):
        return rate.k > 0 and t < rate.end
    return rate.k > 0 and t < rate.center + rate.width / 2.0


def rate_window_end(rate: RateFunction) -> float:
    if isinstance(rate, Const):
        return math.inf
    if isinstance(rate, Window):
        return rate.end
    return rate.center + rate.width / 2.0


@dataclass(frozen=True)
class InteractionEdge:
    """Directed weight-transfer channel between two component labels."""

    source: ComponentLabel
    target: ComponentLabel
    rate: RateFunction
    kind: EdgeKind
    latency: float = 0.0

    def __post_init__(self):
        if not rule4_allows(self.source, self.target):
            raise ForbiddenEdgeError(
                f"forbidden edge {render(self.source)} -> {render(self.target)}: "
                "both ends hold a ready state of the same observer"
            )
        if self.latency < 0:
            raise ValueError("latency must be nonnegative")
        if self.latency > 0 and self.kind is not EdgeKind.PHYSIOLOGICAL:
            raise ValueError("latency is only meaningful on physiological edges")


class SystemState:
    """Live component set plus the bookkeeping the stochastic layer needs.

    ``s`` is the reduction-rate denominator: the total square modulus of
    the isolated system, reset to the surviving weight at each reduction
    and never renormalized.  ``consumed`` accumulates the hit mass already
    spent since the last reduction.  ``history`` (optional) records one
    (t, weight) sample per accepted step per label, for latency lookbacks
    and traces.
    """

    __slots__ = ("components", "s", "t", "t0", "consumed", "history")

    def __init__(
        self,
        components: dict[ComponentLabel, Component],
        s: float,
        t: float,
        t0: float | None = None,
        consumed: float = 0.0,
        history: dict[ComponentLabel, tuple[list[float], list[float]]] | None = None,
    ):
        self.components = components
        self.s = s
        self.t = t
        self.t0 = t if t0 is None else t0
        self.consumed = consumed
        self.history = history

    @classmethod
    def initial(
        cls, components: list[Component], t0: float, track_history: bool = False
    ) -> "SystemState":
        comp = {c.label: c for c in components}
        total = sum(c.weight for c in components)
        history = None
        if track_history:
            history = {c.label: ([t0], [c.weight]) for c in components}
        return cls(comp, total, t0, t0=t0, history=history)

    def weight(self, label: ComponentLabel) -> float:
        c = self.components.get(label)
        return 0.0 if c is None else c.weight

    def total_weight(self) -> float:
        return sum(c.weight for c in self.components.values())

    def weight_at(self, label: ComponentLabel, t_query: float) -> float:
        """Historical weight via linear interpolation; zero before creation."""
        if t_query <= self.t0:
            return 0.0 if t_query < self.t0 else self._initial_weight(label)
        if t_query >= self.t:
            return self.weight(label)
        if self.history is None:
            raise MissingHistoryError(
                "latency lookback requires history tracking on this state"
            )
        series = self.history.get(label)
        if series is None:
            return 0.0
        times, weights = series
        if not times or t_query < times[0]:
            return 0.0
        # binary search for the bracketing samples
        lo, hi = 0, len(times) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if times[mid] <= t_query:
                lo = mid
            else:
                hi = mid - 1
        if lo == len(times) - 1:
            return weights[lo]
        t_a, t_b = times[lo], times[lo + 1]
        w_a, w_b = weights[lo], weights[lo + 1]
        if t_b == t_a:
            return w_b
        frac = (t_query - t_a) / (t_b - t_a)
        return w_a + frac * (w_b - w_a)

    def _initial_weight(self, label: ComponentLabel) -> float:
        if self.history is not None:
            series = self.history.get(label)
            if series and series[0] and series[0][0] == self.t0:
                return series[1][0]
        c = self.components.get(label)
        if c is not None and c.created_at <= self.t0:
            return c.weight if self.t == self.t0 else 0.0
        return 0.0


def edge_current(edge: InteractionEdge, state: SystemState, t: float) -> float:
    """Instantaneous probability current carried by one edge.

    ``rate(t) * source_weight(t - latency)``; zero when the source is
    absent, marked phantom, or the rate window is closed.
    """
    k = rate_at(edge.rate, t)
    if k == 0.0:
        return 0.0
    src = state.components.get(edge.source)
    if src is None or src.phantom:
        return 0.0
    if edge.latency == 0.0:
        w = src.weight if t >= state.t else state.weight_at(edge.source, t)
    else:
        w = state.weight_at(edge.source, t - edge.latency)
    return k * w


def net_current(
    label: ComponentLabel, edges: list[InteractionEdge], state: SystemState, t: float
) -> float:
    """Net probability current into ``label``: inflow minus outflow."""
    j = 0.0
    for e in edges:
        if e.target == label:
            j += edge_current(e, state, t)
        if e.source == label:
            j -= edge_current(e, state, t)
    return j


def classify_phantom(
    state: SystemState,
    component: Component,
    edges: list[InteractionEdge],
    t: float,
) -> bool:
    """Whether a component's weight has permanently stopped meaning anything.

    True when the component holds no conscious factor and every channel
    touching it is permanently dead: the rate window has closed, or the
    channel's source sits below the depletion threshold with no live
    inflow of its own.  A component that can still emit or receive later
    (an unopened window counts as alive) is not a phantom.
    """
    label = component.label
    if label.has_mode(BrainMode.CONSCIOUS):
        return False

    def source_starved(src_label: ComponentLabel) -> bool:
        src = state.components.get(src_label)
        w = 0.0 if src is None else src.weight
        if w >= EPS_DEPLETED:
            return False
        return all(
            not rate_open_after(e.rate, t) for e in edges if e.target == src_label
        )

    def dead(e: InteractionEdge) -> bool:
        return not rate_open_after(e.rate, t) or source_starved(e.source)

    for e in edges:
        if e.target == label and not dead(e):
            return False
        if e.source == label and not dead(e):
            return False
    return True


def _ensure_targets(
    state: SystemState, edges: list[InteractionEdge]
) -> dict[ComponentLabel, Component]:
    """Create weight-zero entries for edge endpoints not yet present."""
    components = dict(state.components)
    for e in edges:
        for label in (e.source, e.target):
            if label not in components:
                assert rule4_allows(e.source, e.target)
                components[label] = Component(label, 0.0, created_at=state.t)
    return components


def _derivative(
    order: list[ComponentLabel],
    index: dict[ComponentLabel, int],
    weights: list[float],
    edges: list[InteractionEdge],
    state: SystemState,
    t: float,
) -> list[float]:
    dw = [0.0] * len(order)
    for e in edges:
        k = rate_at(e.rate, t)
        if k == 0.0:
            continue
        si = index[e.source]
        if e.latency == 0.0:
            w_src = weights[si]
        else:
            w_src = state.weight_at(e.source, t - e.latency)
        j = k * w_src
        dw[si] -= j
        dw[index[e.target]] += j
    return dw


def step(
    state: SystemState, edges: list[InteractionEdge], dt: float
) -> SystemState:
    """Advance all weights by one RK4 step of the current-flow equations.

    Components referenced by edges but absent are created at weight zero.
    The step conserves total weight to rounding; a drain exceeding the
    relative step bound raises :class:`StepTooLargeError` so the caller can
    halve dt.  Latencies must be zero or at least dt so that delayed
    lookups stay in recorded history.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    for e in edges:
        if 0.0 < e.latency < dt:
            raise StepTooLargeError(
                f"latency {e.latency} shorter than dt {dt}; halve dt"
            )
    components = _ensure_targets(state, edges)
    order = sorted(components, key=lambda l: l.sort_key())
    index = {label: i for i, label in enumerate(order)}
    w0 = [components[l].weight for l in order]
    t = state.t

    k1 = _derivative(order, index, w0, edges, state, t)
    w_k2 = [w0[i] + 0.5 * dt * k1[i] for i in range(len(w0))]
    k2 = _derivative(order, index, w_k2, edges, state, t + 0.5 * dt)
    w_k3 = [w0[i] + 0.5 * dt * k2[i] for i in range(len(w0))]
    k3 = _derivative(order, index, w_k3, edges, state, t + 0.5 * dt)
    w_k4 = [w0[i] + dt * k3[i] for i in range(len(w0))]
    k4 = _derivative(order, index, w_k4, edges, state, t + dt)

    w1 = [
        w0[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(len(w0))
    ]
    for i, label in enumerate(order):
        if w1[i] < 0.0:
            if w1[i] < -1e-12 * max(state.s, 1.0):
                raise StepTooLargeError(
                    f"weight of {render(label)} went negative; halve dt"
                )
            w1[i] = 0.0
        drop = w0[i] - w1[i]
        if drop > MAX_REL_STEP * w0[i] and w0[i] > 1e-9 * max(state.s, 1.0):
            raise StepTooLargeError(
                f"relative drain of {render(label)} exceeds {MAX_REL_STEP}; halve dt"
            )

    new_components = {
        label: replace(components[label], weight=w1[i])
        for i, label in enumerate(order)
    }
    history = state.history
    if history is not None:
        for i, label in enumerate(order):
            series = history.get(label)
            if series is None:
                series = ([], [])
                history[label] = series
            series[0].append(t + dt)
            series[1].append(w1[i])
    return SystemState(
        new_components,
        state.s,
        t + dt,
        t0=state.t0,
        consumed=state.consumed,
        history=history,
    )
