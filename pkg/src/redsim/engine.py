"""Stochastic reduction engine: hazards, hits, reductions, trajectories.

Probability enters only through current flow.  Per step, the mass that
flowed into reduction-eligible components is the unconditional chance that
the stochastic choice landed there during that step; dividing by the mass
not yet consumed since the last reduction turns it into the per-step
conditional probability the sampler needs.  That bookkeeping is what makes
ensemble branch frequencies reproduce the branch square moduli exactly,
with no renormalization anywhere: after a reduction the denominator simply
becomes the surviving weight.

This module is the readable reference implementation; the ensemble layer
drives a compiled kernel that mirrors it step for step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dynamics import (
    EPS_DEPLETED,
    InteractionEdge,
    StepTooLargeError,
    SystemState,
    classify_phantom,
    net_current,
    rate_open_after,
    step,
)
from .labels import (
    BrainFactor,
    BrainMode,
    Component,
    ComponentLabel,
    canonicalize,
    conscious_states,
    promote,
    render,
    unconscious_state,
)
from .scenarios import (
    CompiledScenario,
    SiteAllocator,
    TriggerScope,
    epoch_closure,
    outcome_tag_for,
    unresolved_engaged,
)

#: hazard  below which a run is considered quiescent at the horizon
HAZARD_FLOOR = 1e-9

#: remaining unconsumed mass below which step control stops complaining
MASS_FLOOR = 1e-6


class IllegalReductionError(RuntimeError):
    """Reduction requested on a component outside the eligible set."""


class HorizonExceededError(RuntimeError):
    """The horizon arrived with live hazard and an unresolved observer."""

    def __init__(self, message: str, run_index: int | None = None):
        super().__init__(message)
        self.run_index = run_index


# --- reproducible random streams -------------------------------------------

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK
    z ^= z >> 30
    z = (z * _MIX1) & _MASK
    z ^= z >> 27
    z = (z * _MIX2) & _MASK
    z ^= z >> 31
    return z


def stream_state(master_seed: int, run_index: int) -> int:
    """Initial generator state for one (seed, run) pair."""
    base = _mix(master_seed & _MASK)
    return _mix((base + _mix((run_index + 1) & _MASK)) & _MASK)


class RandomStream:
    """Counter-based uniform stream, identical across thread placements.

    The pair (master seed, run index) fully determines the draw sequence,
    so a trajectory replays bit-identically no matter where or when it
    executes.  The compiled ensemble kernel advances the same integer
    recurrence.
    """

    __slots__ = ("master_seed", "run_index", "state")

    def __init__(self, master_seed: int, run_index: int = 0):
        self.master_seed = master_seed
        self.run_index = run_index
        self.state = stream_state(master_seed, run_index)

    def next(self) -> float:
        """Uniform double in [0, 1)."""
        self.state = (self.state + _GAMMA) & _MASK
        return (_mix(self.state) >> 11) * 2.0**-53


class NeverHit:
    """Stand-in stream whose draws never trigger a hit (flow-only runs)."""

    def next(self) -> float:
        return 1.0


# --- events and outcomes ----------------------------------------------------

@dataclass(frozen=True)
class ReductionEvent:
    """One stochastic hit: when, what was chosen, and what it did."""

    t: float
    chosen: ComponentLabel
    pre_hit_weights: dict
    conscioused: tuple[str, ...]
    surviving_weight: float
    no_op: bool = False


@dataclass
class AuditCounters:
    """Per-trajectory rule-violation tallies; all zero in a healthy run."""

    conservation_violations: int = 0
    multi_conscious: int = 0
    phantom_motion: int = 0
    max_conservation_dev: float = 0.0
    max_phantom_drift: float = 0.0

    def total(self) -> int:
        return (
            self.conservation_violations + self.multi_conscious + self.phantom_motion
        )


@dataclass(frozen=True)
class TrajectoryOutcome:
    final_state: SystemState
    events: tuple[ReductionEvent, ...]
    outcome_tag: str
    terminated_at: float
    audit: AuditCounters | None = None

    def reductions(self) -> tuple[ReductionEvent, ...]:
        return tuple(e for e in self.events if not e.no_op)


# --- the core operations ----------------------------------------------------

def eligible_set(
    state: SystemState,
    edges: list[InteractionEdge],
    t: float,
    scope: TriggerScope = TriggerScope.READY_ONLY,
) -> list[tuple[ComponentLabel, float]]:
    """Components a stochastic choice may land on right now.

    Positive net current and not a phantom; under the default scope the
    component must also hold at least one ready brain state, since a
    trigger without one has no consequence.
    """
    out = []
    for label in sorted(state.components, key=lambda l: l.sort_key()):
        comp = state.components[label]
        if scope is TriggerScope.READY_ONLY and not label.has_mode(BrainMode.READY):
            continue
        j = net_current(label, edges, state, t)
        if j <= 0.0:
            continue
        if classify_phantom(state, comp, edges, t):
            continue
        out.append((label, j))
    return out


def hazard(
    state: SystemState,
    edges: list[InteractionEdge],
    t: float,
    scope: TriggerScope = TriggerScope.READY_ONLY,
) -> float:
    """Instantaneous reduction rate: positive eligible currents over s."""
    if state.s <= 0:
        raise ValueError("state denominator must be positive")
    return sum(j for _, j in eligible_set(state, edges, t, scope)) / state.s


def sample_hit(
    state: SystemState,
    edges: list[InteractionEdge],
    t: float,
    dt: float,
    rng,
    scope: TriggerScope = TriggerScope.READY_ONLY,
) -> ComponentLabel | None:
    """One Bernoulli trial for a stochastic choice during [t, t+dt].

    Always consumes exactly two draws, hit or not, so downstream draws
    stay aligned across replays.  The per-step probability is the eligible
    inflow conditioned on the hit mass not yet consumed this epoch; the
    returned component is drawn proportionally to its positive net
    current.
    """
    elig = eligible_set(state, edges, t, scope)
    total_j = sum(j for _, j in elig)
    lam = total_j / state.s
    remaining = 1.0 - state.consumed
    p = 1.0 if remaining <= 0.0 and lam > 0.0 else lam * dt / max(remaining, 1e-300)
    p = min(p, 1.0)
    if p > 0.01 and remaining > MASS_FLOOR:
        raise StepTooLargeError(
            f"hit probability {p:.4f} per step exceeds 0.01; halve dt"
        )
    u_hit = rng.next()
    u_pick = rng.next()
    if not elig or u_hit >= p:
        return None
    threshold = u_pick * total_j
    acc = 0.0
    for label, j in elig:
        acc += j
        if threshold < acc:
            return label
    return elig[-1][0]


def reduce(state: SystemState, chosen: ComponentLabel, t: float) -> SystemState:
    """Collapse onto ``chosen``: its ready states become conscious, all
    other components drop to zero, and the denominator becomes the
    surviving weight.  No renormalization happens, ever.
    """
    comp = state.components.get(chosen)
    if comp is None:
        raise IllegalReductionError(f"{render(chosen)} is not a live component")
    promoted, flipped = promote(chosen)
    if not flipped:
        raise IllegalReductionError(
            f"{render(chosen)} holds no ready brain state to make conscious"
        )
    survivor = Component(promoted, comp.weight, created_at=t)
    history = None
    if state.history is not None:
        old = state.history.get(chosen)
        times = list(old[0]) if old else [t]
        weights = list(old[1]) if old else [comp.weight]
        history = {promoted: (times, weights)}
    return SystemState(
        {promoted: survivor},
        s=comp.weight,
        t=t,
        t0=state.t0,
        consumed=0.0,
        history=history,
    )


def _refresh_phantoms(
    state: SystemState, edges: list[InteractionEdge], t: float
) -> None:
    for label, comp in list(state.components.items()):
        flag = classify_phantom(state, comp, edges, t)
        if flag != comp.phantom:
            state.components[label] = Component(
                label, comp.weight, phantom=flag, created_at=comp.created_at
            )


def _ensure_closure_components(state: SystemState, labels) -> None:
    for label in labels:
        if label not in state.components:
            state.components[label] = Component(label, 0.0, created_at=state.t)
            if state.history is not None:
                state.history[label] = ([state.t], [0.0])


def _merge_unconscious(state: SystemState, observer: str) -> SystemState:
    """Fold the unconscious drift branches into one component.

    After the decisive exit the site distinctions no longer matter: the
    branches share their wave and detector factors, so they sum into a
    single component with the plain unconscious state.
    """
    merged: dict[ComponentLabel, Component] = {}
    for label, comp in state.components.items():
        factor = label.brain(observer)
        if factor is not None and factor.mode is BrainMode.UNCONSCIOUS:
            plain = BrainFactor(observer, unconscious_state(), BrainMode.UNCONSCIOUS)
            new_label = canonicalize(
                [plain if f is factor else f for f in label.factors]
            )
            prev = merged.get(new_label)
            weight = comp.weight + (prev.weight if prev else 0.0)
            merged[new_label] = Component(new_label, weight, created_at=comp.created_at)
        else:
            prev = merged.get(label)
            if prev is None:
                merged[label] = comp
            else:  # pragma: no cover - defensive
                merged[label] = Component(
                    label, comp.weight + prev.weight, comp.phantom, comp.created_at
                )
    return SystemState(
        merged, state.s, state.t, t0=state.t0, consumed=state.consumed, history=None
    )


def _audit_step(
    state: SystemState,
    prev_weights: dict[ComponentLabel, float],
    prev_phantoms: set[ComponentLabel],
    counters: AuditCounters,
) -> None:
    total = state.total_weight()
    dev = abs(total - state.s) / state.s if state.s > 0 else abs(total)
    counters.max_conservation_dev = max(counters.max_conservation_dev, dev)
    if dev > 1e-9:
        counters.conservation_violations += 1
    per_observer = conscious_states(state.components.keys())
    if any(len(states) > 1 for states in per_observer.values()):
        counters.multi_conscious += 1
    for label in prev_phantoms:
        comp = state.components.get(label)
        if comp is None:
            continue
        drift = abs(comp.weight - prev_weights.get(label, comp.weight))
        counters.max_phantom_drift = max(counters.max_phantom_drift, drift)
        if drift > 1e-11 * max(state.s, 1.0):
            counters.phantom_motion += 1


def _conscious_component(state: SystemState) -> ComponentLabel | None:
    best = None
    best_w = -1.0
    for label in sorted(state.components, key=lambda l: l.sort_key()):
        if label.has_mode(BrainMode.CONSCIOUS):
            w = state.components[label].weight
            if w > best_w:
                best, best_w = label, w
    return best


def run_trajectory(
    scn: CompiledScenario,
    rng,
    *,
    scope: TriggerScope | None = None,
    audit: bool = False,
    on_step=None,
) -> TrajectoryOutcome:
    """Execute one full trajectory on the reference engine.

    Alternates deterministic flow steps with hit sampling on a fixed grid;
    each reduction re-derives the channel set from the survivor so the
    system renews itself.  ``on_step(state, edges, lam)`` is invoked after
    every accepted step, which is how traces get written.

    Raises :class:`HorizonExceededError` when the horizon arrives while
    hazard is still live and an engaged observer never resolved; that
    means the scenario's horizon is too short.
    """
    scope = scn.scope if scope is None else scope
    track = scn.max_latency() > 0 or on_step is not None
    sites = SiteAllocator()
    state = SystemState.initial(list(scn.initial), scn.t0, track_history=track)
    labels, edges = epoch_closure(scn, [c.label for c in scn.initial], scn.t0, sites)
    _ensure_closure_components(state, labels)
    _refresh_phantoms(state, edges, scn.t0)

    counters = AuditCounters() if audit else None
    events: list[ReductionEvent] = []
    exited = False
    exit_spec = scn.unconscious_drift()
    dt = scn.dt
    steps_total = scn.grid_steps()
    if on_step is not None:
        on_step(state, edges, hazard(state, edges, state.t, scope))

    k = 0
    while k < steps_total:
        # keep times on the exact grid so replays and the compiled kernel
        # evaluate every rate window with identical floats
        t = scn.t0 + k * dt
        state.t = t
        # nothing can ever flow or trigger again: the run is over
        if not edges or (
            not any(rate_open_after(e.rate, t) for e in edges)
            and not eligible_set(state, edges, t, scope)
        ):
            break
        candidates = []
        for label in sorted(state.components, key=lambda l: l.sort_key()):
            comp = state.components[label]
            if scope is TriggerScope.READY_ONLY and not label.has_mode(
                BrainMode.READY
            ):
                continue
            if comp.phantom:
                continue
            candidates.append(label)
        prev_weights = {l: c.weight for l, c in state.components.items()}
        prev_phantoms = {l for l, c in state.components.items() if c.phantom}
        state = step(state, edges, dt)
        state.t = scn.t0 + (k + 1) * dt
        masses = []
        total_mass = 0.0
        for label in candidates:
            dw = state.components[label].weight - prev_weights.get(label, 0.0)
            if dw > 0.0:
                masses.append((label, dw))
                total_mass += dw
        dlam = total_mass / state.s
        remaining = 1.0 - state.consumed
        if remaining <= 0.0:
            p = 1.0 if dlam > 0.0 else 0.0
        else:
            p = min(dlam / remaining, 1.0)
        if p > 0.01 and remaining > MASS_FLOOR:
            raise StepTooLargeError(
                f"hit probability {p:.4f} per step exceeds 0.01 at t={t:.3f}"
            )
        u_hit = rng.next()
        u_pick = rng.next()
        k += 1
        if u_hit < p and masses:
            threshold = u_pick * total_mass
            acc = 0.0
            chosen = masses[-1][0]
            for label, m in masses:
                acc += m
                if threshold < acc:
                    chosen = label
                    break
            t_hit = state.t
            pre_hit = {l: c.weight for l, c in state.components.items()}
            if chosen.has_mode(BrainMode.READY):
                _, flipped = promote(chosen)
                events.append(
                    ReductionEvent(
                        t_hit, chosen, pre_hit, flipped, pre_hit[chosen], False
                    )
                )
                state = reduce(state, chosen, t_hit)
                labels, edges = epoch_closure(
                    scn, list(state.components), t_hit, sites
                )
                _ensure_closure_components(state, labels)
            else:
                events.append(
                    ReductionEvent(t_hit, chosen, pre_hit, (), pre_hit[chosen], True)
                )
                state.consumed += dlam
        else:
            state.consumed += dlam
        _refresh_phantoms(state, edges, state.t)
        if counters is not None:
            _audit_step(state, prev_weights, prev_phantoms, counters)
        if on_step is not None:
            on_step(state, edges, hazard(state, edges, state.t, scope))
        if exit_spec is not None and not exited:
            conscious = _conscious_component(state)
            if (
                conscious is None
                or state.components[conscious].weight < EPS_DEPLETED
            ):
                exited = True
                state = _merge_unconscious(state, exit_spec.observer)
                break

    if state.t >= scn.horizon - 1e-12:
        lam_end = hazard(state, edges, state.t, scope)
        if lam_end > HAZARD_FLOOR and unresolved_engaged(list(state.components)):
            raise HorizonExceededError(
                f"horizon {scn.horizon} reached with live hazard {lam_end:.3g} "
                "and an unresolved observer"
            )

    tag = outcome_tag_for(_conscious_component(state), scn, exited)
    return TrajectoryOutcome(
        final_state=state,
        events=tuple(events),
        outcome_tag=tag,
        terminated_at=state.t,
        audit=counters,
    )


def integrated_eligible_inflow(scn: CompiledScenario, scope=None) -> float:
    """Total hit mass a flow-only run accumulates over the whole horizon.

    Runs the deterministic dynamics with a never-hitting stream and
    returns the consumed-mass integral; for a scenario whose engaged
    observer must resolve, this integral is one.
    """
    outcome = run_trajectory(scn, NeverHit(), scope=scope)
    return outcome.final_state.consumed
