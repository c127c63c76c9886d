"""Scenario catalog: builders, parameters, and edge derivation.

A compiled scenario is the initial component set plus interaction
templates (capture, observer engagement, attention drift) and run
settings.  Templates are expanded into concrete edges by
:func:`epoch_closure`, which is re-run from the surviving component after
every reduction so the system renews itself with the right channels.

Catalog kinds cover the standard situations: a bare detector, observers
on board from the start or arriving mid-run or after the fact, a second
observer looking over the first one's shoulder, attention drifting among
neighboring brain states (or out of consciousness entirely), a co-observer
watching a second scintillation area, and a multi-particle wave.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .dynamics import (
    EdgeKind,
    InteractionEdge,
    Window,
    rate_open_after,
)
from .labels import (
    BrainFactor,
    BrainMode,
    Component,
    ComponentLabel,
    DetectorState,
    ParticleWave,
    UNKNOWN_STATE,
    after_capture,
    canonicalize,
    drift_target,
    engage_observer,
    particle_balance_ok,
    render,
    rule4_allows,
    seen_state,
)


class ScenarioBuildError(ValueError):
    """Scenario parameters are inconsistent or out of range."""


class NoOracleError(LookupError):
    """No closed-form branch weights exist for this scenario kind."""


class TriggerScope(enum.Enum):
    READY_ONLY = "ready_only"
    ALL_POSITIVE = "all_positive"


class ScenarioKind(enum.Enum):
    BARE = "bare"
    CONTINUOUS_OBSERVER = "continuous-observer"
    TERMINAL_OBSERVER = "terminal-observer"
    INTERMEDIATE_OBSERVER = "intermediate-observer"
    OUTSIDE_TERMINAL = "outside-terminal"
    INTERMEDIATE_OUTSIDE = "intermediate-outside"
    DRIFT = "drift"
    DRIFTING_AWAY = "drifting-away"
    CO_OBSERVER = "co-observer"
    MULTI_PARTICLE = "multi-particle"


KIND_DESCRIPTIONS = {
    ScenarioKind.BARE: "two-component capture interaction with nobody watching",
    ScenarioKind.CONTINUOUS_OBSERVER: "one observer watching from the start",
    ScenarioKind.TERMINAL_OBSERVER: "observer looks only after the interaction ends",
    ScenarioKind.INTERMEDIATE_OBSERVER: "observer starts watching mid-interaction",
    ScenarioKind.OUTSIDE_TERMINAL: "second observer arrives after the window closes",
    ScenarioKind.INTERMEDIATE_OUTSIDE: "second observer arrives mid-interaction",
    ScenarioKind.DRIFT: "watching observer's attention drifts among neighbor states",
    ScenarioKind.DRIFTING_AWAY: "observer drifts into unconsciousness while watching",
    ScenarioKind.CO_OBSERVER: "two observers watch separate scintillation areas",
    ScenarioKind.MULTI_PARTICLE: "two-particle wave over a two-area detector",
}


@dataclass(frozen=True)
class ObserverRole:
    """One observer: what it watches and when it couples to the detector.

    ``arrival`` None means conscious of the detector from the start;
    otherwise the observer sits in the unknown state until its
    physiological channel opens at ``arrival``.
    """

    name: str
    detector: str
    area: int = 0
    arrival: float | None = None
    physio_rate: float = 2.0
    latency: float = 0.0


@dataclass(frozen=True)
class DriftSpec:
    """Stochastic migration of one observer's conscious state."""

    observer: str
    rate: float
    neighbors: int
    start: float = 0.0
    unconscious: bool = False


@dataclass(frozen=True)
class PrimarySpec:
    """Particle-detector capture channel; one rate per scintillation area.

    The per-component rate is ``area_rate * particles remaining``.
    """

    wave: str
    detector: str
    area_rates: tuple[float, ...]
    window: tuple[float, float]


@dataclass(frozen=True)
class ScenarioParams:
    """Tunable scenario parameters; None fields resolve to kind defaults."""

    primary_rate: float = 0.1
    window: tuple[float, float] = (0.0, 10.0)
    physio_rate: float = 2.0
    latency: float = 0.0
    observe_times: tuple[tuple[str, float], ...] | None = None
    drift_rate: float | None = None
    drift_neighbors: int = 3
    drift_start: float = 0.0
    area_rates: tuple[float, ...] | None = None
    particles: int = 1
    horizon: float | None = None
    dt: float | None = None
    scope: TriggerScope = TriggerScope.READY_ONLY

    def observe_time(self, name: str, default: float) -> float:
        if self.observe_times:
            for obs, t in self.observe_times:
                if obs == name:
                    return t
        return default


#: per-kind (horizon, default arrival map, drift rate)
_KIND_HORIZON = {
    ScenarioKind.BARE: 12.0,
    ScenarioKind.CONTINUOUS_OBSERVER: 12.0,
    ScenarioKind.TERMINAL_OBSERVER: 30.0,
    ScenarioKind.INTERMEDIATE_OBSERVER: 30.0,
    ScenarioKind.OUTSIDE_TERMINAL: 30.0,
    ScenarioKind.INTERMEDIATE_OUTSIDE: 30.0,
    ScenarioKind.DRIFT: 15.0,
    ScenarioKind.DRIFTING_AWAY: 15.0,
    ScenarioKind.CO_OBSERVER: 12.0,
    ScenarioKind.MULTI_PARTICLE: 12.0,
}

DEFAULT_DT = 1e-3
CATALOG_DT = 2e-3
DEFAULT_SEED = 1
DEFAULT_RUNS = 10000

WAVE = "psi"
DETECTOR = "D"
PRIMARY_OBSERVER = "alice"
SECOND_OBSERVER = "bob"


@dataclass(frozen=True)
class CompiledScenario:
    """Everything a trajectory needs: initial state, templates, settings."""

    scenario_id: str
    initial: tuple[Component, ...]
    waves: tuple[tuple[str, int], ...]       # (name, particle total)
    detectors: tuple[tuple[str, int], ...]   # (name, area count)
    observers: tuple[ObserverRole, ...]
    primaries: tuple[PrimarySpec, ...]
    drifts: tuple[DriftSpec, ...]
    explicit_edges: tuple[InteractionEdge, ...] = ()
    t0: float = 0.0
    dt: float = DEFAULT_DT
    horizon: float = 12.0
    scope: TriggerScope = TriggerScope.READY_ONLY
    seed: int = DEFAULT_SEED
    runs: int = DEFAULT_RUNS

    def observer(self, name: str) -> ObserverRole | None:
        for o in self.observers:
            if o.name == name:
                return o
        return None

    def watched_areas(self) -> dict[str, int]:
        return {o.name: o.area for o in self.observers}

    def detector_areas(self, name: str) -> int:
        for d, areas in self.detectors:
            if d == name:
                return areas
        raise KeyError(name)

    def particle_total(self, wave: str) -> int:
        for w, n in self.waves:
            if w == wave:
                return n
        raise KeyError(wave)

    def unconscious_drift(self) -> DriftSpec | None:
        for d in self.drifts:
            if d.unconscious:
                return d
        return None

    def max_latency(self) -> float:
        return max((o.latency for o in self.observers), default=0.0)

    def grid_steps(self) -> int:
        steps = (self.horizon - self.t0) / self.dt
        return int(round(steps))

    def regime_boundaries(self) -> tuple[float, ...]:
        """Times at which some rate window opens or closes."""
        times = {self.t0, self.horizon}
        for p in self.primaries:
            times.update(p.window)
        for o in self.observers:
            if o.arrival is not None:
                times.add(o.arrival)
        for d in self.drifts:
            times.add(d.start)
        for e in self.explicit_edges:
            if isinstance(e.rate, Window):
                times.add(e.rate.start)
                if math.isfinite(e.rate.end):
                    times.add(e.rate.end)
        return tuple(sorted(t for t in times if self.t0 <= t <= self.horizon))


class SiteAllocator:
    """Deterministic supply of fresh drift-site suffixes: a, b, ..., z, aa, ..."""

    def __init__(self):
        self._next = 0

    def take(self, count: int) -> list[str]:
        out = []
        for _ in range(count):
            out.append(_site_name(self._next))
            self._next += 1
        return out


def _site_name(index: int) -> str:
    name = ""
    index += 1
    while index > 0:
        index, rem = divmod(index - 1, 26)
        name = chr(ord("a") + rem) + name
    return name


# --- edge derivation -------------------------------------------------------

def _candidate_edges(
    scn: CompiledScenario,
    label: ComponentLabel,
    now: float,
    sites: SiteAllocator,
) -> list[InteractionEdge]:
    """Template-generated channels out of one component.

    Channels whose transfer would put a ready state of one observer at
    both ends are silently withheld; that is the forbidden-transition rule
    doing its job, not an error.  Windows already closed at ``now`` are
    skipped: they can never carry current in this epoch.
    """
    out: list[InteractionEdge] = []
    watched = scn.watched_areas()
    for spec in scn.primaries:
        wave = label.wave()
        det = label.detector(spec.detector)
        if wave is None or wave.label != spec.wave or wave.remaining < 1:
            continue
        if det is None:
            continue
        rate_scale = wave.remaining
        for area, k in enumerate(spec.area_rates):
            if k <= 0:
                continue
            rate = Window(k * rate_scale, spec.window[0], spec.window[1])
            if not rate_open_after(rate, now):
                continue
            target = after_capture(label, spec.detector, area, watched)
            if rule4_allows(label, target):
                out.append(InteractionEdge(label, target, rate, EdgeKind.PRIMARY))
    for obs in scn.observers:
        if obs.arrival is None:
            continue
        factor = label.brain(obs.name)
        if factor is None or factor.mode is not BrainMode.UNKNOWN:
            continue
        if label.detector(obs.detector) is None:
            continue
        rate = Window(obs.physio_rate, obs.arrival, math.inf)
        if not rate_open_after(rate, now):
            continue
        target = engage_observer(label, obs.name, obs.area, obs.detector)
        if rule4_allows(label, target):
            out.append(
                InteractionEdge(
                    label, target, rate, EdgeKind.PHYSIOLOGICAL, obs.latency
                )
            )
    for spec in scn.drifts:
        factor = label.brain(spec.observer)
        if factor is None or factor.mode is not BrainMode.CONSCIOUS:
            continue
        rate = Window(spec.rate, spec.start, math.inf)
        if not rate_open_after(rate, now) or spec.rate <= 0:
            continue
        for site in sites.take(spec.neighbors):
            target = drift_target(label, spec.observer, site, spec.unconscious)
            if rule4_allows(label, target):
                out.append(InteractionEdge(label, target, rate, EdgeKind.DRIFT))
    return out


def epoch_closure(
    scn: CompiledScenario,
    start_labels: list[ComponentLabel],
    now: float,
    sites: SiteAllocator | None = None,
) -> tuple[list[ComponentLabel], list[InteractionEdge]]:
    """Transitive closure of components and channels reachable from a start set.

    Run at the beginning of every epoch (scenario start and after each
    reduction).  Returns labels in canonical order and edges in a
    deterministic derivation order.
    """
    if sites is None:
        sites = SiteAllocator()
    if scn.explicit_edges:
        return _explicit_closure(scn, start_labels, now)
    queue = sorted(set(start_labels), key=lambda l: l.sort_key())
    seen = set(queue)
    edges: list[InteractionEdge] = []
    qi = 0
    while qi < len(queue):
        label = queue[qi]
        qi += 1
        for edge in _candidate_edges(scn, label, now, sites):
            edges.append(edge)
            if edge.target not in seen:
                seen.add(edge.target)
                queue.append(edge.target)
        if len(queue) > 4096:
            raise ScenarioBuildError("edge closure exploded; scenario is unbounded")
    labels = sorted(seen, key=lambda l: l.sort_key())
    return labels, edges


def _explicit_closure(scn, start_labels, now):
    labels = set(start_labels)
    for e in scn.explicit_edges:
        labels.add(e.source)
        labels.add(e.target)
    edges = [e for e in scn.explicit_edges if rate_open_after(e.rate, now)]
    return sorted(labels, key=lambda l: l.sort_key()), edges


def reachable_labels(scn: CompiledScenario) -> list[ComponentLabel]:
    """Components reachable in the opening epoch, before any reduction."""
    labels, _ = epoch_closure(scn, [c.label for c in scn.initial], scn.t0)
    return labels


# --- building the catalog --------------------------------------------------

def default_params(kind: ScenarioKind) -> ScenarioParams:
    drift_rate = None
    if kind is ScenarioKind.DRIFT:
        drift_rate = 0.05
    elif kind is ScenarioKind.DRIFTING_AWAY:
        drift_rate = 1.0
    area_rates = None
    if kind in (ScenarioKind.CO_OBSERVER, ScenarioKind.MULTI_PARTICLE):
        area_rates = (0.05, 0.05)
    return ScenarioParams(
        drift_rate=drift_rate,
        area_rates=area_rates,
        particles=2 if kind is ScenarioKind.MULTI_PARTICLE else 1,
        horizon=_KIND_HORIZON[kind],
        dt=CATALOG_DT,
    )


def _resolve(kind: ScenarioKind, params: ScenarioParams | None) -> ScenarioParams:
    base = default_params(kind)
    if params is None:
        return base
    merged = replace(
        params,
        horizon=params.horizon if params.horizon is not None else base.horizon,
        dt=params.dt if params.dt is not None else base.dt,
        drift_rate=params.drift_rate
        if params.drift_rate is not None
        else base.drift_rate,
        area_rates=params.area_rates
        if params.area_rates is not None
        else base.area_rates,
        particles=params.particles
        if kind is not ScenarioKind.MULTI_PARTICLE or params.particles > 1
        else base.particles,
    )
    return merged


def _validate(kind, p: ScenarioParams):
    t0, tf = p.window
    if not t0 < tf:
        raise ScenarioBuildError("interaction window must have t0 < tf")
    if p.horizon is None or not tf <= p.horizon:
        raise ScenarioBuildError("window must close at or before the horizon")
    if p.primary_rate < 0 or p.physio_rate < 0 or p.latency < 0:
        raise ScenarioBuildError("rates and latency must be nonnegative")
    if p.particles < 1:
        raise ScenarioBuildError("need at least one particle")
    if p.dt is None or p.dt <= 0:
        raise ScenarioBuildError("dt must be positive")
    if p.latency > 0 and p.latency < p.dt:
        raise ScenarioBuildError("nonzero latency must be at least dt")
    steps = (p.horizon - t0) / p.dt
    if abs(steps - round(steps)) > 1e-6:
        raise ScenarioBuildError("horizon minus t0 must be a whole number of steps")
    if kind in (ScenarioKind.DRIFT, ScenarioKind.DRIFTING_AWAY):
        if p.drift_rate is None or p.drift_rate < 0:
            raise ScenarioBuildError("drift rate must be nonnegative")
        if p.drift_neighbors < 1:
            raise ScenarioBuildError("need at least one drift neighbor")


def _initial_component(
    waves: list[ParticleWave],
    detector_areas: int,
    brains: list[BrainFactor],
) -> Component:
    factors = list(waves) + [DetectorState(DETECTOR, (0,) * detector_areas)] + brains
    return Component(canonicalize(factors), 1.0, created_at=0.0)


def build(kind: ScenarioKind, params: ScenarioParams | None = None) -> CompiledScenario:
    """Compile one catalog scenario.

    Raises :class:`ScenarioBuildError` on inconsistent parameters, e.g. an
    observation time outside the horizon.
    """
    p = _resolve(kind, params)
    _validate(kind, p)
    t0, tf = p.window
    areas = len(p.area_rates) if p.area_rates else 1
    area_rates = p.area_rates if p.area_rates else (p.primary_rate,)
    particles = p.particles
    wave = ParticleWave(WAVE, particles)

    def conscious(name: str) -> BrainFactor:
        return BrainFactor(name, seen_state(0), BrainMode.CONSCIOUS)

    def unknown(name: str) -> BrainFactor:
        return BrainFactor(name, UNKNOWN_STATE, BrainMode.UNKNOWN)

    observers: list[ObserverRole] = []
    brains: list[BrainFactor] = []
    drifts: list[DriftSpec] = []

    if kind is ScenarioKind.BARE:
        pass
    elif kind in (
        ScenarioKind.CONTINUOUS_OBSERVER,
        ScenarioKind.DRIFT,
        ScenarioKind.DRIFTING_AWAY,
    ):
        observers.append(ObserverRole(PRIMARY_OBSERVER, DETECTOR, 0, None))
        brains.append(conscious(PRIMARY_OBSERVER))
        if kind is not ScenarioKind.CONTINUOUS_OBSERVER:
            drifts.append(
                DriftSpec(
                    PRIMARY_OBSERVER,
                    p.drift_rate,
                    p.drift_neighbors,
                    p.drift_start,
                    unconscious=kind is ScenarioKind.DRIFTING_AWAY,
                )
            )
    elif kind in (ScenarioKind.TERMINAL_OBSERVER, ScenarioKind.INTERMEDIATE_OBSERVER):
        default_at = 12.0 if kind is ScenarioKind.TERMINAL_OBSERVER else 5.0
        at = p.observe_time(PRIMARY_OBSERVER, default_at)
        if kind is ScenarioKind.TERMINAL_OBSERVER and at <= tf:
            raise ScenarioBuildError("terminal observation must follow the window")
        if kind is ScenarioKind.INTERMEDIATE_OBSERVER and not t0 < at < tf:
            raise ScenarioBuildError("intermediate observation must fall in the window")
        if not t0 <= at < p.horizon:
            raise ScenarioBuildError("observation time outside the horizon")
        observers.append(
            ObserverRole(PRIMARY_OBSERVER, DETECTOR, 0, at, p.physio_rate, p.latency)
        )
        brains.append(unknown(PRIMARY_OBSERVER))
    elif kind in (ScenarioKind.OUTSIDE_TERMINAL, ScenarioKind.INTERMEDIATE_OUTSIDE):
        default_at = 12.0 if kind is ScenarioKind.OUTSIDE_TERMINAL else 5.0
        at = p.observe_time(SECOND_OBSERVER, default_at)
        if kind is ScenarioKind.OUTSIDE_TERMINAL and at <= tf:
            raise ScenarioBuildError("outside observation must follow the window")
        if kind is ScenarioKind.INTERMEDIATE_OUTSIDE and not t0 < at < tf:
            raise ScenarioBuildError("outside observation must fall in the window")
        if not t0 <= at < p.horizon:
            raise ScenarioBuildError("observation time outside the horizon")
        observers.append(ObserverRole(PRIMARY_OBSERVER, DETECTOR, 0, None))
        observers.append(
            ObserverRole(SECOND_OBSERVER, DETECTOR, 0, at, p.physio_rate, p.latency)
        )
        brains.append(conscious(PRIMARY_OBSERVER))
        brains.append(unknown(SECOND_OBSERVER))
    elif kind in (ScenarioKind.CO_OBSERVER, ScenarioKind.MULTI_PARTICLE):
        if areas != 2:
            raise ScenarioBuildError("co-observation needs a two-area detector")
        observers.append(ObserverRole(PRIMARY_OBSERVER, DETECTOR, 0, None))
        observers.append(ObserverRole(SECOND_OBSERVER, DETECTOR, 1, None))
        brains.append(conscious(PRIMARY_OBSERVER))
        brains.append(conscious(SECOND_OBSERVER))
    else:  # pragma: no cover - enum is closed
        raise ScenarioBuildError(f"unknown kind {kind}")

    initial = _initial_component([wave], areas, brains)
    scn = CompiledScenario(
        scenario_id=kind.value,
        initial=(initial,),
        waves=((WAVE, particles),),
        detectors=((DETECTOR, areas),),
        observers=tuple(observers),
        primaries=(PrimarySpec(WAVE, DETECTOR, tuple(area_rates), (t0, tf)),),
        drifts=tuple(drifts),
        t0=t0,
        dt=p.dt,
        horizon=p.horizon,
        scope=p.scope,
        seed=DEFAULT_SEED,
        runs=DEFAULT_RUNS,
    )
    verify_scenario(scn)
    return scn


def verify_scenario(scn: CompiledScenario) -> None:
    """Structural checks every compiled scenario must pass.

    Initial weights sum to one, all labels are well formed and balance
    their particle bookkeeping, and no derivable channel connects two
    ready states of one observer (edge construction enforces this; the
    scan re-verifies from scratch).
    """
    total = sum(c.weight for c in scn.initial)
    if abs(total - 1.0) > 1e-12:
        raise ScenarioBuildError(f"initial weights sum to {total}, not 1")
    labels, edges = epoch_closure(scn, [c.label for c in scn.initial], scn.t0)
    for label in labels:
        canonicalize(label)  # raises if malformed
        for wave_name, n in scn.waves:
            if label.wave() is not None or label.detector() is not None:
                if not particle_balance_ok(label, n):
                    raise ScenarioBuildError(
                        f"particle bookkeeping broken in {render(label)}"
                    )
    for e in edges:
        if not rule4_allows(e.source, e.target):
            raise ScenarioBuildError(
                f"forbidden channel built: {render(e.source)} -> {render(e.target)}"
            )


# --- analytic branch weights ----------------------------------------------

def expected_branch_weights(
    kind: ScenarioKind, params: ScenarioParams | None = None
) -> dict[str, float]:
    """Closed-form outcome probabilities for the kinds that admit them.

    The linear drain law makes the capture weight at window close
    ``1 - exp(-k T)``, and that weight is the capture probability however
    the observer's watching is scheduled: on board from the start, joining
    mid-interaction, or looking afterwards all share one closed form.
    Raises :class:`NoOracleError` for kinds that need the exhaustive
    propagation oracle instead.
    """
    p = _resolve(kind, params)
    t0, tf = p.window
    span = tf - t0
    if kind is ScenarioKind.BARE:
        return {"superposition-persists": 1.0}
    if kind in (
        ScenarioKind.CONTINUOUS_OBSERVER,
        ScenarioKind.TERMINAL_OBSERVER,
        ScenarioKind.INTERMEDIATE_OBSERVER,
    ):
        capture = 1.0 - math.exp(-p.primary_rate * span)
        return {"capture": capture, "no-capture": 1.0 - capture}
    if kind is ScenarioKind.CO_OBSERVER:
        rates = p.area_rates if p.area_rates else (p.primary_rate,)
        if len(rates) != 2:
            raise NoOracleError("co-observation closed form needs two areas")
        k1, k2 = rates
        total = k1 + k2
        if total == 0:
            return {"no-capture": 1.0, "capture-area-1": 0.0, "capture-area-2": 0.0}
        depleted = 1.0 - math.exp(-total * span)
        return {
            "capture-area-1": k1 / total * depleted,
            "capture-area-2": k2 / total * depleted,
            "no-capture": 1.0 - depleted,
        }
    raise NoOracleError(f"no closed form for {kind.value}")


# --- outcome tagging --------------------------------------------------------

def outcome_tag_for(
    conscious_label: ComponentLabel | None,
    scn: CompiledScenario,
    exited: bool = False,
) -> str:
    """Deterministic outcome name from the final conscious component."""
    if exited:
        return "unconscious-exit"
    if conscious_label is None:
        return "superposition-persists"
    det = conscious_label.detector()
    if det is None or det.total == 0:
        return "no-capture"
    counts = det.counts
    total_particles = max((n for _, n in scn.waves), default=1)
    if len(counts) == 1:
        if total_particles == 1:
            return "capture"
        return f"capture-{counts[0]}"
    if total_particles == 1:
        area = max(range(len(counts)), key=lambda i: counts[i])
        return f"capture-area-{area + 1}"
    return "capture-" + "-".join(str(c) for c in counts)


def unresolved_engaged(labels: list[ComponentLabel]) -> bool:
    """Whether some observer holds ready states but no conscious one yet."""
    ready = set()
    conscious = set()
    for label in labels:
        for f in label.brains():
            if f.mode is BrainMode.READY:
                ready.add(f.observer)
            elif f.mode is BrainMode.CONSCIOUS:
                conscious.add(f.observer)
    return bool(ready - conscious)
