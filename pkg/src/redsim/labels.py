"""Structural algebra for superposition components.

A component of the superposition is named by a canonical multiset of factor
states: at most one particle wave, at most one detector state per detector,
and at most one brain factor per observer.  This module owns that naming
scheme and the structural rules that act on it: ready-state tagging for
newly grown components, the forbidden-transition predicate between two
ready states of one observer, and the label transforms used when a capture
or an observer engagement creates a new component.

Everything here is a pure function over immutable values; weights and time
live elsewhere.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field


class MalformedLabelError(ValueError):
    """A component label violates its structural constraints."""


class BrainMode(enum.Enum):
    CONSCIOUS = "conscious"
    READY = "ready"
    UNCONSCIOUS = "unconscious"
    UNKNOWN = "unknown"


#: one-character rendering markers, keyed by mode
_MODE_MARK = {
    BrainMode.CONSCIOUS: "!",
    BrainMode.READY: "~",
    BrainMode.UNCONSCIOUS: "_",
    BrainMode.UNKNOWN: "?",
}

#: modes that count as engaged with the apparatus (conscious or ready)
ACTIVE_MODES = (BrainMode.CONSCIOUS, BrainMode.READY)


@dataclass(frozen=True)
class ParticleWave:
    """Uncaptured particle wave; ``remaining`` counts particles still in it."""

    label: str
    remaining: int = 1

    def __post_init__(self):
        if self.remaining < 0:
            raise MalformedLabelError(f"wave {self.label} has negative particle count")


@dataclass(frozen=True)
class DetectorState:
    """Detector record; ``counts[i]`` is the number captured in area ``i``."""

    label: str
    counts: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.counts or any(c < 0 for c in self.counts):
            raise MalformedLabelError(f"detector {self.label} has bad capture counts")

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class BrainFactor:
    """One observer's brain state inside a component.

    ``state`` is the brain-state name; capture experiences are spelled
    ``b<count><site>`` (``b0``, ``b1``, ``b0a``, ...) where the optional
    site letters distinguish drift neighborhoods.  ``x`` is the
    pre-engagement unknown state and ``u<site>`` an unconscious one.
    """

    observer: str
    state: str
    mode: BrainMode


FactorState = ParticleWave | DetectorState | BrainFactor


def _factor_key(factor: FactorState) -> tuple:
    if isinstance(factor, ParticleWave):
        return (0, factor.label, factor.remaining)
    if isinstance(factor, DetectorState):
        return (1, factor.label, factor.counts)
    return (2, factor.observer, factor.state, factor.mode.value)


@dataclass(frozen=True)
class ComponentLabel:
    """Canonically ordered factor list naming one superposition component.

    Construct through :func:`canonicalize`; labels compare and hash by
    structure, so canonical ordering makes equality the component-identity
    relation used everywhere else.
    """

    factors: tuple[FactorState, ...]

    def wave(self) -> ParticleWave | None:
        for f in self.factors:
            if isinstance(f, ParticleWave):
                return f
        return None

    def detector(self, label: str | None = None) -> DetectorState | None:
        for f in self.factors:
            if isinstance(f, DetectorState) and (label is None or f.label == label):
                return f
        return None

    def brain(self, observer: str) -> BrainFactor | None:
        for f in self.factors:
            if isinstance(f, BrainFactor) and f.observer == observer:
                return f
        return None

    def brains(self) -> tuple[BrainFactor, ...]:
        return tuple(f for f in self.factors if isinstance(f, BrainFactor))

    def has_mode(self, mode: BrainMode) -> bool:
        return any(f.mode is mode for f in self.brains())

    def sort_key(self) -> tuple:
        return tuple(_factor_key(f) for f in self.factors)

    def __str__(self) -> str:  # pragma: no cover - convenience
        return render(self)


def canonicalize(label: ComponentLabel | tuple | list) -> ComponentLabel:
    """Return the unique canonical ordering of ``label``'s factors.

    Ordering is wave first, then detectors by name, then brain factors by
    observer name.  Idempotent.  Raises :class:`MalformedLabelError` on a
    duplicate wave, detector, or observer factor.
    """
    factors = label.factors if isinstance(label, ComponentLabel) else tuple(label)
    waves = [f for f in factors if isinstance(f, ParticleWave)]
    detectors = [f for f in factors if isinstance(f, DetectorState)]
    brains = [f for f in factors if isinstance(f, BrainFactor)]
    if len(waves) + len(detectors) + len(brains) != len(factors):
        raise MalformedLabelError("unknown factor kind in label")
    if len(waves) > 1:
        raise MalformedLabelError("more than one particle wave in label")
    det_names = [d.label for d in detectors]
    if len(set(det_names)) != len(det_names):
        raise MalformedLabelError(f"duplicate detector factor in label: {det_names}")
    obs_names = [b.observer for b in brains]
    if len(set(obs_names)) != len(obs_names):
        raise MalformedLabelError(f"duplicate observer factor in label: {obs_names}")
    ordered = (
        tuple(waves)
        + tuple(sorted(detectors, key=lambda d: d.label))
        + tuple(sorted(brains, key=lambda b: b.observer))
    )
    return ComponentLabel(ordered)


def render(label: ComponentLabel) -> str:
    """Compact deterministic text form, e.g. ``psi.D1.alice~b1``.

    Wave particle counts are shown only when != 1 (``psi2``); detector
    counts are concatenated digits (``D10``); brain factors use the mode
    markers ``!`` conscious, ``~`` ready, ``?`` unknown, ``_`` unconscious.
    """
    parts = []
    for f in label.factors:
        if isinstance(f, ParticleWave):
            parts.append(f.label if f.remaining == 1 else f"{f.label}{f.remaining}")
        elif isinstance(f, DetectorState):
            parts.append(f.label + "".join(str(c) for c in f.counts))
        else:
            parts.append(f"{f.observer}{_MODE_MARK[f.mode]}{f.state}")
    return ".".join(parts)


@dataclass(frozen=True)
class Component:
    """A labelled component with its square-modulus weight.

    Zero weight is legal (components grow lazily from zero).  ``phantom``
    marks a component whose inflow is permanently dead; its weight is kept
    but it no longer counts as a reduction candidate.
    """

    label: ComponentLabel
    weight: float
    phantom: bool = False
    created_at: float = 0.0

    def __post_init__(self):
        if self.weight < 0 and self.weight > -1e-15:
            object.__setattr__(self, "weight", 0.0)
        if self.weight < 0:
            raise ValueError(f"negative weight {self.weight} for {render(self.label)}")


# --- brain-state label helpers -------------------------------------------

_STATE_RE = re.compile(r"^b(\d+)([a-z]*)$")


def seen_state(count: int, site: str = "") -> str:
    """Brain-state name for the experience of seeing ``count`` captures."""
    return f"b{count}{site}"


def split_seen_state(state: str) -> tuple[int, str] | None:
    """Inverse of :func:`seen_state`; None for non-capture states (x, u...)."""
    m = _STATE_RE.match(state)
    if m is None:
        return None
    return int(m.group(1)), m.group(2)


UNKNOWN_STATE = "x"


def unconscious_state(site: str = "") -> str:
    return f"u{site}"


# --- the structural rules -------------------------------------------------

def rule2_target_mode(source_factor: BrainFactor | None, target_state: str) -> BrainMode:
    """Mode of a brain factor appearing in a newly grown component.

    A brain state that changes name across the transition, or that appears
    where the source had none, is a fresh entanglement and comes up ready.
    An identical name is a classically continuous carry-through and keeps
    the source mode.  Consciousness is never created here; it arises only
    through reduction.
    """
    if source_factor is None or source_factor.state != target_state:
        return BrainMode.READY
    return source_factor.mode


def rule4_allows(source: ComponentLabel, target: ComponentLabel) -> bool:
    """Whether a weight-transfer channel between two components is admissible.

    Forbidden exactly when some observer holds a ready brain state in both
    endpoints, whether the two ready states are the same or different.  The
    condition is symmetric in source and target.
    """
    target_ready = {
        f.observer for f in target.brains() if f.mode is BrainMode.READY
    }
    for f in source.brains():
        if f.mode is BrainMode.READY and f.observer in target_ready:
            return False
    return True


def promote(label: ComponentLabel) -> tuple[ComponentLabel, tuple[str, ...]]:
    """Flip every ready brain factor to conscious (a reduction's effect).

    Returns the promoted label and the observers made conscious, in
    canonical order.  All ready factors flip together; unknown and
    unconscious factors ride along unchanged.
    """
    new_factors = []
    flipped = []
    for f in label.factors:
        if isinstance(f, BrainFactor) and f.mode is BrainMode.READY:
            new_factors.append(BrainFactor(f.observer, f.state, BrainMode.CONSCIOUS))
            flipped.append(f.observer)
        else:
            new_factors.append(f)
    return canonicalize(new_factors), tuple(flipped)


# --- label transforms for grown components --------------------------------

def after_capture(
    label: ComponentLabel,
    detector: str,
    area: int,
    watched_areas: dict[str, int],
) -> ComponentLabel:
    """Label of the component grown by one capture into ``area``.

    The wave loses one particle (dropping out at zero) and the detector
    gains one count.  A capture is not classically continuous with its
    source, so every engaged (conscious or ready) brain factor re-emerges
    as a ready state naming what its observer now sees; unknown and
    unconscious factors ride along unchanged.  ``watched_areas`` maps each
    observer to the detector area it watches.
    """
    wave = label.wave()
    det = label.detector(detector)
    if wave is None or wave.remaining < 1:
        raise MalformedLabelError("capture requires a wave with particles left")
    if det is None:
        raise MalformedLabelError(f"capture requires detector {detector} in label")
    if not (0 <= area < len(det.counts)):
        raise MalformedLabelError(f"area {area} out of range for {detector}")
    counts = list(det.counts)
    counts[area] += 1
    new_factors: list[FactorState] = []
    if wave.remaining > 1:
        new_factors.append(ParticleWave(wave.label, wave.remaining - 1))
    new_factors.append(DetectorState(det.label, tuple(counts)))
    for f in label.factors:
        if isinstance(f, (ParticleWave, DetectorState)):
            continue
        if f.mode in ACTIVE_MODES:
            parsed = split_seen_state(f.state)
            site = parsed[1] if parsed else ""
            seen = counts[watched_areas.get(f.observer, 0)]
            new_factors.append(
                BrainFactor(f.observer, seen_state(seen, site), BrainMode.READY)
            )
        else:
            new_factors.append(f)
    return canonicalize(new_factors)


def engage_observer(
    label: ComponentLabel, observer: str, watched_area: int, detector: str
) -> ComponentLabel:
    """Label grown when an unknown-state observer couples to the detector.

    The observer's factor becomes the ready experience of the detector
    count it watches; all other factors carry through unchanged (the
    detector record itself does not change, so this transition is
    classically continuous for everyone else).
    """
    factor = label.brain(observer)
    if factor is None or factor.mode is not BrainMode.UNKNOWN:
        raise MalformedLabelError(f"{observer} has no unknown state to engage")
    det = label.detector(detector)
    if det is None:
        raise MalformedLabelError(f"no detector {detector} in label")
    seen = det.counts[watched_area]
    new_factors = [
        BrainFactor(observer, seen_state(seen), BrainMode.READY)
        if f is factor
        else f
        for f in label.factors
    ]
    return canonicalize(new_factors)


def drift_target(
    label: ComponentLabel, observer: str, site: str, unconscious: bool = False
) -> ComponentLabel:
    """Label grown when a conscious observer's attention drifts to ``site``.

    The conscious factor re-emerges at the neighboring brain state, ready
    by default, or unconscious when the drift heads out of the region that
    can support ready states.
    """
    factor = label.brain(observer)
    if factor is None or factor.mode is not BrainMode.CONSCIOUS:
        raise MalformedLabelError(f"{observer} has no conscious state to drift from")
    if unconscious:
        new = BrainFactor(observer, unconscious_state(site), BrainMode.UNCONSCIOUS)
    else:
        parsed = split_seen_state(factor.state)
        count = parsed[0] if parsed else 0
        new = BrainFactor(observer, seen_state(count, site), BrainMode.READY)
    new_factors = [new if f is factor else f for f in label.factors]
    return canonicalize(new_factors)


def particle_balance_ok(label: ComponentLabel, total_particles: int) -> bool:
    """Check remaining-plus-captured particle bookkeeping against the total."""
    wave = label.wave()
    remaining = wave.remaining if wave is not None else 0
    captured = sum(d.total for d in label.factors if isinstance(d, DetectorState))
    return remaining + captured == total_particles


def conscious_states(components: "iterable of ComponentLabel") -> dict[str, set[str]]:
    """Map observer -> set of distinct conscious brain-state names present."""
    out: dict[str, set[str]] = {}
    for label in components:
        for f in label.brains():
            if f.mode is BrainMode.CONSCIOUS:
                out.setdefault(f.observer, set()).add(f.state)
    return out
