"""Exhaustive outcome-probability oracle.

Instead of sampling, this propagates the full probability measure over
(reduction-history, weights) configurations.  Each distinct epoch
structure (component set plus channel set) is one node; within a node the
weights obey the linear current-flow equations, and the instant any mass
flows into a reduction-eligible component, that mass splits off into the
node the corresponding reduction would create.  Because a freshly reduced
epoch starts with a single surviving component whose weight equals its
own rate denominator, the split-off branches superpose exactly, and the
whole tree collapses into one linear system with piecewise-constant
coefficients.

The system is integrated on a fine grid: one classical Runge-Kutta step
operator per constant-rate regime, raised to the regime's step count.
Branch measures and final outcomes live in dedicated absorbing rows, so
the result is exact up to the quadrature truncation of the step operator,
with no sampling noise at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import InteractionEdge, Window, rate_at
from .labels import (
    BrainFactor,
    BrainMode,
    ComponentLabel,
    canonicalize,
    promote,
    render,
    seen_state,
    split_seen_state,
)
from .scenarios import (
    CompiledScenario,
    NoOracleError,
    SiteAllocator,
    TriggerScope,
    epoch_closure,
    outcome_tag_for,
)

#: hard ceiling on live configurations before giving up
MAX_BRANCHES = 1_000_000
MAX_SHAPES = 256
MAX_LABELS = 64


class BranchExplosionError(RuntimeError):
    """The reachable configuration set outgrew the oracle's limits."""


def canonical_sites(label: ComponentLabel) -> ComponentLabel:
    """Rename drift-site suffixes away so renewed epochs compare equal."""
    factors = []
    changed = False
    for f in label.factors:
        if isinstance(f, BrainFactor):
            parsed = split_seen_state(f.state)
            if parsed is not None and parsed[1]:
                factors.append(BrainFactor(f.observer, seen_state(parsed[0]), f.mode))
                changed = True
                continue
        factors.append(f)
    return canonicalize(factors) if changed else label


@dataclass
class ShapeNode:
    """One epoch structure: labels in canonical order plus its channels."""

    key: tuple
    labels: tuple[ComponentLabel, ...]
    edges: tuple[InteractionEdge, ...]
    eligible: tuple[int, ...]
    horizon_tag: str
    offset: int = -1
    measure_row: int = -1
    transitions: dict = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return not self.edges


def _shape_key(labels, edges) -> tuple:
    edge_sig = tuple(
        (
            render(e.source),
            render(e.target),
            e.kind.value,
            getattr(e.rate, "k", 0.0),
            getattr(e.rate, "start", -math.inf),
            getattr(e.rate, "end", math.inf),
        )
        for e in edges
    )
    return (tuple(render(l) for l in labels), edge_sig)


def _conscious_label(labels) -> ComponentLabel | None:
    for label in labels:
        if label.has_mode(BrainMode.CONSCIOUS):
            return label
    return None


def _make_shape(scn: CompiledScenario, seed_labels, now: float) -> ShapeNode:
    labels, edges = epoch_closure(scn, list(seed_labels), now, SiteAllocator())
    eligible = tuple(
        i for i, l in enumerate(labels) if l.has_mode(BrainMode.READY)
    )
    exit_bound = scn.unconscious_drift() is not None and any(
        l.has_mode(BrainMode.CONSCIOUS) for l in labels
    )
    tag = outcome_tag_for(_conscious_label(labels), scn, exited=exit_bound)
    return ShapeNode(
        key=_shape_key(labels, edges),
        labels=tuple(labels),
        edges=tuple(edges),
        eligible=eligible,
        horizon_tag=tag,
    )


def _regimes(scn: CompiledScenario) -> list[tuple[float, float]]:
    bounds = list(scn.regime_boundaries())
    out = []
    for a, b in zip(bounds, bounds[1:]):
        if b - a > 1e-12:
            out.append((a, b))
    return out


def enumerate_shapes(scn: CompiledScenario) -> list[ShapeNode]:
    """All epoch structures reachable through any chain of reductions."""
    if scn.scope is not TriggerScope.READY_ONLY:
        raise NoOracleError("exhaustive propagation covers the default scope only")
    regimes = _regimes(scn)
    shapes: dict[tuple, ShapeNode] = {}
    root = _make_shape(scn, [c.label for c in scn.initial], scn.t0)
    shapes[root.key] = root
    queue = [root]
    while queue:
        node = queue.pop()
        for ri, (r_lo, _) in enumerate(regimes):
            mid = r_lo
            for n in node.eligible:
                target = node.labels[n]
                has_inflow = any(
                    e.target == target and rate_at(e.rate, mid) > 0.0
                    for e in node.edges
                )
                if not has_inflow:
                    continue
                promoted, _ = promote(target)
                survivor = canonical_sites(promoted)
                child = _make_shape(scn, [survivor], mid)
                existing = shapes.get(child.key)
                if existing is None:
                    shapes[child.key] = child
                    queue.append(child)
                    existing = child
                    if len(shapes) > MAX_SHAPES:
                        raise BranchExplosionError(
                            "reachable epoch structures exceed the oracle limit"
                        )
                surv_idx = existing.labels.index(survivor)
                node.transitions[(n, ri)] = (existing.key, surv_idx)
    all_labels = {render(l) for s in shapes.values() for l in s.labels}
    if len(all_labels) > MAX_LABELS:
        raise BranchExplosionError(
            f"{len(all_labels)} reachable components exceed the {MAX_LABELS} limit"
        )
    return list(shapes.values())


def _rk4_step_operator(a: np.ndarray, h: float) -> np.ndarray:
    """One fixed-step RK4 update matrix for x' = a x."""
    d = a.shape[0]
    eye = np.eye(d)
    m = eye + (h / 4.0) * a
    m = eye + (h / 3.0) * (a @ m)
    m = eye + (h / 2.0) * (a @ m)
    return eye + h * (a @ m)


def brute_force_oracle(
    scn: CompiledScenario, dt_fine: float | None = None
) -> dict[str, float]:
    """Exact-to-discretization outcome probabilities for a scenario.

    ``dt_fine`` is the propagation grid (default: a tenth of the
    scenario's sampling step).  Raises :class:`NoOracleError` for
    configurations outside the oracle's reach (non-default trigger scope,
    latency, or an eligible component that drains onward), and
    :class:`BranchExplosionError` if the configuration space outgrows its
    limits.
    """
    if scn.max_latency() > 0:
        raise NoOracleError("latency requires the sampled path")
    h = scn.dt / 10.0 if dt_fine is None else dt_fine
    if h <= 0:
        raise ValueError("dt_fine must be positive")
    regimes = _regimes(scn)
    shapes = enumerate_shapes(scn)
    by_key = {s.key: s for s in shapes}

    live = [s for s in shapes if not s.terminal]
    offset = 0
    for s in live:
        s.offset = offset
        offset += len(s.labels)
        s.measure_row = offset
        offset += 1
    tags = sorted(
        {s.horizon_tag for s in shapes}
        | {
            by_key[child_key].horizon_tag
            for s in live
            for child_key, _ in s.transitions.values()
            if by_key[child_key].terminal
        }
    )
    tag_row = {tag: offset + i for i, tag in enumerate(tags)}
    dim = offset + len(tags)
    if dim * max(len(regimes), 1) > MAX_BRANCHES:
        raise BranchExplosionError("propagation system too large")

    root = live[0] if live else None
    x = np.zeros(dim)
    if root is None:
        # no dynamics at all: everything sits in the initial structure
        return {shapes[0].horizon_tag: 1.0}
    root_index = {l: i for i, l in enumerate(root.labels)}
    for comp in scn.initial:
        x[root.offset + root_index[comp.label]] = comp.weight
    x[root.measure_row] = 1.0

    for ri, (r_lo, r_hi) in enumerate(regimes):
        a = np.zeros((dim, dim))
        mid = (r_lo + r_hi) / 2.0
        for s in live:
            index = {l: i for i, l in enumerate(s.labels)}
            eligible = set(s.eligible)
            for e in s.edges:
                k = rate_at(e.rate, mid)
                if k <= 0.0:
                    continue
                si = s.offset + index[e.source]
                ti = s.offset + index[e.target]
                a[si, si] -= k
                a[ti, si] += k
                tgt_idx = index[e.target]
                if index[e.source] in eligible:
                    raise NoOracleError(
                        "an eligible component drains onward; no exact propagation"
                    )
                if tgt_idx in eligible:
                    trans = s.transitions.get((tgt_idx, ri))
                    if trans is None:
                        continue
                    child_key, surv_idx = trans
                    child = by_key[child_key]
                    if child.terminal:
                        a[tag_row[child.horizon_tag], si] += k
                    else:
                        a[child.offset + surv_idx, si] += k
                        a[child.measure_row, si] += k
                    a[s.measure_row, si] -= k
        span = r_hi - r_lo
        n_steps = max(1, int(round(span / h)))
        m_step = _rk4_step_operator(a, span / n_steps)
        x = np.linalg.matrix_power(m_step, n_steps) @ x

    result: dict[str, float] = {tag: 0.0 for tag in tags}
    for tag, row in tag_row.items():
        result[tag] += float(x[row])
    for s in live:
        result.setdefault(s.horizon_tag, 0.0)
        result[s.horizon_tag] += float(x[s.measure_row])
    total = sum(result.values())
    if abs(total - 1.0) > 1e-6:
        raise RuntimeError(f"oracle measure leaked: total {total}")
    return {tag: p for tag, p in result.items() if p > 1e-15 or p == 0.0}
