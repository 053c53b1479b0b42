"""Augmented switching laws: arcs, tangent markers, and end-constraints.

The augmented switching law (ASL) of a trajectory records, beyond the arc
sequence itself, every isolated boundary contact: tangent markers interior to
arcs and additional constraints active exactly at arc junctions. Together
with the keypoint times it pins down both the control and the feasibility
structure of the trajectory.

Constraint indexing convention: the plant's P state constraints are 1..P;
index P+1 denotes u <= u_max and P+2 denotes -u <= u_max. The two control
rows reduce to state rows only on constrained arcs (where u is a linear
feedback of x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .arcs import SystemBehavior, arc_control
from .config import DEFAULT, RunConfig
from .errors import (
    InfeasibleTrajectoryError,
    InvalidInputError,
    InvalidJunctionError,
    InvalidScheduleError,
)
from .linsys import Array, LinearSystem, propagate, sample_arc, transition
from .rows import Row, reduce_rows


# ---------------------------------------------------------------------------
# constraint rows and derivative ladders


def constraint_row(behavior: SystemBehavior, p: int) -> tuple[Array, float]:
    """(c, d) of constraint p in [P+2] as seen on this arc.

    Control bounds are rewritten through the arc's feedback gain, so they are
    only defined on constrained arcs.
    """
    sys = behavior.system
    P = sys.n_constraints
    if 1 <= p <= P:
        con = sys.constraint(p)
        return con.c, con.d
    if p in (P + 1, P + 2):
        if not behavior.is_constrained:
            raise InvalidInputError(
                "control-bound rows only reduce to state rows on constrained arcs"
            )
        gain = behavior.gain()
        sign = 1.0 if p == P + 1 else -1.0
        return sign * gain, -sys.u_max
    raise InvalidInputError(f"constraint index {p} out of range [1, {P + 2}]")


def margin_scale(c: Array, x: Array) -> float:
    return float(np.linalg.norm(c) * max(1.0, np.linalg.norm(x)))


@dataclass(frozen=True)
class Ladder:
    """Derivative ladder of a margin along an arc: v_r = c^T A^{r-1}(A x + b)."""

    values: Array
    first: int | None  # 1-based order of the first nonzero entry, None if all zero

    @property
    def all_zero(self) -> bool:
        return self.first is None

    @property
    def lead(self) -> float:
        return float(self.values[self.first - 1]) if self.first else 0.0


def derivative_ladder(
    c: Array, behavior: SystemBehavior, x: Array, cfg: RunConfig = DEFAULT
) -> Ladder:
    n = behavior.system.dim
    A_hat, b_hat = behavior.A_hat, behavior.b_hat
    rate = A_hat @ x + b_hat
    norm_A = max(1.0, float(np.linalg.norm(A_hat, 2)))
    base = float(np.linalg.norm(c)) * max(1.0, float(np.linalg.norm(rate)))
    values = np.empty(n)
    row = np.asarray(c, dtype=float)
    first = None
    for r in range(1, n + 1):
        v = float(row @ rate)
        values[r - 1] = v
        if first is None and abs(v) > cfg.eps_ladder * base * norm_A ** (r - 1):
            first = r
        row = row @ A_hat
    return Ladder(values=values, first=first)


def _zero_ladder_rows(
    c: Array, d: float, behavior: SystemBehavior, upto: int, tag: str
) -> list[Row]:
    """Equality rows: boundary row plus ladder zeros of order < `upto`."""
    out = [Row(c, d, provenance=f"{tag}:m")]
    A_hat, b_hat = behavior.A_hat, behavior.b_hat
    row = np.asarray(c, dtype=float)
    for r in range(1, upto):
        out.append(Row(row @ A_hat, float(row @ b_hat), provenance=f"{tag}:d{r}"))
        row = row @ A_hat
    return out


def _ladder_strict_row(c: Array, behavior: SystemBehavior, order: int, tag: str) -> Row:
    row = np.asarray(c, dtype=float)
    for _ in range(order - 1):
        row = row @ behavior.A_hat
    return Row(row @ behavior.A_hat, float(row @ behavior.b_hat), provenance=f"{tag}:d{order}")


# ---------------------------------------------------------------------------
# pointwise classifications (Prop.-5/6 style ladders)


@dataclass(frozen=True)
class TangencyResult:
    kind: str  # 'tangent' | 'crossing' | 'clear' | 'identical'
    order: int | None = None
    value: float = 0.0


def tangent_condition(
    behavior: SystemBehavior, x: Array, p: int, cfg: RunConfig = DEFAULT
) -> TangencyResult:
    """Classify a boundary contact of constraint p interior to an arc.

    Tangency requires the first nonzero ladder entry to sit at an even order
    with negative value; an odd leading order means the margin crosses zero.
    """
    c, d = constraint_row(behavior, p)
    m = float(c @ x + d)
    if abs(m) > cfg.eps_feas * margin_scale(c, x):
        return TangencyResult(kind="clear", value=m)
    ladder = derivative_ladder(c, behavior, x, cfg)
    if ladder.all_zero:
        return TangencyResult(kind="identical")
    if ladder.first % 2 == 0 and ladder.lead < 0:
        return TangencyResult(kind="tangent", order=ladder.first, value=ladder.lead)
    return TangencyResult(kind="crossing", order=ladder.first, value=ladder.lead)


@dataclass(frozen=True)
class EndStatus:
    constraint: int
    status: str  # 'strict' | 'touch' | 'saturated' | 'violated' | 'identically_active'
    order: int | None = None
    eq_rows: tuple[Row, ...] = ()
    strict_rows: tuple[Row, ...] = ()
    value: float = 0.0


def _end_status(
    behavior: SystemBehavior, x: Array, p: int, side: str, cfg: RunConfig, tag: str
) -> EndStatus:
    c, d = constraint_row(behavior, p)
    m = float(c @ x + d)
    scale = margin_scale(c, x)
    if m < -cfg.eps_feas * scale:
        return EndStatus(constraint=p, status="strict", value=m)
    if m > cfg.eps_feas * scale:
        return EndStatus(constraint=p, status="violated", value=m)
    ladder = derivative_ladder(c, behavior, x, cfg)
    if ladder.all_zero:
        # margin frozen at zero along the whole arc (Prop.-5 case c for the
        # control rows); record every ladder zero as an equality
        rows = tuple(_zero_ladder_rows(c, d, behavior, behavior.system.dim + 1, tag))
        is_control = p > behavior.system.n_constraints
        status = "saturated" if is_control else "identically_active"
        return EndStatus(constraint=p, status=status, eq_rows=rows, value=m)
    lead = ladder.lead if side == "start" else (-1.0) ** ladder.first * ladder.lead
    if lead < 0:
        return EndStatus(
            constraint=p,
            status="touch",
            order=ladder.first,
            eq_rows=tuple(_zero_ladder_rows(c, d, behavior, ladder.first, tag)),
            strict_rows=(_ladder_strict_row(c, behavior, ladder.first, tag),),
            value=m,
        )
    return EndStatus(constraint=p, status="violated", order=ladder.first, value=lead)


def end_feasibility(
    behavior: SystemBehavior, x_end: Array, side: str, cfg: RunConfig = DEFAULT
) -> dict[int, EndStatus]:
    """Per-constraint feasibility of the arc near one of its ends.

    Checks every state constraint not active on the arc and, on constrained
    arcs, both control bounds. Violations are returned as data, not raised.
    """
    if side not in ("start", "end"):
        raise InvalidInputError("side must be 'start' or 'end'")
    sys = behavior.system
    statuses: dict[int, EndStatus] = {}
    targets = [p for p in range(1, sys.n_constraints + 1) if p not in behavior.active]
    if behavior.is_constrained:
        targets += [sys.n_constraints + 1, sys.n_constraints + 2]
    for p in targets:
        statuses[p] = _end_status(behavior, x_end, p, side, cfg, tag=f"end:{p}")
    return statuses


# ---------------------------------------------------------------------------
# junction classification


@dataclass(frozen=True)
class JunctionReport:
    ok: bool
    violations: tuple[str, ...]
    orders: dict[tuple[str, int], int]
    eq_rows: tuple[Row, ...]
    strict_rows: tuple[Row, ...]


def connection_conditions(
    s1: SystemBehavior, s2: SystemBehavior, x_at_junction: Array, cfg: RunConfig = DEFAULT
) -> JunctionReport:
    """Classify the junction of two adjacent arcs at the shared state.

    Covers the four cases: bang-bang sign flips; constrained-constrained with
    disjoint active sets; and the exit/entry derivative ladders of active
    constraints toward the neighbouring arc. Ladder zeros beyond the arcs' own
    equality rows (for example a control hitting its bound exactly at the
    junction) are returned as additional equality rows.
    """
    if s1 == s2:
        raise InvalidJunctionError("adjacent arcs must differ")
    x = np.asarray(x_at_junction, dtype=float)
    violations: list[str] = []
    orders: dict[tuple[str, int], int] = {}
    eq_rows: list[Row] = []
    strict_rows: list[Row] = []

    if not s1.is_constrained and not s2.is_constrained:
        if s1.u0 != -s2.u0:
            violations.append("adjacent bang arcs must flip the control sign")
        return JunctionReport(not violations, tuple(violations), orders, (), ())

    if s1.is_constrained and s2.is_constrained:
        overlap = set(s1.active) & set(s2.active)
        if overlap:
            violations.append(
                f"adjacent constrained arcs share active constraints {sorted(overlap)}"
            )

    def run_ladder(p: int, source: SystemBehavior, through: SystemBehavior, side: str):
        c, d = constraint_row(source, p)
        ladder = derivative_ladder(c, through, x, cfg)
        tag = f"junction:{p}:{side}"
        if ladder.all_zero:
            violations.append(
                f"constraint {p} stays active across the junction; "
                f"the {'next' if side == 'exit' else 'previous'} arc is misclassified"
            )
            return
        lead = ladder.lead if side == "exit" else (-1.0) ** ladder.first * ladder.lead
        if lead >= 0:
            violations.append(
                f"constraint {p} {side} ladder has nonnegative leading "
                f"derivative {ladder.lead:.3e} at order {ladder.first}"
            )
            return
        orders[(side, p)] = ladder.first
        eq_rows.extend(_zero_ladder_rows(c, d, through, ladder.first, tag)[1:])
        strict_rows.append(_ladder_strict_row(c, through, ladder.first, tag))

    # constraints leaving activity: ladder forward along s2
    for p in s1.active:
        if p not in s2.active:
            run_ladder(p, s1, s2, "exit")
    # constraints entering activity: ladder backward along s1
    for p in s2.active:
        if p not in s1.active:
            run_ladder(p, s2, s1, "entry")

    return JunctionReport(
        ok=not violations,
        violations=tuple(violations),
        orders=orders,
        eq_rows=tuple(eq_rows),
        strict_rows=tuple(strict_rows),
    )


# ---------------------------------------------------------------------------
# ASL data model


@dataclass(frozen=True)
class TangentMarker:
    """Isolated even-order boundary contact interior to an arc."""

    arc: int
    touched: tuple[int, ...]
    orders: dict[int, int]
    eq_rows: tuple[Row, ...]
    strict_rows: tuple[Row, ...]


@dataclass(frozen=True)
class AdditionalEndConstraint:
    """Constraints active exactly at a junction but on neither adjacent arc."""

    junction: int  # 0-based: between arcs junction and junction+1
    touched: tuple[int, ...]
    orders: dict[int, int]
    eq_rows: tuple[Row, ...]
    strict_rows: tuple[Row, ...]

    @property
    def empty(self) -> bool:
        return not self.eq_rows and not self.strict_rows


@dataclass(frozen=True)
class AugmentedSwitchingLaw:
    arcs: tuple[SystemBehavior, ...]
    markers: tuple[tuple[TangentMarker, ...], ...]
    end_constraints: tuple[AdditionalEndConstraint | None, ...]

    def __post_init__(self):
        N = len(self.arcs)
        if len(self.markers) != N:
            raise InvalidInputError("markers must align with arcs")
        if len(self.end_constraints) != max(N - 1, 0):
            raise InvalidInputError("end_constraints must have one slot per junction")
        for i in range(N - 1):
            if self.arcs[i] == self.arcs[i + 1]:
                raise InvalidJunctionError(f"arcs {i} and {i + 1} are identical")
            if self.arcs[i].is_constrained and self.arcs[i + 1].is_constrained:
                if set(self.arcs[i].active) & set(self.arcs[i + 1].active):
                    raise InvalidJunctionError(
                        f"arcs {i} and {i + 1} share active constraints"
                    )

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    def n_keypoints(self) -> int:
        return self.n_arcs + sum(len(ms) for ms in self.markers)

    def describe(self) -> str:
        parts = []
        for j, arc in enumerate(self.arcs):
            label = arc.label()
            if self.markers[j]:
                label = f"({label},{{{len(self.markers[j])} markers}})"
            parts.append(label)
            if j < self.n_arcs - 1 and self.end_constraints[j] is not None:
                parts.append(f"A{j + 1}")
        return " ".join(parts)


@dataclass(frozen=True)
class Keypoint:
    kind: str  # 'arc_end' | 'marker'
    arc: int
    marker: TangentMarker | None = None


@dataclass(frozen=True)
class TimedTrajectory:
    """An ASL with an initial state and a keypoint schedule.

    ``times`` has length M + 1 and starts at the trajectory's initial time;
    keypoint i in [M] occurs at times[i]. Marker keypoints are interior to
    their host arc; every arc contributes exactly one arc-end keypoint.
    """

    law: AugmentedSwitchingLaw
    x0: Array
    times: Array
    keypoints: tuple[Keypoint, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if not np.all(np.isfinite(times)):
            raise InvalidInputError("keypoint times must be finite")
        if np.any(np.diff(times) <= 0):
            raise InvalidScheduleError("keypoint times must increase strictly")
        if len(self.keypoints) != len(times) - 1:
            raise InvalidInputError("keypoints must align with the schedule")
        ends = [kp for kp in self.keypoints if kp.kind == "arc_end"]
        if len(ends) != self.law.n_arcs:
            raise InvalidInputError("each arc needs exactly one arc-end keypoint")
        if self.keypoints[-1].kind != "arc_end":
            raise InvalidInputError("the final keypoint must end the last arc")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    def interval_arcs(self) -> list[int]:
        """Arc index owning each interval (t_{i-1}, t_i), i = 1..M."""
        out = []
        current = 0
        for kp in self.keypoints:
            out.append(current)
            if kp.kind == "arc_end":
                current += 1
        return out

    def interval_dynamics(self) -> list[tuple[Array, Array]]:
        arcs = self.law.arcs
        return [(arcs[j].A_hat, arcs[j].b_hat) for j in self.interval_arcs()]

    def keypoint_states(self, times: Array | None = None) -> Array:
        """States at t_0..t_M under the interval dynamics (row per keypoint)."""
        ts = self.times if times is None else np.asarray(times, dtype=float)
        dyn = self.interval_dynamics()
        xs = np.empty((len(ts), self.x0.shape[0]))
        xs[0] = self.x0
        for i in range(1, len(ts)):
            A_hat, b_hat = dyn[i - 1]
            xs[i] = propagate(A_hat, b_hat, xs[i - 1], float(ts[i] - ts[i - 1]))
        return xs

    def arc_spans(self) -> list[tuple[int, int, int]]:
        """(arc index, start keypoint, end keypoint) with keypoints in 0..M."""
        spans = []
        start = 0
        arc = 0
        for i, kp in enumerate(self.keypoints, start=1):
            if kp.kind == "arc_end":
                spans.append((arc, start, i))
                arc += 1
                start = i
        return spans

    def arc_durations(self) -> Array:
        return np.array([self.times[b] - self.times[a] for _, a, b in self.arc_spans()])

    def with_times(self, new_times: Array) -> "TimedTrajectory":
        return replace(self, times=np.asarray(new_times, dtype=float))

    def control_at(self, arc: int, x: Array) -> float:
        return arc_control(self.law.arcs[arc], x)

    def sample(self, per_arc: int = 200) -> tuple[Array, Array, Array]:
        """Dense (t, x, u) samples across all arcs, endpoints included."""
        states = self.keypoint_states()
        ts_all, xs_all, us_all = [], [], []
        for arc, a, b in self.arc_spans():
            beh = self.law.arcs[arc]
            dur = float(self.times[b] - self.times[a])
            ts, xs = sample_arc(beh.A_hat, beh.b_hat, states[a], dur, per_arc)
            us = np.array([arc_control(beh, x) for x in xs])
            ts_all.append(ts + self.times[a])
            xs_all.append(xs)
            us_all.append(us)
        return np.concatenate(ts_all), np.vstack(xs_all), np.concatenate(us_all)


def assemble_trajectory(
    law: AugmentedSwitchingLaw,
    x0: Array,
    arc_end_times: Array,
    marker_times: list[list[float]],
    t0: float = 0.0,
) -> TimedTrajectory:
    """Interleave arc ends and marker times into a keypoint schedule."""
    events: list[tuple[float, Keypoint]] = []
    prev = t0
    for j, end in enumerate(arc_end_times):
        for marker, tm in zip(law.markers[j], marker_times[j]):
            if not prev < tm < end:
                raise InvalidScheduleError(
                    f"marker time {tm} not interior to arc {j} ({prev}, {end})"
                )
            events.append((float(tm), Keypoint("marker", j, marker)))
        events.append((float(end), Keypoint("arc_end", j)))
        prev = float(end)
    events.sort(key=lambda item: item[0])
    times = np.concatenate([[t0], [t for t, _ in events]])
    return TimedTrajectory(
        law=law, x0=x0, times=times, keypoints=tuple(kp for _, kp in events)
    )


# ---------------------------------------------------------------------------
# extraction: timed arcs -> full ASL


def _scan_arc_touches(
    behavior: SystemBehavior,
    x_start: Array,
    t_start: float,
    duration: float,
    cfg: RunConfig,
) -> list[tuple[float, int, TangencyResult]]:
    """Interior boundary contacts of one arc via dense grid + bisection.

    The contact time is refined on the analytic margin derivative; the order
    classification afterwards is exact linear algebra.
    """
    sys = behavior.system
    targets = [p for p in range(1, sys.n_constraints + 1) if p not in behavior.active]
    if behavior.is_constrained:
        targets += [sys.n_constraints + 1, sys.n_constraints + 2]
    if not targets:
        return []
    count = max(cfg.samples_per_arc, 16)
    ts, xs = sample_arc(behavior.A_hat, behavior.b_hat, x_start, duration, count)
    rates = xs @ behavior.A_hat.T + behavior.b_hat
    scales = np.maximum(1.0, np.linalg.norm(xs, axis=1))
    touches: list[tuple[float, int, TangencyResult]] = []
    edge = max(1e-7 * duration, 10 * cfg.touch_time_tol * duration)

    for p in targets:
        c, d = constraint_row(behavior, p)
        if not np.any(c):
            continue
        norm_c = float(np.linalg.norm(c))
        m = (xs @ c + d) / (norm_c * scales)
        dm = rates @ c

        if np.max(np.abs(m)) <= cfg.eps_eq and np.max(np.abs(dm)) <= cfg.eps_eq:
            raise InfeasibleTrajectoryError(
                f"constraint {p} is identically active on an arc that does not "
                "list it; reclassify the arc",
                time=t_start,
                constraint=p,
            )

        def refine(lo: int, hi: int) -> float:
            a, b = ts[lo], ts[hi]
            fa = float(rates[lo] @ c)
            for _ in range(200):
                mid = 0.5 * (a + b)
                x_mid = propagate(behavior.A_hat, behavior.b_hat, x_start, mid)
                fm = float(c @ (behavior.A_hat @ x_mid + behavior.b_hat))
                if fa * fm <= 0:
                    b = mid
                else:
                    a, fa = mid, fm
                if b - a <= cfg.touch_time_tol * max(duration, 1.0):
                    break
            return 0.5 * (a + b)

        candidates: list[float] = []
        for i in range(len(ts) - 1):
            if dm[i] > 0 >= dm[i + 1] and max(m[i], m[i + 1]) > -1e-5:
                candidates.append(refine(i, i + 1))
        # a grid sample may itself violate between stationary points
        worst = int(np.argmax(m))
        if m[worst] > cfg.eps_feas and ts[worst] not in candidates:
            candidates.append(float(ts[worst]))

        for t_rel in candidates:
            if not edge < t_rel < duration - edge:
                continue
            x_at = propagate(behavior.A_hat, behavior.b_hat, x_start, t_rel)
            m_at = float(c @ x_at + d) / (norm_c * max(1.0, np.linalg.norm(x_at)))
            if m_at > cfg.eps_feas:
                raise InfeasibleTrajectoryError(
                    f"constraint {p} violated by {m_at:.3e}",
                    time=t_start + t_rel,
                    constraint=p,
                )
            if m_at < -cfg.eps_feas:
                continue
            verdict = tangent_condition(behavior, x_at, p, cfg)
            if verdict.kind == "tangent":
                touches.append((t_start + t_rel, p, verdict))
            elif verdict.kind in ("crossing", "identical"):
                raise InfeasibleTrajectoryError(
                    f"constraint {p} touches the boundary at odd order "
                    f"{verdict.order} inside an arc",
                    time=t_start + t_rel,
                    constraint=p,
                )
    return touches


def _marker_from_touches(
    behavior: SystemBehavior,
    arc: int,
    touches: list[tuple[int, TangencyResult]],
    cfg: RunConfig,
) -> TangentMarker:
    eq_rows: list[Row] = []
    strict_rows: list[Row] = []
    orders: dict[int, int] = {}
    for p, verdict in touches:
        c, d = constraint_row(behavior, p)
        tag = f"marker:{p}"
        eq_rows.extend(_zero_ladder_rows(c, d, behavior, verdict.order, tag))
        strict_rows.append(_ladder_strict_row(c, behavior, verdict.order, tag))
        orders[p] = verdict.order
    return TangentMarker(
        arc=arc,
        touched=tuple(sorted(orders)),
        orders=orders,
        eq_rows=tuple(reduce_rows(eq_rows, cfg.eps_row)),
        strict_rows=tuple(strict_rows),
    )


def extract_asl(
    sys: LinearSystem,
    arc_spec: list[tuple[SystemBehavior, float]],
    x0: Array,
    cfg: RunConfig = DEFAULT,
    t0: float = 0.0,
) -> TimedTrajectory:
    """Build the full ASL of a trajectory given as timed arcs.

    Propagates the arcs, validates every junction, scans arc interiors for
    tangent contacts, and rejects the trajectory on any violation beyond
    tolerance.
    """
    if not arc_spec:
        raise InvalidInputError("arc_spec must contain at least one arc")
    behaviors = [item[0] for item in arc_spec]
    durations = [float(item[1]) for item in arc_spec]
    if any(d <= 0 for d in durations):
        raise InvalidInputError("arc durations must be positive")
    x0 = np.asarray(x0, dtype=float).reshape(-1)

    # propagate the arc chain and check on-manifold entry of constrained arcs
    states = [x0]
    t = t0
    starts = []
    for beh, dur in zip(behaviors, durations):
        starts.append(t)
        x_in = states[-1]
        resid = beh.residual(x_in)
        if resid > cfg.eps_eq * max(1.0, float(np.linalg.norm(x_in))):
            raise InfeasibleTrajectoryError(
                f"state enters a constrained arc off its boundary "
                f"(residual {resid:.3e})",
                time=t,
            )
        states.append(propagate(beh.A_hat, beh.b_hat, x_in, dur))
        t += dur
    ends = np.cumsum(durations) + t0

    # boundary-of-trajectory feasibility (no rows recorded: x0 and xf fixed)
    for side, beh, x_at, when in (
        ("start", behaviors[0], x0, t0),
        ("end", behaviors[-1], states[-1], ends[-1]),
    ):
        for p, status in end_feasibility(beh, x_at, side, cfg).items():
            if status.status == "violated":
                raise InfeasibleTrajectoryError(
                    f"constraint {p} infeasible at the trajectory {side}",
                    time=when,
                    constraint=p,
                )

    # junctions
    end_constraints: list[AdditionalEndConstraint | None] = []
    for j in range(len(behaviors) - 1):
        s1, s2 = behaviors[j], behaviors[j + 1]
        x_j = states[j + 1]
        report = connection_conditions(s1, s2, x_j, cfg)
        if not report.ok:
            raise InvalidJunctionError(
                f"junction {j + 1} invalid: " + "; ".join(report.violations)
            )
        eq_rows = list(report.eq_rows)
        strict_rows = list(report.strict_rows)
        orders = {p: r for (_, p), r in report.orders.items()}
        touched: set[int] = set()
        active_union = set(s1.active) | set(s2.active)
        for side, beh in (("end", s1), ("start", s2)):
            for p, status in end_feasibility(beh, x_j, side, cfg).items():
                if p in active_union:
                    continue
                if status.status == "violated":
                    raise InfeasibleTrajectoryError(
                        f"constraint {p} infeasible at junction {j + 1}",
                        time=float(ends[j]),
                        constraint=p,
                    )
                if status.status == "identically_active":
                    raise InfeasibleTrajectoryError(
                        f"constraint {p} rides through junction {j + 1}; "
                        "the adjacent arc is misclassified",
                        time=float(ends[j]),
                        constraint=p,
                    )
                if status.status in ("touch", "saturated"):
                    eq_rows.extend(status.eq_rows)
                    strict_rows.extend(status.strict_rows)
                    touched.add(p)
                    if status.order is not None:
                        orders[p] = status.order
        # rows already implied by the adjacent arcs' equalities drop out
        context = list(s1.rows) + list(s2.rows)
        reduced = reduce_rows(context + eq_rows, cfg.eps_row)[len(reduce_rows(context, cfg.eps_row)):]
        if reduced or strict_rows:
            end_constraints.append(
                AdditionalEndConstraint(
                    junction=j,
                    touched=tuple(sorted(touched)),
                    orders=orders,
                    eq_rows=tuple(reduced),
                    strict_rows=tuple(strict_rows),
                )
            )
        else:
            end_constraints.append(None)

    # interior tangent markers
    all_markers: list[tuple[TangentMarker, ...]] = []
    marker_times: list[list[float]] = []
    for j, (beh, dur) in enumerate(zip(behaviors, durations)):
        touches = _scan_arc_touches(beh, states[j], starts[j], dur, cfg)
        by_time: dict[float, list[tuple[int, TangencyResult]]] = {}
        for t_abs, p, verdict in touches:
            key = None
            for existing in by_time:
                if abs(existing - t_abs) <= 10 * cfg.touch_time_tol * max(dur, 1.0):
                    key = existing
                    break
            by_time.setdefault(t_abs if key is None else key, []).append((p, verdict))
        markers = []
        times_here = []
        for t_abs in sorted(by_time):
            markers.append(_marker_from_touches(beh, j, by_time[t_abs], cfg))
            times_here.append(t_abs)
        all_markers.append(tuple(markers))
        marker_times.append(times_here)

    law = AugmentedSwitchingLaw(
        arcs=tuple(behaviors),
        markers=tuple(all_markers),
        end_constraints=tuple(end_constraints),
    )
    return assemble_trajectory(law, x0, ends, marker_times, t0=t0)


# ---------------------------------------------------------------------------
# feasibility audit


@dataclass(frozen=True)
class FeasibilityReport:
    """Margins are distances to the boundary, normalized: positive inside.

    ``min_margins`` maps each constraint to its closest approach and the time
    it happens; the trajectory is feasible iff every margin stays above
    -eps_feas and every equality residual below eps_eq.
    """

    feasible: bool
    min_margins: dict[int, tuple[float, float]]  # p -> (normalized margin, time)
    max_equality_residual: float
    violations: tuple[str, ...]

    def __str__(self) -> str:
        head = "feasible" if self.feasible else "INFEASIBLE"
        lines = [head, f"max equality residual {self.max_equality_residual:.3e}"]
        for p, (m, t) in sorted(self.min_margins.items()):
            lines.append(f"constraint {p}: min margin {m:+.3e} at t={t:.6f}")
        lines.extend(self.violations)
        return "\n".join(lines)


def check_feasible(
    traj: TimedTrajectory, cfg: RunConfig = DEFAULT, xf: Array | None = None
) -> FeasibilityReport:
    """Dense feasibility audit: margins along arcs, equalities at keypoints.

    Sampling is uniform per arc plus geometrically clustered points near both
    arc ends, where boundary contact concentrates.
    """
    sys = traj.law.arcs[0].system
    states = traj.keypoint_states()
    min_margins: dict[int, tuple[float, float]] = {}
    violations: list[str] = []
    max_resid = 0.0

    def note_margin(p: int, value: float, when: float):
        if p not in min_margins or value < min_margins[p][0]:
            min_margins[p] = (value, when)

    for arc, a, b in traj.arc_spans():
        beh = traj.law.arcs[arc]
        t_a, t_b = float(traj.times[a]), float(traj.times[b])
        dur = t_b - t_a
        rel = np.linspace(0.0, dur, max(cfg.samples_per_arc, 16))
        cluster = dur * np.geomspace(1e-9, 0.1, 24)
        rel = np.unique(np.concatenate([rel, cluster, dur - cluster]))
        xs = np.empty((len(rel), sys.dim))
        for k, s in enumerate(rel):
            xs[k] = propagate(beh.A_hat, beh.b_hat, states[a], float(s))
        scales = np.maximum(1.0, np.linalg.norm(xs, axis=1))

        targets = [p for p in range(1, sys.n_constraints + 1) if p not in beh.active]
        if beh.is_constrained:
            targets += [sys.n_constraints + 1, sys.n_constraints + 2]
        for p in targets:
            c, d = constraint_row(beh, p)
            if not np.any(c):
                # zero feedback gain: the control margin is the constant -u_max
                continue
            m = (xs @ c + d) / (np.linalg.norm(c) * scales)
            worst = int(np.argmax(m))
            note_margin(p, -float(m[worst]), t_a + float(rel[worst]))
            if m[worst] > cfg.eps_feas:
                violations.append(
                    f"constraint {p} margin {-m[worst]:+.3e} at t={t_a + rel[worst]:.6f}"
                )

        if beh.is_constrained:
            for row in beh.rows:
                resid = np.abs(xs @ row.f + row.gamma) / (
                    max(1.0, np.linalg.norm(row.f)) * scales
                )
                worst = int(np.argmax(resid))
                max_resid = max(max_resid, float(resid[worst]))
                if resid[worst] > cfg.eps_eq:
                    violations.append(
                        f"arc {arc} equality ({row.provenance}) residual "
                        f"{resid[worst]:.3e} at t={t_a + rel[worst]:.6f}"
                    )

    def check_rows(rows, x_at, when, what):
        nonlocal max_resid
        for row in rows:
            r = abs(row.value(x_at)) / (
                max(1.0, np.linalg.norm(row.f)) * max(1.0, np.linalg.norm(x_at))
            )
            max_resid = max(max_resid, r)
            if r > cfg.eps_eq:
                violations.append(
                    f"{what} equality ({row.provenance}) residual {r:.3e} at t={when:.6f}"
                )

    def check_strict(rows, x_at, when, what):
        for row in rows:
            v = row.value(x_at) / (
                max(1.0, np.linalg.norm(row.f)) * max(1.0, np.linalg.norm(x_at))
            )
            if v > cfg.eps_feas:
                violations.append(
                    f"{what} strict row ({row.provenance}) nonnegative "
                    f"({v:+.3e}) at t={when:.6f}"
                )

    for i, kp in enumerate(traj.keypoints, start=1):
        if kp.kind == "marker":
            when = float(traj.times[i])
            check_rows(kp.marker.eq_rows, states[i], when, f"marker@{when:.4f}")
            check_strict(kp.marker.strict_rows, states[i], when, f"marker@{when:.4f}")

    arc_end_kp = {arc: b for arc, _, b in traj.arc_spans()}
    for ec in traj.law.end_constraints:
        if ec is None:
            continue
        i = arc_end_kp[ec.junction]
        when = float(traj.times[i])
        check_rows(ec.eq_rows, states[i], when, f"junction@{when:.4f}")
        check_strict(ec.strict_rows, states[i], when, f"junction@{when:.4f}")

    if xf is not None:
        err = np.linalg.norm(states[-1] - np.asarray(xf, dtype=float))
        rel = err / max(1.0, np.linalg.norm(xf))
        max_resid = max(max_resid, rel)
        if rel > cfg.eps_eq:
            violations.append(f"terminal state misses the target by {err:.3e}")

    return FeasibilityReport(
        feasible=not violations,
        min_margins=min_margins,
        max_equality_residual=max_resid,
        violations=tuple(violations),
    )


# ---------------------------------------------------------------------------
# equality-system assembly


def build_equality_system(
    traj: TimedTrajectory, xf: Array, cfg: RunConfig = DEFAULT, validate: bool = True
):
    """Stack the keypoint equalities induced by the ASL plus the terminal rows.

    Constrained-arc rows are attached at exactly one end of each arc (the
    end keypoint); tangent-marker and junction rows at their own keypoints;
    x(t_M) = xf at the last. Rows dependent on earlier rows at the same
    keypoint are dropped, provenance retained.

    ``validate=False`` skips the on-trajectory residual check, for callers
    that build the system around a seed schedule Newton has not polished yet.
    """
    from .optimality import EqualityRow, EqualitySystem, validate_on_trajectory

    xf = np.asarray(xf, dtype=float).reshape(-1)
    n = traj.x0.shape[0]
    per_keypoint: dict[int, list[tuple[Row, str]]] = {i: [] for i in range(1, traj.M + 1)}

    # terminal rows first so they win the reduction at t_M
    for k in range(n):
        row = Row(np.eye(n)[k], -float(xf[k]), provenance=f"terminal:x{k + 1}")
        per_keypoint[traj.M].append((row, row.provenance))

    arc_end_kp = {arc: b for arc, _, b in traj.arc_spans()}
    for arc, beh in enumerate(traj.law.arcs):
        if beh.is_constrained:
            i = arc_end_kp[arc]
            for row in beh.rows:
                per_keypoint[i].append((row, f"arc{arc + 1}:{row.provenance}"))

    for i, kp in enumerate(traj.keypoints, start=1):
        if kp.kind == "marker":
            for row in kp.marker.eq_rows:
                per_keypoint[i].append((row, f"kp{i}:{row.provenance}"))

    for ec in traj.law.end_constraints:
        if ec is None:
            continue
        i = arc_end_kp[ec.junction]
        for row in ec.eq_rows:
            per_keypoint[i].append((row, f"junction{ec.junction + 1}:{row.provenance}"))

    rows: list[EqualityRow] = []
    for i in range(1, traj.M + 1):
        tagged = [
            Row(r.f, r.gamma, provenance=tag) for r, tag in per_keypoint[i]
        ]
        for row in reduce_rows(tagged, cfg.eps_row):
            rows.append(
                EqualityRow(keypoint=i, f=row.f, gamma=row.gamma, provenance=row.provenance)
            )

    system = EqualitySystem(
        rows=tuple(rows),
        dynamics=tuple(traj.interval_dynamics()),
        times=traj.times.copy(),
        x0=traj.x0.copy(),
    )
    if validate:
        validate_on_trajectory(system, cfg)
    return system
