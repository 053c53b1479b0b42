"""Structure-preserving descent of the terminal time.

The keypoint equalities H(t) = 0 carve a manifold in time space; as long as
the switching structure is fixed and the perturbation small, points on that
manifold are feasible trajectories. The optimizer walks that manifold
downhill in t_M, restores H with Newton steps, audits feasibility, and when
it runs into the boundary of the feasible set it appends the newly active
feature (tangent marker or junction constraint) or deletes arcs whose
duration has collapsed to zero. It stops when the rank test is satisfied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .asl import (
    AugmentedSwitchingLaw,
    Keypoint,
    TangentMarker,
    TimedTrajectory,
    _ladder_strict_row,
    _zero_ladder_rows,
    build_equality_system,
    check_feasible,
    constraint_row,
    derivative_ladder,
    extract_asl,
)
from .config import DEFAULT, RunConfig
from .errors import (
    InvalidJunctionError,
    ProjectionFailureError,
    RestructureError,
)
from .linsys import Array, propagate
from .optimality import EqualitySystem, OptimalityVerdict, necessary_condition_test
from .rows import reduce_rows


# ---------------------------------------------------------------------------
# Newton restoration


def newton_project(
    traj: TimedTrajectory,
    xf: Array,
    pinned: dict[int, float] | None = None,
    cfg: RunConfig = DEFAULT,
    system: EqualitySystem | None = None,
    trust: float | None = None,
) -> TimedTrajectory:
    """Drive H(t) to zero over the unpinned keypoint times.

    ``pinned`` maps 1-based keypoint indices to fixed target times. Raises a
    projection failure when Newton does not converge, a step leaves the trust
    region, or the schedule stops being strictly increasing.
    """
    if system is None:
        system = build_equality_system(traj, xf, cfg, validate=False)
    pinned = dict(pinned or {})
    t = traj.times.copy()
    for idx, target in pinned.items():
        t[idx] = float(target)
    M = traj.M
    free_idx = [i for i in range(1, M + 1) if i not in pinned]
    if trust is None:
        trust = cfg.newton_trust * max(1.0, float(t[-1]))

    def resid_norm(ts):
        r = system.residuals(ts)
        return float(np.max(np.abs(r))) if r.size else 0.0

    if not np.all(np.diff(t) > 0):
        raise ProjectionFailureError("pinned targets break the schedule order")
    r = resid_norm(t)
    if r <= cfg.eps_eq:
        return traj.with_times(t)
    moved_total = 0.0
    for _ in range(cfg.newton_max_iter):
        J = system.jacobian(t)[:, [i - 1 for i in free_idx]]
        rhs = -system.residuals(t)
        step, *_ = np.linalg.lstsq(J, rhs, rcond=None)
        if not np.all(np.isfinite(step)):
            raise ProjectionFailureError("Newton step is not finite")
        # largest scale keeping the schedule strictly increasing
        delta = np.zeros_like(t)
        for k, i in enumerate(free_idx):
            delta[i] = step[k]
        gaps = np.diff(t)
        shrink = np.diff(delta)
        limit = 1.0
        for g, s in zip(gaps, shrink):
            if s < 0:
                limit = min(limit, 0.9 * g / (-s))
        scale = min(1.0, limit)
        accepted = False
        for _ in range(60):
            cand = t + scale * delta
            if np.all(np.diff(cand) > 0):
                r_new = resid_norm(cand)
                if r_new < r or r_new <= cfg.eps_eq:
                    moved_total += scale * float(np.max(np.abs(step)))
                    t, r = cand, r_new
                    accepted = True
                    break
            scale *= 0.5
        if not accepted:
            raise ProjectionFailureError(f"Newton stalled at residual {r:.3e}")
        if moved_total > trust:
            raise ProjectionFailureError(
                f"Newton left the trust region ({moved_total:.3e} > {trust:.3e})"
            )
        if r <= cfg.eps_eq:
            return traj.with_times(t)
    raise ProjectionFailureError(
        f"Newton did not converge in {cfg.newton_max_iter} iterations "
        f"(residual {r:.3e})"
    )


# ---------------------------------------------------------------------------
# descent bookkeeping


@dataclass
class DescentState:
    """One optimizer iterate: trajectory, its rank verdict, and step control."""

    traj: TimedTrajectory
    xf: Array
    system: EqualitySystem
    verdict: OptimalityVerdict
    step: float
    history: list[dict] = field(default_factory=list)
    status: str = "progress"

    @property
    def t_final(self) -> float:
        return self.traj.t_final

    @property
    def dof(self) -> int:
        """Free time directions on the manifold: (M - 1) - M'."""
        return (self.traj.M - 1) - self.verdict.rows


def make_state(
    traj: TimedTrajectory, xf: Array, cfg: RunConfig = DEFAULT, step: float | None = None
) -> DescentState:
    system = build_equality_system(traj, xf, cfg)
    verdict = necessary_condition_test(system, cfg)
    if step is None:
        step = 1e-2 * float(np.min(traj.arc_durations()))
    return DescentState(traj=traj, xf=np.asarray(xf, float), system=system, verdict=verdict, step=step)


def _greedy_basis(J: Array, rank: int, forced: list[int]) -> list[int]:
    """Column indices (0-based) of an independent set of size `rank`.

    Forced columns are taken first; the rest greedily by residual norm with
    lowest-index tie-breaking, for reproducible runs.
    """
    M = J.shape[1]
    basis: list[int] = []
    Q: list[Array] = []

    def try_add(j: int) -> bool:
        v = J[:, j].astype(float)
        n0 = np.linalg.norm(v)
        if n0 == 0:
            return False
        for q in Q:
            v = v - (q @ v) * q
        if np.linalg.norm(v) > 1e-12 * max(n0, 1.0):
            Q.append(v / np.linalg.norm(v))
            basis.append(j)
            return True
        return False

    for j in forced:
        try_add(j)
    while len(basis) < rank:
        best, best_norm = None, 0.0
        for j in range(M):
            if j in basis:
                continue
            v = J[:, j].astype(float)
            for q in Q:
                v = v - (q @ v) * q
            nv = np.linalg.norm(v)
            if nv > best_norm + 1e-15:
                best, best_norm = j, nv
        if best is None or best_norm <= 1e-12:
            break
        try_add(best)
    return basis


def _descent_directions(state: DescentState, cfg: RunConfig) -> list[tuple[str, int | None, float]]:
    """Candidate moves ordered by descent rate of t_M.

    Each entry is (kind, column, rate): 'direct' lowers t_M itself with the
    basic columns of J restricted to the first M-1 times; 'free' moves one
    free column j, dragging t_M along at rate s_j through the implicit
    function (basis forced to contain the t_M column).
    """
    J = state.verdict.jacobian
    M = state.traj.M
    rank = state.verdict.full_rank
    moves: list[tuple[str, int | None, float]] = [("direct", None, 1.0)]
    basis = _greedy_basis(J, rank, forced=[M - 1])
    if (M - 1) in basis:
        JB = J[:, basis]
        pos = basis.index(M - 1)
        for j in range(M - 1):
            if j in basis:
                continue
            sol, *_ = np.linalg.lstsq(JB, -J[:, j], rcond=None)
            s = float(sol[pos])
            if abs(s) > 1e-12:
                moves.append(("free", j, abs(s)))
    moves.sort(key=lambda mv: (-mv[2], mv[1] if mv[1] is not None else -1))
    return moves


def _attempt_move(
    state: DescentState,
    kind: str,
    column: int | None,
    alpha: float,
    cfg: RunConfig,
) -> TimedTrajectory | None:
    """One pinned Newton solve for a candidate move; None if it fails."""
    traj, J = state.traj, state.verdict.jacobian
    M = traj.M
    rank = state.verdict.full_rank
    t = traj.times
    if kind == "direct":
        basis = _greedy_basis(J[:, : M - 1], rank, forced=[])
        free = [j for j in range(M) if j not in basis and j != M - 1]
        pinned = {j + 1: float(t[j + 1]) for j in free}
        pinned[M] = float(t[M]) - alpha
    else:
        basis = _greedy_basis(J, rank, forced=[M - 1])
        JB = J[:, basis]
        pos = basis.index(M - 1)
        sol, *_ = np.linalg.lstsq(JB, -J[:, column], rcond=None)
        direction = -np.sign(sol[pos])
        free = [j for j in range(M) if j not in basis]
        pinned = {j + 1: float(t[j + 1]) for j in free if j != column}
        pinned[column + 1] = float(t[column + 1]) + direction * alpha
    try:
        return newton_project(state.traj, state.xf, pinned, cfg, system=state.system)
    except ProjectionFailureError:
        return None


def descend_terminal_time(state: DescentState, cfg: RunConfig = DEFAULT) -> DescentState:
    """One accepted descent step: feasible and with strictly smaller t_M.

    Candidate directions are probed in decreasing descent rate; the step is
    halved on audit failure down to the step floor. A no-op with status
    'stalled' is returned when nothing improves; a no-op with status
    'satisfied' when the verdict already holds.
    """
    if state.verdict.satisfied:
        return replace(state, status="satisfied")
    floor = cfg.step_floor_rel * max(1.0, state.t_final)
    t_now = state.t_final
    for kind, column, rate in _descent_directions(state, cfg):
        alpha = max(state.step, floor)
        while alpha >= floor:
            cand = _attempt_move(state, kind, column, alpha, cfg)
            if cand is not None and cand.t_final < t_now - floor:
                report = check_feasible(cand, cfg, xf=state.xf)
                if report.feasible:
                    new_system = build_equality_system(cand, state.xf, cfg)
                    new_verdict = necessary_condition_test(new_system, cfg)
                    new_state = DescentState(
                        traj=cand,
                        xf=state.xf,
                        system=new_system,
                        verdict=new_verdict,
                        step=min(alpha * cfg.step_grow, 0.25 * cand.t_final),
                        history=state.history,
                        status="progress",
                    )
                    new_state.history.append(
                        {
                            "t_final": cand.t_final,
                            "dof": new_state.dof,
                            "move": f"{kind}:{column}",
                            "alpha": alpha,
                        }
                    )
                    return new_state
            alpha *= cfg.step_shrink
    return replace(state, status="stalled")


# ---------------------------------------------------------------------------
# structure changes


def collapse_zero_arcs(
    traj: TimedTrajectory, tol: float, cfg: RunConfig = DEFAULT
) -> TimedTrajectory:
    """Delete arcs shorter than `tol`, merge equal neighbours, re-extract."""
    durations = traj.arc_durations()
    keep = [j for j, d in enumerate(durations) if d >= tol]
    if len(keep) == len(durations):
        return traj
    if not keep:
        raise RestructureError("every arc collapsed to zero duration")
    merged: list[tuple] = []  # (behavior, duration)
    for j in keep:
        beh, dur = traj.law.arcs[j], float(durations[j])
        if merged and merged[-1][0] == beh:
            merged[-1] = (beh, merged[-1][1] + dur)
        else:
            merged.append((beh, dur))
    try:
        return extract_asl(
            traj.law.arcs[0].system,
            [(b, d) for b, d in merged],
            traj.x0,
            cfg,
            t0=float(traj.times[0]),
        )
    except InvalidJunctionError as exc:
        raise RestructureError(f"arc deletion left an invalid switching law: {exc}")


def _insert_marker(
    traj: TimedTrajectory, arc: int, t_touch: float, p: int, cfg: RunConfig
) -> TimedTrajectory:
    """Append a tangent marker for constraint p at an interior arc time."""
    beh = traj.law.arcs[arc]
    span = {a: (s, e) for a, s, e in traj.arc_spans()}[arc]
    x_start = traj.keypoint_states()[span[0]]
    x_at = propagate(beh.A_hat, beh.b_hat, x_start, t_touch - float(traj.times[span[0]]))
    c, d = constraint_row(beh, p)
    ladder = derivative_ladder(c, beh, x_at, cfg)
    order = ladder.first if ladder.first is not None and ladder.first % 2 == 0 else 2
    tag = f"marker:{p}"
    marker = TangentMarker(
        arc=arc,
        touched=(p,),
        orders={p: order},
        eq_rows=tuple(reduce_rows(_zero_ladder_rows(c, d, beh, order, tag), cfg.eps_row)),
        strict_rows=(_ladder_strict_row(c, beh, order, tag),),
    )
    from .asl import assemble_trajectory

    entries: dict[int, list[tuple[float, TangentMarker]]] = {
        j: [] for j in range(traj.law.n_arcs)
    }
    for i, kp in enumerate(traj.keypoints, start=1):
        if kp.kind == "marker":
            entries[kp.arc].append((float(traj.times[i]), kp.marker))
    entries[arc].append((float(t_touch), marker))
    entries[arc].sort(key=lambda item: item[0])
    law = replace(
        traj.law,
        markers=tuple(
            tuple(mk for _, mk in entries[j]) for j in range(traj.law.n_arcs)
        ),
    )
    arc_ends = np.array([float(traj.times[e]) for _, _, e in traj.arc_spans()])
    marker_times = [[tm for tm, _ in entries[j]] for j in range(traj.law.n_arcs)]
    return assemble_trajectory(law, traj.x0, arc_ends, marker_times, t0=float(traj.times[0]))


def _near_activations(
    state: DescentState, cfg: RunConfig
) -> list[tuple[int, float, int]]:
    """(constraint, time, arc) of margins close enough to call boundary contact."""
    report = check_feasible(state.traj, cfg, xf=state.xf)
    out = []
    spans = state.traj.arc_spans()
    times = state.traj.times
    for p, (margin, when) in report.min_margins.items():
        if -cfg.eps_feas <= margin <= cfg.activation_tol:
            arc = next(
                (a for a, s, e in spans if times[s] <= when <= times[e]),
                None,
            )
            if arc is None:
                continue
            s, e = next((s, e) for a, s, e in spans if a == arc)
            edge = 1e-4 * (times[e] - times[s])
            interior = times[s] + edge < when < times[e] - edge
            if interior:
                out.append((p, float(when), arc))
    return out


def restructure(state: DescentState, cfg: RunConfig = DEFAULT) -> DescentState | None:
    """Apply one structure change at the feasibility boundary, or None.

    Tiny arcs are deleted first; otherwise the closest near-active margin is
    promoted to a tangent marker and the times re-projected so the new
    equality holds exactly.
    """
    tol = cfg.collapse_tol * max(1.0, state.t_final)
    durations = state.traj.arc_durations()
    if np.min(durations) < tol:
        collapsed = collapse_zero_arcs(state.traj, tol, cfg)
        polished = newton_project(collapsed, state.xf, cfg=cfg)
        if not check_feasible(polished, cfg, xf=state.xf).feasible:
            return None
        return make_state(polished, state.xf, cfg, step=state.step)

    for p, when, arc in _near_activations(state, cfg):
        candidate = _insert_marker(state.traj, arc, when, p, cfg)
        try:
            polished = newton_project(candidate, state.xf, cfg=cfg)
        except ProjectionFailureError:
            continue
        if check_feasible(polished, cfg, xf=state.xf).feasible:
            return make_state(polished, state.xf, cfg, step=state.step)
    return None


def optimize(
    traj: TimedTrajectory,
    xf: Array,
    cfg: RunConfig = DEFAULT,
    max_iter: int | None = None,
) -> DescentState:
    """Descend t_M until the rank condition holds, restructuring at boundaries.

    Accepted iterates are always feasible and strictly improving; the final
    state's status is 'satisfied' or 'stalled', never silent.
    """
    state = make_state(traj, xf, cfg)
    state.history.append({"t_final": state.t_final, "dof": state.dof, "move": "seed", "alpha": 0.0})
    limit = max_iter if max_iter is not None else cfg.max_outer_iter
    for _ in range(limit):
        if state.verdict.satisfied:
            state.status = "satisfied"
            return state
        nxt = descend_terminal_time(state, cfg)
        if nxt.status == "progress":
            state = nxt
            continue
        restructured = restructure(state, cfg)
        if restructured is not None and (
            restructured.traj.M != state.traj.M
            or restructured.verdict.rows != state.verdict.rows
        ):
            state = restructured
            state.history.append(
                {"t_final": state.t_final, "dof": state.dof, "move": "restructure", "alpha": 0.0}
            )
            continue
        state.status = "stalled" if not state.verdict.satisfied else "satisfied"
        return state
    state.status = "satisfied" if state.verdict.satisfied else "stalled"
    return state
