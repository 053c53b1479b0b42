"""Independent brute-force validators.

Two cross-checks that deliberately avoid the analytic machinery: a grid
search over clipped alternating-bang profiles for small chain problems, and
plain central finite differences for the keypoint Jacobian.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .chain import CoiProblem
from .config import DEFAULT, RunConfig
from .errors import InvalidInputError
from .linsys import Array, propagate


# ---------------------------------------------------------------------------
# exact chain segment propagation, batched over grid cells


def _factorials(n: int) -> list[float]:
    out = [1.0]
    for k in range(1, n + 2):
        out.append(out[-1] * k)
    return out


def _batched_phase(X: Array, u: float, dt: Array, n: int) -> Array:
    """Closed-form chain update x -> x(dt) under constant u, per row."""
    fact = _factorials(n)
    powers = np.empty((X.shape[0], n + 2))
    powers[:, 0] = 1.0
    for e in range(1, n + 2):
        powers[:, e] = powers[:, e - 1] * dt
    Xn = np.empty_like(X)
    for i in range(n):
        acc = u * powers[:, i + 1] / fact[i + 1]
        for j in range(i + 1):
            acc = acc + X[:, j] * powers[:, i - j] / fact[i - j]
        Xn[:, i] = acc
    return Xn


def _batched_clipped_run(
    problem: CoiProblem, signs, D: Array, bound_samples: int = 7
) -> tuple[Array, Array]:
    """Final states and feasibility of clipped bang patterns, batched.

    x1 is clipped exactly at its bound (x1' = u makes the hit time explicit),
    turning long bangs into bang-plus-cruise; bounds on higher states are
    sampled along each phase. Rows of D are duration vectors.
    """
    n = problem.n
    cells = D.shape[0]
    X = np.tile(problem.x0.astype(float), (cells, 1))
    feasible = np.ones(cells, dtype=bool)
    lim1 = problem.x_max[0]
    finite = np.isfinite(problem.x_max)
    check_bounds = bool(np.any(finite))
    for k, sign in enumerate(signs):
        d = D[:, k].astype(float)
        u = sign * problem.u_max
        if np.isfinite(lim1):
            t_hit = np.maximum((np.sign(u) * lim1 - X[:, 0]) / u, 0.0)
        else:
            t_hit = np.full(cells, np.inf)
        d1 = np.minimum(d, t_hit)
        d2 = np.maximum(d - d1, 0.0)
        for uu, dd in ((u, d1), (0.0, d2)):
            if not np.any(dd > 0):
                continue
            if check_bounds:
                for frac in np.linspace(0.25, 1.0, bound_samples):
                    Xs = _batched_phase(X, uu, dd * frac, n)
                    bad = np.any(
                        np.abs(Xs[:, finite]) > problem.x_max[finite] * (1 + 1e-9) + 1e-9,
                        axis=1,
                    )
                    feasible &= ~bad
            X = _batched_phase(X, uu, dd, n)
    return X, feasible


def _clipped_switches(problem: CoiProblem, signs, durs) -> tuple[int, list[float]]:
    """Realized switch count/times of one clipped pattern (scalar replay)."""
    x1 = float(problem.x0[0])
    lim1 = problem.x_max[0]
    prev_u = None
    switches = 0
    sw_times: list[float] = []
    t = 0.0
    for sign, dur in zip(signs, durs):
        if dur <= 0:
            continue
        u = sign * problem.u_max
        t_hit = max((np.sign(u) * lim1 - x1) / u, 0.0) if np.isfinite(lim1) else np.inf
        for uu, dd in ((u, min(dur, t_hit)), (0.0, max(dur - t_hit, 0.0))):
            if dd <= 0:
                continue
            if prev_u is not None and uu != prev_u:
                switches += 1
                sw_times.append(t)
            prev_u = uu
            x1 += uu * dd
            t += dd
    return switches, sw_times


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class OracleResult:
    t_final: float
    switch_times: tuple[float, ...]
    switch_count: int
    grid_step: float
    terminal_error: float
    signs: tuple[int, ...]
    durations: tuple[float, ...]

    def to_json_dict(self) -> dict:
        return {
            "t_final": self.t_final,
            "switch_times": list(self.switch_times),
            "switch_count": self.switch_count,
            "grid_step": self.grid_step,
            "terminal_error": self.terminal_error,
        }


@dataclass(frozen=True)
class _Candidate:
    t_final: float
    switches: int
    durations: tuple[float, ...]
    signs: tuple[int, ...]
    error: float

    @property
    def key(self):
        return (round(self.t_final, 12), self.switches, self.durations)


def _collect(problem: CoiProblem, grids: list[Array], tol: float, max_arcs: int):
    """All lattice cells hitting xf within tol, as candidates."""
    lattice = np.array(list(itertools.product(*grids)), dtype=float)
    if lattice.size == 0:
        return []
    xf_scale = np.maximum(1.0, np.abs(problem.xf))
    out: list[_Candidate] = []
    for first in (+1, -1):
        signs = tuple(first * (-1) ** j for j in range(max_arcs))
        X_end, feas = _batched_clipped_run(problem, signs, lattice)
        errs = np.max(np.abs((X_end - problem.xf) / xf_scale), axis=1)
        hits = np.nonzero((errs <= tol) & feas)[0]
        for idx in hits:
            durs = tuple(float(v) for v in lattice[idx])
            switches, _ = _clipped_switches(problem, signs, durs)
            out.append(
                _Candidate(
                    t_final=float(np.sum(lattice[idx])),
                    switches=switches,
                    durations=durs,
                    signs=signs,
                    error=float(errs[idx]),
                )
            )
    return out


def grid_bbs_oracle(
    problem: CoiProblem,
    max_arcs: int | None = None,
    t_max: float | None = None,
    cfg: RunConfig = DEFAULT,
    shortlist: int = 48,
) -> OracleResult | None:
    """Exhaustive clipped alternating-bang grid search for small chains.

    Round zero scans an absolute duration lattice (zeros included, so shorter
    patterns are covered); each refinement round re-searches a shrinking
    neighbourhood of a shortlist of the best candidates under a tightening
    terminal tolerance, which starves out coarse-tolerance impostors. Ties
    break toward fewer switches, then lexicographically smaller durations.
    """
    n = problem.n
    if max_arcs is None:
        max_arcs = n + 1
    if t_max is None:
        scale = float(np.max(np.abs(problem.xf - problem.x0)))
        t_max = 2.0 * n * max(1.0, scale) / min(1.0, problem.u_max)

    density = cfg.grid_density if max_arcs <= 3 else max(10, cfg.grid_density // 2)
    step = t_max / density
    grids = [np.arange(0, density + 1) * step for _ in range(max_arcs)]
    tol = 1.0 * step
    found = _collect(problem, grids, tol, max_arcs)
    if not found:
        return None
    found.sort(key=lambda c: c.key)
    pool = found[:shortlist]

    rounds = max(cfg.grid_rounds, 5)
    for _ in range(rounds):
        step /= cfg.grid_refine
        tol = max(1.0 * step, 1e-10)
        fresh: list[_Candidate] = []
        seen: set[tuple] = set()
        for cand in pool:
            grids = [
                np.unique(
                    np.maximum(
                        0.0,
                        c + np.arange(-cfg.grid_refine, cfg.grid_refine + 1) * step,
                    )
                )
                for c in cand.durations
            ]
            for c2 in _collect(problem, grids, tol, max_arcs):
                if c2.key not in seen:
                    seen.add(c2.key)
                    fresh.append(c2)
        if not fresh:
            break
        fresh.sort(key=lambda c: c.key)
        pool = fresh[:shortlist]

    best = pool[0]
    switches, sw_times = _clipped_switches(problem, best.signs, best.durations)
    return OracleResult(
        t_final=best.t_final,
        switch_times=tuple(sw_times),
        switch_count=switches,
        grid_step=step,
        terminal_error=best.error,
        signs=best.signs,
        durations=best.durations,
    )


# ---------------------------------------------------------------------------
# finite-difference Jacobian


def finite_difference_jacobian(
    dynamics: list[tuple[Array, Array]],
    times: Array,
    x0: Array,
    h: float = 1e-6,
) -> list[list[Array]]:
    """Central differences of the keypoint states w.r.t. each keypoint time.

    Re-propagates the whole trajectory for t_j +/- h; the analytic blocks of
    the keypoint Jacobian are validated against this.
    """
    if h <= 0:
        raise InvalidInputError("h must be positive")
    times = np.asarray(times, dtype=float)
    M = len(times) - 1

    def states(ts):
        xs = [np.asarray(x0, dtype=float)]
        for i in range(1, M + 1):
            A_i, b_i = dynamics[i - 1]
            xs.append(propagate(A_i, b_i, xs[-1], float(ts[i] - ts[i - 1])))
        return xs

    blocks = [[None] * M for _ in range(M)]
    for j in range(1, M + 1):
        tp, tm = times.copy(), times.copy()
        tp[j] += h
        tm[j] -= h
        xp, xm = states(tp), states(tm)
        for i in range(1, M + 1):
            blocks[i - 1][j - 1] = (xp[i] - xm[i]) / (2 * h)
    return blocks
