"""Keypoint Jacobians, the stacked equality system, and the rank test.

A trajectory's keypoint equalities H(t) = 0 are affine functionals of the
keypoint states. The map t -> x(t_i) has an explicit Jacobian built from the
interval exponentials; time-optimality requires the Jacobian of H in the
first M-1 keypoint times to be rank deficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT, RunConfig
from .errors import DegenerateProblemError, InvalidScheduleError, StaleTrajectoryError
from .linsys import Array, matrix_exponential, propagate
from .rows import Row


@dataclass(frozen=True)
class EqualityRow:
    """One row of H: f^T x(t_keypoint) + gamma = 0, with provenance."""

    keypoint: int  # 1-based keypoint index
    f: Array
    gamma: float
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float).reshape(-1))


@dataclass(frozen=True)
class EqualitySystem:
    """Stacked keypoint equalities H(t) = 0 with evaluation hooks.

    ``dynamics`` holds one (A_i, b_i) pair per interval (t_{i-1}, t_i); the
    system re-propagates from x0 for any candidate time vector, so H and its
    Jacobian stay meaningful off the generating trajectory.
    """

    rows: tuple[EqualityRow, ...]
    dynamics: tuple[tuple[Array, Array], ...]
    times: Array
    x0: Array

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float).reshape(-1))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        if len(self.dynamics) != len(self.times) - 1:
            raise InvalidScheduleError("need one dynamics pair per interval")

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def keypoint_states(self, times: Array | None = None) -> Array:
        ts = self.times if times is None else np.asarray(times, dtype=float)
        xs = np.empty((len(ts), self.x0.shape[0]))
        xs[0] = self.x0
        for i in range(1, len(ts)):
            A_i, b_i = self.dynamics[i - 1]
            xs[i] = propagate(A_i, b_i, xs[i - 1], float(ts[i] - ts[i - 1]))
        return xs

    def residuals(self, times: Array | None = None) -> Array:
        xs = self.keypoint_states(times)
        return np.array([row.f @ xs[row.keypoint] + row.gamma for row in self.rows])

    def jacobian(self, times: Array | None = None) -> Array:
        ts = self.times if times is None else np.asarray(times, dtype=float)
        xs = self.keypoint_states(ts)
        blocks = keypoint_jacobian(list(self.dynamics), ts, xs)
        J = np.zeros((self.n_rows, self.M))
        for r, row in enumerate(self.rows):
            i = row.keypoint
            for j in range(1, i + 1):
                J[r, j - 1] = row.f @ blocks[i - 1][j - 1]
        return J


def keypoint_jacobian(
    dynamics: list[tuple[Array, Array]], times: Array, states: Array
) -> list[list[Array]]:
    """All blocks d x(t_i) / d t_j for i, j in [M].

    blocks[i-1][j-1] is the n-vector for keypoint i and time j; it is zero
    for j > i, the interval velocity for j = i, and the propagated dynamics
    mismatch for j < i.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if np.any(np.diff(times) <= 0):
        raise InvalidScheduleError("keypoint times must increase strictly")
    M = len(times) - 1
    if len(dynamics) != M:
        raise InvalidScheduleError("need one dynamics pair per interval")
    n = states.shape[1]
    E = [
        matrix_exponential(dynamics[i][0] * float(times[i + 1] - times[i]))
        for i in range(M)
    ]
    blocks: list[list[Array]] = [[np.zeros(n) for _ in range(M)] for _ in range(M)]
    for j in range(1, M + 1):
        A_j, b_j = dynamics[j - 1]
        blocks[j - 1][j - 1] = A_j @ states[j] + b_j
        if j < M:
            A_next, b_next = dynamics[j]
            v = (A_j - A_next) @ states[j] + (b_j - b_next)
            for i in range(j + 1, M + 1):
                v = E[i - 1] @ v
                blocks[i - 1][j - 1] = v
    return blocks


def equality_jacobian(system: EqualitySystem, times: Array | None = None) -> Array:
    """The M' x M Jacobian dH/dt by the chain rule through the keypoint map."""
    return system.jacobian(times)


@dataclass(frozen=True)
class OptimalityVerdict:
    """Outcome of the rank test on dH/dt restricted to the first M-1 columns."""

    jacobian: Array
    singular_values: Array
    rank: int
    rows: int
    cols: int
    satisfied: bool
    marginal: bool
    full_rank: int
    free_columns: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "rank": self.rank,
            "satisfied": bool(self.satisfied),
            "marginal": bool(self.marginal),
            "singular_values": [float(s) for s in self.singular_values],
            "free_columns": [int(j) for j in self.free_columns],
        }


def _numerical_rank(M: Array, eps_rank: float) -> tuple[int, Array, bool]:
    if min(M.shape) == 0:
        return 0, np.zeros(0), False
    svals = np.linalg.svd(M, compute_uv=False)
    smax = svals[0] if svals.size else 0.0
    if smax == 0.0:
        return 0, svals, False
    ratios = svals / smax
    rank = int(np.sum(ratios >= eps_rank))
    marginal = bool(np.any((ratios >= eps_rank / 10) & (ratios < eps_rank * 10)))
    return rank, svals, marginal


def necessary_condition_test(
    system: EqualitySystem, cfg: RunConfig = DEFAULT
) -> OptimalityVerdict:
    """Rank-deficiency test of dH/dt over the first M-1 keypoint times.

    The verdict is satisfied when the restricted Jacobian loses row rank; the
    full-matrix rank and a free-column set (columns outside a maximal
    independent set, 1-based) are reported for the optimizer.
    """
    if system.n_rows == 0:
        raise DegenerateProblemError("the equality system has no rows")
    J = system.jacobian()
    restricted = J[:, : system.M - 1]
    rank, svals, marginal = _numerical_rank(restricted, cfg.eps_rank)
    satisfied = rank < system.n_rows
    full_rank, _, _ = _numerical_rank(J, cfg.eps_rank)

    # pivot columns of a rank-revealing QR form a maximal independent set;
    # everything else is free to move the trajectory along the manifold
    free: tuple[int, ...] = ()
    if J.size:
        import scipy.linalg

        _, _, piv = scipy.linalg.qr(J, pivoting=True, mode="economic")
        basic = set(piv[:full_rank].tolist())
        free = tuple(sorted(j + 1 for j in range(system.M) if j not in basic))
    return OptimalityVerdict(
        jacobian=J,
        singular_values=svals,
        rank=rank,
        rows=system.n_rows,
        cols=system.M,
        satisfied=satisfied,
        marginal=marginal,
        full_rank=full_rank,
        free_columns=free,
    )


def validate_on_trajectory(system: EqualitySystem, cfg: RunConfig = DEFAULT) -> None:
    """Raise if the rows do not hold on the generating trajectory."""
    resid = system.residuals()
    xs = system.keypoint_states()
    for r, row in enumerate(system.rows):
        scale = max(1.0, np.linalg.norm(row.f)) * max(
            1.0, np.linalg.norm(xs[row.keypoint])
        )
        if abs(resid[r]) > 100 * cfg.eps_eq * scale:
            raise StaleTrajectoryError(
                f"equality row {row.provenance!r} has residual {resid[r]:.3e} "
                "on its own trajectory"
            )
