"""Single-input linear plants and the constraint-order algebra.

Everything downstream (arcs, switching laws, Jacobians) is built on three
primitives: the matrix exponential, exact propagation of piecewise-affine
dynamics, and the order/gain of an active state constraint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .config import DEFAULT, RunConfig
from .errors import ControllabilityError, InvalidInputError

Array = np.ndarray


def _check_finite(value: Array, name: str) -> Array:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class Constraint:
    """One affine state constraint c^T x + d <= 0."""

    c: Array
    d: float

    def __post_init__(self):
        c = _check_finite(self.c, "constraint row c").reshape(-1)
        if not np.any(c):
            raise InvalidInputError("constraint row c must be nonzero")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    def margin(self, x: Array) -> float:
        return float(self.c @ x + self.d)


@dataclass(frozen=True)
class LinearSystem:
    """The plant x' = A x + b u with |u| <= u_max and rows C x + d <= 0."""

    A: Array
    b: Array
    constraints: tuple[Constraint, ...] = ()
    u_max: float = 1.0

    def __post_init__(self):
        A = _check_finite(self.A, "A")
        b = _check_finite(self.b, "b").reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise InvalidInputError("A must be square")
        if b.shape[0] != A.shape[0]:
            raise InvalidInputError("b length must match A")
        if self.u_max <= 0:
            raise InvalidInputError("u_max must be positive")
        constraints = tuple(self.constraints)
        for k, con in enumerate(constraints):
            if con.c.shape[0] != A.shape[0]:
                raise InvalidInputError(f"constraint {k + 1} has wrong dimension")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "constraints", constraints)
        object.__setattr__(self, "u_max", float(self.u_max))
        ctrb = controllability_matrix(A, b)
        if np.linalg.matrix_rank(ctrb) < A.shape[0]:
            raise ControllabilityError(
                "rank [b, Ab, ..., A^{n-1} b] < n: system is not controllable"
            )

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def constraint(self, p: int) -> Constraint:
        """1-based constraint lookup, matching the usual index convention."""
        if not 1 <= p <= len(self.constraints):
            raise InvalidInputError(f"constraint index {p} out of range")
        return self.constraints[p - 1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.dim,
                "A": self.A.tolist(),
                "b": self.b.tolist(),
                "constraints": [
                    {"c": con.c.tolist(), "d": con.d} for con in self.constraints
                ],
                "u_max": self.u_max,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearSystem":
        data = json.loads(text)
        constraints = tuple(
            Constraint(np.asarray(item["c"], dtype=float), float(item["d"]))
            for item in data.get("constraints", [])
        )
        sys = cls(
            A=np.asarray(data["A"], dtype=float),
            b=np.asarray(data["b"], dtype=float),
            constraints=constraints,
            u_max=float(data.get("u_max", 1.0)),
        )
        if "n" in data and int(data["n"]) != sys.dim:
            raise InvalidInputError("declared n does not match A")
        return sys


@dataclass(frozen=True)
class ConstraintOrderInfo:
    """Order and feedback gain of an active state constraint.

    ``order`` is the smallest r with c^T A^{r-1} b != 0; on an arc riding the
    boundary the control is the linear feedback u = gain^T x.
    """

    index: int
    order: int
    gain: Array
    pivot: float


def controllability_matrix(A: Array, b: Array) -> Array:
    n = A.shape[0]
    cols = [b]
    for _ in range(n - 1):
        cols.append(A @ cols[-1])
    return np.column_stack(cols)


def _is_nilpotent(M: Array) -> bool:
    n = M.shape[0]
    P = np.linalg.matrix_power(M, n)
    return not np.any(P)


def _nilpotent_expm(M: Array) -> Array:
    n = M.shape[0]
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, n):
        term = term @ M / k
        out = out + term
    return out


def matrix_exponential(M: Array) -> Array:
    """e^M, exact (finite Taylor series) when M is nilpotent."""
    M = _check_finite(M, "M")
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidInputError("matrix_exponential needs a square matrix")
    if _is_nilpotent(M):
        return _nilpotent_expm(M)
    return scipy.linalg.expm(M)


def transition(A_hat: Array, b_hat: Array, dt: float) -> tuple[Array, Array]:
    """One-step transition (Phi, psi) with x(dt) = Phi x(0) + psi.

    The drift integral int_0^dt e^{A(dt-s)} b ds is read off the exponential
    of the (n+1)-dimensional augmented matrix, which also covers singular A.
    """
    A_hat = _check_finite(A_hat, "A_hat")
    b_hat = _check_finite(b_hat, "b_hat").reshape(-1)
    if dt < 0:
        raise InvalidInputError("dt must be nonnegative")
    n = A_hat.shape[0]
    if dt == 0.0:
        return np.eye(n), np.zeros(n)
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A_hat * dt
    aug[:n, n] = b_hat * dt
    E = matrix_exponential(aug)
    return E[:n, :n], E[:n, n]


def propagate(A_hat: Array, b_hat: Array, x0: Array, dt: float) -> Array:
    """Solve x' = A_hat x + b_hat over [0, dt] from x0 (exact for LTI)."""
    x0 = _check_finite(x0, "x0").reshape(-1)
    if dt == 0.0:
        return x0.copy()
    Phi, psi = transition(A_hat, b_hat, dt)
    return Phi @ x0 + psi


def sample_arc(A_hat: Array, b_hat: Array, x0: Array, duration: float, count: int) -> tuple[Array, Array]:
    """States at `count` uniform times over [0, duration], endpoints included.

    Uses one augmented exponential per step size, iterated, so each sample is
    exact up to accumulated rounding.
    """
    if count < 2:
        raise InvalidInputError("sample_arc needs at least two points")
    ts = np.linspace(0.0, duration, count)
    h = ts[1] - ts[0]
    Phi, psi = transition(A_hat, b_hat, h)
    xs = np.empty((count, x0.shape[0]))
    xs[0] = x0
    for k in range(1, count):
        xs[k] = Phi @ xs[k - 1] + psi
    return ts, xs


def constraint_order(
    sys: LinearSystem, p: int, cfg: RunConfig = DEFAULT
) -> ConstraintOrderInfo:
    """Order r_p and gain of constraint p (1-based) of `sys`.

    The pivot test is scale invariant: |c^T A^{r-1} b| must exceed
    eps_pivot * ||c|| * ||A||^{r-1} * ||b||.
    """
    con = sys.constraint(p)
    c, A, b = con.c, sys.A, sys.b
    norm_c = np.linalg.norm(c)
    norm_b = np.linalg.norm(b)
    norm_A = np.linalg.norm(A, 2)
    row = c.copy()
    for r in range(1, sys.dim + 1):
        pivot = float(row @ b)
        scale = norm_c * max(norm_A, 1e-300) ** (r - 1) * norm_b
        if abs(pivot) > cfg.eps_pivot * scale:
            gain = -(row @ A) / pivot
            return ConstraintOrderInfo(index=p, order=r, gain=gain, pivot=pivot)
        row = row @ A
    raise ControllabilityError(
        f"constraint {p}: c^T A^r b vanished for all r in [n]; "
        "controllability is violated"
    )


def phi_vector(t: float, m: int) -> Array:
    """Step-response basis (t^k / k!) for k = 1..m of an integrator chain."""
    if m < 1:
        raise InvalidInputError("m must be a positive integer")
    out = np.empty(m)
    term = 1.0
    for k in range(1, m + 1):
        term = term * t / k
        out[k - 1] = term
    return out
