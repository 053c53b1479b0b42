"""System behaviors: the constant-dynamics building blocks of a trajectory.

An arc is either unconstrained (bang control u = +/- u_max) or constrained
(the state rides one or more constraint boundaries and the control is the
induced linear feedback). A behavior bundles the arc dynamics with the full
set of equality rows that hold along it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT, RunConfig
from .errors import InconsistentActiveSetError, InvalidInputError
from .linsys import Array, ConstraintOrderInfo, LinearSystem, constraint_order
from .rows import Row, reduce_rows, stack


@dataclass(frozen=True)
class SystemBehavior:
    """One arc's dynamics x' = A_hat x + b_hat plus its equality rows.

    For a constrained behavior, ``rows`` holds the reduced full-row-rank
    equalities F x + g = 0 that pin the trajectory to the active boundaries;
    ``orders`` exposes every active constraint's order and gain for audit.
    """

    system: LinearSystem
    kind: str  # "unconstrained" | "constrained"
    u0: float | None
    active: tuple[int, ...]
    A_hat: Array
    b_hat: Array
    rows: tuple[Row, ...]
    orders: dict[int, ConstraintOrderInfo] = field(default_factory=dict)

    @property
    def is_constrained(self) -> bool:
        return self.kind == "constrained"

    @property
    def F(self) -> Array:
        return stack(list(self.rows))[0]

    @property
    def g(self) -> Array:
        return stack(list(self.rows))[1]

    def gain(self) -> Array | None:
        """Feedback gain of the lowest-index active constraint, if any."""
        if not self.is_constrained:
            return None
        return self.orders[min(self.active)].gain

    def residual(self, x: Array) -> float:
        """Max |F x + g| at a state; 0.0 for unconstrained behaviors."""
        if not self.rows:
            return 0.0
        return max(abs(row.value(x)) for row in self.rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SystemBehavior):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.active == other.active
            and (self.u0 == other.u0)
            and np.array_equal(self.A_hat, other.A_hat)
            and np.array_equal(self.b_hat, other.b_hat)
        )

    def same_dynamics(self, other: "SystemBehavior", rtol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.abs(self.A_hat).max()), float(np.abs(self.b_hat).max()))
        return bool(
            np.allclose(self.A_hat, other.A_hat, atol=rtol * scale)
            and np.allclose(self.b_hat, other.b_hat, atol=rtol * scale)
        )

    def label(self) -> str:
        if self.kind == "unconstrained":
            return f"u={'+' if self.u0 > 0 else '-'}{abs(self.u0):g}"
        return "active{" + ",".join(str(p) for p in self.active) + "}"


def make_unconstrained(sys: LinearSystem, sign: int) -> SystemBehavior:
    """Bang arc x' = A x + sign * u_max * b."""
    if sign not in (+1, -1):
        raise InvalidInputError("sign must be +1 or -1")
    u0 = sign * sys.u_max
    return SystemBehavior(
        system=sys,
        kind="unconstrained",
        u0=u0,
        active=(),
        A_hat=sys.A.copy(),
        b_hat=u0 * sys.b,
        rows=(),
        orders={},
    )


def _per_constraint_rows(sys: LinearSystem, p: int, info: ConstraintOrderInfo) -> list[Row]:
    """Boundary row plus the zero rows c^T A^r x = 0 for r < r_p."""
    con = sys.constraint(p)
    out = [Row(con.c, con.d, provenance=f"active:{p}")]
    row = con.c.copy()
    for r in range(1, info.order):
        row = row @ sys.A
        out.append(Row(row, 0.0, provenance=f"active:{p}:d{r}"))
    return out


def make_constrained(
    sys: LinearSystem, active: tuple[int, ...] | list[int] | set[int], cfg: RunConfig = DEFAULT
) -> SystemBehavior:
    """Constrained arc riding the boundaries of every constraint in `active`.

    The stacked equalities are the per-constraint boundary rows plus, for each
    pair (p, q) of active indices, the rows c_q^T (A + b a_p^T)^r x = 0 for
    r in [n]. Dependent rows are dropped (provenance retained); an unsolvable
    stack raises an inconsistency error naming an offending pair.
    """
    active = tuple(sorted(set(int(p) for p in active)))
    if not active:
        raise InvalidInputError("a constrained behavior needs a nonempty active set")
    orders = {p: constraint_order(sys, p, cfg) for p in active}

    def rows_for(subset: tuple[int, ...]) -> list[Row]:
        collected: list[Row] = []
        for p in subset:
            collected.extend(_per_constraint_rows(sys, p, orders[p]))
        for p in subset:
            A_cl = sys.A + np.outer(sys.b, orders[p].gain)
            for q in subset:
                row = sys.constraint(q).c.copy()
                for r in range(1, sys.dim + 1):
                    row = row @ A_cl
                    collected.append(Row(row, 0.0, provenance=f"closed:{p}:{q}:d{r}"))
        return collected

    def solvable(rows: list[Row]) -> bool:
        F, g = stack(reduce_rows(rows, cfg.eps_row))
        if F.size == 0:
            return True
        x, *_ = np.linalg.lstsq(F, -g, rcond=None)
        resid = np.linalg.norm(F @ x + g)
        return resid <= 1e-8 * max(1.0, np.linalg.norm(g))

    all_rows = rows_for(active)
    if not solvable(all_rows):
        offending = None
        for i, p in enumerate(active):
            for q in active[i + 1 :]:
                if not solvable(rows_for((p, q))):
                    offending = (p, q)
                    break
            if offending:
                break
        if offending is None:
            offending = (active[0], active[-1])
        raise InconsistentActiveSetError(
            f"active constraints {offending[0]} and {offending[1]} are inconsistent",
            pair=offending,
        )

    reduced = tuple(reduce_rows(all_rows, cfg.eps_row))
    gain = orders[min(active)].gain
    return SystemBehavior(
        system=sys,
        kind="constrained",
        u0=None,
        active=active,
        A_hat=sys.A + np.outer(sys.b, gain),
        b_hat=np.zeros(sys.dim),
        rows=reduced,
        orders=orders,
    )


def arc_control(behavior: SystemBehavior, x: Array) -> float:
    """Control realized on the arc at state x: constant bang or feedback."""
    if behavior.kind == "unconstrained":
        return float(behavior.u0)
    gain = behavior.gain()
    return float(gain @ np.asarray(x, dtype=float))


def behavior_to_json(behavior: SystemBehavior) -> str:
    if behavior.kind == "unconstrained":
        return json.dumps({"kind": "unconstrained", "sign": int(np.sign(behavior.u0))})
    return json.dumps({"kind": "constrained", "active": list(behavior.active)})


def behavior_from_json(sys: LinearSystem, text: str, cfg: RunConfig = DEFAULT) -> SystemBehavior:
    data = json.loads(text) if isinstance(text, str) else text
    if data["kind"] == "unconstrained":
        return make_unconstrained(sys, int(data["sign"]))
    if data["kind"] == "constrained":
        return make_constrained(sys, tuple(data["active"]), cfg)
    raise InvalidInputError(f"unknown behavior kind {data['kind']!r}")
