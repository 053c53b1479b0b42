"""Chain-of-integrator specialization: shorthand notation, arc-count screens,
and the junction-time recursion of boundary-hugging switching cascades.

The plant is x1' = u, xk' = x_{k-1} with box bounds |x_k| <= x_mk and
|u| <= u_max. Constrained arcs ride single bounds; the shorthand writes a
bang arc as o0/u0 (upper/lower control) and a constrained arc at the upper
or lower bound of x_k as oK/uK.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .arcs import SystemBehavior, make_constrained, make_unconstrained
from .config import DEFAULT, RunConfig
from .errors import (
    AslParseError,
    ChatteringTermination,
    DomainError,
    InvalidInputError,
    WrongRegimeError,
)
from .linsys import Array, Constraint, LinearSystem


def chain_matrices(n: int) -> tuple[Array, Array]:
    """(A, b) of the integrator chain x1' = u, xk' = x_{k-1}."""
    A = np.zeros((n, n))
    for k in range(1, n):
        A[k, k - 1] = 1.0
    b = np.zeros(n)
    b[0] = 1.0
    return A, b


@dataclass(frozen=True)
class CoiProblem:
    """Box-constrained chain-of-integrator instance with fixed endpoints."""

    n: int
    u_max: float
    x_max: Array  # per-state bounds, np.inf allowed
    x0: Array
    xf: Array

    def __post_init__(self):
        object.__setattr__(self, "x_max", np.asarray(self.x_max, dtype=float).reshape(-1))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(self, "xf", np.asarray(self.xf, dtype=float).reshape(-1))
        if len(self.x_max) != self.n or len(self.x0) != self.n or len(self.xf) != self.n:
            raise InvalidInputError("x_max, x0, xf must have length n")
        if np.any(self.x_max <= 0):
            raise InvalidInputError("state bounds must be positive (np.inf allowed)")
        for name, x in (("x0", self.x0), ("xf", self.xf)):
            if np.any(np.abs(x) > self.x_max * (1 + 1e-12)):
                raise InvalidInputError(f"{name} violates the state bounds")

    @property
    def unconstrained(self) -> bool:
        return bool(np.all(np.isinf(self.x_max)))

    def to_linear_system(self) -> LinearSystem:
        """Finite bounds become constraint rows; row order follows the
        convention that state k's lower bound precedes its upper bound."""
        A, b = chain_matrices(self.n)
        rows = []
        for k in range(1, self.n + 1):
            if np.isfinite(self.x_max[k - 1]):
                e_k = np.eye(self.n)[k - 1]
                rows.append(Constraint(-e_k, -float(self.x_max[k - 1])))
                rows.append(Constraint(e_k, -float(self.x_max[k - 1])))
        return LinearSystem(A=A, b=b, constraints=tuple(rows), u_max=self.u_max)

    def constraint_index(self, k: int, sign: int) -> int:
        """1-based row index of state k's lower (sign=-1) or upper (+1) bound."""
        if not np.isfinite(self.x_max[k - 1]):
            raise InvalidInputError(f"state {k} has no finite bound")
        count = sum(1 for j in range(1, k + 1) if np.isfinite(self.x_max[j - 1]))
        return 2 * count if sign > 0 else 2 * count - 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n,
                "u_max": self.u_max,
                "x_max": [None if np.isinf(v) else float(v) for v in self.x_max],
                "x0": self.x0.tolist(),
                "xf": self.xf.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CoiProblem":
        data = json.loads(text)
        x_max = [np.inf if v is None else float(v) for v in data["x_max"]]
        return cls(
            n=int(data["n"]),
            u_max=float(data["u_max"]),
            x_max=np.asarray(x_max),
            x0=np.asarray(data["x0"], dtype=float),
            xf=np.asarray(data["xf"], dtype=float),
        )


# ---------------------------------------------------------------------------
# shorthand ASL strings


_ARC_RE = re.compile(r"^([ou])(\d+)$")
_MARKER_RE = re.compile(r"^\(([ou])(\d+),(\d+)\)$")
_ENDCON_RE = re.compile(r"^\{(.+)\}$")
_ENDCON_ITEM_RE = re.compile(r"^\(([ou])(\d+),(\d+)\)$")


@dataclass(frozen=True)
class CoiArcToken:
    sign: int  # +1 upper / o, -1 lower / u
    k: int  # 0 for bang arcs, else the bounded state index

    def __str__(self) -> str:
        return f"{'o' if self.sign > 0 else 'u'}{self.k}"


@dataclass(frozen=True)
class CoiAsl:
    """Parsed shorthand ASL: arcs plus optional markers and end-constraints."""

    arcs: tuple[CoiArcToken, ...]
    markers: tuple[tuple[tuple[int, int, int], ...], ...]  # per arc: (sign, k, order)
    end_constraints: tuple[tuple[tuple[int, int, int], ...], ...]  # per junction

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    @property
    def sigma(self) -> int:
        """Sum of constrained-arc orders |S_i|."""
        return sum(tok.k for tok in self.arcs)

    @property
    def discrepancy(self) -> int:
        """N - sum |S_i|, the quantity the arc-count screen bounds by n."""
        return self.n_arcs - self.sigma

    def dof(self, n: int) -> int:
        return self.discrepancy - n

    def bind(self, problem: CoiProblem, cfg: RunConfig = DEFAULT) -> list[SystemBehavior]:
        sys = problem.to_linear_system()
        behaviors = []
        for tok in self.arcs:
            if tok.k == 0:
                behaviors.append(make_unconstrained(sys, tok.sign))
            else:
                p = problem.constraint_index(tok.k, tok.sign)
                behaviors.append(make_constrained(sys, (p,), cfg))
        return behaviors

    def __str__(self) -> str:
        parts = []
        for j, tok in enumerate(self.arcs):
            parts.append(str(tok))
            for sign, k, order in self.markers[j]:
                parts.append(f"({'o' if sign > 0 else 'u'}{k},{order})")
            if j < self.n_arcs - 1 and self.end_constraints[j]:
                inner = ",".join(
                    f"({'o' if s > 0 else 'u'}{k},{r})" for s, k, r in self.end_constraints[j]
                )
                parts.append("{" + inner + "}")
        return " ".join(parts)


def parse_coi_asl(text: str) -> CoiAsl:
    """Parse the shorthand token string; malformed tokens report positions."""
    tokens = text.split()
    arcs: list[CoiArcToken] = []
    markers: list[list[tuple[int, int, int]]] = []
    endcon_map: dict[int, list[tuple[int, int, int]]] = {}
    for pos, tok in enumerate(tokens):
        m = _ARC_RE.match(tok)
        if m:
            arcs.append(CoiArcToken(sign=+1 if m.group(1) == "o" else -1, k=int(m.group(2))))
            markers.append([])
            continue
        m = _MARKER_RE.match(tok)
        if m:
            if not arcs:
                raise AslParseError(f"marker before any arc at token {pos}", position=pos)
            sign = +1 if m.group(1) == "o" else -1
            k, order = int(m.group(2)), int(m.group(3))
            if k < 1 or order < 2 or order % 2 != 0:
                raise AslParseError(
                    f"marker {tok!r} needs k >= 1 and even order >= 2", position=pos
                )
            markers[-1].append((sign, k, order))
            continue
        m = _ENDCON_RE.match(tok)
        if m:
            if not arcs:
                raise AslParseError(f"end-constraint before any arc at token {pos}", position=pos)
            items = []
            for item in m.group(1).split(","):
                mi = _ENDCON_ITEM_RE.match(item)
                if not mi:
                    raise AslParseError(f"bad end-constraint item {item!r}", position=pos)
                items.append(
                    (+1 if mi.group(1) == "o" else -1, int(mi.group(2)), int(mi.group(3)))
                )
            endcon_map[len(arcs) - 1] = items
            continue
        raise AslParseError(f"unrecognized token {tok!r} at position {pos}", position=pos)
    if not arcs:
        raise AslParseError("empty switching-law string", position=0)
    if len(arcs) - 1 in endcon_map:
        raise AslParseError("end-constraint after the final arc has no junction")
    endcons = [endcon_map.get(j, []) for j in range(len(arcs) - 1)]
    for j in range(len(arcs) - 1):
        a, b = arcs[j], arcs[j + 1]
        if a == b:
            raise AslParseError(f"arcs {j} and {j + 1} are identical", position=j)
        if a.k > 0 and b.k > 0 and a.k == b.k and a.sign == b.sign:
            raise AslParseError(
                f"adjacent constrained arcs {j}, {j + 1} share an active set", position=j
            )
    return CoiAsl(
        arcs=tuple(arcs),
        markers=tuple(tuple(ms) for ms in markers),
        end_constraints=tuple(tuple(ec) for ec in endcons),
    )


def format_coi_asl(asl: CoiAsl) -> str:
    return str(asl)


def corollary2_conditions(sizes: list[int]) -> tuple[bool, bool, bool]:
    """The three combinatorial side conditions of the arc-count screen.

    ``sizes`` is the list |S_1|..|S_N| of constrained-arc orders (0 for bang
    arcs).
    """
    N = len(sizes)
    cond1 = all(
        sum(sizes[j + 1 : i + 1]) < i - j
        for i in range(N)
        for j in range(i)
        if sizes[j] >= sizes[i]
    )
    cond2 = all(
        sum(sizes[i : j]) < j - i
        for i in range(N)
        for j in range(i + 1, N)
        if sizes[j] >= sizes[i]
    )
    cond3 = all(
        sum(sizes[i:]) <= N - 1 - i
        for i in range(N)
        if sizes[i] > 0 and all(sizes[j] < sizes[i] for j in range(i + 1, N))
    )
    return cond1, cond2, cond3


def arc_count_screen(asl: CoiAsl, n: int) -> dict:
    """DOF accounting plus the necessary-condition screen: DOF > 0 rules the
    law out; DOF <= 0 leaves it a candidate."""
    c1, c2, c3 = corollary2_conditions([tok.k for tok in asl.arcs])
    dof = asl.dof(n)
    return {
        "N": asl.n_arcs,
        "sigma": asl.sigma,
        "discrepancy": asl.discrepancy,
        "dof": dof,
        "conditions": (c1, c2, c3),
        "verdict": "not optimal" if dof > 0 else "candidate",
    }


def corollary1_bound(problem: CoiProblem, switch_count: int) -> str:
    """Switch-count screen for the pure control-bound regime.

    Only valid when every state bound is infinite; more than n-1 switches is
    non-optimal.
    """
    if not problem.unconstrained:
        raise WrongRegimeError("the switch-count bound needs all state bounds infinite")
    return "non-optimal" if switch_count > problem.n - 1 else "admissible"


# ---------------------------------------------------------------------------
# junction-time recursion of switching cascades at a bound of x_2


def f_m(a: float, b: float, c: float, m: int) -> float:
    """(b+3a)^m - 3(3b+a)^m + 3(c+3b)^m - (3c+b)^m."""
    return (
        (b + 3 * a) ** m
        - 3 * (3 * b + a) ** m
        + 3 * (c + 3 * b) ** m
        - (3 * c + b) ** m
    )


def _window_det(n: int, taus: list[float]) -> float:
    """det(f_{i+1}(tau_{k-j-1}, tau_{k-j}, tau_{k-j+1}))_{i,j in [n-2]}.

    ``taus`` holds tau_{k-n+1}..tau_k oldest first (length n).
    """
    m = n - 2
    M = np.empty((m, m))
    for i in range(1, m + 1):
        for j in range(1, m + 1):
            a = taus[-1 - (j + 1)]
            b = taus[-1 - j]
            c = taus[-1 - (j - 1)]
            M[i - 1, j - 1] = f_m(a, b, c, i + 1)
    return float(np.linalg.det(M))


def quad_root_next_gap(z_old: float, z_recent: float) -> float:
    """Root in (0, z_recent) of the 4th-order cascade quadratic.

    f(z; z1, z2) = (z1-z2) z^2 + (z1^2+z1 z2-z2^2) z - z2 (z1^2+z1 z2-z2^2)
    with z1 the older and z2 the more recent junction gap.
    """
    z1, z2 = float(z_old), float(z_recent)
    a = z1 - z2
    b = z1 * z1 + z1 * z2 - z2 * z2
    c0 = -z2 * b
    if abs(a) < 1e-300:
        raise ChatteringTermination("equal gaps: boundary root rejected as non-strict")
    disc = b * b - 4 * a * c0
    if disc < 0:
        raise ChatteringTermination("no real continuation gap")
    root = (-b + math.sqrt(disc)) / (2 * a)
    if not 0 < root < z2 * (1 - 1e-12):
        raise ChatteringTermination(
            f"continuation gap {root:.6e} not strictly inside (0, {z2:.6e})"
        )
    return root


def chattering_step(n: int, window: list[float], cfg: RunConfig = DEFAULT) -> float:
    """Next junction offset tau_k from the last n-1 offsets.

    Solves the window determinant for the root in (0, tau_{k-1}) by grid
    bracketing and bisection; n = 4 uses the closed-form quadratic. When the
    determinant has several roots the smallest is taken (keeping tau
    decreasing). No admissible root raises the termination signal.
    """
    window = [float(v) for v in window]
    if len(window) != n - 1:
        raise InvalidInputError(f"window must hold the last {n - 1} offsets")
    if any(v <= 0 for v in window) or any(
        window[i] <= window[i + 1] for i in range(len(window) - 1)
    ):
        raise InvalidInputError("window must be strictly decreasing and positive")
    last = window[-1]

    if n == 4:
        z_old = window[0] - window[1]
        z_recent = window[1] - window[2]
        return last - quad_root_next_gap(z_old, z_recent)

    def det_at(tau_next: float) -> float:
        return _window_det(n, window + [tau_next])

    grid = np.linspace(0.0, last, 257)[1:-1]
    vals = np.array([det_at(g) for g in grid])
    scale = float(np.max(np.abs(vals)))
    if scale == 0.0 or scale < 1e-250:
        raise ChatteringTermination("degenerate window: determinant vanishes identically")
    roots = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
        elif vals[i] * vals[i + 1] < 0:
            lo, hi = float(grid[i]), float(grid[i + 1])
            flo = vals[i]
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                fm = det_at(mid)
                if flo * fm <= 0:
                    hi = mid
                else:
                    lo, flo = mid, fm
                if hi - lo <= 1e-13 * last:
                    break
            roots.append(0.5 * (lo + hi))
    if not roots:
        raise ChatteringTermination("no root inside (0, tau_{k-1})")
    return min(roots)


def n4_r_recursion(r: float) -> float:
    """Next gap-contraction ratio for the 4th-order cascade.

    Solves r'^2 - (3 + 1/(r(1-r))) r' + 1 = 0 for the root in (0, r), in the
    cancellation-free form 2 / (B + sqrt(B^2 - 4)).
    """
    if not 0.0 < r < 1.0:
        raise DomainError(f"ratio must lie in (0, 1), got {r}")
    B = 3.0 + 1.0 / (r * (1.0 - r))
    return 2.0 / (B + math.sqrt(B * B - 4.0))


@dataclass(frozen=True)
class ChatteringReport:
    """Outcome of iterating the junction-offset recursion."""

    n: int
    steps: int
    terminated_at: int | None
    reason: str
    monotone: bool
    tail_statistic: float | None  # i * r_i / (1 - r_i) at the last step
    partial_sums: dict[int, float]
    divergence_ratio: float | None


def chattering_series_analysis(
    n: int,
    iterations: int,
    seed_window: list[float] | None = None,
    r_seed: float | None = None,
    checkpoints: tuple[int, ...] = (10_000, 1_000_000),
    cfg: RunConfig = DEFAULT,
) -> ChatteringReport:
    """Iterate the cascade recursion and report convergence diagnostics.

    A valid cascade needs the junction offsets to stay positive and the gaps
    to contract strictly; the first step breaking that terminates the series
    (recorded, not raised). For n = 4 the gap-ratio recursion is iterated
    directly when ``r_seed`` is given; partial sums of the reconstructed gaps
    measure divergence (divergent sums rule the cascade out).
    """
    if n == 4 and r_seed is not None:
        r = float(r_seed)
        if not 0.0 < r < 1.0:
            raise DomainError("r_seed must lie in (0, 1)")
        z = 1.0
        S = 0.0
        sums: dict[int, float] = {}
        monotone = True
        tail = None
        maxcheck = max(checkpoints) if checkpoints else iterations
        total = max(iterations, maxcheck)
        for i in range(1, total + 1):
            S += z
            if i in checkpoints:
                sums[i] = S
            if i >= total:
                tail = i * r / (1.0 - r)
                break
            r_next = n4_r_recursion(r)
            if not 0.0 < r_next < r:
                monotone = False
                return ChatteringReport(
                    n=n,
                    steps=i,
                    terminated_at=i,
                    reason="gap ratios stopped contracting",
                    monotone=False,
                    tail_statistic=i * r / (1.0 - r),
                    partial_sums=sums,
                    divergence_ratio=None,
                )
            z *= 1.0 - r
            r = r_next
        ratio = None
        if len(sums) >= 2:
            lo, hi = min(sums), max(sums)
            ratio = sums[hi] / sums[lo]
        return ChatteringReport(
            n=n,
            steps=total,
            terminated_at=None,
            reason="completed",
            monotone=monotone,
            tail_statistic=tail,
            partial_sums=sums,
            divergence_ratio=ratio,
        )

    if seed_window is None:
        raise InvalidInputError("seed_window required unless n = 4 with r_seed")
    taus = [float(v) for v in seed_window]
    gaps = [taus[i] - taus[i + 1] for i in range(len(taus) - 1)]
    for step in range(1, iterations + 1):
        try:
            nxt = chattering_step(n, taus[-(n - 1):], cfg)
        except ChatteringTermination as exc:
            return ChatteringReport(
                n=n,
                steps=step,
                terminated_at=step,
                reason=str(exc),
                monotone=False,
                tail_statistic=None,
                partial_sums={},
                divergence_ratio=None,
            )
        gap = taus[-1] - nxt
        if not (0.0 < nxt < taus[-1]) or (gaps and gap >= gaps[-1] * (1 - 1e-12)):
            return ChatteringReport(
                n=n,
                steps=step,
                terminated_at=step,
                reason="offsets stopped contracting",
                monotone=False,
                tail_statistic=None,
                partial_sums={},
                divergence_ratio=None,
            )
        taus.append(nxt)
        gaps.append(gap)
    return ChatteringReport(
        n=n,
        steps=iterations,
        terminated_at=None,
        reason="completed",
        monotone=True,
        tail_statistic=None,
        partial_sums={},
        divergence_ratio=None,
    )
