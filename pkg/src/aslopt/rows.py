"""Affine equality rows with provenance and rank-revealing reduction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class Row:
    """One affine row f^T x + gamma (= 0 for equality rows, < 0 for strict)."""

    f: Array
    gamma: float
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float).reshape(-1))
        object.__setattr__(self, "gamma", float(self.gamma))

    def value(self, x: Array) -> float:
        return float(self.f @ x + self.gamma)


def reduce_rows(rows: list[Row], tol: float = 1e-10) -> list[Row]:
    """Keep a maximal independent subset of rows, in the given priority order.

    Independence is judged on the x-coefficients alone (the offsets are
    determined once the rows hold on a common trajectory). A greedy
    Gram-Schmidt sweep preserves provenance: earlier rows win ties.
    """
    kept: list[Row] = []
    basis: list[Array] = []
    for row in rows:
        v = row.f.copy()
        norm0 = np.linalg.norm(v)
        if norm0 == 0.0:
            continue
        for q in basis:
            v = v - (q @ v) * q
        if np.linalg.norm(v) > tol * norm0:
            basis.append(v / np.linalg.norm(v))
            kept.append(row)
    return kept


def stack(rows: list[Row]) -> tuple[Array, Array]:
    """(F, g) arrays from a row list; empty rows give (0, n) shapes."""
    if not rows:
        return np.zeros((0, 0)), np.zeros(0)
    F = np.vstack([row.f for row in rows])
    g = np.array([row.gamma for row in rows])
    return F, g
