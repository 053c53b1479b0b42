"""Run configuration: every tolerance and knob used across the toolkit."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, fields


@dataclass(frozen=True)
class RunConfig:
    """Numerical tolerances and optimizer parameters.

    All tolerances are relative to problem scale unless noted. Defaults are
    the calibrated values used by the acceptance suite.
    """

    # pivot test |c^T A^{r-1} b| > eps_pivot * ||c|| * ||A||^{r-1} * ||b||
    eps_pivot: float = 1e-10
    # singular values below eps_rank * sigma_max count as zero
    eps_rank: float = 1e-9
    # feasibility margin tolerance on normalized margins
    eps_feas: float = 1e-8
    # equality-residual tolerance at keypoints
    eps_eq: float = 1e-9
    # scaled zero test for derivative-ladder entries
    eps_ladder: float = 1e-9
    # row-reduction relative tolerance
    eps_row: float = 1e-10

    # dense sampling density per arc for touch scans and audits
    samples_per_arc: int = 512
    # bisection refinement of touch times, relative to the arc span
    touch_time_tol: float = 1e-12

    # Newton restoration
    newton_max_iter: int = 50
    # trust-region cap on a single Newton update, relative to t_M
    newton_trust: float = 0.5

    # optimizer step control
    step_grow: float = 2.0
    step_shrink: float = 0.5
    step_floor_rel: float = 1e-12
    max_outer_iter: int = 400
    # arc durations below collapse_tol * t_M are deleted
    collapse_tol: float = 1e-7
    # margins within activation_tol (normalized) count as new boundary contact
    activation_tol: float = 1e-6

    # oracle grid
    grid_density: int = 24
    grid_rounds: int = 3
    grid_refine: int = 4

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (int, float)) and value <= 0:
                raise ValueError(f"config field {f.name} must be positive")


DEFAULT = RunConfig()
