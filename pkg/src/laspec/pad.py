"""
Physics-driven anomaly detection.

Scores a candidate state against a measured spectrum with the forward model
(reconstruction error) plus a soft penalty for leaving the feasible box, and
decides acceptance against a threshold.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .spectral import (
    DEFAULT_GRID,
    DomainError,
    GasState,
    LineDatabase,
    SpectralGrid,
    Spectrum,
    absorbance_values,
    canonical_db,
    emission_scale,
    emission_values,
    load_line_db,
)

__all__ = [
    "FeasibleDomain",
    "PadConfig",
    "ErrorBreakdown",
    "Pad",
    "feasible_error",
    "feasible_error_normalized",
    "reconstruction_error",
    "overall_error",
    "is_anomaly",
]


@dataclass(frozen=True)
class FeasibleDomain:
    x_min: tuple[float, float]
    x_max: tuple[float, float]

    def __post_init__(self):
        if not all(lo < hi for lo, hi in zip(self.x_min, self.x_max)):
            raise ValueError(f"x_min must be < x_max componentwise: {self}")

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.x_min, dtype=np.float64)

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.x_max, dtype=np.float64) - self.lower

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.lower) / self.span

    def denormalize(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=np.float64) * self.span

    @classmethod
    def from_ranges(cls, t, c) -> FeasibleDomain:
        return cls((float(t[0]), float(c[0])), (float(t[1]), float(c[1])))

    def to_dict(self) -> dict:
        return {"t": [self.x_min[0], self.x_max[0]], "c": [self.x_min[1], self.x_max[1]]}


@dataclass(frozen=True)
class PadConfig:
    domain: FeasibleDomain
    db: LineDatabase = field(default_factory=canonical_db)
    grid: SpectralGrid = DEFAULT_GRID
    forward: str = "absorbance"
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    epsilon: float = 0.05
    emission_scale: float | None = None

    def __post_init__(self):
        if self.forward not in ("absorbance", "emission"):
            raise ValueError(f"unknown forward model {self.forward!r}")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    def simulate(self, state: GasState) -> np.ndarray:
        state.validate()
        if self.forward == "absorbance":
            return absorbance_values(state.temperature, state.mole_fraction, self.grid, self.db)
        scale = self.emission_scale if self.emission_scale is not None else emission_scale(self.db)
        return emission_values(state.temperature, state.mole_fraction, self.grid, self.db, scale)

    def replace(self, **kw) -> PadConfig:
        from dataclasses import replace
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> PadConfig:
        """Build from the JSON form ``{"forward", "line_db", "domain", "weights", "epsilon"}``."""
        from pathlib import Path
        db_ref = d.get("line_db", "canonical")
        if db_ref in ("canonical", "alt_band", "alt_species"):
            from .spectral import bundled_db
            db = bundled_db(db_ref)
        else:
            p = Path(db_ref)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            db = load_line_db(p)
        grid = SpectralGrid(**d["grid"]) if "grid" in d else SpectralGrid.for_band(db.band)
        dom = d.get("domain", {"t": [600.0, 2000.0], "c": [0.05, 0.07]})
        return cls(
            domain=FeasibleDomain.from_ranges(dom["t"], dom["c"]),
            db=db,
            grid=grid,
            forward=d.get("forward", "absorbance"),
            weights=tuple(float(w) for w in d.get("weights", (1.0, 1.0, 1.0))),
            epsilon=float(d.get("epsilon", 0.05)),
        )


@dataclass(frozen=True)
class ErrorBreakdown:
    e_R: float
    e_F: tuple[float, float]
    e: float

    @property
    def components(self) -> np.ndarray:
        return np.array([self.e_R, self.e_F[0], self.e_F[1]])


def feasible_error_normalized(u) -> np.ndarray:
    """Feasible error for states already in box coordinates (box = [0, 1] per axis)."""
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(u - 1.0, 0.0) + np.maximum(-u, 0.0)


def feasible_error(state: GasState, domain: FeasibleDomain) -> tuple[float, float]:
    """Per-element excursion outside the feasible box, measured in box widths."""
    e = feasible_error_normalized(domain.normalize(state.as_array()))
    return float(e[0]), float(e[1])


def reconstruction_error(state: GasState, measured: Spectrum | np.ndarray, config: PadConfig) -> float:
    y = measured.values if isinstance(measured, Spectrum) else np.asarray(measured)
    if y.shape != (config.grid.n_points,):
        raise ValueError(f"measured spectrum has {y.shape}, grid has {config.grid.n_points} points")
    return float(np.linalg.norm(config.simulate(state) - y))


def overall_error(state: GasState, measured, config: PadConfig) -> ErrorBreakdown:
    e_r = reconstruction_error(state, measured, config)
    e_f = feasible_error(state, config.domain)
    w_r, w_f1, w_f2 = config.weights
    return ErrorBreakdown(e_r, e_f, w_r * e_r + w_f1 * e_f[0] + w_f2 * e_f[1])


def is_anomaly(breakdown: ErrorBreakdown, epsilon: float) -> bool:
    """True when the overall error exceeds ``epsilon``; equality is accepted."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    return breakdown.e > epsilon


class Pad:
    """PAD bound to one measured spectrum, tallying every forward-model query."""

    def __init__(self, config: PadConfig, measured):
        self.config = config
        self.measured = measured.values if isinstance(measured, Spectrum) else np.asarray(measured, dtype=np.float64)
        self.queries = 0
        self._lock = threading.Lock()

    def __call__(self, state: GasState) -> ErrorBreakdown:
        with self._lock:
            self.queries += 1
        try:
            return overall_error(state, self.measured, self.config)
        except DomainError:
            # outside the forward model's domain: no reconstruction, infinitely bad
            e_f = feasible_error(state, self.config.domain)
            return ErrorBreakdown(float("inf"), e_f, float("inf"))

    def evaluate_normalized(self, u) -> ErrorBreakdown:
        x = self.config.domain.denormalize(u)
        return self(GasState(float(x[0]), float(x[1])))
