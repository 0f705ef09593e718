"""
Toy line-by-line absorption/emission forward model.

A spectrum is a sum of Lorentzian lines whose strengths follow the usual
two-factor temperature scaling (partition-function-like power law times a
Boltzmann factor on the lower-state energy). The model is closed form,
deterministic and cheap, which is all the correction machinery needs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "C2",
    "T_REF",
    "DomainError",
    "SpectralLine",
    "LineDatabase",
    "SpectralGrid",
    "GasState",
    "Spectrum",
    "Dataset",
    "StateRanges",
    "DEFAULT_GRID",
    "ID_RANGES",
    "OOD_RANGES",
    "line_strength",
    "lorentzian",
    "absorbance_values",
    "simulate_absorbance",
    "simulate_emission",
    "emission_values",
    "emission_scale",
    "planck_factor",
    "add_multiplicative_noise",
    "gen_line_db",
    "calibrate_kappa",
    "generate_dataset",
    "load_line_db",
    "save_line_db",
    "canonical_db",
    "bundled_db",
]

C2 = 1.4388  # second radiation constant, cm K
T_REF = 296.0


class DomainError(ValueError):
    """Raised when an argument lies outside the model's physical domain."""


@dataclass(frozen=True)
class SpectralLine:
    center: float
    strength_ref: float
    lower_state_energy: float
    gamma_ref: float

    def __post_init__(self):
        if not (self.strength_ref > 0 and self.gamma_ref > 0 and self.lower_state_energy >= 0):
            raise DomainError(f"invalid line parameters: {self}")


@dataclass(frozen=True)
class LineDatabase:
    species_label: str
    band: tuple[float, float]
    lines: tuple[SpectralLine, ...]
    scale_kappa: float = 1.0

    def __post_init__(self):
        centers = [ln.center for ln in self.lines]
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise DomainError("lines must be sorted by center with no duplicates")
        lo, hi = self.band
        if any(c < lo - 5 or c > hi + 5 for c in centers):
            raise DomainError("line center outside band margin")
        if not self.scale_kappa > 0:
            raise DomainError("scale_kappa must be positive")

    def arrays(self):
        """Return (center, strength_ref, lower_state_energy, gamma_ref) as arrays."""
        a = np.array([[ln.center, ln.strength_ref, ln.lower_state_energy, ln.gamma_ref]
                      for ln in self.lines], dtype=np.float64).reshape(-1, 4)
        return a[:, 0], a[:, 1], a[:, 2], a[:, 3]

    def with_kappa(self, kappa: float) -> LineDatabase:
        return LineDatabase(self.species_label, self.band, self.lines, float(kappa))

    def to_dict(self) -> dict:
        return {
            "species_label": self.species_label,
            "band": [float(self.band[0]), float(self.band[1])],
            "scale_kappa": float(self.scale_kappa),
            "lines": [asdict(ln) for ln in self.lines],
        }

    @classmethod
    def from_dict(cls, d: dict) -> LineDatabase:
        lines = tuple(SpectralLine(**ln) for ln in d["lines"])
        return cls(d["species_label"], tuple(d["band"]), lines, float(d["scale_kappa"]))


@dataclass(frozen=True)
class SpectralGrid:
    nu_min: float = 2375.0
    nu_max: float = 2394.9
    spacing: float = 0.1

    def __post_init__(self):
        if not (self.spacing > 0 and self.nu_max >= self.nu_min):
            raise DomainError(f"invalid grid {self}")

    @property
    def n_points(self) -> int:
        return int(round((self.nu_max - self.nu_min) / self.spacing)) + 1

    @property
    def nu(self) -> np.ndarray:
        return self.nu_min + self.spacing * np.arange(self.n_points)

    @property
    def grid_id(self) -> str:
        return f"{self.nu_min:g}:{self.spacing:g}:{self.n_points}"

    @classmethod
    def for_band(cls, band, spacing=0.1, n_points=200) -> SpectralGrid:
        return cls(float(band[0]), float(band[0]) + spacing * (n_points - 1), spacing)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_GRID = SpectralGrid()


@dataclass(frozen=True)
class GasState:
    temperature: float
    mole_fraction: float

    def validate(self) -> GasState:
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise DomainError(f"temperature must be > 0, got {self.temperature}")
        if not (0.0 <= self.mole_fraction <= 1.0):
            raise DomainError(f"mole fraction must be in [0, 1], got {self.mole_fraction}")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.temperature, self.mole_fraction], dtype=np.float64)

    @classmethod
    def from_array(cls, x) -> GasState:
        return cls(float(x[0]), float(x[1]))


@dataclass(frozen=True)
class Spectrum:
    values: np.ndarray
    grid_id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise DomainError("spectrum contains non-finite values")


@dataclass(frozen=True)
class StateRanges:
    """Axis-aligned box over (temperature, mole fraction)."""

    t: tuple[float, float]
    c: tuple[float, float]

    def __post_init__(self):
        if self.t[0] > self.t[1] or self.c[0] > self.c[1]:
            raise DomainError(f"min > max in ranges {self}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.t[0], self.c[0]], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.t[1], self.c[1]], dtype=np.float64)


ID_RANGES = StateRanges((600.0, 2000.0), (0.05, 0.07))
OOD_RANGES = StateRanges((800.0, 4000.0), (0.1, 0.6))


@dataclass
class Dataset:
    states: np.ndarray  # (K, 2): temperature, mole fraction
    spectra: np.ndarray  # (K, n_points)
    splits: np.ndarray  # (K,) of "train" | "val" | "test"
    seed: int
    grid: SpectralGrid = field(default_factory=SpectralGrid)

    def split(self, name: str):
        m = self.splits == name
        return self.states[m], self.spectra[m]

    def __len__(self):
        return len(self.states)

    def save_csv(self, path) -> None:
        n = self.spectra.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["split", "temperature", "mole_fraction"] + [f"y_{i}" for i in range(n)])
            for s, x, y in zip(self.splits, self.states, self.spectra):
                w.writerow([s] + [f"{v:.9g}" for v in x] + [f"{v:.9g}" for v in y])

    @classmethod
    def load_csv(cls, path, seed: int = -1, grid: SpectralGrid | None = None) -> Dataset:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        body = rows[1:]
        splits = np.array([r[0] for r in body])
        states = np.array([[float(r[1]), float(r[2])] for r in body])
        spectra = np.array([[float(v) for v in r[3:]] for r in body])
        return cls(states, spectra, splits, seed, grid or SpectralGrid.for_band(
            (DEFAULT_GRID.nu_min, DEFAULT_GRID.nu_max), n_points=spectra.shape[1]))


def line_strength(line: SpectralLine, T: float) -> float:
    """Line intensity at temperature ``T`` (K)."""
    if not T > 0:
        raise DomainError(f"temperature must be > 0, got {T}")
    return _strengths(np.array([line.strength_ref]), np.array([line.lower_state_energy]), T)[0]


def _strengths(s_ref, e_low, T):
    return s_ref * (T_REF / T) ** 1.5 * np.exp(-C2 * e_low * (1.0 / T - 1.0 / T_REF))


def lorentzian(nu, center, gamma):
    """Area-normalised Lorentzian profile with half-width ``gamma``."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0):
        raise DomainError("gamma must be > 0")
    d = np.asarray(nu, dtype=np.float64) - center
    return (gamma / np.pi) / (d * d + gamma * gamma)


def absorbance_values(T: float, C: float, grid: SpectralGrid, db: LineDatabase) -> np.ndarray:
    """Raw absorbance samples for a temperature / mole fraction pair."""
    GasState(T, C).validate()
    center, s_ref, e_low, g_ref = db.arrays()
    s = _strengths(s_ref, e_low, T)
    gam = g_ref * (T_REF / T) ** 0.5
    prof = lorentzian(grid.nu[:, None], center[None, :], gam[None, :])
    shape = prof @ s
    # C is applied last so scaling C scales the output exactly
    return (db.scale_kappa * (T_REF / T) * shape) * C


def simulate_absorbance(state: GasState, grid: SpectralGrid, db: LineDatabase) -> Spectrum:
    return Spectrum(absorbance_values(state.temperature, state.mole_fraction, grid, db), grid.grid_id)


def planck_factor(nu, T, scale=1.0):
    """Unnormalised Planck shape nu^3 / (exp(c2 nu / T) - 1), times ``scale``."""
    nu = np.asarray(nu, dtype=np.float64)
    return scale * nu ** 3 / np.expm1(C2 * nu / T)


def emission_scale(db: LineDatabase, T_norm: float = 2000.0) -> float:
    """Constant that makes the Planck factor 1 at the band centre and ``T_norm``."""
    nu_c = 0.5 * (db.band[0] + db.band[1])
    return 1.0 / float(planck_factor(nu_c, T_norm))


def emission_values(T, C, grid, db, scale=None) -> np.ndarray:
    a = absorbance_values(T, C, grid, db)
    if scale is None:
        scale = emission_scale(db)
    return -np.expm1(-a) * planck_factor(grid.nu, T, scale)


def simulate_emission(state: GasState, grid: SpectralGrid, db: LineDatabase,
                      scale: float | None = None) -> Spectrum:
    return Spectrum(emission_values(state.temperature, state.mole_fraction, grid, db, scale),
                    grid.grid_id)


def add_multiplicative_noise(spectrum: Spectrum, level: float, seed: int) -> Spectrum:
    """Return ``y * (1 + level * N(0, 1))`` with an explicitly seeded draw."""
    if level < 0:
        raise DomainError("noise level must be >= 0")
    if level == 0:
        return Spectrum(spectrum.values.copy(), spectrum.grid_id)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(spectrum.values.shape)
    return Spectrum(spectrum.values * (1.0 + level * z), spectrum.grid_id)


def gen_line_db(seed: int, n_lines: int, band: Sequence[float], kappa: float = 1.0,
                species_label: str = "toy") -> LineDatabase:
    """Draw a random line list inside ``band``."""
    if n_lines < 1:
        raise DomainError("n_lines must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = float(band[0]), float(band[1])
    centers = np.sort(rng.uniform(lo, hi, n_lines))
    if np.any(np.diff(centers) == 0):
        raise DomainError("duplicate line centers drawn; pick another seed")
    strengths = 10.0 ** rng.uniform(-1.0, 0.0, n_lines)
    e_low = rng.uniform(0.0, 3000.0, n_lines)
    gam = rng.uniform(0.05, 0.2, n_lines)
    lines = tuple(SpectralLine(float(c), float(s), float(e), float(g))
                  for c, s, e, g in zip(centers, strengths, e_low, gam))
    return LineDatabase(species_label, (lo, hi), lines, float(kappa))


def calibrate_kappa(db: LineDatabase, grid: SpectralGrid, T: float = 2000.0, C: float = 0.07,
                    target: float = 1.0) -> float:
    """Scale factor making the peak absorbance at (T, C) equal ``target``."""
    peak = absorbance_values(T, C, grid, db.with_kappa(1.0)).max()
    return target / peak


def generate_dataset(ranges: StateRanges, K: int, grid: SpectralGrid, db: LineDatabase,
                     seed: int, fractions=(0.7, 0.15, 0.15)) -> Dataset:
    """Uniform random states, their absorbance spectra, and a seeded 70/15/15 split."""
    if K < 10:
        raise DomainError("K must be >= 10")
    lo, hi = ranges.lower, ranges.upper
    # one generator per record so any partition of the work gives the same draws
    states = np.array([np.random.default_rng([seed, i]).uniform(lo, hi) for i in range(K)])
    spectra = np.stack([absorbance_values(t, c, grid, db) for t, c in states])
    order = np.random.default_rng([seed, K, 7]).permutation(K)
    n_train = int(round(fractions[0] * K))
    n_val = int(round(fractions[1] * K))
    splits = np.empty(K, dtype=object)
    splits[order[:n_train]] = "train"
    splits[order[n_train:n_train + n_val]] = "val"
    splits[order[n_train + n_val:]] = "test"
    return Dataset(states, spectra, splits.astype(str), seed, grid)


def save_line_db(db: LineDatabase, path) -> None:
    Path(path).write_text(json.dumps(db.to_dict(), indent=2))


def load_line_db(path) -> LineDatabase:
    return LineDatabase.from_dict(json.loads(Path(path).read_text()))


_DATA = Path(__file__).parent / "data"


def bundled_db(name: str) -> LineDatabase:
    """Load one of the line lists shipped with the package (``canonical``, ``alt_band``, ``alt_species``)."""
    return load_line_db(_DATA / f"{name}_db.json")


def canonical_db() -> LineDatabase:
    return bundled_db("canonical")
