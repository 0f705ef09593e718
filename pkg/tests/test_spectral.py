import json
from pathlib import Path

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from laspec.spectral import (
    DEFAULT_GRID,
    ID_RANGES,
    OOD_RANGES,
    Dataset,
    DomainError,
    GasState,
    LineDatabase,
    SpectralGrid,
    SpectralLine,
    Spectrum,
    StateRanges,
    absorbance_values,
    add_multiplicative_noise,
    bundled_db,
    calibrate_kappa,
    canonical_db,
    gen_line_db,
    generate_dataset,
    line_strength,
    load_line_db,
    lorentzian,
    save_line_db,
    simulate_absorbance,
    simulate_emission,
)

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_canonical.json").read_text())
temps = st.floats(300.0, 5000.0)
fracs = st.floats(0.0, 1.0)


# -- line strength -----------------------------------------------------------

def test_strength_at_reference_temperature():
    line = SpectralLine(2380.0, 0.7, 1234.0, 0.1)
    assert line_strength(line, 296.0) == 0.7


def test_strength_without_lower_state_energy():
    line = SpectralLine(2380.0, 1.0, 0.0, 0.1)
    assert line_strength(line, 592.0) == pytest.approx(0.5 ** 1.5, rel=1e-15)


def test_strength_matches_arbitrary_precision():
    mpmath.mp.dps = 50
    T = mpmath.mpf(1000)
    ref = (296 / T) ** mpmath.mpf("1.5") * mpmath.exp(-mpmath.mpf("1.4388") * 1000 * (1 / T - mpmath.mpf(1) / 296))
    got = line_strength(SpectralLine(2380.0, 1.0, 1000.0, 0.1), 1000.0)
    assert got == pytest.approx(float(ref), rel=1e-13)


@pytest.mark.parametrize("T", [0.0, -10.0])
def test_strength_rejects_non_positive_temperature(T):
    with pytest.raises(DomainError):
        line_strength(SpectralLine(2380.0, 1.0, 0.0, 0.1), T)


@given(st.floats(100.0, 5000.0), st.floats(0.0, 3000.0))
def test_strength_positive(T, e):
    assert line_strength(SpectralLine(2380.0, 0.3, e, 0.1), T) > 0


# -- Lorentzian ----------------------------------------------------------------

def test_lorentzian_peak():
    assert lorentzian(2380.0, 2380.0, 0.1) == pytest.approx(1 / (0.1 * np.pi), rel=1e-15)
    assert float(lorentzian(0.0, 0.0, 0.1)) == pytest.approx(3.18310, abs=1e-5)


@given(st.floats(-50, 50), st.floats(0.01, 2.0))
def test_lorentzian_symmetric(d, g):
    assert lorentzian(2380.0 + d, 2380.0, g) == pytest.approx(lorentzian(2380.0 - d, 2380.0, g), rel=1e-9)


def test_lorentzian_integrates_to_one():
    g = 0.1
    nu = np.linspace(-200 * g, 200 * g, 400_001)
    area = np.trapezoid(lorentzian(nu, 0.0, g), nu)
    assert abs(area - 1.0) < 1e-2


@pytest.mark.parametrize("g", [0.0, -0.1])
def test_lorentzian_rejects_bad_width(g):
    with pytest.raises(DomainError):
        lorentzian(0.0, 0.0, g)


# -- absorbance and emission -----------------------------------------------------

def test_zero_concentration_gives_zero_spectrum():
    db = canonical_db()
    assert np.all(simulate_absorbance(GasState(1300.0, 0.0), DEFAULT_GRID, db).values == 0)
    assert np.all(simulate_emission(GasState(1300.0, 0.0), DEFAULT_GRID, db).values == 0)


@settings(max_examples=50, deadline=None)
@given(temps, st.just(0.0) | st.floats(1e-6, 0.25), st.sampled_from([2.0, 0.5, 4.0, 0.25]))
def test_absorbance_linear_in_concentration(T, C, alpha):
    db = canonical_db()
    a1 = absorbance_values(T, C, DEFAULT_GRID, db)
    a2 = absorbance_values(T, alpha * C, DEFAULT_GRID, db)
    np.testing.assert_array_equal(a2, alpha * a1)


@settings(max_examples=50, deadline=None)
@given(temps, st.floats(0.001, 0.5), st.floats(0.1, 2.0))
def test_absorbance_linear_any_factor(T, C, alpha):
    db = canonical_db()
    a1 = absorbance_values(T, C, DEFAULT_GRID, db)
    a2 = absorbance_values(T, alpha * C, DEFAULT_GRID, db)
    np.testing.assert_allclose(a2, alpha * a1, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(temps, fracs)
def test_absorbance_non_negative_and_deterministic(T, C):
    db = canonical_db()
    a = absorbance_values(T, C, DEFAULT_GRID, db)
    assert a.shape == (200,)
    assert np.all(a >= 0)
    np.testing.assert_array_equal(a, absorbance_values(T, C, DEFAULT_GRID, db))


def test_absorbance_golden_vector():
    a = absorbance_values(1300.0, 0.06, DEFAULT_GRID, canonical_db())
    np.testing.assert_allclose(a, GOLDEN["absorbance_1300K_0.06"], rtol=1e-6)


def test_emission_golden_vector():
    e = simulate_emission(GasState(1800.0, 0.3), DEFAULT_GRID, canonical_db()).values
    np.testing.assert_allclose(e, GOLDEN["emission_1800K_0.3"], rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(temps, st.floats(0.01, 0.9))
def test_emission_increasing_in_concentration(T, C):
    db = canonical_db()
    lo = simulate_emission(GasState(T, C), DEFAULT_GRID, db).values
    hi = simulate_emission(GasState(T, C * 1.1), DEFAULT_GRID, db).values
    a = absorbance_values(T, C, DEFAULT_GRID, db)
    mask = a > 1e-12
    assert np.all(hi[mask] > lo[mask])


def test_temperature_sensitivity():
    db = canonical_db()
    a600 = absorbance_values(600.0, 0.07, DEFAULT_GRID, db)
    a2000 = absorbance_values(2000.0, 0.07, DEFAULT_GRID, db)
    assert np.linalg.norm(a600 - a2000) / np.linalg.norm(a2000) > 0.2


@pytest.mark.parametrize("state", [GasState(0.0, 0.05), GasState(-5.0, 0.05), GasState(1000.0, 1.5),
                                   GasState(1000.0, -0.1)])
def test_invalid_state_raises(state):
    with pytest.raises(DomainError):
        simulate_absorbance(state, DEFAULT_GRID, canonical_db())


def test_spectrum_rejects_non_finite():
    with pytest.raises(DomainError):
        Spectrum(np.array([1.0, np.nan]), "g")


# -- grid ------------------------------------------------------------------------

def test_default_grid_has_200_points():
    assert DEFAULT_GRID.n_points == 200
    assert DEFAULT_GRID.nu[0] == 2375.0
    assert DEFAULT_GRID.nu[-1] == pytest.approx(2394.9)


def test_grid_point_count_rule():
    assert SpectralGrid(2375.0, 2395.0, 0.1).n_points == 201


# -- noise -------------------------------------------------------------------------

def test_zero_noise_is_identity():
    s = simulate_absorbance(GasState(1300.0, 0.06), DEFAULT_GRID, canonical_db())
    np.testing.assert_array_equal(add_multiplicative_noise(s, 0.0, 1).values, s.values)


def test_noise_is_seeded():
    s = simulate_absorbance(GasState(1300.0, 0.06), DEFAULT_GRID, canonical_db())
    a = add_multiplicative_noise(s, 0.1, 5).values
    np.testing.assert_array_equal(a, add_multiplicative_noise(s, 0.1, 5).values)
    assert not np.array_equal(a, add_multiplicative_noise(s, 0.1, 6).values)


def test_noise_relative_std_monte_carlo():
    s = Spectrum(np.full(100_000, 0.8), "mc")
    y = add_multiplicative_noise(s, 0.1, 123).values
    assert y.std() / y.mean() == pytest.approx(0.1, rel=0.02)
    assert y.mean() == pytest.approx(0.8, rel=0.01)


def test_negative_noise_level_rejected():
    with pytest.raises(DomainError):
        add_multiplicative_noise(Spectrum(np.ones(3), "g"), -0.1, 0)


# -- line databases ---------------------------------------------------------------------

def test_gen_line_db_deterministic_and_within_ranges():
    a, b = gen_line_db(42, 25, (2375, 2395)), gen_line_db(42, 25, (2375, 2395))
    assert a == b
    c, s, e, g = a.arrays()
    assert np.all(np.diff(c) > 0)
    assert np.all((c >= 2375) & (c <= 2395))
    assert np.all((s >= 0.1) & (s <= 1.0))
    assert np.all((e >= 0) & (e <= 3000))
    assert np.all((g >= 0.05) & (g <= 0.2))


def test_single_line_peak_at_nearest_grid_point():
    db = gen_line_db(3, 1, (2375, 2395))
    a = absorbance_values(1000.0, 0.1, DEFAULT_GRID, db)
    center = db.lines[0].center
    assert np.argmax(a) == np.argmin(np.abs(DEFAULT_GRID.nu - center))


def test_gen_line_db_rejects_empty():
    with pytest.raises(DomainError):
        gen_line_db(0, 0, (2375, 2395))


def test_line_db_validation():
    ln = SpectralLine(2380.0, 1.0, 0.0, 0.1)
    with pytest.raises(DomainError):
        LineDatabase("x", (2375, 2395), (ln, ln))
    with pytest.raises(DomainError):
        LineDatabase("x", (2375, 2395), (SpectralLine(2401.0, 1.0, 0.0, 0.1),))
    with pytest.raises(DomainError):
        SpectralLine(2380.0, -1.0, 0.0, 0.1)


def test_line_db_round_trip(tmp_path):
    db = canonical_db()
    save_line_db(db, tmp_path / "db.json")
    assert load_line_db(tmp_path / "db.json") == db
    d = json.loads((tmp_path / "db.json").read_text())
    assert set(d) == {"species_label", "band", "scale_kappa", "lines"}
    assert set(d["lines"][0]) == {"center", "strength_ref", "lower_state_energy", "gamma_ref"}


def test_canonical_db_provenance():
    db = canonical_db()
    regen = gen_line_db(42, 25, (2375, 2395), species_label=db.species_label)
    assert regen.lines == db.lines


def test_canonical_kappa_matches_bisection():
    db = canonical_db()

    def peak_minus_one(k):
        return absorbance_values(2000.0, 0.07, DEFAULT_GRID, db.with_kappa(k)).max() - 1.0

    k_star = brentq(peak_minus_one, 1e-6, 1e6, xtol=1e-14)
    assert db.scale_kappa == pytest.approx(k_star, rel=1e-2)
    assert absorbance_values(2000.0, 0.07, DEFAULT_GRID, db).max() == pytest.approx(1.0, abs=0.01)


@pytest.mark.parametrize("name,seed,band,n", [("alt_band", 43, (2175, 2195), 25),
                                              ("alt_species", 44, (2100, 2120), 8)])
def test_alternate_databases(name, seed, band, n):
    db = bundled_db(name)
    assert db.band == band
    assert db.lines == gen_line_db(seed, n, band).lines
    grid = SpectralGrid.for_band(band)
    assert absorbance_values(2000.0, 0.07, grid, db).max() == pytest.approx(1.0, abs=0.01)
    assert db.scale_kappa == pytest.approx(calibrate_kappa(db, grid), rel=1e-12)


# -- datasets -----------------------------------------------------------------------------

def test_dataset_reproducible_file(tmp_path):
    db = canonical_db()
    for name in ("a.csv", "b.csv"):
        generate_dataset(ID_RANGES, 10, DEFAULT_GRID, db, 9).save_csv(tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["split", "temperature", "mole_fraction", "y_0"]
    assert header[-1] == "y_199"


def test_dataset_ranges_and_split_fractions():
    ds = generate_dataset(ID_RANGES, 200, DEFAULT_GRID, canonical_db(), 1)
    assert np.all((ds.states[:, 0] >= 600) & (ds.states[:, 0] <= 2000))
    assert np.all((ds.states[:, 1] >= 0.05) & (ds.states[:, 1] <= 0.07))
    counts = {s: int(np.sum(ds.splits == s)) for s in ("train", "val", "test")}
    assert counts == {"train": 140, "val": 30, "test": 30}


def test_ood_dataset_ranges():
    ds = generate_dataset(OOD_RANGES, 100, DEFAULT_GRID, canonical_db(), 2)
    assert np.all((ds.states[:, 0] >= 800) & (ds.states[:, 0] <= 4000))
    assert np.all((ds.states[:, 1] >= 0.1) & (ds.states[:, 1] <= 0.6))


def test_dataset_csv_round_trip(tmp_path):
    ds = generate_dataset(ID_RANGES, 20, DEFAULT_GRID, canonical_db(), 3)
    ds.save_csv(tmp_path / "d.csv")
    back = Dataset.load_csv(tmp_path / "d.csv")
    np.testing.assert_allclose(back.states, ds.states, rtol=1e-8)
    np.testing.assert_allclose(back.spectra, ds.spectra, rtol=1e-8, atol=1e-300)
    np.testing.assert_array_equal(back.splits, ds.splits)


def test_dataset_small_k_and_bad_ranges():
    with pytest.raises(DomainError):
        generate_dataset(ID_RANGES, 5, DEFAULT_GRID, canonical_db(), 0)
    with pytest.raises(DomainError):
        StateRanges((2000.0, 600.0), (0.05, 0.07))
    ds = generate_dataset(StateRanges((1000.0, 1000.0), (0.06, 0.06)), 10, DEFAULT_GRID, canonical_db(), 0)
    assert np.all(ds.states[:, 0] == 1000.0)


def test_dataset_records_independent_of_k():
    db = canonical_db()
    a = generate_dataset(ID_RANGES, 10, DEFAULT_GRID, db, 4)
    b = generate_dataset(ID_RANGES, 20, DEFAULT_GRID, db, 4)
    np.testing.assert_array_equal(a.states, b.states[:10])
