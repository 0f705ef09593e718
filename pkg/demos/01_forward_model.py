"""
Simulating spectra with the toy line-by-line model
==================================================

A state is a (temperature, mole fraction) pair. The forward model sums
Lorentzian lines whose strengths depend on temperature, then scales by the
mole fraction. This script prints a few summary numbers for the canonical
20 cm^-1 band.
"""

import numpy as np

from laspec import DEFAULT_GRID, GasState, canonical_db, simulate_absorbance, simulate_emission

db = canonical_db()
print(f"{len(db.lines)} lines in band {db.band}, grid of {DEFAULT_GRID.n_points} points")

# %%
# Temperature reshapes the spectrum, mole fraction only scales it.

for T in (800.0, 1300.0, 2000.0):
    y = simulate_absorbance(GasState(T, 0.06), DEFAULT_GRID, db).values
    peak = DEFAULT_GRID.nu[np.argmax(y)]
    print(f"T = {T:6.0f} K  peak absorbance {y.max():.3f} at {peak:.1f} cm^-1")

a = simulate_absorbance(GasState(1500.0, 0.05), DEFAULT_GRID, db).values
b = simulate_absorbance(GasState(1500.0, 0.10), DEFAULT_GRID, db).values
print("doubling C doubles the spectrum:", np.array_equal(2 * a, b))

# %%
# The emission model saturates strong lines through 1 - exp(-A).

e = simulate_emission(GasState(1800.0, 0.3), DEFAULT_GRID, db).values
print(f"emission max {e.max():.3f}, absorbance max "
      f"{simulate_absorbance(GasState(1800.0, 0.3), DEFAULT_GRID, db).values.max():.3f}")
