"""
Changing the forward model without retraining
=============================================

Correction only needs the physics model, so a new band, species or an
emission measurement is handled by editing the check's configuration. No
estimator is involved here at all.

The toy spectra change slowly with temperature along a T/C ridge, so a loose
threshold is often met by the random initial probes alone; 0.02 makes the
loop do some work.
"""

from laspec import CorrectionConfig, FeasibleDomain, GasState, PadConfig, bundled_db, run_correction
from laspec.harness import DESK_CORRECTION
from laspec.spectral import SpectralGrid

truth = GasState(1700.0, 0.12)
box = FeasibleDomain((1200.0, 0.06), (2400.0, 0.2))
cfg = CorrectionConfig(epsilon=0.02, seed=0, hidden=tuple(DESK_CORRECTION["hidden"]),
                       lr_surrogate=DESK_CORRECTION["lr_surrogate"])

for name, forward in (("alt_band", "absorbance"), ("alt_species", "absorbance"), ("canonical", "emission")):
    db = bundled_db(name)
    pad = PadConfig(box, db=db, grid=SpectralGrid.for_band(db.band), forward=forward, epsilon=0.02)
    res = run_correction(pad.simulate(truth), None, pad, cfg)
    print(f"{name:<12} {forward:<10} success {res.success}  iterations {res.iterations:3d}  "
          f"state {res.state.temperature:7.1f} K {res.state.mole_fraction:.4f}  e = {res.breakdown.e:.4f}")
