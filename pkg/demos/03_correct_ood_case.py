"""
Repairing a rejected guess
==========================

When the physics check rejects a first guess, the correction loop fits a
small surrogate ensemble to the probed errors, searches it with a diverse
candidate population and asks the physics model only about the most
promising candidate plus one exploratory probe per iteration.
"""

from laspec import CorrectionConfig, FeasibleDomain, GasState, PadConfig, run_correction
from laspec.harness import DESK_CORRECTION

truth = GasState(3100.0, 0.35)
box = FeasibleDomain((2400.0, 0.25), (3600.0, 0.5))  # prior range around the unknown state
pad = PadConfig(box, epsilon=0.1)
y = pad.simulate(truth)

bad_guess = GasState(1900.0, 0.065)  # what an in-distribution estimator would say
cfg = CorrectionConfig(epsilon=0.1, seed=3, **{**DESK_CORRECTION, "hidden": tuple(DESK_CORRECTION["hidden"])})
res = run_correction(y, bad_guess, pad, cfg)

for rec in res.trace[:10]:
    print(f"iter {rec['t']:3d}  candidate e = {rec['e_candidate']:.4f}  "
          f"probe e = {rec['e_explore'] if rec['e_explore'] is not None else float('nan'):.4f}  "
          f"best = {rec['e_best']:.4f}")
print(f"success {res.success} after {res.iterations} iterations and {res.pad_queries} physics queries")
print(f"recovered {res.state.temperature:.1f} K, {res.state.mole_fraction:.4f} "
      f"(truth {truth.temperature:.0f} K, {truth.mole_fraction})")
