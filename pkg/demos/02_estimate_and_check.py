"""
First guesses and the physics check
===================================

Train a small estimator on in-distribution spectra, then score its guesses
with the physics-driven error. In-range spectra pass the threshold; a hotter,
richer gas outside the training ranges is flagged.
"""

from laspec import (
    DEFAULT_GRID,
    FeasibleDomain,
    GasState,
    Pad,
    PadConfig,
    TrainConfig,
    canonical_db,
    estimate,
    generate_dataset,
    train_estimator,
)
from laspec.spectral import ID_RANGES

db = canonical_db()
data = generate_dataset(ID_RANGES, 600, DEFAULT_GRID, db, seed=0)
model, trace = train_estimator(data, TrainConfig(epochs=40))
print(f"trained for {len(trace)} epochs, final validation loss {trace[-1][2]:.2e}")

# %%
# Score a held-out spectrum and an out-of-range one.

cfg = PadConfig(FeasibleDomain((600.0, 0.05), (2000.0, 0.07)), epsilon=0.05)
for truth in (GasState(1400.0, 0.06), GasState(3200.0, 0.4)):
    y = cfg.simulate(truth)
    guess = estimate(model, y)
    err = Pad(cfg, y)(guess)
    verdict = "accepted" if err.e <= cfg.epsilon else "flagged"
    print(f"true {truth.temperature:6.0f} K {truth.mole_fraction:.3f} -> guess "
          f"{guess.temperature:7.1f} K {guess.mole_fraction:.4f}  e = {err.e:.4f} ({verdict})")
