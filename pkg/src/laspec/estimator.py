"""Learned spectrum -> state estimator (1-D conv stack with an adaptive-pool head)."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    Adam,
    AdaptiveAvgPool1d,
    Conv1d,
    Dense,
    Flatten,
    MaxPool1d,
    Network,
    load_checkpoint,
    optimizer_step,
    rng_stream,
    save_checkpoint,
)
from .spectral import Dataset, GasState, Spectrum

__all__ = ["TrainConfig", "EstimatorModel", "build_estimator_net", "train_estimator", "estimate"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 30
    channels: tuple = (16, 32, 64, 64)
    kernel: int = 3
    pool_len: int = 4
    hidden: int = 256

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.patience) <= 0 or self.learning_rate <= 0:
            raise ValueError("training configuration values must be positive")


def build_estimator_net(n_points: int, cfg: TrainConfig = TrainConfig()) -> Network:
    layers, c_in = [], 1
    for c in cfg.channels:
        layers += [Conv1d(c_in, c, cfg.kernel, "relu"), MaxPool1d(2)]
        c_in = c
    layers += [
        AdaptiveAvgPool1d(cfg.pool_len),
        Flatten(),
        Dense(c_in * cfg.pool_len, cfg.hidden, "relu"),
        Dense(cfg.hidden, 2, "linear"),
    ]
    return Network(layers, (1, n_points), seed=cfg.seed)


@dataclass
class EstimatorModel:
    net: Network
    target_lo: np.ndarray
    target_hi: np.ndarray
    input_scale: float
    meta: dict = field(default_factory=dict)

    def normalize_targets(self, x):
        return (np.asarray(x) - self.target_lo) / (self.target_hi - self.target_lo)

    def denormalize_targets(self, z):
        return self.target_lo + np.asarray(z) * (self.target_hi - self.target_lo)

    def _inputs(self, spectra):
        spectra = np.asarray(spectra, dtype=np.float64)
        return (spectra / self.input_scale)[:, None, :]

    def predict(self, spectra, batch=256) -> np.ndarray:
        """Physical-unit states for a batch of spectra, shape (n, 2)."""
        spectra = np.atleast_2d(spectra)
        out = [self.net(self._inputs(spectra[i:i + batch])) for i in range(0, len(spectra), batch)]
        return self.denormalize_targets(np.concatenate(out))

    def save(self, path) -> None:
        save_checkpoint(self.net, path, {
            "normalization": {"target_lo": self.target_lo.tolist(),
                              "target_hi": self.target_hi.tolist(),
                              "input_scale": self.input_scale},
            **self.meta,
        })

    @classmethod
    def load(cls, path) -> EstimatorModel:
        net, meta = load_checkpoint(path)
        norm = meta["normalization"]
        extra = {k: v for k, v in meta.items()
                 if k not in ("normalization", "spec", "layer_shapes", "precision", "seed", "input_shape")}
        return cls(net, np.array(norm["target_lo"]), np.array(norm["target_hi"]),
                   float(norm["input_scale"]), extra)


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.states).tobytes())
    h.update(np.ascontiguousarray(ds.spectra).tobytes())
    return h.hexdigest()[:16]


def train_estimator(ds: Dataset, cfg: TrainConfig = TrainConfig()):
    """Fit the estimator by minibatch MSE on [0, 1]-normalised targets.

    Returns ``(model, trace)``; the model carries the weights with the lowest
    validation loss and ``trace`` lists ``(epoch, train_loss, val_loss)``.
    """
    x_tr, y_tr = ds.split("train")
    x_va, y_va = ds.split("val")
    if len(x_tr) == 0:
        raise ValueError("empty training split")
    if len(x_va) == 0:
        x_va, y_va = x_tr, y_tr
    lo, hi = x_tr.min(axis=0), x_tr.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    scale = float(np.abs(y_tr).max()) or 1.0
    net = build_estimator_net(y_tr.shape[1], cfg)
    model = EstimatorModel(net, lo, hi, scale, {
        "grid_points": int(y_tr.shape[1]), "dataset_hash": dataset_hash(ds), "train_seed": cfg.seed,
        "dataset_seed": int(ds.seed)})
    t_tr, t_va = model.normalize_targets(x_tr), model.normalize_targets(x_va)
    in_tr, in_va = model._inputs(y_tr), model._inputs(y_va)
    opt = Adam(net.params, lr=cfg.learning_rate)
    rng = rng_stream(cfg.seed, 1)
    best, best_loss, since, trace = net.get_flat(), np.inf, 0, []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(in_tr))
        tot = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            out, cache = net.forward(in_tr[idx])
            diff = out - t_tr[idx]
            tot += float(np.sum(diff ** 2))
            grads, _ = net.backward(cache, 2.0 * diff / diff.size)
            optimizer_step(opt, net, grads)
        train_loss = tot / (2 * len(order))
        val_loss = float(np.mean((net(in_va) - t_va) ** 2))
        trace.append((epoch, train_loss, val_loss))
        if val_loss < best_loss:
            best, best_loss, since = net.get_flat(), val_loss, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
        log.debug("epoch %d train %.3e val %.3e", epoch, train_loss, val_loss)
    net.set_flat(best)
    return model, trace


def estimate(model: EstimatorModel, spectrum: Spectrum | np.ndarray) -> GasState:
    y = spectrum.values if isinstance(spectrum, Spectrum) else np.asarray(spectrum, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("spectrum contains non-finite values")
    return GasState.from_array(model.predict(y[None, :])[0])
