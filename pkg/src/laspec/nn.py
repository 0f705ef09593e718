"""
Small numpy neural-network engine.

Layers are plain descriptor objects; parameters live in a :class:`Network`
as a flat list of arrays so optimisers and checkpoints can treat them
uniformly. ``forward`` returns a cache that ``backward`` consumes to give
exact gradients with respect to both the parameters and the input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Dense",
    "Conv1d",
    "MaxPool1d",
    "AdaptiveAvgPool1d",
    "Flatten",
    "Network",
    "Adam",
    "MemberAdam",
    "StackedMLP",
    "TrainingError",
    "StaleCacheError",
    "rng_stream",
    "bootstrap_sample",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "layer_from_dict",
]


class TrainingError(RuntimeError):
    """Non-finite values encountered while training."""


class StaleCacheError(RuntimeError):
    """``backward`` was called with a cache from before a weight update."""


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, stream)``; the only RNG used in the package."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


# -- activations ------------------------------------------------------------

def _act_forward(kind, scale, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "linear":
        return z
    if kind == "sigmoid":
        # stable logistic
        return scale * np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                                np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    raise ValueError(f"unknown activation {kind!r}")


def _act_backward(kind, scale, z, a, g):
    if kind == "relu":
        return g * (z > 0)
    if kind == "linear":
        return g
    s = a / scale
    return g * scale * s * (1.0 - s)


# -- layers -----------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    activation: str = "linear"
    scale: float = 1.0  # output multiplier for the sigmoid activation

    n_params = 2

    def init(self, rng, dtype):
        return [_glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out, dtype),
                np.zeros(self.n_out, dtype=dtype)]

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ValueError(f"Dense expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, params, x):
        w, b = params
        z = x @ w + b
        a = _act_forward(self.activation, self.scale, z)
        return a, (x, z, a)

    def backward(self, params, cache, g):
        w, _ = params
        x, z, a = cache
        gz = _act_backward(self.activation, self.scale, z, a, g)
        return [x.T @ gz, gz.sum(axis=0)], gz @ w.T

    def input_grad(self, params, cache, g):
        x, z, a = cache
        return _act_backward(self.activation, self.scale, z, a, g) @ params[0].T


@dataclass(frozen=True)
class Conv1d:
    """Stride-1 'same' convolution over (batch, channels, length)."""

    in_ch: int
    out_ch: int
    kernel: int = 3
    activation: str = "relu"
    scale: float = 1.0

    n_params = 2

    def init(self, rng, dtype):
        fan_in, fan_out = self.in_ch * self.kernel, self.out_ch * self.kernel
        return [_glorot(rng, (self.out_ch, self.in_ch, self.kernel), fan_in, fan_out, dtype),
                np.zeros(self.out_ch, dtype=dtype)]

    def out_shape(self, shape):
        if len(shape) != 2 or shape[0] != self.in_ch:
            raise ValueError(f"Conv1d expects ({self.in_ch}, L), got {shape}")
        return (self.out_ch, shape[1])

    def _pad(self):
        left = (self.kernel - 1) // 2
        return left, self.kernel - 1 - left

    def forward(self, params, x):
        w, b = params
        left, right = self._pad()
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        cols = sliding_window_view(xp, self.kernel, axis=2)  # (B, C, L, k)
        cols = cols.transpose(0, 2, 1, 3).reshape(x.shape[0], x.shape[2], -1)  # (B, L, C*k)
        z = cols @ w.reshape(self.out_ch, -1).T + b  # (B, L, O)
        z = z.transpose(0, 2, 1)
        a = _act_forward(self.activation, self.scale, z)
        return a, (x.shape, cols, z, a)

    def backward(self, params, cache, g):
        w, _ = params
        shape, cols, z, a = cache
        B, C, L = shape
        gz = _act_backward(self.activation, self.scale, z, a, g).transpose(0, 2, 1)  # (B, L, O)
        gw = np.tensordot(gz, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gb = gz.sum(axis=(0, 1))
        gcols = (gz @ w.reshape(self.out_ch, -1)).reshape(B, L, C, self.kernel)
        left, right = self._pad()
        gxp = np.zeros((B, C, L + left + right), dtype=gz.dtype)
        for j in range(self.kernel):
            gxp[:, :, j:j + L] += gcols[:, :, :, j].transpose(0, 2, 1)
        return [gw, gb], gxp[:, :, left:left + L]


@dataclass(frozen=True)
class MaxPool1d:
    width: int = 2

    n_params = 0

    def init(self, rng, dtype):
        return []

    def out_shape(self, shape):
        if shape[1] < self.width:
            raise ValueError(f"input length {shape[1]} shorter than pool width {self.width}")
        return (shape[0], shape[1] // self.width)

    def forward(self, params, x):
        B, C, L = x.shape
        n = L // self.width
        xr = x[:, :, :n * self.width].reshape(B, C, n, self.width)
        idx = xr.argmax(axis=3)
        out = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]
        return out, (x.shape, idx)

    def backward(self, params, cache, g):
        (B, C, L), idx = cache
        n = L // self.width
        gx = np.zeros((B, C, n, self.width), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=3)
        full = np.zeros((B, C, L), dtype=g.dtype)
        full[:, :, :n * self.width] = gx.reshape(B, C, -1)
        return [], full


def _adaptive_matrix(length, target):
    m = np.zeros((length, target))
    for i in range(target):
        lo = (i * length) // target
        hi = -((-(i + 1) * length) // target)
        m[lo:hi, i] = 1.0 / (hi - lo)
    return m


@dataclass(frozen=True)
class AdaptiveAvgPool1d:
    target_len: int

    n_params = 0

    def init(self, rng, dtype):
        return []

    def out_shape(self, shape):
        # shorter inputs are fine: bins then overlap and repeat samples
        if shape[1] < 1:
            raise ValueError("adaptive pooling needs a non-empty input")
        return (shape[0], self.target_len)

    def forward(self, params, x):
        m = _adaptive_matrix(x.shape[2], self.target_len).astype(x.dtype)
        return x @ m, m

    def backward(self, params, cache, g):
        return [], g @ cache.T


@dataclass(frozen=True)
class Flatten:
    n_params = 0

    def init(self, rng, dtype):
        return []

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, g):
        return [], g.reshape(cache)


_LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv1d, MaxPool1d, AdaptiveAvgPool1d, Flatten)}


def layer_to_dict(layer) -> dict:
    d = {"type": type(layer).__name__}
    d.update(getattr(layer, "__dict__", {}))
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    return _LAYER_TYPES[d.pop("type")](**d)


# -- network ----------------------------------------------------------------

class Network:
    """A feed-forward stack of layers with Glorot-uniform weights and zero biases.

    Parameters
    ----------
    layers : sequence
        Layer descriptors, applied in order.
    input_shape : tuple
        Shape of one sample, without the batch axis.
    seed : int
        Initialisation seed.
    dtype : numpy dtype, default float64
    """

    def __init__(self, layers, input_shape, seed=0, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape
        rng = rng_stream(seed, 0)
        self.params = []
        for layer in self.layers:
            self.params.extend(layer.init(rng, self.dtype))
        self.version = 0

    def _slices(self):
        i = 0
        for layer in self.layers:
            yield layer, self.params[i:i + layer.n_params]
            i += layer.n_params

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def forward(self, x):
        """Return ``(output, cache)`` for a batch ``x``."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected input (*, {self.input_shape}), got {x.shape}")
        caches = []
        for layer, p in self._slices():
            x, c = layer.forward(p, x)
            caches.append(c)
        return x, (self.version, caches)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, output_grad, need_params=True):
        """Return ``(param_grads, input_grad)`` given the cache of a forward call."""
        version, caches = cache
        if version != self.version:
            raise StaleCacheError("weights changed since the forward pass")
        g = np.asarray(output_grad, dtype=self.dtype)
        grads = []
        pairs = list(self._slices())
        for (layer, p), c in zip(reversed(pairs), reversed(caches)):
            if not need_params and isinstance(layer, Dense):
                g = layer.input_grad(p, c, g)
                continue
            pg, g = layer.backward(p, c, g)
            grads.append(pg)
        if not need_params:
            return None, g
        return [a for pg in reversed(grads) for a in pg], g

    def input_gradient(self, x, output_grad=None):
        out, cache = self.forward(x)
        if output_grad is None:
            output_grad = np.ones_like(out)
        return out, self.backward(cache, output_grad, need_params=False)[1]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        i = 0
        for p in self.params:
            p[...] = np.asarray(flat[i:i + p.size]).reshape(p.shape)
            i += p.size
        self.version += 1

    def spec(self) -> list[dict]:
        return [layer_to_dict(layer) for layer in self.layers]


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _adam_kernel(p, g, m, v, b1, b2, lr_t, eps):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr_t * mi / (np.sqrt(vi) + eps)


class Adam:
    """Adaptive-moment optimiser over a list of arrays (updated in place)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        grads = [np.asarray(g, dtype=p.dtype) for p, g in zip(params, grads)]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            _adam_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                         b1, b2, lr_t, self.eps)


def optimizer_step(opt: Adam, net: Network, grads) -> None:
    """Apply one optimiser step to ``net`` and invalidate its outstanding caches."""
    opt.step(net.params, grads)
    net.version += 1


class StackedMLP:
    """``L`` independent dense networks of one architecture, evaluated together.

    Parameters carry a leading member axis, so one batched matmul serves every
    member. Inputs may be shared, shape ``(n, in)``, or per member, shape
    ``(L, n, in)``; outputs are ``(L, n, out)``. Mathematically identical to
    ``L`` separate :class:`Network` objects built from the same ``Dense``
    layers.
    """

    def __init__(self, layers, L, seeds, dtype=np.float64):
        self.layers = list(layers)
        self.L = int(L)
        self.dtype = np.dtype(dtype)
        self.seeds = [int(s) for s in seeds]
        if len(self.seeds) != self.L:
            raise ValueError("need one seed per member")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError("incompatible adjacent layers")
        per_member = [Network(self.layers, (self.layers[0].n_in,), seed=s, dtype=dtype).params
                      for s in self.seeds]
        self.params = []
        for k in range(len(per_member[0])):
            arr = np.stack([pm[k] for pm in per_member])
            if arr.ndim == 2:  # bias -> (L, 1, out)
                arr = arr[:, None, :]
            self.params.append(np.ascontiguousarray(arr))
        self.version = 0

    @property
    def input_shape(self):
        return (self.layers[0].n_in,)

    def member(self, i) -> Network:
        """Copy of member ``i`` as a standalone :class:`Network`."""
        net = Network(self.layers, self.input_shape, seed=self.seeds[i], dtype=self.dtype)
        for dst, src in zip(net.params, self.params):
            dst[...] = src[i].reshape(dst.shape)
        return net

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        h = x[None] if x.ndim == 2 else x
        caches = []
        for layer, (w, b) in zip(self.layers, zip(self.params[0::2], self.params[1::2])):
            z = np.matmul(h, w) + b
            a = _act_forward(layer.activation, layer.scale, z)
            caches.append((h, z, a))
            h = a
        return h, (self.version, x.ndim, caches)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, output_grad, need_params=True):
        """Gradients for output grad ``(L, n, out)``.

        The input gradient is summed over members when the forward input was
        shared, else returned per member.
        """
        version, ndim, caches = cache
        if version != self.version:
            raise StaleCacheError("weights changed since the forward pass")
        g = np.asarray(output_grad, dtype=self.dtype)
        grads = []
        ws = self.params[0::2]
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h, z, a = caches[k]
            gz = _act_backward(layer.activation, layer.scale, z, a, g)
            if need_params:
                gw = np.matmul(np.swapaxes(h, 1, 2), gz)
                if gw.shape[0] != self.L:
                    gw = np.broadcast_to(gw, (self.L,) + gw.shape[1:])
                grads.append(gz.sum(axis=1, keepdims=True))
                grads.append(gw)
            g = np.matmul(gz, np.swapaxes(ws[k], 1, 2))
        if ndim == 2:
            g = g.sum(axis=0)
        return (grads[::-1] if need_params else None), g


class MemberAdam:
    """Adam for stacked parameters: each member keeps its own step count and
    only members flagged active are touched."""

    def __init__(self, params, L, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = np.zeros(L, dtype=np.int64)

    def step(self, params, grads, active):
        b1, b2 = self.beta1, self.beta2
        for i in np.flatnonzero(active):
            for g in grads:
                if not np.all(np.isfinite(g[i])):
                    raise TrainingError("non-finite gradient")
            self.t[i] += 1
            t = self.t[i]
            lr_t = self.lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
            for p, g, m, v in zip(params, grads, self.m, self.v):
                _adam_kernel(p[i].reshape(-1), np.ascontiguousarray(g[i], dtype=p.dtype).reshape(-1),
                             m[i].reshape(-1), v[i].reshape(-1), b1, b2, lr_t, self.eps)


def bootstrap_sample(buffer_size: int, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn uniformly with replacement from ``range(buffer_size)``."""
    if buffer_size < 1:
        raise ValueError("cannot bootstrap from an empty buffer")
    return rng.integers(0, buffer_size, size=n_draws)


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    param_errors: list  # norm-wise relative error per parameter tensor
    input_error: float
    entry_errors: list  # per-entry relative errors for the sampled entries
    tolerance: float

    @property
    def max_error(self) -> float:
        return max([self.input_error, *self.param_errors])

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _rel(a, n):
    a, n = np.ravel(a), np.ravel(n)
    den = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if den == 0 else float(np.linalg.norm(a - n) / den)


def grad_check(net: Network, x, tolerance=1e-6, h=1e-5, max_entries=40, seed=0,
               grad_fn=None) -> GradCheckReport:
    """Compare analytic gradients to central differences.

    The scalar probed is ``sum(output * r)`` for a fixed random ``r``. At most
    ``max_entries`` entries of each parameter tensor (and of the input) are
    differenced; the comparison is the norm-wise relative error over those
    entries. ``grad_fn`` may replace ``net.backward`` to check a tampered
    gradient.
    """
    rng = rng_stream(seed, 99)
    x = np.array(x, dtype=net.dtype)
    out, cache = net.forward(x)
    r = rng.standard_normal(out.shape)
    grads, gx = (grad_fn or net.backward)(cache, r)

    def loss():
        return float(np.sum(net(x) * r))

    def sample(size):
        if size <= max_entries:
            return np.arange(size)
        return np.sort(rng.choice(size, max_entries, replace=False))

    param_errors, entries = [], []
    for p, g in zip(net.params, grads):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        idx = sample(flat.size)
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            flat[i] = old - h
            fm = loss()
            flat[i] = old
            num[k] = (fp - fm) / (2 * h)
        param_errors.append(_rel(gflat[idx], num))
        entries.extend(np.abs(gflat[idx] - num) / np.maximum(np.maximum(np.abs(gflat[idx]), np.abs(num)), 1e-300))
    xf, gxf = x.reshape(-1), np.asarray(gx).reshape(-1)
    idx = sample(xf.size)
    num = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = xf[i]
        xf[i] = old + h
        fp = loss()
        xf[i] = old - h
        fm = loss()
        xf[i] = old
        num[k] = (fp - fm) / (2 * h)
    return GradCheckReport(param_errors, _rel(gxf[idx], num), entries, tolerance)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(net: Network, path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (spec and metadata) and ``<path>.bin`` (little-endian weights)."""
    path = Path(path)
    meta = {
        "spec": net.spec(),
        "input_shape": list(net.input_shape),
        "layer_shapes": [list(p.shape) for p in net.params],
        "precision": 64 if net.dtype == np.float64 else 32,
        "seed": net.seed,
    }
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    dt = "<f8" if net.dtype == np.float64 else "<f4"
    net.get_flat().astype(dt).tofile(path.with_suffix(".bin"))


def load_checkpoint(path):
    """Return ``(network, metadata)`` from files written by :func:`save_checkpoint`."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    dtype = np.float64 if meta["precision"] == 64 else np.float32
    net = Network([layer_from_dict(d) for d in meta["spec"]], meta["input_shape"],
                  seed=meta["seed"], dtype=dtype)
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8" if dtype == np.float64 else "<f4")
    if flat.size != net.n_params:
        raise ValueError("checkpoint size does not match its spec")
    net.set_flat(flat)
    return net, meta
