"""
Correction mode: an online, ensemble-surrogate optimiser over the state.

Everything here works in box coordinates ``u = (x - x_min) / (x_max - x_min)``
so the feasible box is the unit square. The surrogate ensemble learns the
reconstruction error from PAD queries; a population of candidates descends
the hybrid estimate (learned reconstruction part plus exact feasible part)
and the best-looking candidate is sent to PAD each iteration, alongside one
exploration probe.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .nn import Adam, Dense, MemberAdam, Network, StackedMLP, TrainingError, bootstrap_sample, rng_stream
from .pad import ErrorBreakdown, Pad, PadConfig, feasible_error_normalized
from .spectral import GasState

__all__ = [
    "CorrectionConfig",
    "SurrogateEnsemble",
    "ReplayBuffer",
    "CorrectionResult",
    "base_net",
    "init_buffer",
    "train_surrogate",
    "estimate_error",
    "diversity_error",
    "greedy_ensemble_search",
    "select_candidate",
    "explore",
    "search_budget",
    "run_correction",
]

log = logging.getLogger(__name__)

ERROR_MODES = ("reconstruction_only", "overall", "all_elements")
SAMPLING_MODES = ("monte_carlo", "disagreement")
SAFETY_BOX = (-0.5, 1.5)
TARGET_CLIP = (0.0, 2.0)
STD_UNIFORM = 0.288  # std of U[0, 1], rounded


@dataclass(frozen=True)
class CorrectionConfig:
    L: int = 4
    N: int = 32
    N_C: int = 128
    T: int = 200
    T_e: int = 40
    eps_e: float = 1e-4
    delta_G: int = 1
    lr_surrogate: float = 1e-4
    lr_search: float = 2.5e-2
    c1: float = 5.0
    c2: float = 2.0
    epsilon: float = 0.05
    error_mode: str = "reconstruction_only"
    sampling_mode: str = "monte_carlo"
    diversity_enabled: bool = True
    seed: int = 0
    hidden: tuple = (512, 1024, 512)
    precision: int = 64
    disagreement_steps: int = 20
    stop_on_success: bool = True

    def __post_init__(self):
        if min(self.L, self.N, self.N_C, self.delta_G) <= 0 or self.T < 0 or self.T_e < 0:
            raise ValueError("counts must be positive")
        if self.error_mode not in ERROR_MODES:
            raise ValueError(f"error_mode must be one of {ERROR_MODES}")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def out_dim(self) -> int:
        return 3 if self.error_mode == "all_elements" else 1

    def replace(self, **kw) -> CorrectionConfig:
        from dataclasses import replace
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CorrectionConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown correction settings: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def base_layers(config: CorrectionConfig):
    """2 -> hidden... -> out_dim: relu hidden layers, 2*sigmoid head."""
    sizes = (2, *config.hidden)
    layers = [Dense(a, b, "relu") for a, b in zip(sizes, sizes[1:])]
    layers.append(Dense(sizes[-1], config.out_dim, "sigmoid", 2.0))
    return layers


def base_net(config: CorrectionConfig, seed: int) -> Network:
    return Network(base_layers(config), (2,), seed=seed,
                   dtype=np.float64 if config.precision == 64 else np.float32)


class SurrogateEnsemble:
    """Mean-combined ensemble over a stacked member model.

    ``model`` maps ``(n, 2)`` to ``(L, n, out_dim)`` via ``forward`` and
    supports ``backward(cache, grad, need_params)``; a :class:`StackedMLP`
    in practice, analytic stubs in tests. Each member has its own Adam state
    and bootstrap stream.
    """

    def __init__(self, model, optimizer=None, rngs=None):
        self.model = model
        self.optimizer = optimizer
        self.rngs = rngs

    @classmethod
    def create(cls, config: CorrectionConfig, seed: int) -> SurrogateEnsemble:
        seeds = [int(rng_stream(seed, 100 + i).integers(2 ** 31)) for i in range(config.L)]
        model = StackedMLP(base_layers(config), config.L, seeds,
                           dtype=np.float64 if config.precision == 64 else np.float32)
        opt = MemberAdam(model.params, config.L, lr=config.lr_surrogate)
        rngs = [rng_stream(seed, 200 + i) for i in range(config.L)]
        return cls(model, opt, rngs)

    @property
    def L(self) -> int:
        return self.model.L

    def member_outputs(self, u) -> np.ndarray:
        """Stacked outputs, shape (L, n, out_dim)."""
        return np.asarray(self.model.forward(np.atleast_2d(u))[0], dtype=np.float64)

    def mean(self, u) -> np.ndarray:
        """Arithmetic mean over members, shape (n, out_dim)."""
        return self.member_outputs(u).mean(axis=0)

    def mean_and_input_grad(self, u):
        """Summed-over-outputs ensemble mean per row, and its gradient w.r.t. ``u``."""
        u = np.atleast_2d(u)
        out, cache = self.model.forward(u)
        g = np.full(np.shape(out), 1.0 / self.L)
        _, gu = self.model.backward(cache, g, need_params=False)
        return np.asarray(out, dtype=np.float64).sum(axis=2).mean(axis=0), np.asarray(gu, dtype=np.float64)


@dataclass
class ReplayBuffer:
    """Append-only (box-coordinate state, clipped target) pairs."""

    states: list = field(default_factory=list)
    targets: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    def append(self, u, target) -> None:
        self.states.append(np.asarray(u, dtype=np.float64).copy())
        t = np.nan_to_num(np.atleast_1d(np.asarray(target, dtype=np.float64)), nan=TARGET_CLIP[1],
                          posinf=TARGET_CLIP[1])
        self.targets.append(np.clip(t, *TARGET_CLIP))

    def arrays(self):
        return np.array(self.states).reshape(-1, 2), np.array(self.targets).reshape(len(self), -1)


def target_of(breakdown: ErrorBreakdown, error_mode: str):
    if error_mode == "reconstruction_only":
        return [breakdown.e_R]
    if error_mode == "overall":
        return [breakdown.e]
    return [breakdown.e_R, *breakdown.e_F]


def init_buffer(config: CorrectionConfig, pad: Pad, rng: np.random.Generator):
    """Probe ``N`` uniform states of the feasible box through PAD.

    Returns ``(buffer, best_u, best_breakdown)`` where ``best`` has the lowest
    overall error among the probes.
    """
    buf = ReplayBuffer()
    best_u, best = None, None
    for u in rng.uniform(0.0, 1.0, size=(config.N, 2)):
        b = pad.evaluate_normalized(u)
        buf.append(u, target_of(b, config.error_mode))
        if best is None or b.e < best.e:
            best_u, best = u, b
    return buf, best_u, best


def train_surrogate(ensemble: SurrogateEnsemble, buffer: ReplayBuffer, new_pairs: int,
                    config: CorrectionConfig) -> int:
    """Fine-tune every member; return how many stopped early on ``loss < eps_e``.

    ``new_pairs`` is the number of most recent buffer entries that are always
    in the batch; the rest of each epoch's batch is ``N`` bootstrap draws from
    the older entries. The loss is the mean squared Euclidean distance between
    prediction and target, checked before each update.
    """
    if len(buffer) == 0:
        raise ValueError("empty buffer")
    U, Y = buffer.arrays()
    n_old = len(U) - new_pairs
    if n_old < 1:
        n_old, new_pairs = len(U), 0
    n_draw = min(len(U), config.N + new_pairs) - new_pairs
    fresh = np.arange(n_old, n_old + new_pairs)
    model, L = ensemble.model, ensemble.L
    active = np.ones(L, dtype=bool)
    n_e = 0
    for _ in range(config.T_e):
        idx = np.stack([np.concatenate([bootstrap_sample(n_old, n_draw, rng), fresh]) if a
                        else np.zeros(n_draw + new_pairs, dtype=np.int64)
                        for a, rng in zip(active, ensemble.rngs)])
        out, cache = model.forward(U[idx])
        diff = out - Y[idx].astype(out.dtype)
        loss = np.mean(np.sum(diff.astype(np.float64) ** 2, axis=2), axis=1)
        if not np.all(np.isfinite(loss[active])):
            raise TrainingError("non-finite surrogate loss")
        stopped = active & (loss < config.eps_e)
        n_e += int(stopped.sum())
        active &= ~stopped
        if not active.any():
            break
        grads, _ = model.backward(cache, (2.0 / idx.shape[1]) * diff)
        ensemble.optimizer.step(model.params, grads, active)
        model.version += 1
    return n_e


def estimate_error(ensemble: SurrogateEnsemble, u, error_mode: str = "reconstruction_only",
                   with_grad: bool = False):
    """Hybrid error estimate per row of ``u`` (and optionally its gradient).

    For ``reconstruction_only`` the feasible part is computed exactly and added;
    the other modes take the learned estimate as is.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if with_grad:
        est, grad = ensemble.mean_and_input_grad(u)
    else:
        est, grad = ensemble.mean(u).sum(axis=1), None
    if error_mode == "reconstruction_only":
        est = est + feasible_error_normalized(u).sum(axis=1)
        if with_grad:
            grad = grad + (u > 1.0).astype(float) - (u < 0.0).astype(float)
    return (est, grad) if with_grad else est


def diversity_error(candidates, epsilon: float, c1: float, c2: float, with_grad: bool = False):
    """Penalty that grows as the candidate spread (mean per-axis std) shrinks."""
    X = np.asarray(candidates, dtype=np.float64)
    a = STD_UNIFORM * c1
    sd = X.std(axis=0)
    sigma = float(sd.mean())
    e_d = max(a - sigma, 0.0) / a * epsilon / c2
    if not with_grad:
        return e_d
    grad = np.zeros_like(X)
    if sigma < a:
        safe = np.where(sd > 0, sd, 1.0)
        dsig = (X - X.mean(axis=0)) / (len(X) * safe) / X.shape[1]
        dsig[:, sd == 0] = 0.0
        grad = -(epsilon / (c2 * a)) * dsig
    return e_d, grad


def search_budget(n_e: int, L: int, delta_G: int) -> int:
    return delta_G * int(np.floor(2 * n_e / L + 1))


class CandidateSet:
    """Candidate states in box coordinates with their own optimiser state."""

    def __init__(self, X, lr):
        self.X = np.array(X, dtype=np.float64)
        self.opt = Adam([self.X], lr=lr)


def greedy_ensemble_search(cands: CandidateSet, ensemble, config: CorrectionConfig, T_G: int):
    """``T_G`` joint gradient steps on mean estimated error (+ diversity error)."""
    n = len(cands.X)
    for _ in range(T_G):
        _, g = estimate_error(ensemble, cands.X, config.error_mode, with_grad=True)
        g = g / n
        if config.diversity_enabled:
            _, gd = diversity_error(cands.X, config.epsilon, config.c1, config.c2, with_grad=True)
            g = g + gd
        if not np.all(np.isfinite(g)):
            log.warning("non-finite search gradient; step skipped")
            continue
        cands.opt.step([cands.X], [g])
        np.clip(cands.X, *SAFETY_BOX, out=cands.X)
    return cands


def select_candidate(X, ensemble, config: CorrectionConfig):
    """Index and state of the lowest estimated error (first index on ties)."""
    est = estimate_error(ensemble, X, config.error_mode)
    i = int(np.argmin(est))
    return i, np.asarray(X[i], dtype=np.float64).copy()


def _member_std_and_grad(ensemble, u):
    u = np.atleast_2d(u)
    out, cache = ensemble.model.forward(u)
    outs = np.asarray(out, dtype=np.float64).sum(axis=2)  # (L, n)
    dev = outs - outs.mean(axis=0)
    std = np.sqrt(np.mean(dev ** 2, axis=0))
    ok = std > 1e-12
    w = np.where(ok, dev / (ensemble.L * np.where(ok, std, 1.0)), 0.0)
    g = np.repeat(w[:, :, None], np.shape(out)[2], axis=2)
    _, grad = ensemble.model.backward(cache, g, need_params=False)
    return std, np.asarray(grad, dtype=np.float64)


def explore(config: CorrectionConfig, ensemble, rng: np.random.Generator) -> np.ndarray:
    """One exploration state in box coordinates."""
    u = rng.uniform(0.0, 1.0, size=2)
    if config.sampling_mode == "monte_carlo":
        return u
    x = u[None, :].copy()
    opt = Adam([x], lr=config.lr_search)
    for _ in range(config.disagreement_steps):
        _, g = _member_std_and_grad(ensemble, x)
        if not np.all(np.isfinite(g)):
            break
        opt.step([x], [-g])  # ascent
        np.clip(x, 0.0, 1.0, out=x)
    return x[0]


@dataclass
class CorrectionResult:
    state: GasState
    breakdown: ErrorBreakdown
    iterations: int
    success: bool
    trace: list
    pad_queries: int
    buffer_len: int = 0

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)


def _to_state(pad: Pad, u) -> GasState:
    x = pad.config.domain.denormalize(u)
    return GasState(float(x[0]), float(x[1]))


def run_correction(measured, first_guess: GasState | None, pad_config: PadConfig,
                   config: CorrectionConfig, first_guess_breakdown: ErrorBreakdown | None = None,
                   ensemble: SurrogateEnsemble | None = None) -> CorrectionResult:
    """Correct a rejected estimate; return the best state PAD has seen.

    The first guess (if given and inside the safety box) replaces one random
    initial candidate, and its already-known error seeds the best-so-far.
    Iteration ``t`` trains the surrogate, searches, evaluates the selected
    candidate, then evaluates one exploration probe; either one reaching
    ``epsilon`` ends the run.
    """
    eps = config.epsilon
    pad = Pad(pad_config, measured)
    rng = rng_stream(config.seed, 1)
    if ensemble is None:
        ensemble = SurrogateEnsemble.create(config, config.seed)
    buf, best_u, best = init_buffer(config, pad, rng)
    if first_guess is not None and first_guess_breakdown is not None and first_guess_breakdown.e < best.e:
        best_u, best = pad_config.domain.normalize(first_guess.as_array()), first_guess_breakdown
    best_state = _to_state(pad, best_u)
    if first_guess is not None and first_guess_breakdown is not None and best is first_guess_breakdown:
        best_state = first_guess

    X0 = rng.uniform(0.0, 1.0, size=(config.N_C, 2))
    if first_guess is not None:
        u0 = pad_config.domain.normalize(first_guess.as_array())
        if np.all((u0 >= SAFETY_BOX[0]) & (u0 <= SAFETY_BOX[1])):
            X0[0] = u0
    cands = CandidateSet(X0, config.lr_search)

    trace = []
    new_pairs = 0
    t = 0
    done = config.stop_on_success and best.e <= eps
    while not done and t < config.T:
        t += 1
        n_e = train_surrogate(ensemble, buf, new_pairs, config)
        T_G = search_budget(n_e, ensemble.L, config.delta_G)
        greedy_ensemble_search(cands, ensemble, config, T_G)
        _, u_c = select_candidate(cands.X, ensemble, config)
        b_c = pad.evaluate_normalized(u_c)
        rec = {"t": t, "n_e": n_e, "T_G": T_G, "e_candidate": _num(b_c.e), "e_explore": None}
        if b_c.e < best.e:
            best, best_u, best_state = b_c, u_c, _to_state(pad, u_c)
        if config.stop_on_success and b_c.e <= eps:
            done = True
        else:
            u_m = explore(config, ensemble, rng)
            b_m = pad.evaluate_normalized(u_m)
            rec["e_explore"] = _num(b_m.e)
            if b_m.e < best.e:
                best, best_u, best_state = b_m, u_m, _to_state(pad, u_m)
            buf.append(u_c, target_of(b_c, config.error_mode))
            buf.append(u_m, target_of(b_m, config.error_mode))
            new_pairs = 2
            done = config.stop_on_success and b_m.e <= eps
        rec["e_best"] = _num(best.e)
        rec["buffer_len"] = len(buf)
        trace.append(rec)
    return CorrectionResult(best_state, best, t, bool(best.e <= eps), trace, pad.queries, len(buf))


def _num(v: float):
    return v if np.isfinite(v) else None
