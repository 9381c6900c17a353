"""Gradient-based MCMC: static-trajectory Hamiltonian Monte Carlo.

Each transition refreshes the momentum from a diagonal-mass Gaussian,
integrates a leapfrog trajectory of jittered length (uniform over
[1, L] steps with L chosen so step_size * L is about 1.5) and applies a
Metropolis correction on the Hamiltonian error.  Warmup adapts the step
size by dual averaging toward a target acceptance rate and estimates a
diagonal mass matrix in expanding memoryless windows.

Determinism: chain c of a run seeded with s draws from
``numpy.random.Generator(Philox(SeedSequence(entropy=s, spawn_key=(c,))))``,
a counter-based generator, so results are reproducible bit for bit and
independent of chain scheduling.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .model import ModelSpec
from .posterior import Posterior

# Energy error beyond which a transition counts as divergent.
DIVERGENCE_THRESHOLD = 1000.0

# Dual-averaging constants and the nominal eps * L trajectory length.
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75
_TARGET_PATH_LENGTH = 1.5

ValueAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


class SamplingError(RuntimeError):
    """Sampling could not produce usable draws."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iter: int = 4000
    warmup: int = 2000
    seed: int = 1
    target_accept: float = 0.8
    max_leapfrog_steps: int = 1024
    init_radius: float = 2.0

    def __post_init__(self) -> None:
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iter:
            raise ValueError("need 0 <= warmup < iter")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.max_leapfrog_steps < 1:
            raise ValueError("max_leapfrog_steps must be >= 1")
        if self.init_radius <= 0:
            raise ValueError("init_radius must be > 0")


@dataclass
class ChainOutput:
    """Post-warmup output of one chain."""

    draws: np.ndarray | None  # (n_kept, dim) unconstrained; None when loaded from CSV
    constrained_draws: np.ndarray  # (n_kept, dim)
    accept_stats: np.ndarray
    divergences: int
    step_size: float
    mass_diag: np.ndarray


@dataclass
class PosteriorDraws:
    """Draws of all chains with a shared parameter naming."""

    parameter_names: tuple[str, ...]
    chains: list[ChainOutput]

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_draws(self) -> int:
        return self.chains[0].constrained_draws.shape[0] if self.chains else 0

    def index_of(self, name: str) -> int:
        try:
            return self.parameter_names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter '{name}'") from None

    def constrained(self, name: str) -> np.ndarray:
        """Per-chain draws of one parameter, shape (n_chains, n_draws)."""
        j = self.index_of(name)
        return np.stack([c.constrained_draws[:, j] for c in self.chains])

    def pooled(self, name: str) -> np.ndarray:
        return self.constrained(name).reshape(-1)

    def names_matching(self, prefix: str) -> tuple[str, ...]:
        """All parameter names of one block, e.g. ``mu`` -> ``mu[1]``, ..."""
        exact = [n for n in self.parameter_names if n == prefix]
        indexed = [n for n in self.parameter_names if n.startswith(prefix + "[")]
        return tuple(exact + indexed)

    @property
    def total_divergences(self) -> int:
        return sum(c.divergences for c in self.chains)


# ---------------------------------------------------------------------------
# Leapfrog integration
# ---------------------------------------------------------------------------


def leapfrog(
    z: np.ndarray,
    p: np.ndarray,
    eps: float,
    n_steps: int,
    grad: Callable[[np.ndarray], np.ndarray],
    mass_diag: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Position/momentum after ``n_steps`` leapfrog steps.

    ``grad`` is the gradient of the log density.  The integrator is
    symplectic and time-reversible: integrating, negating the momentum
    and integrating again returns the starting point.
    """
    if eps <= 0:
        raise ValueError("step size must be > 0")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    mass_diag = np.asarray(mass_diag, dtype=float)
    if np.any(mass_diag <= 0):
        raise ValueError("mass_diag must be strictly positive")
    z = np.array(z, dtype=float)
    p = np.array(p, dtype=float)
    p = p + 0.5 * eps * grad(z)
    for step in range(n_steps):
        z = z + eps * p / mass_diag
        g = grad(z)
        if step < n_steps - 1:
            p = p + eps * g
    p = p + 0.5 * eps * g
    return z, p


@dataclass
class HMCState:
    z: np.ndarray
    logp: float
    grad: np.ndarray


def _leapfrog_vg(
    vg: ValueAndGrad,
    state: HMCState,
    p: np.ndarray,
    eps: float,
    n_steps: int,
    mass_diag: np.ndarray,
) -> tuple[HMCState, np.ndarray, bool]:
    """Leapfrog reusing cached gradients; flags non-finite excursions."""
    z, g = state.z, state.grad
    logp = state.logp
    p = p + 0.5 * eps * g
    for step in range(n_steps):
        z = z + eps * p / mass_diag
        if not np.all(np.isfinite(z)):
            return state, p, False
        logp, g = vg(z)
        if not math.isfinite(logp):
            return state, p, False
        if step < n_steps - 1:
            p = p + eps * g
    p = p + 0.5 * eps * g
    if not np.all(np.isfinite(p)):
        return state, p, False
    return HMCState(z, logp, g), p, True


def _kinetic(p: np.ndarray, mass_diag: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        return float(0.5 * np.sum(p * p / mass_diag))


def _num_steps_cap(eps: float, max_steps: int) -> int:
    return max(1, min(max_steps, int(round(_TARGET_PATH_LENGTH / eps))))


def hmc_transition(
    vg: ValueAndGrad,
    state: HMCState,
    eps: float,
    mass_diag: np.ndarray,
    rng: np.random.Generator,
    max_leapfrog_steps: int = 1024,
) -> tuple[HMCState, float, bool]:
    """One HMC transition: returns (state, acceptance statistic, divergent).

    Divergent transitions (non-finite states, or |energy error| above
    ``DIVERGENCE_THRESHOLD``) are rejected and flagged, not raised.
    """
    p = rng.standard_normal(state.z.shape[0]) * np.sqrt(mass_diag)
    n_steps = int(rng.integers(1, _num_steps_cap(eps, max_leapfrog_steps) + 1))
    h0 = -state.logp + _kinetic(p, mass_diag)
    proposal, p_new, ok = _leapfrog_vg(vg, state, p, eps, n_steps, mass_diag)
    if not ok:
        rng.random()  # keep the RNG stream aligned across outcomes
        return state, 0.0, True
    h1 = -proposal.logp + _kinetic(p_new, mass_diag)
    delta_h = h1 - h0
    if not math.isfinite(delta_h) or abs(delta_h) > DIVERGENCE_THRESHOLD:
        rng.random()
        return state, 0.0, True
    accept_stat = min(1.0, math.exp(-delta_h))
    if rng.random() < accept_stat:
        return proposal, accept_stat, False
    return state, accept_stat, False


# ---------------------------------------------------------------------------
# Warmup adaptation
# ---------------------------------------------------------------------------


@dataclass
class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    mu: float
    log_eps: float = 0.0
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    t: int = 0

    @classmethod
    def start_at(cls, eps: float) -> "DualAveraging":
        return cls(mu=math.log(10.0 * eps), log_eps=math.log(eps))

    def update(self, accept_stat: float, target: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + _DA_T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / _DA_GAMMA * self.h_bar
        w = self.t ** (-_DA_KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def averaged(self) -> float:
        return math.exp(self.log_eps_bar)


class _Welford:
    """Online mean/variance over the draws of one adaptation window."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_var(self) -> np.ndarray:
        """Shrunk variance estimate, kept strictly positive."""
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        w = self.n / (self.n + 5.0)
        return w * var + 1e-3 * (1.0 - w)


def warmup_windows(warmup: int) -> list[tuple[int, int]] | None:
    """Mass-adaptation windows: 75 fast, slow windows doubling from 25, 50 fast.

    Returns None when the warmup is too short for the schedule; the last
    slow window absorbs any remainder.
    """
    init_buffer, term_buffer, base = 75, 50, 25
    if warmup < init_buffer + term_buffer + base:
        return None
    windows = []
    cur, end = init_buffer, warmup - term_buffer
    width = base
    while True:
        nxt = cur + width
        if nxt + 2 * width > end:
            windows.append((cur, end))
            break
        windows.append((cur, nxt))
        cur, width = nxt, 2 * width
    return windows


def find_reasonable_step_size(
    vg: ValueAndGrad,
    state: HMCState,
    mass_diag: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Double/halve the step size until one-step acceptance crosses 0.5."""
    eps = 1.0
    p = rng.standard_normal(state.z.shape[0]) * np.sqrt(mass_diag)
    h0 = -state.logp + _kinetic(p, mass_diag)

    def log_ratio(eps: float) -> float:
        proposal, p_new, ok = _leapfrog_vg(vg, state, p, eps, 1, mass_diag)
        if not ok:
            return -math.inf
        return -(-proposal.logp + _kinetic(p_new, mass_diag)) + h0

    direction = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(100):
        eps *= 2.0**direction
        ratio = log_ratio(eps)
        if direction > 0 and ratio <= math.log(0.5):
            break
        if direction < 0 and ratio >= math.log(0.5):
            break
        if not 1e-10 < eps < 1e7:
            break
    return eps


def _warmup_chain(
    vg: ValueAndGrad,
    state: HMCState,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray, HMCState]:
    """Adapt (step size, diagonal mass) over the warmup phase."""
    dim = state.z.shape[0]
    mass = np.ones(dim)
    eps = find_reasonable_step_size(vg, state, mass, rng)
    da = DualAveraging.start_at(eps)
    windows = warmup_windows(config.warmup)
    if windows is None and config.warmup > 0:
        warnings.warn(
            f"warmup={config.warmup} is too short for mass adaptation; "
            "adapting step size only",
            stacklevel=3,
        )
    window_iter = iter(windows or [])
    window = next(window_iter, None)
    welford: _Welford | None = None
    divergent = 0
    for t in range(config.warmup):
        state, accept, div = hmc_transition(
            vg, state, eps, mass, rng, config.max_leapfrog_steps
        )
        divergent += div
        eps = da.update(accept, config.target_accept)
        if window is not None and window[0] <= t:
            if welford is None:
                welford = _Welford(dim)
            welford.add(state.z)
            if t == window[1] - 1:
                # mass = inverse posterior variance, so step sizes scale
                # with each coordinate's posterior spread
                mass = 1.0 / welford.regularized_var()
                welford = None
                window = next(window_iter, None)
                eps = find_reasonable_step_size(vg, state, mass, rng)
                da = DualAveraging.start_at(eps)
    if config.warmup > 0:
        if divergent == config.warmup:
            raise SamplingError(
                "every warmup transition diverged; consider a non-centered "
                "parametrization or a smaller init_radius"
            )
        eps = da.averaged()
    return eps, mass, state


def adapt_warmup(
    posterior: Posterior,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    """Run warmup adaptation from a fresh initialization.

    Deterministic given the generator state: repeated calls with an
    identically seeded generator return bit-identical results.
    """
    vg = posterior.logp_and_grad
    state = _initial_state(vg, posterior.dim, config.init_radius, rng)
    eps, mass, _ = _warmup_chain(vg, state, config, rng)
    return eps, mass


def _initial_state(
    vg: ValueAndGrad, dim: int, init_radius: float, rng: np.random.Generator
) -> HMCState:
    for _ in range(100):
        z = rng.uniform(-init_radius, init_radius, size=dim)
        logp, grad = vg(z)
        if math.isfinite(logp) and np.all(np.isfinite(grad)):
            return HMCState(z, logp, grad)
    raise SamplingError(
        "could not find an initialization with finite density in 100 tries; "
        "consider a smaller init_radius"
    )


def chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    """Counter-based per-chain stream: Philox keyed by (seed, chain)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(chain_index,))
    return np.random.Generator(np.random.Philox(ss))


def _sample_chain(
    vg: ValueAndGrad,
    dim: int,
    config: SamplerConfig,
    chain_index: int,
    constrain: Callable[[np.ndarray], np.ndarray],
) -> ChainOutput:
    rng = chain_rng(config.seed, chain_index)
    state = _initial_state(vg, dim, config.init_radius, rng)
    eps, mass, state = _warmup_chain(vg, state, config, rng)
    n_keep = config.iter - config.warmup
    draws = np.empty((n_keep, dim))
    constrained = np.empty((n_keep, dim))
    accepts = np.empty(n_keep)
    divergences = 0
    for i in range(n_keep):
        state, accept, div = hmc_transition(
            vg, state, eps, mass, rng, config.max_leapfrog_steps
        )
        divergences += div
        draws[i] = state.z
        constrained[i] = constrain(state.z)
        accepts[i] = accept
    return ChainOutput(
        draws=draws,
        constrained_draws=constrained,
        accept_stats=accepts,
        divergences=divergences,
        step_size=eps,
        mass_diag=mass,
    )


def _max_workers(chains: int) -> int:
    raw = os.environ.get("METABAYES_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        workers = 1
    return max(1, min(chains, workers))


def run_chains(
    spec: ModelSpec, dataset: Dataset, config: SamplerConfig | None = None
) -> PosteriorDraws:
    """Fit a model: run all chains and collect post-warmup constrained draws.

    Chains are independent given their derived seeds and are merged by
    chain index, so results do not depend on scheduling.  The
    ``METABAYES_THREADS`` environment variable caps chain parallelism
    (default 1, sequential).
    """
    config = config or SamplerConfig()
    post = Posterior(spec, dataset)
    vg = post.logp_and_grad
    constrain = post.layout.constrain
    indices = range(config.chains)
    workers = _max_workers(config.chains)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chains = list(
                pool.map(
                    lambda c: _sample_chain(vg, post.dim, config, c, constrain), indices
                )
            )
    else:
        chains = [_sample_chain(vg, post.dim, config, c, constrain) for c in indices]
    return PosteriorDraws(parameter_names=post.layout.parameter_names, chains=chains)


# ---------------------------------------------------------------------------
# Draw dumps
# ---------------------------------------------------------------------------


def write_draws_csv(draws: PosteriorDraws, path_or_buffer) -> None:
    """Dump constrained draws: header ``chain, iteration, <names...>``.

    Floats are written with ``repr`` (shortest round-trip form), so the
    same draws always produce byte-identical files.
    """
    own = isinstance(path_or_buffer, (str, os.PathLike))
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain", "iteration", *draws.parameter_names])
        for c, chain in enumerate(draws.chains, start=1):
            for i, row in enumerate(chain.constrained_draws, start=1):
                writer.writerow([c, i, *[repr(float(v)) for v in row]])
    finally:
        if own:
            fh.close()


def read_draws_csv(path_or_buffer) -> PosteriorDraws:
    """Load a draw dump written by :func:`write_draws_csv`.

    Only constrained draws are recovered; sampler metadata (step size,
    mass, acceptance) is not part of the dump.
    """
    own = isinstance(path_or_buffer, (str, os.PathLike))
    fh = open(path_or_buffer, "r", newline="") if own else path_or_buffer
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["chain", "iteration"]:
            raise ValueError("not a draws CSV: expected 'chain, iteration, ...' header")
        names = tuple(header[2:])
        by_chain: dict[int, list[list[float]]] = {}
        for row in reader:
            by_chain.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    finally:
        if own:
            fh.close()
    chains = []
    for c in sorted(by_chain):
        arr = np.asarray(by_chain[c])
        chains.append(
            ChainOutput(
                draws=None,
                constrained_draws=arr,
                accept_stats=np.array([]),
                divergences=0,
                step_size=math.nan,
                mass_diag=np.array([]),
            )
        )
    return PosteriorDraws(parameter_names=names, chains=chains)
