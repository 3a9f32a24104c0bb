from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import SamplerConfig
from app.errors import InitializationError, NumericalWarning
from app.logger import TraceLogger
from app.sampler.diagnostics import ess_bulk, split_rhat
from app.utils import chain_rngs

Target = Callable[[np.ndarray], Tuple[float, np.ndarray]]
Initializer = Callable[[np.random.Generator], np.ndarray]

MAX_DELTA_H = 1000.0
INIT_ATTEMPTS = 100
DIVERGENCE_WARN_FRACTION = 0.1


@dataclass
class PosteriorDraws:
    """Post-warmup draws, shaped chains × samples × dim, with run diagnostics."""

    draws: np.ndarray
    param_names: List[str]
    accept_stats: np.ndarray
    divergence_count: int
    rhat: np.ndarray
    ess_bulk: np.ndarray
    step_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tree_depths: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=int))
    divergences: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    warnings: List[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """All draws stacked chain after chain, (chains·samples) × dim."""
        return self.draws.reshape(-1, self.draws.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.param_names.index(name)]

    def failing_parameters(self, threshold: float = 1.05) -> List[str]:
        return [name for name, value in zip(self.param_names, self.rhat) if not value < threshold]

    def converged(self, threshold: float = 1.05) -> bool:
        return not self.failing_parameters(threshold)


@dataclass
class _Point:
    theta: np.ndarray
    r: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    minus: _Point
    plus: _Point
    proposal: _Point
    log_weight: float
    rho: np.ndarray
    sum_accept: float
    n_leapfrog: int
    turning: bool = False
    diverging: bool = False

    @property
    def valid(self) -> bool:
        return not (self.turning or self.diverging)


def kinetic_energy(r: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(np.dot(r, inv_mass * r))


def hamiltonian(logp: float, r: np.ndarray, inv_mass: np.ndarray) -> float:
    return -logp + kinetic_energy(r, inv_mass)


def leapfrog(
    target: Target,
    theta: np.ndarray,
    r: np.ndarray,
    grad: np.ndarray,
    step: float,
    inv_mass: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """One velocity-Verlet step; returns (theta, r, logp, grad)."""
    r_half = r + 0.5 * step * grad
    theta_new = theta + step * inv_mass * r_half
    logp, grad_new = target(theta_new)
    return theta_new, r_half + 0.5 * step * grad_new, logp, grad_new


def _is_turning(rho: np.ndarray, sharp_minus: np.ndarray, sharp_plus: np.ndarray) -> bool:
    return float(np.dot(sharp_plus, rho)) <= 0.0 or float(np.dot(sharp_minus, rho)) <= 0.0


class DualAveraging:
    """Step-size adaptation toward a target mean acceptance statistic."""

    def __init__(self, step: float, target_accept: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75) -> None:
        self.target_accept = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step)

    def restart(self, step: float) -> None:
        self.mu = math.log(10.0 * step)
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.count = 0
        self.step = step

    def update(self, accept_stat: float) -> float:
        self.count += 1
        m = self.count
        weight = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - weight) * self.h_bar + weight * (self.target_accept - accept_stat)
        log_step = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_step_bar = eta * log_step + (1.0 - eta) * self.log_step_bar
        self.step = math.exp(log_step)
        return self.step

    @property
    def final_step(self) -> float:
        return math.exp(self.log_step_bar)


class WelfordVariance:
    def __init__(self, dim: int) -> None:
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        n = self.count
        var = self.m2 / (n - 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


class ChainSampler:
    """One HMC chain: NUTS or static-length transitions plus warmup adaptation."""

    def __init__(self, target: Target, config: SamplerConfig, rng: np.random.Generator, dim: int) -> None:
        self.target = target
        self.config = config
        self.rng = rng
        self.inv_mass = np.ones(dim)
        self.step = 1.0

    # -- trajectories -------------------------------------------------
    def _sample_momentum(self) -> np.ndarray:
        return self.rng.standard_normal(self.inv_mass.shape[0]) / np.sqrt(self.inv_mass)

    def _leaf(self, start: _Point, direction: int, h0: float) -> _Tree:
        theta, r, logp, grad = leapfrog(self.target, start.theta, start.r, start.grad, direction * self.step, self.inv_mass)
        point = _Point(theta, r, logp, grad)
        h = hamiltonian(logp, r, self.inv_mass) if np.isfinite(logp) else np.inf
        delta = h - h0
        if not np.isfinite(delta):
            delta = np.inf
        return _Tree(
            minus=point,
            plus=point,
            proposal=point,
            log_weight=-delta,
            rho=r.copy(),
            sum_accept=math.exp(min(0.0, -delta)),
            n_leapfrog=1,
            diverging=delta > MAX_DELTA_H,
        )

    def _merge(self, first: _Tree, second: _Tree, direction: int, uniform: bool) -> _Tree:
        """Join ``second`` (built after ``first`` in ``direction``) onto ``first``."""
        log_weight = float(np.logaddexp(first.log_weight, second.log_weight))
        if uniform:
            take_second = math.log(self.rng.uniform()) < second.log_weight - log_weight
        else:
            take_second = math.log(self.rng.uniform()) < second.log_weight - first.log_weight
        lower, upper = (first, second) if direction > 0 else (second, first)
        merged = _Tree(
            minus=lower.minus,
            plus=upper.plus,
            proposal=second.proposal if take_second else first.proposal,
            log_weight=log_weight,
            rho=first.rho + second.rho,
            sum_accept=first.sum_accept + second.sum_accept,
            n_leapfrog=first.n_leapfrog + second.n_leapfrog,
            diverging=first.diverging or second.diverging,
        )
        sharp = self.inv_mass
        turning = _is_turning(merged.rho, sharp * merged.minus.r, sharp * merged.plus.r)
        # across the junction of the two halves
        turning = turning or _is_turning(lower.rho + upper.minus.r, sharp * lower.minus.r, sharp * upper.minus.r)
        turning = turning or _is_turning(upper.rho + lower.plus.r, sharp * lower.plus.r, sharp * upper.plus.r)
        merged.turning = turning
        return merged

    def _build(self, start: _Point, depth: int, direction: int, h0: float) -> _Tree:
        if depth == 0:
            return self._leaf(start, direction, h0)
        first = self._build(start, depth - 1, direction, h0)
        if not first.valid:
            return first
        edge = first.plus if direction > 0 else first.minus
        second = self._build(edge, depth - 1, direction, h0)
        if not second.valid:
            second.turning = True
            second.sum_accept += first.sum_accept
            second.n_leapfrog += first.n_leapfrog
            return second
        return self._merge(first, second, direction, uniform=True)

    def nuts_transition(self, current: _Point) -> Tuple[_Point, float, int, bool]:
        r0 = self._sample_momentum()
        h0 = hamiltonian(current.logp, r0, self.inv_mass)
        origin = _Point(current.theta, r0, current.logp, current.grad)
        tree = _Tree(origin, origin, origin, 0.0, r0.copy(), 0.0, 0)
        depth = 0
        diverged = False
        sum_accept, n_leapfrog = 0.0, 0
        while depth < self.config.max_treedepth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            edge = tree.plus if direction > 0 else tree.minus
            subtree = self._build(edge, depth, direction, h0)
            sum_accept += subtree.sum_accept
            n_leapfrog += subtree.n_leapfrog
            depth += 1
            if subtree.diverging:
                diverged = True
                break
            if subtree.turning:
                break
            tree = self._merge(tree, subtree, direction, uniform=False)
            if tree.turning:
                break
        accept = sum_accept / max(n_leapfrog, 1)
        proposal = tree.proposal
        return _Point(proposal.theta, proposal.r, proposal.logp, proposal.grad), accept, depth, diverged

    def static_transition(self, current: _Point) -> Tuple[_Point, float, int, bool]:
        r0 = self._sample_momentum()
        h0 = hamiltonian(current.logp, r0, self.inv_mass)
        theta, r, logp, grad = current.theta, r0, current.logp, current.grad
        for _ in range(self.config.n_leapfrog):
            theta, r, logp, grad = leapfrog(self.target, theta, r, grad, self.step, self.inv_mass)
            if not np.isfinite(logp):
                break
        h = hamiltonian(logp, r, self.inv_mass) if np.isfinite(logp) else np.inf
        delta = h - h0 if np.isfinite(h) else np.inf
        accept = math.exp(min(0.0, -delta))
        diverged = delta > MAX_DELTA_H
        if self.rng.uniform() < accept:
            return _Point(theta, r, logp, grad), accept, 0, diverged
        return current, accept, 0, diverged

    def transition(self, current: _Point) -> Tuple[_Point, float, int, bool]:
        if self.config.algorithm == "static":
            return self.static_transition(current)
        return self.nuts_transition(current)

    # -- adaptation ---------------------------------------------------
    def find_reasonable_step(self, current: _Point) -> float:
        step = 1.0
        r = self._sample_momentum()
        h0 = hamiltonian(current.logp, r, self.inv_mass)

        def log_ratio(eps: float) -> float:
            _, r_new, logp, _ = leapfrog(self.target, current.theta, r, current.grad, eps, self.inv_mass)
            if not np.isfinite(logp):
                return -np.inf
            return h0 - hamiltonian(logp, r_new, self.inv_mass)

        ratio = log_ratio(step)
        direction = 1.0 if ratio > math.log(0.8) else -1.0
        for _ in range(100):
            if direction > 0 and not ratio > math.log(0.8):
                break
            if direction < 0 and ratio > math.log(0.8):
                break
            step *= 2.0**direction
            ratio = log_ratio(step)
        return step

    def run(self, start: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
        cfg = self.config
        logp, grad = self.target(start)
        current = _Point(np.asarray(start, dtype=float), np.zeros_like(start), logp, grad)
        self.step = self.find_reasonable_step(current)
        adapter = DualAveraging(self.step, cfg.target_accept)

        warmup = cfg.warmup
        early_start = int(0.15 * warmup)
        midpoint = warmup // 2
        terminal = warmup - max(1, warmup // 10)
        windows = [(early_start, midpoint), (midpoint, terminal)]
        accumulator: Optional[WelfordVariance] = None

        for it in range(warmup):
            current, accept, _, _ = self.transition(current)
            self.step = adapter.update(accept)
            for begin, end in windows:
                if it == begin:
                    accumulator = WelfordVariance(start.shape[0])
                if accumulator is not None and begin <= it < end:
                    accumulator.add(current.theta)
                if it == end - 1 and accumulator is not None and accumulator.count >= 3:
                    self.inv_mass = accumulator.regularized()
                    accumulator = None
                    self.step = self.find_reasonable_step(current)
                    adapter.restart(self.step)
        self.step = adapter.final_step

        n = cfg.samples
        draws = np.empty((n, start.shape[0]))
        accepts = np.empty(n)
        depths = np.zeros(n, dtype=int)
        divergent = np.zeros(n, dtype=bool)
        for it in range(n):
            current, accepts[it], depths[it], divergent[it] = self.transition(current)
            draws[it] = current.theta
        return draws, accepts, depths, divergent, self.step


def _initial_point(target: Target, init: Initializer, rng: np.random.Generator) -> np.ndarray:
    for _ in range(INIT_ATTEMPTS):
        theta = np.asarray(init(rng), dtype=float)
        logp, grad = target(theta)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return theta
    raise InitializationError(f"No finite starting point found after {INIT_ATTEMPTS} attempts.")


def run_hmc(
    target: Target,
    config: SamplerConfig,
    *,
    dim: Optional[int] = None,
    init: Optional[Initializer] = None,
    param_names: Optional[Sequence[str]] = None,
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    logger: Optional[TraceLogger] = None,
) -> PosteriorDraws:
    """Run ``config.chains`` independent chains and collect diagnostics.

    ``init`` draws a starting point (retried until the target is finite);
    ``transform`` maps stored draws to the reported parameterisation.
    """
    if init is None:
        if dim is None:
            raise ValueError("Either dim or init must be given.")

        def init(rng: np.random.Generator) -> np.ndarray:
            return rng.uniform(-2.0, 2.0, size=dim)

    rngs = chain_rngs(config.seed, config.chains)

    def run_chain(index: int):
        rng = rngs[index]
        start = _initial_point(target, init, rng)
        sampler = ChainSampler(target, config, rng, start.shape[0])
        result = sampler.run(start)
        if logger:
            logger.log(
                "sampler_chain_done",
                chain=index + 1,
                step_size=result[4],
                mean_accept=float(np.mean(result[1])),
                divergences=int(np.sum(result[3])),
            )
        return result

    with ThreadPoolExecutor(max_workers=min(config.threads, config.chains)) as pool:
        results = list(pool.map(run_chain, range(config.chains)))

    raw = np.stack([r[0] for r in results])
    draws = transform(raw) if transform is not None else raw
    names = list(param_names) if param_names is not None else [f"theta[{j + 1}]" for j in range(raw.shape[2])]
    divergences = np.stack([r[3] for r in results])
    divergence_count = int(divergences.sum())
    messages: List[str] = []
    if divergence_count > DIVERGENCE_WARN_FRACTION * divergences.size:
        message = f"{divergence_count} of {divergences.size} transitions diverged."
        warnings.warn(message, NumericalWarning, stacklevel=2)
        messages.append(message)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NumericalWarning)
        rhat = np.atleast_1d(split_rhat(draws))
        ess = np.atleast_1d(ess_bulk(draws))
    messages.extend(str(w.message) for w in caught)
    return PosteriorDraws(
        draws=draws,
        param_names=names,
        accept_stats=np.stack([r[1] for r in results]),
        divergence_count=divergence_count,
        rhat=rhat,
        ess_bulk=ess,
        step_sizes=np.array([r[4] for r in results]),
        tree_depths=np.stack([r[2] for r in results]),
        divergences=divergences,
        warnings=messages,
    )
