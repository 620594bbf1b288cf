"""Quantum-behaved particle swarm optimisation over a bounded box.

Each particle samples its next position around a local attractor ``P``
(a random point between its personal best and the global best):

    X(t+1) = P +/- beta * |mbest - X(t)| * ln(1/mu),   mu ~ U(0, 1]

where ``mbest`` is the mean of all personal bests and ``beta`` shrinks
linearly from ``beta_start`` to ``beta_end``.  Positions are clamped to the
box.  The fitness is minimised.

All random draws of particle ``i`` at iteration ``t`` come from a generator
seeded with ``(seed, i, t)``, so evaluating particles in parallel or in any
order gives the same trajectory.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .gbdt import GbdtParams

logger = logging.getLogger(__name__)

FITNESS_RETRIES = 3


@dataclass(frozen=True)
class Dim:
    name: str
    lo: float
    hi: float
    integer: bool = False


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple

    def __post_init__(self):
        dims = tuple(self.dims)
        object.__setattr__(self, "dims", dims)
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise ValueError("dimension names must be unique")
        for d in dims:
            if not d.lo < d.hi:
                raise ValueError(f"dimension {d.name}: lo must be < hi")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    @property
    def lo(self) -> np.ndarray:
        return np.array([d.lo for d in self.dims], dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.array([d.hi for d in self.dims], dtype=np.float64)

    def __len__(self):
        return len(self.dims)

    def clamp(self, x) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def with_range(self, name, lo, hi) -> "SearchSpace":
        return SearchSpace(tuple(replace(d, lo=lo, hi=hi) if d.name == name else d
                                 for d in self.dims))

    @classmethod
    def full(cls) -> "SearchSpace":
        """The six LightGBM parameters and their tuning ranges."""
        return cls((
            Dim("learning_rate", 0.01, 0.2),
            Dim("n_estimators", 1000, 3000, integer=True),
            Dim("max_depth", 5, 12, integer=True),
            Dim("num_leaves", 2, 1023, integer=True),
            Dim("feature_fraction", 0.5, 1.0),
            Dim("bagging_fraction", 0.5, 1.0),
        ))

    @classmethod
    def desk(cls) -> "SearchSpace":
        """Same box with ``n_estimators`` cut to [50, 300] for small machines."""
        return cls.full().with_range("n_estimators", 50, 300)


@dataclass(frozen=True)
class QpsoConfig:
    n_particles: int = 30
    n_iterations: int = 50
    beta_start: float = 1.0
    beta_end: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        if not self.beta_start >= self.beta_end > 0:
            raise ValueError("need beta_start >= beta_end > 0")

    def beta(self, t: int) -> float:
        """Contraction-expansion coefficient for iteration ``t`` (1-based)."""
        if self.n_iterations <= 1:
            return self.beta_start
        frac = (t - 1) / (self.n_iterations - 1)
        return self.beta_start + (self.beta_end - self.beta_start) * frac


@dataclass
class Particle:
    position: np.ndarray
    personal_best: np.ndarray
    personal_best_fitness: float = math.inf


@dataclass
class Swarm:
    particles: list
    global_best: np.ndarray
    global_best_fitness: float
    beta: float
    iteration: int = 0
    attractors: np.ndarray | None = None

    @property
    def mean_best(self) -> np.ndarray:
        return mean_best(self)


@dataclass
class OptimizeResult:
    best: np.ndarray
    best_fitness: float
    history: list
    best_positions: list = field(default_factory=list)
    n_evaluations: int = 0


def particle_rng(seed: int, particle: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, particle, iteration])


def mean_best(swarm) -> np.ndarray:
    """Componentwise mean of the personal bests."""
    if isinstance(swarm, Swarm):
        bests = np.array([p.personal_best for p in swarm.particles])
    else:
        bests = np.asarray(swarm, dtype=np.float64)
    if bests.shape[0] < 1:
        raise ValueError("mean_best needs at least one particle")
    return bests.mean(axis=0)


def attractor(p_i, p_g, rng=None, phi=None) -> np.ndarray:
    """Random point ``phi * p_i + (1 - phi) * p_g`` with ``phi ~ U(0,1)`` per dimension."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    if p_i.shape != p_g.shape:
        raise ValueError("personal and global best differ in dimension")
    if phi is None:
        phi = rng.random(p_i.shape)
    # rounding can step an ulp past an endpoint, so clamp back onto the segment
    a = phi * p_i + (1.0 - phi) * p_g
    return np.clip(a, np.minimum(p_i, p_g), np.maximum(p_i, p_g))


def quantum_step(x, attract, p_mbest, beta, mu, positive) -> np.ndarray:
    """Unclamped position update for given draws ``mu`` and sign mask."""
    spread = beta * np.abs(np.asarray(p_mbest) - np.asarray(x)) * np.log(1.0 / np.asarray(mu))
    return np.where(positive, attract + spread, attract - spread)


def update_position(particle: Particle, p_mbest, beta: float, space: SearchSpace, rng,
                    global_best=None):
    """New clamped position; returns ``(position, attractor)``.

    Draw order per call: ``phi`` (attractor), ``mu``, then the sign, one value
    per dimension each.
    """
    g = particle.personal_best if global_best is None else global_best
    p = attractor(particle.personal_best, g, rng)
    n = p.shape[0]
    mu = 1.0 - rng.random(n)  # (0, 1]
    positive = rng.random(n) < 0.5
    x = quantum_step(particle.position, p, p_mbest, beta, mu, positive)
    return space.clamp(x), p


def update_personal_best(particle: Particle, fitness: float) -> Particle:
    """Keep the current position only on strict improvement."""
    if math.isnan(fitness):
        raise ValueError("fitness is NaN")
    if fitness < particle.personal_best_fitness:
        return Particle(particle.position.copy(), particle.position.copy(), float(fitness))
    return Particle(particle.position, particle.personal_best, particle.personal_best_fitness)


def _evaluate(fitness, x) -> float:
    for attempt in range(FITNESS_RETRIES + 1):
        try:
            return float(fitness(x))
        except Exception:
            if attempt == FITNESS_RETRIES:
                raise
            logger.warning("fitness evaluation failed (attempt %d), retrying", attempt + 1,
                           exc_info=True)
    raise AssertionError("unreachable")


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("VULNBOOST_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            logger.warning("ignoring non-integer VULNBOOST_THREADS=%r", env)
    return default if default is not None else cpus


def _evaluate_all(fitness, positions, n_workers) -> list[float]:
    if n_workers <= 1 or len(positions) <= 1:
        return [_evaluate(fitness, x) for x in positions]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(lambda x: _evaluate(fitness, x), positions))


def _refresh_global(swarm: Swarm):
    fits = np.array([p.personal_best_fitness for p in swarm.particles])
    i = int(np.argmin(fits))  # first index among ties
    if fits[i] < swarm.global_best_fitness:
        swarm.global_best = swarm.particles[i].personal_best.copy()
        swarm.global_best_fitness = float(fits[i])


def optimize(fitness: Callable[[np.ndarray], float], space: SearchSpace,
             cfg: QpsoConfig = QpsoConfig(), callback=None, n_workers: int = 1,
             beta_schedule: Callable[[int], float] | None = None) -> OptimizeResult:
    """Minimise ``fitness`` over ``space``.

    ``history[0]`` is the best fitness after the initial swarm and
    ``history[t]`` the best after iteration ``t``.  ``callback(swarm)`` runs
    after every iteration (and after initialisation).
    """
    lo, hi = space.lo, space.hi
    beta_of = beta_schedule or cfg.beta
    M = cfg.n_particles
    init = [lo + particle_rng(cfg.seed, i, 0).random(len(space)) * (hi - lo) for i in range(M)]
    init = [space.clamp(x) for x in init]
    fits = _evaluate_all(fitness, init, n_workers)
    particles = []
    for x, f in zip(init, fits):
        particles.append(update_personal_best(Particle(x, x.copy(), math.inf), f))
    swarm = Swarm(particles, particles[0].personal_best.copy(), math.inf, beta_of(1))
    _refresh_global(swarm)
    history = [swarm.global_best_fitness]
    best_positions = [swarm.global_best.copy()]
    n_eval = M
    if callback:
        callback(swarm)
    for t in range(1, cfg.n_iterations + 1):
        swarm.iteration = t
        swarm.beta = beta_of(t)
        mbest = mean_best(swarm)
        moved = []
        attractors = []
        for i, part in enumerate(swarm.particles):
            x, p = update_position(part, mbest, swarm.beta, space, particle_rng(cfg.seed, i, t),
                                   swarm.global_best)
            moved.append(x)
            attractors.append(p)
        swarm.attractors = np.array(attractors)
        fits = _evaluate_all(fitness, moved, n_workers)
        n_eval += M
        swarm.particles = [update_personal_best(Particle(x, part.personal_best,
                                                         part.personal_best_fitness), f)
                           for part, x, f in zip(swarm.particles, moved, fits)]
        _refresh_global(swarm)
        history.append(swarm.global_best_fitness)
        best_positions.append(swarm.global_best.copy())
        if callback:
            callback(swarm)
    return OptimizeResult(swarm.global_best.copy(), swarm.global_best_fitness, history,
                          best_positions, n_eval)


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def decode_params(position: Sequence[float], space: SearchSpace,
                  base: GbdtParams = GbdtParams()) -> GbdtParams:
    """Map a swarm position onto ``GbdtParams`` (integer dims are rounded)."""
    values = {}
    for d, v in zip(space.dims, position):
        v = float(min(max(v, d.lo), d.hi))
        if d.integer:
            v = _round_half_away(v)
            v = int(min(max(v, math.ceil(d.lo)), math.floor(d.hi)))
        values[d.name] = v
    return base.replace(**values)


def write_trace(result: OptimizeResult, space: SearchSpace, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "best_fitness"] + space.names)
        for t, (f, x) in enumerate(zip(result.history, result.best_positions)):
            w.writerow([t, format(f, ".17g")] + [format(v, ".17g") for v in x])
