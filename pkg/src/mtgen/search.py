"""Fitness terms over the second-stage latent space, and particle swarm search."""

import json
from dataclasses import dataclass

import numpy as np

from ._validation import check_random_state
from .cvae import sample_pipeline
from .errors import ParameterError


def o1(sigma):
    """Uncertainty term: ``(e^s - 1) / (e^s + 1)``, i.e. ``tanh(s / 2)``; maps [0, inf) to [0, 1)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ParameterError("sigma must be non-negative")
    # tanh form does not overflow for large sigma
    out = np.tanh(sigma / 2.0)
    return float(out) if out.ndim == 0 else out


def o2(u, normalized=True):
    """Plausibility term: ``sum_i exp(-u_i^2)``, divided by ``len(u)`` when ``normalized``.

    Accepts one vector or a ``[n, k]`` batch. The normalised form peaks at
    exactly 1 at the origin.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] == 0:
        raise ParameterError("latent vector must be nonempty")
    total = np.exp(-u * u).sum(axis=-1)
    if normalized:
        total = total / u.shape[-1]
    return float(total) if total.ndim == 0 else total


@dataclass(frozen=True)
class FitnessWeights:
    w1: float = 1.0
    w2: float = 1.0

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or self.w1 + self.w2 <= 0:
            raise ParameterError(f"weights must be non-negative with positive sum, got {self}")


def score(sigma, u, weights=FitnessWeights(), normalized=True):
    """Joint cost ``w1 * o1(sigma) + w2 * o2(u)`` (to be maximised)."""
    return weights.w1 * o1(sigma) + weights.w2 * o2(u, normalized)


def random_sample(latent_dim, rng, n=None):
    """I.i.d. standard-normal latent vector(s)."""
    if latent_dim < 1:
        raise ParameterError("latent_dim must be >= 1")
    rng = check_random_state(rng)
    return rng.standard_normal(latent_dim if n is None else (n, latent_dim))


class LatentFitness:
    """Batched fitness of second-stage codes under a fixed condition.

    Each call is one swarm iteration. Row ``i`` of iteration ``t`` draws its
    dropout masks from a stream seeded by ``(seed, t, i)``, so the masks do
    not depend on how evaluations are batched. Identical positions within
    one call are evaluated once.
    """

    def __init__(self, condition, mut, stage1, stage2, weights=FitnessWeights(), passes=32,
                 seed=0, normalized=True):
        self.condition = int(condition)
        self.mut = mut
        self.stage1 = stage1
        self.stage2 = stage2
        self.weights = weights
        self.passes = passes
        self.seed = int(seed)
        self.normalized = normalized
        self.iteration = 0
        self.evaluations = 0

    def sigma(self, positions, rngs):
        images = sample_pipeline(positions, np.full(len(positions), self.condition), self.stage1, self.stage2)
        sigma, _ = self.mut.predict_uncertainty(images, self.passes, rngs=rngs)
        return sigma

    def __call__(self, positions):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        unique, first, inverse = np.unique(positions, axis=0, return_index=True, return_inverse=True)
        rngs = [np.random.default_rng([self.seed, self.iteration, int(i)]) for i in first]
        sigma = self.sigma(unique, rngs)
        values = score(sigma, unique, self.weights, self.normalized)
        self.iteration += 1
        self.evaluations += len(unique)
        return np.asarray(values)[inverse.reshape(-1)]


def fitness(u, condition, mut, stage1, stage2, weights=FitnessWeights(), passes=32, rng=None,
            normalized=True):
    """Fitness of one latent vector ``u`` (higher is better)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (stage2.latent_dim,):
        raise ParameterError(f"u must have length {stage2.latent_dim}, got shape {u.shape}")
    images = sample_pipeline(u[None], [condition], stage1, stage2)
    sigma, _ = mut.predict_uncertainty(images, passes, rngs=[check_random_state(rng)])
    return float(score(sigma[0], u, weights, normalized))


@dataclass
class SwarmConfig:
    particles: int = 16
    iterations: int = 10
    inertia: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494
    topology: str = "global"
    ring_neighbors: int = 1  # per side, for topology="ring"
    velocity_clamp: float = 1.0
    init_bound: float = 3.0

    def __post_init__(self):
        if self.particles < 1 or self.iterations < 1:
            raise ParameterError("particles and iterations must be positive")
        if self.velocity_clamp <= 0 or self.init_bound <= 0:
            raise ParameterError("velocity_clamp and init_bound must be positive")
        if self.topology not in ("global", "ring"):
            raise ParameterError(f"unknown topology {self.topology!r}")
        if self.topology == "ring" and self.ring_neighbors < 1:
            raise ParameterError("ring topology needs ring_neighbors >= 1")


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float


@dataclass
class SwarmResult:
    best_position: np.ndarray
    best_fitness: float
    trajectory: list  # (iteration, best-ever fitness, mean current fitness)
    particles: list
    evaluations: int


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, position, value):
        super().__init__(f"objective returned {value} at position {np.array2string(position, precision=4)}")
        self.position = position
        self.value = value


def _neighbourhood_best(best_pos, best_fit, config):
    if config.topology == "global":
        i = int(np.argmax(best_fit))
        return np.broadcast_to(best_pos[i], best_pos.shape)
    n = len(best_fit)
    k = config.ring_neighbors
    offsets = np.arange(-k, k + 1)
    neighbours = (np.arange(n)[:, None] + offsets[None, :]) % n
    pick = neighbours[np.arange(n), np.argmax(best_fit[neighbours], axis=1)]
    return best_pos[pick]


def pso_run(objective, dim, config=None, rng=None):
    """Maximise a batched ``objective(positions[n, dim]) -> values[n]``.

    Standard inertia-weight update with per-coordinate uniform ``r1, r2`` and
    velocity clamping. Particles start uniformly in ``[-init_bound,
    init_bound]^dim`` at rest. Returns a :class:`SwarmResult` holding the
    best-ever position.
    """
    config = config or SwarmConfig()
    rng = check_random_state(rng)
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    n = config.particles
    pos = rng.uniform(-config.init_bound, config.init_bound, size=(n, dim))
    vel = np.zeros((n, dim))

    def evaluate(p):
        values = np.asarray(objective(p), dtype=np.float64).reshape(-1)
        if values.shape != (len(p),):
            raise ParameterError(f"objective returned {values.shape} values for {len(p)} positions")
        bad = ~np.isfinite(values)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonFiniteObjectiveError(p[i].copy(), values[i])
        return values

    fit = evaluate(pos)
    evaluations = n
    best_pos, best_fit = pos.copy(), fit.copy()
    g = int(np.argmax(best_fit))
    trajectory = [(0, float(best_fit[g]), float(fit.mean()))]
    for it in range(1, config.iterations + 1):
        guide = _neighbourhood_best(best_pos, best_fit, config)
        r1 = rng.random((n, dim))
        r2 = rng.random((n, dim))
        vel = (config.inertia * vel
               + config.cognitive * r1 * (best_pos - pos)
               + config.social * r2 * (guide - pos))
        np.clip(vel, -config.velocity_clamp, config.velocity_clamp, out=vel)
        pos = pos + vel
        fit = evaluate(pos)
        evaluations += n
        improved = fit > best_fit
        best_pos[improved] = pos[improved]
        best_fit[improved] = fit[improved]
        g = int(np.argmax(best_fit))
        trajectory.append((it, float(best_fit[g]), float(fit.mean())))
    particles = [Particle(pos[i].copy(), vel[i].copy(), best_pos[i].copy(), float(best_fit[i]))
                 for i in range(n)]
    return SwarmResult(best_pos[g].copy(), float(best_fit[g]), trajectory, particles, evaluations)


def trajectory_records(trajectory, **fields):
    """One dict per iteration: ``iteration``, ``best`` and ``mean`` plus any extra ``fields``."""
    for it, best, mean in trajectory:
        yield {**fields, "iteration": it, "best": best, "mean": mean}


def write_trajectory(fh, trajectory, **fields):
    """Append a trajectory to an open text file as JSON lines."""
    for record in trajectory_records(trajectory, **fields):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
