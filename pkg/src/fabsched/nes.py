"""Derivative-free policy training with Gaussian-perturbation gradient
estimates.

Each iteration perturbs the unfrozen parameter vector with N isotropic
Gaussian draws, scores every perturbed policy with one full simulator rollout
(all population members share that iteration's rollout seed, so fitness
differences reflect parameter differences), combines the fitness values into
a gradient estimate — optionally after centered-rank shaping — and applies a
bias-corrected Adam ascent step under a cosine-annealed learning rate with a
geometrically decaying perturbation scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import net, objective, sim
from .dispatch import PolicyDispatcher
from .features import Normalizer
from .net import PolicyParams
from .rng import derive_seed
from .scenario import MINUTES_PER_DAY, Scenario

SIX_MONTHS_MINUTES = 180 * MINUTES_PER_DAY

SHAPING_RAW = "raw"
SHAPING_CENTERED_RANK = "centered_rank"


@dataclass(frozen=True)
class NesConfig:
    population: int = 64
    sigma: float = 0.005
    sigma_decay: float = 0.975
    lr_max: float = 0.01
    max_iterations: int = 40
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-4
    horizon: int = SIX_MONTHS_MINUTES
    initial_wip: int = 0
    fitness_shaping: str = SHAPING_CENTERED_RANK
    antithetic: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if not (0 < self.sigma_decay <= 1):
            raise ValueError("sigma_decay must be in (0, 1]")
        if self.fitness_shaping not in (SHAPING_RAW, SHAPING_CENTERED_RANK):
            raise ValueError(f"unknown fitness shaping {self.fitness_shaping!r}")
        if self.antithetic and self.population % 2 != 0:
            raise ValueError("antithetic sampling needs an even population")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim))


def sigma_at(cfg: NesConfig, t: int) -> float:
    """Perturbation scale at iteration t: sigma * decay^t."""
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    return cfg.sigma * cfg.sigma_decay**t


def cosine_lr(cfg: NesConfig, i: int) -> float:
    """Cosine-annealed learning rate: lr_max/2 * (1 + cos(pi*i/i_max))."""
    if not (0 <= i <= cfg.max_iterations):
        raise ValueError(f"iteration {i} outside [0, {cfg.max_iterations}]")
    return 0.5 * cfg.lr_max * (1.0 + math.cos(math.pi * i / cfg.max_iterations))


def centered_ranks(values: np.ndarray) -> np.ndarray:
    """Map fitness values to ranks in [-0.5, 0.5]; ties share their mean rank,
    so a population of equal fitness values shapes to exactly zero."""
    n = values.size
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j)  # mean of tied positions
        i = j + 1
    if n == 1:
        return np.zeros(1)
    return ranks / (n - 1) - 0.5


def estimate_gradient(
    params: PolicyParams,
    sigma: float,
    population: int,
    evaluator: Callable[[PolicyParams], float],
    noise_seed: int,
    fitness_shaping: str = SHAPING_CENTERED_RANK,
    antithetic: bool = False,
    map_fn: Callable = map,
) -> tuple[np.ndarray, np.ndarray]:
    """One perturbation-based gradient estimate over the unfrozen blocks.

    Returns (gradient, raw fitness values). Population members are evaluated
    through `map_fn` (inject an executor map for parallelism); the reduction
    always runs in member-index order, so results do not depend on completion
    order or worker count.
    """
    names = params.trainable_blocks()
    theta = params.to_flat(names)
    rng = np.random.default_rng(noise_seed)
    if antithetic:
        half = rng.standard_normal((population // 2, theta.size))
        noise = np.concatenate([half, -half])
    else:
        noise = rng.standard_normal((population, theta.size))

    candidates = [params.with_flat(theta + sigma * noise[i], names) for i in range(population)]
    fitness = np.array(list(map_fn(evaluator, candidates)), dtype=np.float64)
    if not np.all(np.isfinite(fitness)):
        bad = int(np.flatnonzero(~np.isfinite(fitness))[0])
        raise RuntimeError(f"non-finite fitness {fitness[bad]} from population member {bad}")

    shaped = centered_ranks(fitness) if fitness_shaping == SHAPING_CENTERED_RANK else fitness
    grad = (shaped @ noise) / (sigma * population)
    return grad, fitness


def adam_step(
    state: AdamState, params: PolicyParams, grad: np.ndarray, lr: float, cfg: NesConfig
) -> PolicyParams:
    """Bias-corrected Adam ascent step on the unfrozen blocks; frozen blocks
    (the pretext encoding) are untouched by construction."""
    names = params.trainable_blocks()
    theta = params.to_flat(names)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {theta.shape}")
    state.step += 1
    state.m = cfg.adam_beta1 * state.m + (1 - cfg.adam_beta1) * grad
    state.v = cfg.adam_beta2 * state.v + (1 - cfg.adam_beta2) * grad**2
    m_hat = state.m / (1 - cfg.adam_beta1**state.step)
    v_hat = state.v / (1 - cfg.adam_beta2**state.step)
    return params.with_flat(theta + lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), names)


# ---------------------------------------------------------------------------
# Rollout fitness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutEvaluator:
    """Fitness of a policy = negated schedule cost of one seeded rollout."""

    scenario: Scenario
    normalizer: Normalizer
    horizon: int
    initial_wip: int
    rollout_seed: int

    def __call__(self, params: PolicyParams) -> float:
        dispatcher = PolicyDispatcher(params, self.normalizer)
        final = sim.run(
            self.scenario,
            self.rollout_seed,
            dispatcher,
            self.horizon,
            initial_wip=self.initial_wip,
            trace_enabled=False,
        )
        return -objective.total_cost(final)


@dataclass
class TrainResult:
    params: PolicyParams
    history: list[dict] = field(default_factory=list)


def train(
    scenario: Scenario,
    pretrained: PolicyParams,
    normalizer: Normalizer,
    cfg: NesConfig,
    master_seed: int = 0,
    checkpoint_dir: str | Path | None = None,
    map_fn: Callable | None = None,
) -> TrainResult:
    """Run max_iterations NES/Adam updates; deterministic per master seed.

    Each iteration draws a fresh rollout seed shared by the whole population
    and the center evaluation. History rows carry the population fitness
    spread and the center parameters' cost for monitoring.
    """
    params = pretrained
    names = params.trainable_blocks()
    adam = AdamState.zeros(params.to_flat(names).size)
    history: list[dict] = []
    if map_fn is None:
        map_fn = map

    for i in range(cfg.max_iterations):
        sigma = sigma_at(cfg, i)
        lr = cosine_lr(cfg, i)
        evaluator = RolloutEvaluator(
            scenario=scenario,
            normalizer=normalizer,
            horizon=cfg.horizon,
            initial_wip=cfg.initial_wip,
            rollout_seed=derive_seed(master_seed, f"nes-rollout-{i}"),
        )
        grad, fitness = estimate_gradient(
            params,
            sigma,
            cfg.population,
            evaluator,
            noise_seed=derive_seed(master_seed, f"nes-noise-{i}"),
            fitness_shaping=cfg.fitness_shaping,
            antithetic=cfg.antithetic,
            map_fn=map_fn,
        )
        params = adam_step(adam, params, grad, lr, cfg)
        center_cost = -evaluator(params)
        history.append(
            {
                "iteration": i,
                "sigma": sigma,
                "lr": lr,
                "fitness_mean": float(fitness.mean()),
                "fitness_max": float(fitness.max()),
                "center_cost": center_cost,
            }
        )
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"params_iter{i:03d}.npz"
            net.save_params(path, params, meta={"iteration": i, "master_seed": master_seed})
    return TrainResult(params=params, history=history)


def write_history_csv(history: list[dict], path: str | Path) -> None:
    import csv

    fields = ["iteration", "sigma", "lr", "fitness_mean", "fitness_max", "center_cost"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)
