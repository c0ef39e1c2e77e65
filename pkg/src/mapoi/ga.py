"""Real-coded steady-state genetic algorithm.

Operators: size-k tournament selection, BLX-alpha blend crossover, uniform
window mutation clipped to bounds, and replace-the-worst-if-strictly-better
insertion. Ties in fitness are always resolved in favour of the older
individual (lower evaluation id).

A "generation" is ``replacements_per_generation`` replacement attempts
(``pop_size`` by default). Offspring may be produced in batches of
``batch_size`` from the current population so that their fitness can be
evaluated together; insertion is still one offspring at a time, in order.

With ``immigrant_rate > 0`` each generation starts with restart injection:
that fraction of the population (never the current best) is overwritten by
fresh uniform genomes, which keeps a converged population turning over.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GAParams:
    pop_size: int = 30
    crossover_rate: float = 0.75
    mutation_rate: float = 0.05
    tournament_size: int = 2
    max_generations: int = 50
    replacements_per_generation: int | None = None
    seed: int = 0
    blx_alpha: float = 0.5
    mutation_window: float = 0.1
    immigrant_rate: float = 0.0
    batch_size: int = 1

    def __post_init__(self):
        if self.pop_size < 2:
            raise ConfigurationError("pop_size must be >= 2")
        for name in ("crossover_rate", "mutation_rate", "immigrant_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if self.tournament_size < 1:
            raise ConfigurationError("tournament_size must be >= 1")
        if self.max_generations < 0:
            raise ConfigurationError("max_generations must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.replacements_per_generation is not None and self.replacements_per_generation < 1:
            raise ConfigurationError("replacements_per_generation must be >= 1")

    @property
    def replacements(self) -> int:
        return self.replacements_per_generation or self.pop_size

    def with_seed(self, seed: int) -> "GAParams":
        return replace(self, seed=int(seed))


@dataclass(frozen=True, eq=False)
class Individual:
    genome: np.ndarray
    fitness: float
    eval_id: int
    generation: int = 0


@dataclass
class GAResult:
    population: np.ndarray
    fitness: np.ndarray
    eval_ids: np.ndarray
    best: Individual
    n_evals: int
    generations: int
    history: list = field(default_factory=list)
    stopped: bool = False

    def write_history(self, path) -> None:
        """Per-generation progress as CSV ``generation,best_fitness,mean_fitness,evals``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generation", "best_fitness", "mean_fitness", "evals"])
            for row in self.history:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])


def _sanitize(values, eval_ids):
    values = np.asarray(values, dtype=float).reshape(-1)
    bad = ~np.isfinite(values)
    if bad.any():
        for k in np.flatnonzero(bad):
            logger.warning("non-finite fitness for evaluation %d; assigned +inf", eval_ids[k])
        values = np.where(bad, np.inf, values)
    return values


def run_ga(
    fitness: Callable | None,
    bounds,
    params: GAParams,
    observer: Callable | None = None,
    *,
    batch_fitness: Callable | None = None,
    initial_population=None,
) -> GAResult:
    """Minimize ``fitness`` over the box ``bounds`` (shape ``(n, 2)``).

    Exactly one of ``fitness(genome) -> float`` and
    ``batch_fitness(genomes, eval_ids, generation) -> array`` is given.
    ``observer(individual)`` is called for every evaluated individual in
    evaluation order; returning ``True`` stops the run.
    """
    if (fitness is None) == (batch_fitness is None):
        raise ConfigurationError("give exactly one of fitness and batch_fitness")
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or not np.all(np.isfinite(bounds)):
        raise ConfigurationError("bounds must be a finite (n, 2) array")
    if np.any(bounds[:, 0] > bounds[:, 1]):
        raise ConfigurationError("every lower bound must not exceed its upper bound")
    lo, hi = bounds[:, 0], bounds[:, 1]
    span = hi - lo
    n_genes = lo.size
    rng = np.random.default_rng(params.seed)

    if batch_fitness is None:
        def batch_fitness(genomes, eval_ids, generation):
            return np.array([fitness(g) for g in genomes], dtype=float)

    next_id = 0
    stopped = False

    def evaluate(genomes, generation):
        nonlocal next_id, stopped
        ids = np.arange(next_id, next_id + genomes.shape[0])
        next_id += genomes.shape[0]
        values = _sanitize(batch_fitness(genomes, ids, generation), ids)
        return values, ids

    if initial_population is not None:
        pop = np.clip(np.array(initial_population, dtype=float), lo, hi)
        if pop.shape != (params.pop_size, n_genes):
            raise ConfigurationError("initial_population has the wrong shape")
    else:
        pop = rng.uniform(lo, hi, size=(params.pop_size, n_genes))
    fit, ids = evaluate(pop, 0)
    if observer is not None:
        for k in range(pop.shape[0]):
            if observer(Individual(pop[k].copy(), float(fit[k]), int(ids[k]), 0)):
                stopped = True

    history = [(0, float(fit.min()), float(_finite_mean(fit)), next_id)]
    n_immigrants = int(round(params.immigrant_rate * params.pop_size))
    n_immigrants = min(n_immigrants, params.pop_size - 1)
    generation = 0
    while generation < params.max_generations and not stopped:
        generation += 1
        if n_immigrants:
            keep = _best(fit, ids)
            slots = rng.choice(np.delete(np.arange(params.pop_size), keep), n_immigrants,
                               replace=False)
            slots.sort()
            fresh = rng.uniform(lo, hi, size=(n_immigrants, n_genes))
            fresh_fit, fresh_ids = evaluate(fresh, generation)
            pop[slots], fit[slots], ids[slots] = fresh, fresh_fit, fresh_ids
            if observer is not None:
                for k in range(n_immigrants):
                    if observer(Individual(fresh[k].copy(), float(fresh_fit[k]),
                                           int(fresh_ids[k]), generation)):
                        stopped = True
                        break
            if stopped:
                history.append((generation, float(fit.min()), float(_finite_mean(fit)), next_id))
                break
        attempts = 0
        while attempts < params.replacements and not stopped:
            b = min(params.batch_size, params.replacements - attempts)
            children = _offspring(rng, pop, fit, ids, lo, hi, span, params, b)
            child_fit, child_ids = evaluate(children, generation)
            worst = _worst(fit, ids)
            for k in range(b):
                if observer is not None and observer(
                        Individual(children[k].copy(), float(child_fit[k]), int(child_ids[k]),
                                   generation)):
                    stopped = True
                if child_fit[k] < fit[worst]:
                    pop[worst] = children[k]
                    fit[worst] = child_fit[k]
                    ids[worst] = child_ids[k]
                    worst = _worst(fit, ids)
                if stopped:
                    break
            attempts += b
        history.append((generation, float(fit.min()), float(_finite_mean(fit)), next_id))

    best = _best(fit, ids)
    return GAResult(
        population=pop,
        fitness=fit,
        eval_ids=ids,
        best=Individual(pop[best].copy(), float(fit[best]), int(ids[best]), generation),
        n_evals=next_id,
        generations=generation,
        history=history,
        stopped=stopped,
    )


def _finite_mean(values):
    finite = values[np.isfinite(values)]
    return finite.mean() if finite.size else np.inf


def _best(fit, ids) -> int:
    # lowest fitness, then oldest
    return int(np.lexsort((ids, fit))[0])


def _worst(fit, ids) -> int:
    # highest fitness, then youngest
    tied = np.flatnonzero(fit == fit.max())
    return int(tied[np.argmax(ids[tied])])


def _tournament(rng, fit, ids, k, count):
    picks = rng.integers(0, fit.size, size=(count, k))
    # rank = position in (fitness, eval_id) order; smaller is better
    order = np.lexsort((ids, fit))
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    winners = picks[np.arange(count), np.argmin(rank[picks], axis=1)]
    return winners


def _offspring(rng, pop, fit, ids, lo, hi, span, params, count):
    n = lo.size
    parents = _tournament(rng, fit, ids, params.tournament_size, 2 * count)
    p1, p2 = pop[parents[:count]], pop[parents[count:]]
    cross = rng.random(count) < params.crossover_rate
    a = params.blx_alpha
    u = rng.random((count, n))
    low = np.minimum(p1, p2)
    width = np.abs(p1 - p2)
    blend = low - a * width + u * (1.0 + 2.0 * a) * width
    children = np.where(cross[:, None], blend, p1)
    mutate = rng.random((count, n)) < params.mutation_rate
    step = (rng.random((count, n)) - 0.5) * params.mutation_window * span
    children = np.where(mutate, children + step, children)
    return np.clip(children, lo, hi)
