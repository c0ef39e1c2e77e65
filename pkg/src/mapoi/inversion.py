"""Family-of-solutions inversion of one dataset.

The inversion cost is a dead-zone misfit: a measurement contributes nothing
while the prediction sits inside its error bar, and its squared relative
deviation otherwise. Every parameter vector the search meets with zero
misfit is archived; the archive is the family, and its per-variable spread
is the identification uncertainty.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .data import LabDataset, absolute_errors
from .exceptions import ConfigurationError
from .ga import GAParams, Individual, run_ga
from .hdmr import MapDomain
from .quantum import dimension_from_n_params

# |lo + hi| below this (relative to |lo| + |hi|) counts as a zero denominator
_DEGENERATE_RTOL = 1e-9


@dataclass(frozen=True)
class InversionConfig:
    n_family: int = 500
    ga: GAParams = field(default_factory=lambda: GAParams(
        pop_size=100, crossover_rate=0.70, mutation_rate=0.05, max_generations=200,
        immigrant_rate=0.25, batch_size=25))
    lambda_reg: float = 0.0
    dedup_dist: float = 1e-3
    alpha: float = 1e-2
    # the initial population is drawn from this fraction of the domain around nominal
    init_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.init_fraction <= 1:
            raise ConfigurationError("init_fraction must lie in (0, 1]")
        if self.n_family < 1:
            raise ConfigurationError("n_family must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if self.dedup_dist < 0:
            raise ConfigurationError("dedup_dist must be non-negative")
        if self.lambda_reg < 0:
            raise ConfigurationError("lambda_reg must be non-negative")


def data_misfit(predicted, values, abs_errors, scale=None) -> np.ndarray:
    """Dead-zone data term for one ``(M,)`` or many ``(B, M)`` predictions.

    ``scale`` is the denominator of the relative deviation; it defaults to
    ``|values|`` floored at the default population floor.
    """
    predicted = np.asarray(predicted, dtype=float)
    if scale is None:
        scale = absolute_errors(values, 1.0)
    diff = values - predicted
    rel = diff / scale
    term = np.where(np.abs(diff) <= abs_errors, 0.0, rel**2)
    return term.mean(axis=-1)


def regularization(h, nominal, lambda_reg) -> np.ndarray:
    """``lambda * sum_i ((h_i - nominal_i) / nominal_i)^2``; zero nominals are skipped."""
    if lambda_reg == 0 or nominal is None:
        return np.zeros(np.shape(h)[:-1])
    nominal = np.asarray(nominal, dtype=float)
    scale = np.where(nominal == 0, 1.0, nominal)
    dev = np.where(nominal == 0, 0.0, (np.asarray(h) - nominal) / scale)
    return lambda_reg * np.sum(dev**2, axis=-1)


def inversion_cost(h, dataset: LabDataset, predictor, lambda_reg: float = 0.0, nominal=None):
    """Inversion cost ``J_inv`` of a parameter vector (or stack of them)."""
    predicted = predictor(h)
    if np.shape(predicted)[-1] != dataset.M:
        raise ValueError(f"predictor returned {np.shape(predicted)[-1]} values, expected {dataset.M}")
    cost = data_misfit(predicted, dataset.values, dataset.abs_errors, dataset.scale)
    cost = cost + regularization(h, nominal, lambda_reg)
    return float(cost) if np.ndim(cost) == 0 else cost


@dataclass(eq=False)
class InversionFamily:
    members: np.ndarray
    residuals: np.ndarray
    domain: MapDomain
    converged: bool = True
    n_evals: int = 0
    lambda_reg: float = 0.0
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        self.residuals = np.asarray(self.residuals, dtype=float).reshape(-1)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def lo(self):
        return self.members.min(axis=0)

    @property
    def hi(self):
        return self.members.max(axis=0)

    @property
    def width(self):
        return self.hi - self.lo

    def bounds(self) -> "FamilyBounds":
        return family_bounds(self)

    def to_dict(self) -> dict:
        b = self.bounds()
        return {
            "members": self.members.tolist(),
            "residuals": self.residuals.tolist(),
            "bounds": {"lo": b.lo.tolist(), "hi": b.hi.tolist(), "width": b.width.tolist(),
                       "rel_width": b.rel_width.tolist(),
                       "degenerate": np.flatnonzero(b.degenerate).tolist()},
            "converged": self.converged,
            "flags": list(self.flags),
            "n_evals": self.n_evals,
            "lambda_reg": self.lambda_reg,
            "domain": self.domain.to_dict(),
        }

    @classmethod
    def from_dict(cls, data) -> "InversionFamily":
        return cls(data["members"], data["residuals"], MapDomain.from_dict(data["domain"]),
                   converged=data["converged"], n_evals=data.get("n_evals", 0),
                   lambda_reg=data.get("lambda_reg", 0.0), flags=list(data.get("flags", [])))


class FamilyBounds(NamedTuple):
    lo: np.ndarray
    hi: np.ndarray
    width: np.ndarray
    rel_width: np.ndarray
    degenerate: np.ndarray


def family_bounds(family: InversionFamily) -> FamilyBounds:
    """Per-variable min, max, width and relative width ``2*width/(lo+hi)``.

    Where ``lo + hi`` vanishes, or the domain is centred on zero, the relative
    width falls back to ``width / domain half-width`` and the variable is
    marked degenerate.
    """
    if family.size == 0:
        raise ValueError("family is empty")
    lo, hi = family.lo, family.hi
    width = hi - lo
    total = lo + hi
    degenerate = (np.abs(total) <= _DEGENERATE_RTOL * (np.abs(lo) + np.abs(hi))) | (
        family.domain.nominal == 0)
    rel = _relative_width(lo, hi, family.domain, degenerate)
    return FamilyBounds(lo, hi, width, rel, degenerate)


def _relative_width(lo, hi, domain: MapDomain, degenerate) -> np.ndarray:
    safe = np.where(degenerate, 1.0, lo + hi)
    return np.where(degenerate, (hi - lo) / domain.half_width, 2.0 * (hi - lo) / safe)


def prior_rel_width(domain: MapDomain) -> np.ndarray:
    """Relative width of the whole search domain: what "nothing learned" looks like."""
    lo, hi = domain.lower, domain.upper
    total = lo + hi
    degenerate = (np.abs(total) <= _DEGENERATE_RTOL * (np.abs(lo) + np.abs(hi))) | (
        domain.nominal == 0)
    return _relative_width(lo, hi, domain, degenerate)


def effective_rel_width(family: InversionFamily) -> np.ndarray:
    """Relative widths used for scoring and reporting.

    A converged family reports its own spread. An unconverged family (no
    member fits the data) carries no information, so it is scored as the
    prior domain rather than as its single member's zero width.
    """
    if family.converged:
        return family_bounds(family).rel_width
    return prior_rel_width(family.domain)


def family_uncertainty(family: InversionFamily, dataset: LabDataset, predictor, alpha: float,
                       nominal=None) -> float:
    """``mean_s J_inv(h_s) + alpha * mean_i |rel_width_i|``.

    Unconverged families are scored with the prior-domain widths.
    """
    fit_term = np.mean(inversion_cost(family.members, dataset, predictor,
                                      family.lambda_reg, nominal))
    rel = effective_rel_width(family)
    return float(fit_term + alpha * np.mean(np.abs(rel)))


def extract_family(dataset: LabDataset, predictor, domain: MapDomain,
                   config: InversionConfig, seed: int | None = None) -> InversionFamily:
    """Search ``domain`` for parameter vectors reproducing ``dataset``.

    The GA minimizes ``J_inv``; every evaluated individual whose data misfit
    is exactly zero is archived unless it lies within ``dedup_dist``
    (normalized L-infinity) of an archived member. The run stops once
    ``n_family`` members are archived or the generation cap is hit. With an
    empty archive the family is the single best individual, flagged
    unconverged.
    """
    if dataset.M == 0:
        raise ValueError("dataset is empty")
    ga = config.ga if seed is None else config.ga.with_seed(seed)
    values, errors, scale = dataset.values, dataset.abs_errors, dataset.scale
    nominal = domain.nominal
    span = np.where(domain.width > 0, domain.width, 1.0)
    misfits: dict[int, float] = {}

    def batch_fitness(genomes, eval_ids, generation):
        pred = predictor(genomes)
        mis = data_misfit(pred, values, errors, scale)
        for k, i in enumerate(eval_ids):
            misfits[int(i)] = mis[k]
        return mis + regularization(genomes, nominal, config.lambda_reg)

    archive = _Archive(span, config.dedup_dist)

    def observer(ind: Individual):
        if misfits.pop(ind.eval_id) != 0.0:
            return False
        if archive.near(ind.genome):
            return False
        archive.add(ind.genome, ind.fitness)
        return len(archive) >= config.n_family

    bounds = np.column_stack([domain.lower, domain.upper])
    init_rng = np.random.default_rng([ga.seed, 1])
    f = config.init_fraction
    start = init_rng.uniform(nominal - f * (nominal - domain.lower),
                             nominal + f * (domain.upper - nominal),
                             size=(ga.pop_size, domain.size))
    result = run_ga(None, bounds, ga, observer, batch_fitness=batch_fitness,
                    initial_population=start)
    if len(archive):
        return InversionFamily(archive.members, archive.costs, domain,
                               converged=True, n_evals=result.n_evals,
                               lambda_reg=config.lambda_reg)
    return InversionFamily(result.best.genome[None, :], [result.best.fitness], domain,
                           converged=False, n_evals=result.n_evals,
                           lambda_reg=config.lambda_reg, flags=["unconverged"])


class _Archive:
    """Zero-misfit members with an L-infinity (span-normalized) duplicate test.

    Older members sit in a k-d tree that is rebuilt as the archive grows;
    the newest ones are scanned directly.
    """

    def __init__(self, span, dedup_dist: float, rebuild: int = 256):
        self.span = np.asarray(span, dtype=float)
        self.dedup = dedup_dist
        self.rebuild = rebuild
        self._scaled = np.empty((64, self.span.size))
        self._rows: list[np.ndarray] = []
        self._costs: list[float] = []
        self._tree = None
        self._in_tree = 0

    def __len__(self):
        return len(self._rows)

    @property
    def members(self) -> np.ndarray:
        return np.array(self._rows)

    @property
    def costs(self) -> np.ndarray:
        return np.array(self._costs)

    def near(self, genome) -> bool:
        """Whether an archived member lies closer than ``dedup_dist``."""
        n = len(self._rows)
        if not n or self.dedup <= 0:
            return False
        x = genome / self.span
        if self._tree is not None:
            dist, _ = self._tree.query(x, k=1, p=np.inf)
            if dist < self.dedup:
                return True
        if n > self._in_tree:
            recent = self._scaled[self._in_tree:n]
            return bool(np.min(np.max(np.abs(recent - x), axis=1)) < self.dedup)
        return False

    def add(self, genome, cost: float) -> None:
        n = len(self._rows)
        if n == self._scaled.shape[0]:
            self._scaled = np.concatenate([self._scaled, np.empty_like(self._scaled)])
        self._scaled[n] = genome / self.span
        self._rows.append(np.array(genome, dtype=float))
        self._costs.append(float(cost))
        if n + 1 - self._in_tree >= self.rebuild:
            self._tree = cKDTree(self._scaled[:n + 1])
            self._in_tree = n + 1


def uncertainty_grids(rel_width, dimension: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Map per-variable relative widths back onto symmetric ``H`` and ``mu`` grids."""
    rel = np.abs(np.asarray(rel_width, dtype=float))
    if dimension is None:
        dimension = dimension_from_n_params(rel.size)
    n_h = dimension * (dimension + 1) // 2
    H = np.zeros((dimension, dimension))
    mu = np.zeros((dimension, dimension))
    r, c = np.triu_indices(dimension)
    H[r, c] = rel[:n_h]
    H[c, r] = rel[:n_h]
    r, c = np.triu_indices(dimension, k=1)
    mu[r, c] = rel[n_h:]
    mu[c, r] = rel[n_h:]
    return H, mu


def average_uncertainty(rel_width, dimension: int | None = None) -> dict:
    """Mean |relative width| over ``H`` entries, ``mu`` entries and all variables."""
    rel = np.abs(np.asarray(rel_width, dtype=float))
    if dimension is None:
        dimension = dimension_from_n_params(rel.size)
    n_h = dimension * (dimension + 1) // 2
    return {"H": float(rel[:n_h].mean()), "mu": float(rel[n_h:].mean()), "all": float(rel.mean())}


def write_grid_csv(path, grid) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


class FamilyInverter(BaseEstimator):
    """Estimator wrapper around :func:`extract_family`.

    ``fit(dataset, predictor, domain)`` stores ``family_``, ``bounds_`` and
    ``uncertainty_``.
    """

    def __init__(self, n_family=500, pop_size=100, crossover_rate=0.70, mutation_rate=0.05,
                 max_generations=200, immigrant_rate=0.25, batch_size=25, dedup_dist=1e-3,
                 lambda_reg=0.0, alpha=1e-2, init_fraction=0.5, seed=0):
        self.n_family = n_family
        self.pop_size = pop_size
        self.crossover_rate = crossover_rate
        self.mutation_rate = mutation_rate
        self.max_generations = max_generations
        self.immigrant_rate = immigrant_rate
        self.batch_size = batch_size
        self.dedup_dist = dedup_dist
        self.lambda_reg = lambda_reg
        self.alpha = alpha
        self.init_fraction = init_fraction
        self.seed = seed

    def config(self) -> InversionConfig:
        ga = GAParams(pop_size=self.pop_size, crossover_rate=self.crossover_rate,
                      mutation_rate=self.mutation_rate, max_generations=self.max_generations,
                      immigrant_rate=self.immigrant_rate, batch_size=self.batch_size,
                      seed=self.seed)
        return InversionConfig(n_family=self.n_family, ga=ga, lambda_reg=self.lambda_reg,
                               dedup_dist=self.dedup_dist, alpha=self.alpha,
                               init_fraction=self.init_fraction)

    def fit(self, dataset, predictor, domain):
        self.family_ = extract_family(dataset, predictor, domain, self.config())
        self.bounds_ = family_bounds(self.family_)
        self.uncertainty_ = family_uncertainty(self.family_, dataset, predictor, self.alpha,
                                               domain.nominal)
        return self

    def transform(self, X=None):
        """Relative widths of the fitted family (prior widths if unconverged)."""
        return effective_rel_width(self.family_)
