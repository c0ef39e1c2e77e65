"""Closed-loop Optimal Identification and the conventional-inversion baseline.

The outer GA searches control knobs (amplitudes, then phases). Each trial
field is "run in the lab" (simulated, with fresh seeded noise), a surrogate
map is built for that field, and the map-facilitated inversion extracts the
family. The trial's fitness is the family uncertainty plus a field-strength
penalty.
"""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from .control import FieldNoiseModel, PulseShape
from .data import DirectSolver, LabDataset, MeasurementPlan, simulate_lab_data
from .exceptions import ConfigurationError
from .ga import GAParams, run_ga
from .hdmr import CutHdmrMap, MapDomain
from .inversion import (
    InversionConfig,
    InversionFamily,
    average_uncertainty,
    effective_rel_width,
    extract_family,
    family_bounds,
    family_uncertainty,
    uncertainty_grids,
)
from .quantum import HamiltonianParams, PropagationSettings, QuantumState, resonance_frequencies
from .rng import derive_seed, substream

logger = logging.getLogger(__name__)

# substream tags under the run seed
_DATA, _INNER, _CONVENTIONAL, _VALIDATE = 1, 2, 3, 4


@dataclass(frozen=True)
class Ramp:
    """Linear ramp from ``start`` to ``end`` over generations ``0..n_generations``."""

    start: float = 1e-4
    end: float = 1e-2

    def __post_init__(self):
        if not (self.start > 0 and self.end >= self.start):
            raise ConfigurationError("ramps must be positive and non-decreasing")

    def at(self, generation: int, n_generations: int) -> float:
        if n_generations <= 0:
            return self.end
        frac = min(max(generation / n_generations, 0.0), 1.0)
        return self.start + frac * (self.end - self.start)


@dataclass(frozen=True)
class OIConfig:
    """Everything a run needs besides the true system and the seed."""

    Q: int = 1
    T: float = 1.0
    s: float = 0.2
    amplitude_bounds: tuple = (0.0, 1.0)
    phase_bounds: tuple = (0.0, 2.0 * np.pi)
    alpha: Ramp = Ramp()
    beta: Ramp = Ramp()
    outer_ga: GAParams = GAParams(pop_size=30, crossover_rate=0.75, mutation_rate=0.05,
                                  max_generations=50, batch_size=6)
    inversion: InversionConfig = InversionConfig()
    map_samples: int = 6
    domain_rel: float = 0.3
    zero_halfwidth: float | None = None
    eps_obs: float = 0.02
    population_floor: float = 1e-3
    noise: FieldNoiseModel = FieldNoiseModel()
    propagation: PropagationSettings = PropagationSettings()
    nominal: HamiltonianParams | None = None
    validate_points: int = 0
    rms_threshold: float = 0.02
    initial: QuantumState | None = None
    workers: int = 1
    conventional_Q: int = 25

    def __post_init__(self):
        if self.Q < 1:
            raise ConfigurationError("Q must be >= 1")
        if self.map_samples < 2:
            raise ConfigurationError("map_samples must be >= 2")

    @classmethod
    def desk(cls, **overrides) -> "OIConfig":
        """Small budget that finishes in minutes on one core."""
        base = dict(
            outer_ga=GAParams(pop_size=12, crossover_rate=0.75, mutation_rate=0.05,
                              max_generations=15, batch_size=6),
            inversion=InversionConfig(n_family=100, ga=GAParams(
                pop_size=100, crossover_rate=0.70, mutation_rate=0.05, max_generations=200,
                immigrant_rate=0.25, batch_size=25)),
            map_samples=4,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, **overrides) -> "OIConfig":
        """Full-size budgets: outer GA 30 x 50, family 500, six map nodes per variable."""
        base = dict(
            outer_ga=GAParams(pop_size=30, crossover_rate=0.75, mutation_rate=0.05,
                              max_generations=50, batch_size=6),
            inversion=InversionConfig(n_family=500),
            map_samples=6,
        )
        base.update(overrides)
        return cls(**base)


def domain_for(nominal: HamiltonianParams, config: OIConfig) -> MapDomain:
    zero = config.zero_halfwidth
    if zero is None:
        zero = default_zero_halfwidth(nominal, config.domain_rel)
    return MapDomain.around(nominal.values, config.domain_rel, zero)


def default_zero_halfwidth(nominal: HamiltonianParams, rel: float) -> np.ndarray:
    """Half-width for zero-valued entries: ``rel`` times the mean magnitude of
    the non-zero entries of the same kind (diagonal H, off-diagonal H, mu)."""
    n = nominal.dimension
    n_h = n * (n + 1) // 2
    values = nominal.values
    rows, cols = np.triu_indices(n)
    kind = np.concatenate([np.where(rows == cols, 0, 1), np.full(values.size - n_h, 2)])
    out = np.ones(values.size)
    for k in range(3):
        sel = kind == k
        nz = np.abs(values[sel & (values != 0)])
        out[sel] = rel * nz.mean() if nz.size else 1.0
    return out


def pulse_template(nominal: HamiltonianParams, config: OIConfig) -> PulseShape:
    """All-zero pulse carrying the nominal system's resonance frequencies."""
    omegas = resonance_frequencies(nominal).frequencies
    n = omegas.size
    return PulseShape(omegas, np.zeros(n), np.zeros(n), T=config.T, s=config.s,
                      amplitude_bounds=tuple(config.amplitude_bounds),
                      phase_bounds=tuple(config.phase_bounds))


def field_penalty(knobs, knob_bounds) -> float:
    """``sum_i |(c_i - c_min) / (c_max - c_min)|``."""
    lo, hi = knob_bounds[:, 0], knob_bounds[:, 1]
    return float(np.sum(np.abs((np.asarray(knobs) - lo) / (hi - lo))))


@dataclass
class TrialRecord:
    eval_id: int
    generation: int
    knobs: np.ndarray
    cost: float
    uncertainty: float
    average: dict
    converged: bool
    family_size: int


@dataclass
class Accounting:
    map_builds: int = 0
    direct_solves: int = 0
    data_solves: int = 0
    map_evals: int = 0
    seconds_maps: float = 0.0
    seconds_data: float = 0.0
    seconds_inversion: float = 0.0

    def add(self, other: "Accounting"):
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def to_dict(self):
        return dict(self.__dict__)


class _CountingMap:
    def __init__(self, hdmr_map):
        self.map = hdmr_map
        self.count = 0

    def __call__(self, h):
        h = np.asarray(h)
        self.count += 1 if h.ndim == 1 else h.shape[0]
        return self.map.predict(h)


@dataclass
class TrialOutcome:
    dataset: LabDataset
    family: InversionFamily
    hdmr_map: CutHdmrMap
    data_term: float
    width_term: float
    accounting: Accounting
    map_key: bytes = b""


class OIContext:
    """Shared state for evaluating trial fields of one run.

    Trial ``eval_id`` draws its data noise and inner GA seed from substreams
    of ``seed`` keyed by the id, so a trial's outcome depends only on its
    knobs and id.
    """

    def __init__(self, truth: HamiltonianParams, config: OIConfig, seed: int, Q: int | None = None,
                 map_cache_size: int = 64):
        self.truth = truth
        self.config = config
        self.seed = int(seed)
        nominal = config.nominal if config.nominal is not None else truth
        self.nominal = nominal
        self.domain = domain_for(nominal, config)
        self.template = pulse_template(nominal, config)
        self.knob_bounds = self.template.knob_bounds()
        self.plan = MeasurementPlan(Q=Q or config.Q, T=config.T, dimension=truth.dimension)
        self.n_generations = config.outer_ga.max_generations
        self.generation = 0
        self._maps: OrderedDict = OrderedDict()
        self._cache_size = map_cache_size
        self._charged: set[bytes] = set()
        self.accounting = Accounting()

    def alpha(self, generation=None):
        g = self.generation if generation is None else generation
        return self.config.alpha.at(g, self.n_generations)

    def beta(self, generation=None):
        g = self.generation if generation is None else generation
        return self.config.beta.at(g, self.n_generations)

    def pulse(self, knobs) -> PulseShape:
        return self.template.with_knobs(np.clip(knobs, self.knob_bounds[:, 0], self.knob_bounds[:, 1]))

    def build_map(self, pulse: PulseShape, acc: Accounting) -> CutHdmrMap:
        key = pulse.knobs.tobytes()
        if key in self._maps:
            self._maps.move_to_end(key)
            return self._maps[key]
        t0 = time.perf_counter()
        solver = DirectSolver(pulse, self.plan, self.config.propagation, self.config.initial)
        hdmr_map = CutHdmrMap(n_samples=self.config.map_samples,
                              rms_threshold=self.config.rms_threshold).fit(solver, self.domain, pulse)
        acc.map_builds += 1
        acc.direct_solves += solver.n_solves
        acc.seconds_maps += time.perf_counter() - t0
        self._maps[key] = hdmr_map
        if len(self._maps) > self._cache_size:
            self._maps.popitem(last=False)
        return hdmr_map

    def run_trial(self, knobs, eval_id: int, validate: int = 0) -> TrialOutcome:
        acc = Accounting()
        pulse = self.pulse(knobs)
        t0 = time.perf_counter()
        dataset = simulate_lab_data(self.truth, pulse, self.plan, self.config.noise,
                                    self.config.eps_obs, derive_seed(self.seed, _DATA, eval_id),
                                    self.config.propagation, self.config.initial,
                                    floor=self.config.population_floor)
        acc.data_solves += self.config.noise.replicates
        acc.seconds_data += time.perf_counter() - t0
        hdmr_map = self.build_map(pulse, acc)
        if validate:
            solver = DirectSolver(pulse, self.plan, self.config.propagation, self.config.initial)
            hdmr_map.validate(solver, validate, derive_seed(self.seed, _VALIDATE, eval_id))
            acc.direct_solves += solver.n_solves
        predictor = _CountingMap(hdmr_map)
        t0 = time.perf_counter()
        family = extract_family(dataset, predictor, self.domain, self.config.inversion,
                                seed=derive_seed(self.seed, _INNER, eval_id))
        if hdmr_map.flagged_:
            family.flags.append("map-inaccurate")
        data_term = float(np.mean(family.residuals))
        width_term = float(np.mean(np.abs(effective_rel_width(family))))
        acc.seconds_inversion += time.perf_counter() - t0
        acc.map_evals += predictor.count
        return TrialOutcome(dataset, family, hdmr_map, data_term, width_term, acc,
                            pulse.knobs.tobytes())

    def charge(self, outcome: TrialOutcome) -> Accounting:
        """Accounting of ``outcome`` with map builds charged once per distinct field.

        Worker processes keep private map caches, so whether a trial rebuilt
        its map depends on scheduling. Charging builds against the run-wide
        record of fields already seen keeps the counts independent of the
        worker count.
        """
        acc = replace(outcome.accounting)
        if acc.map_builds:
            acc.direct_solves -= outcome.hdmr_map.build_solves_
        acc.map_builds = 0
        if outcome.map_key not in self._charged:
            self._charged.add(outcome.map_key)
            acc.map_builds = 1
            acc.direct_solves += outcome.hdmr_map.build_solves_
        return acc


def control_cost(knobs, context: OIContext, eval_id: int = 0, generation: int | None = None,
                 outcome: TrialOutcome | None = None) -> float:
    """Control cost ``J_c``: family uncertainty plus the normalized field term.

    A failed trial (map build or inversion error) scores ``+inf``.
    """
    if outcome is None:
        try:
            outcome = context.run_trial(knobs, eval_id)
        except Exception as exc:  # noqa: BLE001 - any failing trial is just a bad field
            logger.warning("trial %d failed: %s", eval_id, exc)
            return float("inf")
    alpha, beta = context.alpha(generation), context.beta(generation)
    uncertainty = outcome.data_term + alpha * outcome.width_term
    return float(uncertainty + beta * field_penalty(knobs, context.knob_bounds))


@dataclass
class OIResult:
    pulse: PulseShape
    dataset: LabDataset
    family: InversionFamily
    delta: np.ndarray                # per-variable width of the final family
    rel_width: np.ndarray
    h_grid: np.ndarray
    mu_grid: np.ndarray
    average: dict
    uncertainty: float
    cost: float
    trial_fields: int
    accounting: Accounting
    trace: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    mode: str = "oi"
    Q: int = 1
    seed: int = 0
    hdmr_map: CutHdmrMap | None = None

    @property
    def M(self) -> int:
        return self.dataset.M

    @property
    def converged(self) -> bool:
        return self.family.converged

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "Q": self.Q,
            "M": self.M,
            "seed": self.seed,
            "average_rel_uncertainty": self.average,
            "uncertainty": self.uncertainty,
            "cost": self.cost,
            "trial_fields": self.trial_fields,
            "family_size": self.family.size,
            "converged": self.family.converged,
            "flags": list(self.family.flags),
            "accounting": self.accounting.to_dict(),
        }


def _finish(context: OIContext, knobs, eval_id, mode, trace, trials, acc, seed) -> OIResult:
    outcome = context.run_trial(knobs, eval_id, validate=context.config.validate_points)
    acc.add(context.charge(outcome))
    final_gen = context.n_generations
    cost = control_cost(knobs, context, eval_id, final_gen, outcome)
    alpha = context.alpha(final_gen)
    uncertainty = family_uncertainty(outcome.family, outcome.dataset, outcome.hdmr_map.predict,
                                     alpha, context.domain.nominal)
    bounds = family_bounds(outcome.family)
    rel_width = effective_rel_width(outcome.family)
    h_grid, mu_grid = uncertainty_grids(rel_width, context.truth.dimension)
    return OIResult(
        pulse=outcome.dataset.pulse,
        dataset=outcome.dataset,
        family=outcome.family,
        delta=bounds.width,
        rel_width=rel_width,
        h_grid=h_grid,
        mu_grid=mu_grid,
        average=average_uncertainty(rel_width, context.truth.dimension),
        uncertainty=uncertainty,
        cost=cost,
        trial_fields=len(trials) if trials else 1,
        accounting=acc,
        trace=trace,
        trials=trials,
        mode=mode,
        Q=context.plan.Q,
        seed=seed,
        hdmr_map=outcome.hdmr_map,
    )


def run_oi(truth: HamiltonianParams, config: OIConfig, seed: int) -> OIResult:
    """Optimize the control knobs and return the best field's identification."""
    context = OIContext(truth, config, seed)
    trials: list[TrialRecord] = []
    acc = Accounting()

    def batch_fitness(genomes, eval_ids, generation):
        context.generation = generation
        outcomes = _evaluate_trials(context, genomes, eval_ids, config.workers)
        costs = []
        for knobs, eval_id, outcome in zip(genomes, eval_ids, outcomes):
            if outcome is None:
                costs.append(float("inf"))
                continue
            acc.add(context.charge(outcome))
            cost = control_cost(knobs, context, int(eval_id), generation, outcome)
            costs.append(cost)
            trials.append(TrialRecord(
                int(eval_id), int(generation), np.array(knobs), cost,
                outcome.data_term + context.alpha(generation) * outcome.width_term,
                average_uncertainty(effective_rel_width(outcome.family), truth.dimension),
                outcome.family.converged, outcome.family.size))
        return np.array(costs)

    outer = config.outer_ga.with_seed(derive_seed(seed, 0))
    result = run_ga(None, context.knob_bounds, outer, batch_fitness=batch_fitness)
    best = result.best
    return _finish(context, best.genome, best.eval_id, "oi", result.history, trials, acc, seed)


def _one_trial(context, knobs, eval_id):
    try:
        return context.run_trial(knobs, int(eval_id))
    except Exception as exc:  # noqa: BLE001
        logger.warning("trial %d failed: %s", eval_id, exc)
        return None


def _evaluate_trials(context, genomes, eval_ids, workers):
    if workers and workers > 1 and len(genomes) > 1:
        return Parallel(n_jobs=workers, backend="loky")(
            delayed(_one_trial)(context, g, i) for g, i in zip(genomes, eval_ids))
    return [_one_trial(context, g, i) for g, i in zip(genomes, eval_ids)]


def run_conventional(truth: HamiltonianParams, Q: int | None, config: OIConfig, seed: int) -> OIResult:
    """Identification from one randomly drawn field, without outer optimization."""
    Q = Q or config.conventional_Q
    context = OIContext(truth, config, seed, Q=Q)
    rng = substream(seed, _CONVENTIONAL)
    lo, hi = context.knob_bounds[:, 0], context.knob_bounds[:, 1]
    knobs = rng.uniform(lo, hi)
    acc = Accounting()
    return _finish(context, knobs, 0, "conventional", [], [], acc, seed)


class OptimalIdentification(BaseEstimator):
    """Estimator facade: ``fit(truth)`` runs OI and stores ``result_``."""

    def __init__(self, config: OIConfig | None = None, seed: int = 0, conventional: bool = False):
        self.config = config
        self.seed = seed
        self.conventional = conventional

    def fit(self, truth: HamiltonianParams, y=None):
        config = self.config or OIConfig.desk()
        if self.conventional:
            self.result_ = run_conventional(truth, None, config, self.seed)
        else:
            self.result_ = run_oi(truth, config, self.seed)
        return self

    def transform(self, X=None):
        return self.result_.rel_width
