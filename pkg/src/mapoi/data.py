"""Simulated laboratory data: replicate-averaged, noisy population measurements."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .control import FieldNoiseModel, PulseShape, realize_noisy
from .quantum import HamiltonianParams, PropagationSettings, QuantumState, propagate_batch
from .rng import as_seed, substream

# Below this population the relative error bar is taken against the floor.
POPULATION_FLOOR = 1e-6


@dataclass(frozen=True)
class MeasurementPlan:
    """All ``dimension`` populations recorded at ``t_q = q*T/Q``, ``q = 1..Q``."""

    Q: int = 1
    T: float = 1.0
    dimension: int = 8

    def __post_init__(self):
        if int(self.Q) != self.Q or self.Q < 1:
            raise ValueError("Q must be an integer >= 1")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def obs_times(self) -> np.ndarray:
        return self.T * np.arange(1, self.Q + 1) / self.Q

    @property
    def M(self) -> int:
        return self.dimension * self.Q

    def to_dict(self):
        return {"Q": self.Q, "T": self.T, "dimension": self.dimension}


def pulse_id(pulse: PulseShape) -> str:
    payload = json.dumps(pulse.to_dict(), sort_keys=True).encode()
    return hashlib.sha1(payload).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class LabDataset:
    """Measured populations, time-major: ``values[q*N + p]`` is level ``p`` at ``t_q``."""

    values: np.ndarray
    err_rel: float
    plan: MeasurementPlan
    pulse: PulseShape
    seed: int | None = None
    floor: float = POPULATION_FLOOR

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.plan.M:
            raise ValueError(f"dataset has {values.size} values, plan expects {self.plan.M}")
        if not self.err_rel > 0:
            raise ValueError("err_rel must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return self.values.size

    @property
    def pulse_id(self) -> str:
        return pulse_id(self.pulse)

    @property
    def abs_errors(self) -> np.ndarray:
        return absolute_errors(self.values, self.err_rel, self.floor)

    @property
    def scale(self) -> np.ndarray:
        """Denominator of the relative misfit: ``|value|`` floored."""
        return np.maximum(np.abs(self.values), self.floor)

    def to_dict(self) -> dict:
        return {
            "pulse": self.pulse.to_dict(),
            "pulse_id": self.pulse_id,
            "plan": self.plan.to_dict(),
            "values": self.values.tolist(),
            "err_rel": self.err_rel,
            "seed": self.seed,
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LabDataset":
        return cls(
            values=data["values"],
            err_rel=data["err_rel"],
            plan=MeasurementPlan(**data["plan"]),
            pulse=PulseShape.from_dict(data["pulse"]),
            seed=data.get("seed"),
            floor=data.get("floor", POPULATION_FLOOR),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "LabDataset":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def absolute_errors(values, err_rel, floor: float = POPULATION_FLOOR) -> np.ndarray:
    """``err_rel * |value|`` with the magnitude floored at ``floor``."""
    return err_rel * np.maximum(np.abs(values), floor)


class DirectSolver:
    """Noiseless forward map ``h -> populations`` for one pulse and plan.

    Callable on a single parameter vector (returns ``(M,)``) or a stack
    ``(B, n_params)`` (returns ``(B, M)``). ``n_solves`` counts propagations.
    """

    def __init__(self, pulse: PulseShape, plan: MeasurementPlan,
                 settings: PropagationSettings | None = None,
                 initial: QuantumState | None = None, chunk: int = 512):
        self.pulse = pulse
        self.plan = plan
        self.settings = settings or PropagationSettings()
        self.initial = initial
        self.chunk = chunk
        self.n_solves = 0

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        single = h.ndim == 1
        h = np.atleast_2d(h)
        out = []
        for start in range(0, h.shape[0], self.chunk):
            block = h[start:start + self.chunk]
            pops = propagate_batch(block, self.pulse, self.plan.obs_times, self.initial,
                                   self.settings, duration=self.plan.T,
                                   dimension=self.plan.dimension)
            out.append(pops.reshape(block.shape[0], -1))
            self.n_solves += block.shape[0]
        result = np.concatenate(out)
        return result[0] if single else result


def simulate_lab_data(
    truth: HamiltonianParams,
    pulse: PulseShape,
    plan: MeasurementPlan,
    noise: FieldNoiseModel,
    eps_obs: float,
    rng,
    settings: PropagationSettings | None = None,
    initial: QuantumState | None = None,
    floor: float = POPULATION_FLOOR,
) -> LabDataset:
    """Average ``noise.replicates`` noisy-pulse measurements of every population.

    Replicate ``j`` draws its pulse noise and its observation factors
    ``(1 + rho)``, ``rho ~ U[-eps_obs, eps_obs]``, from substream ``(seed, j)``.
    """
    if eps_obs < 0:
        raise ValueError("eps_obs must be non-negative")
    seed = as_seed(rng)
    pulses, factors = [], []
    for j in range(noise.replicates):
        stream = substream(seed, j)
        pulses.append(realize_noisy(pulse, noise, stream))
        factors.append(1.0 + stream.uniform(-eps_obs, eps_obs, size=(plan.Q, plan.dimension)))
    pops = propagate_batch(truth, pulses, plan.obs_times, initial, settings,
                           duration=plan.T, dimension=plan.dimension)
    observed = np.stack(factors) * pops
    values = observed.mean(axis=0).reshape(-1)
    # a noise-free dataset still needs a positive error bar
    err_rel = eps_obs if eps_obs > 0 else np.finfo(float).tiny
    return LabDataset(values, err_rel, plan, pulse, seed=seed, floor=floor)


def is_consistent(dataset: LabDataset, predicted) -> np.ndarray:
    """Per-measurement flag ``|lab - predicted| <= err_rel * |lab|``."""
    predicted = np.asarray(predicted, dtype=float)
    if predicted.shape[-1] != dataset.M:
        raise ValueError(f"predicted has {predicted.shape[-1]} values, dataset has {dataset.M}")
    return np.abs(dataset.values - predicted) <= dataset.abs_errors
