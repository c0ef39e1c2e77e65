"""Shaped control pulses: Gaussian envelope times a sum of phased cosines."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigurationError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True, eq=False)
class PulseShape:
    """Control field ``E(t) = exp(-(t-T/2)^2 / (2 s^2)) * sum_l A_l cos(w_l t + th_l)``.

    The control knobs are the amplitudes followed by the phases. ``bounds``
    of ``None`` marks a realized (noise-contaminated) pulse that is not
    required to respect the knob ranges.
    """

    omegas: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray
    T: float = 1.0
    s: float = 0.2
    amplitude_bounds: tuple[float, float] | None = (0.0, 1.0)
    phase_bounds: tuple[float, float] | None = (0.0, TWO_PI)

    def __post_init__(self):
        for name in ("omegas", "amplitudes", "phases"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.omegas.size == self.amplitudes.size == self.phases.size):
            raise ConfigurationError("omegas, amplitudes and phases must have equal length")
        if not self.T > 0 or not self.s > 0:
            raise ConfigurationError("pulse duration T and width s must be positive")
        if self.amplitude_bounds is not None:
            lo, hi = self.amplitude_bounds
            if np.any(self.amplitudes < lo) or np.any(self.amplitudes > hi):
                raise ConfigurationError(f"amplitudes must lie within [{lo}, {hi}]")
        if self.phase_bounds is not None:
            lo, hi = self.phase_bounds
            if np.any(self.phases < lo) or np.any(self.phases > hi):
                raise ConfigurationError(f"phases must lie within [{lo}, {hi}]")

    @classmethod
    def from_knobs(cls, omegas, knobs, **kwargs) -> "PulseShape":
        knobs = np.asarray(knobs, dtype=float)
        n = len(omegas)
        if knobs.size != 2 * n:
            raise ConfigurationError(f"expected {2 * n} knobs, got {knobs.size}")
        return cls(omegas, knobs[:n], knobs[n:], **kwargs)

    @property
    def n_components(self) -> int:
        return self.omegas.size

    @property
    def knobs(self) -> np.ndarray:
        return np.concatenate([self.amplitudes, self.phases])

    @property
    def omega_max(self) -> float:
        return float(np.max(np.abs(self.omegas))) if self.omegas.size else 0.0

    def knob_bounds(self) -> np.ndarray:
        """Array of shape ``(N_c, 2)`` with (min, max) per knob."""
        amp = self.amplitude_bounds or (0.0, 1.0)
        ph = self.phase_bounds or (0.0, TWO_PI)
        n = self.n_components
        return np.array([amp] * n + [ph] * n, dtype=float)

    def with_knobs(self, knobs) -> "PulseShape":
        knobs = np.asarray(knobs, dtype=float)
        n = self.n_components
        return replace(self, amplitudes=knobs[:n], phases=knobs[n:])

    def __call__(self, t):
        return field_value(self, t)

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "s": self.s,
            "omegas": self.omegas.tolist(),
            "amplitudes": self.amplitudes.tolist(),
            "phases": self.phases.tolist(),
            "amplitude_bounds": list(self.amplitude_bounds) if self.amplitude_bounds else None,
            "phase_bounds": list(self.phase_bounds) if self.phase_bounds else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PulseShape":
        amp_b = data.get("amplitude_bounds")
        ph_b = data.get("phase_bounds")
        return cls(
            data["omegas"], data["amplitudes"], data["phases"], T=data["T"], s=data["s"],
            amplitude_bounds=tuple(amp_b) if amp_b else None,
            phase_bounds=tuple(ph_b) if ph_b else None,
        )


@dataclass(frozen=True)
class FieldNoiseModel:
    """Relative uniform noise on amplitudes and phases, plus replicate count."""

    eps_fld: float = 0.01
    replicates: int = 100

    def __post_init__(self):
        if self.eps_fld < 0:
            raise ConfigurationError("eps_fld must be non-negative")
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ConfigurationError("replicates must be an integer >= 1")


def field_value(pulse: PulseShape, t):
    """Evaluate the field at scalar or array ``t``."""
    t = np.asarray(t, dtype=float)
    envelope = np.exp(-((t - 0.5 * pulse.T) ** 2) / (2.0 * pulse.s**2))
    carrier = np.cos(np.multiply.outer(t, pulse.omegas) + pulse.phases) @ pulse.amplitudes
    return envelope * carrier


def realize_noisy(pulse: PulseShape, noise: FieldNoiseModel, rng) -> PulseShape:
    """Draw one noise-contaminated copy: ``A -> (1+g_A) A``, ``th -> (1+g_th) th``.

    Every ``g`` is uniform on ``[-eps_fld, eps_fld]``; the envelope is untouched.
    """
    n = pulse.n_components
    gamma = rng.uniform(-noise.eps_fld, noise.eps_fld, size=(2, n))
    return replace(
        pulse,
        amplitudes=(1.0 + gamma[0]) * pulse.amplitudes,
        phases=(1.0 + gamma[1]) * pulse.phases,
        amplitude_bounds=None,
        phase_bounds=None,
    )


def power_spectrum(pulse: PulseShape, freq_grid, points_per_period: int = 40) -> np.ndarray:
    """``|int_0^T E(t) exp(-i w t) dt|^2`` by the trapezoid rule.

    Returns an array of shape ``(len(freq_grid), 2)`` of (frequency, power).
    """
    freqs = np.asarray(freq_grid, dtype=float).reshape(-1)
    if freqs.size == 0 or np.any(freqs < 0):
        raise ValueError("frequency grid must be non-empty and non-negative")
    fastest = max(pulse.omega_max, float(freqs.max()), 1e-12)
    n_t = max(int(math.ceil(points_per_period * fastest * pulse.T / TWO_PI)) + 1, 2 * points_per_period)
    t = np.linspace(0.0, pulse.T, n_t)
    e = field_value(pulse, t)
    transform = np.trapezoid(e[None, :] * np.exp(-1j * np.outer(freqs, t)), t, axis=1)
    return np.column_stack([freqs, np.abs(transform) ** 2])


def write_spectrum_csv(path, spectrum) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_rad_per_ps", "power"])
        for freq, power in spectrum:
            writer.writerow([repr(float(freq)), repr(float(power))])


def read_spectrum_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["freq_rad_per_ps"]), float(r["power"])] for r in rows])
