"""N-level system parameterization and time-dependent Schrodinger propagation.

Units are scaled so that hbar = 1: time in ps, energies and frequencies in
rad/ps, and the product of a dipole element with the (dimensionless) field
amplitude is a coupling in rad/ps. The total Hamiltonian is ``H - mu * E(t)``.

The parameter vector ``h`` stores the upper triangle of ``H`` (diagonal
included, row-major) followed by the strict upper triangle of ``mu``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .exceptions import ConfigurationError

SCHEMES = ("split4", "strang", "exponential-midpoint", "rk4")

# Fourth-order symmetric composition (Yoshida) of the Strang step.
_YOSHIDA_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YOSHIDA_W0 = 1.0 - 2.0 * _YOSHIDA_W1


@dataclass(frozen=True)
class LevelSystem:
    """Basis size and unit conventions of the model system."""

    dimension: int = 8
    hbar: float = 1.0
    time_unit: str = "ps"
    energy_unit: str = "rad/ps"

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 2:
            raise ConfigurationError(f"dimension must be an integer >= 2, got {self.dimension!r}")
        if self.hbar != 1.0:
            raise ConfigurationError("hbar is fixed to 1 in scaled units")

    @property
    def n_params(self) -> int:
        return n_params(self.dimension)


def n_params(dimension: int) -> int:
    """Length of the parameter vector for an ``dimension``-level system."""
    return dimension * (dimension + 1) // 2 + dimension * (dimension - 1) // 2


def dimension_from_n_params(count: int) -> int:
    # count = N**2, so the inverse is an exact integer square root
    n = math.isqrt(count)
    if n * n != count or n < 2:
        raise ConfigurationError(f"{count} is not a valid parameter-vector length")
    return n


def index_map(dimension: int) -> list[tuple[str, int, int]]:
    """Entry index -> (matrix tag, row, column), zero-based rows and columns."""
    rows, cols = np.triu_indices(dimension)
    entries = [("H", int(p), int(q)) for p, q in zip(rows, cols)]
    rows, cols = np.triu_indices(dimension, k=1)
    entries += [("mu", int(p), int(q)) for p, q in zip(rows, cols)]
    return entries


def param_labels(dimension: int) -> list[str]:
    return [f"{tag}[{p + 1},{q + 1}]" for tag, p, q in index_map(dimension)]


@dataclass(frozen=True, eq=False)
class HamiltonianParams:
    """Real parameter vector holding the matrix elements of ``H`` and ``mu``."""

    values: np.ndarray
    dimension: int = 8

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        expected = n_params(self.dimension)
        if values.size != expected:
            raise ConfigurationError(
                f"parameter vector has length {values.size}, expected {expected} "
                f"for a {self.dimension}-level system"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_matrices(cls, H, mu) -> "HamiltonianParams":
        H = np.asarray(H, dtype=float)
        return cls(flatten(H, mu), dimension=H.shape[0])

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return assemble(self)

    @property
    def labels(self) -> list[str]:
        return param_labels(self.dimension)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, HamiltonianParams):
            return NotImplemented
        return self.dimension == other.dimension and np.array_equal(self.values, other.values)

    __hash__ = None


def _as_vector(params) -> np.ndarray:
    if isinstance(params, HamiltonianParams):
        return params.values
    return np.asarray(params, dtype=float)


def assemble(params, dimension: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Build the symmetric ``H`` and zero-diagonal symmetric ``mu`` matrices.

    Accepts a :class:`HamiltonianParams` or a raw array. A raw array may be
    stacked, shape ``(..., n_params)``, in which case the matrices carry the
    same leading shape.
    """
    h = _as_vector(params)
    if dimension is None:
        dimension = params.dimension if isinstance(params, HamiltonianParams) else None
    if dimension is None:
        dimension = dimension_from_n_params(h.shape[-1])
    if h.shape[-1] != n_params(dimension):
        raise ConfigurationError(
            f"parameter vector has length {h.shape[-1]}, expected {n_params(dimension)}"
        )
    n_h = dimension * (dimension + 1) // 2
    lead = h.shape[:-1]
    H = np.zeros(lead + (dimension, dimension))
    mu = np.zeros(lead + (dimension, dimension))
    rows, cols = np.triu_indices(dimension)
    H[..., rows, cols] = h[..., :n_h]
    H[..., cols, rows] = h[..., :n_h]
    rows, cols = np.triu_indices(dimension, k=1)
    mu[..., rows, cols] = h[..., n_h:]
    mu[..., cols, rows] = h[..., n_h:]
    return H, mu


def flatten(H, mu) -> np.ndarray:
    """Inverse of :func:`assemble`; only the upper triangles are read."""
    H = np.asarray(H, dtype=float)
    mu = np.asarray(mu, dtype=float)
    dimension = H.shape[-1]
    upper = H[..., np.triu_indices(dimension)[0], np.triu_indices(dimension)[1]]
    rows, cols = np.triu_indices(dimension, k=1)
    return np.concatenate([upper, mu[..., rows, cols]], axis=-1)


@dataclass(frozen=True, eq=False)
class QuantumState:
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex).reshape(-1)
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def basis(cls, dimension: int, level: int = 1) -> "QuantumState":
        """Basis state ``|level>`` with one-based ``level``."""
        amps = np.zeros(dimension, dtype=complex)
        amps[level - 1] = 1.0
        return cls(amps)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


@dataclass(frozen=True)
class PropagationSettings:
    """Time stepping controls.

    ``dt_max=None`` selects ``2*pi / (20 * omega_max)`` from the field's
    largest carrier frequency.
    """

    dt_max: float | None = None
    scheme: str = "split4"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.dt_max is not None and not self.dt_max > 0:
            raise ConfigurationError("dt_max must be positive")

    def step_bound(self, omega_max: float | None) -> float:
        limit = None
        if omega_max is not None and omega_max > 0:
            limit = 2.0 * math.pi / (20.0 * omega_max)
        if self.dt_max is None:
            if limit is None:
                raise ConfigurationError("dt_max is required when the field has no known frequency")
            return limit
        if limit is not None and self.dt_max > limit * (1 + 1e-12):
            raise ConfigurationError(
                f"dt_max={self.dt_max} exceeds 2*pi/(20*omega_max)={limit:.6g} ps"
            )
        return self.dt_max


class Resonances(NamedTuple):
    frequencies: np.ndarray
    degenerate: bool


def resonance_frequencies(params, dimension: int | None = None) -> Resonances:
    """Adjacent eigenvalue gaps of the field-free Hamiltonian, in rad/ps."""
    H, _ = assemble(params, dimension)
    energies = np.linalg.eigvalsh(H)
    gaps = np.diff(energies)
    degenerate = bool(np.any(gaps < 1e-9))
    if degenerate:
        warnings.warn("adjacent eigenvalues of H are degenerate", RuntimeWarning, stacklevel=2)
    return Resonances(gaps, degenerate)


# --------------------------------------------------------------------------
# propagation


def _field_frequency(field) -> float | None:
    omega = getattr(field, "omega_max", None)
    return float(omega) if omega is not None else None


def _check_times(obs_times, duration) -> np.ndarray:
    times = np.asarray(obs_times, dtype=float).reshape(-1)
    if times.size == 0:
        raise ValueError("obs_times is empty")
    if np.any(np.diff(times) <= 0):
        raise ValueError("obs_times must be strictly increasing")
    if times[0] < 0 or times[-1] > duration * (1 + 1e-12):
        raise ValueError(f"obs_times must lie in [0, {duration}]")
    return times


def _step_plan(times: np.ndarray, dt_max: float):
    """Uniform sub-grids between consecutive observation times.

    Returns step start times, step lengths and, for every observation, the
    number of steps taken before it is recorded.
    """
    starts, sizes, marks = [], [], []
    t_prev = 0.0
    count = 0
    for t in times:
        span = t - t_prev
        n = int(math.ceil(span / dt_max - 1e-9)) if span > 0 else 0
        if n:
            h = span / n
            starts.append(t_prev + h * np.arange(n))
            sizes.append(np.full(n, h))
            count += n
        marks.append(count)
        t_prev = t
    starts = np.concatenate(starts) if starts else np.zeros(0)
    sizes = np.concatenate(sizes) if sizes else np.zeros(0)
    return starts, sizes, marks


def _sample_fields(fields, t: np.ndarray) -> np.ndarray:
    if callable(fields):
        return np.asarray(fields(t), dtype=float).reshape(1, -1)
    return np.stack([np.asarray(f(t), dtype=float).reshape(-1) for f in fields])


def _evolve(H, mu, psi0, fields, starts, sizes, marks, scheme):
    """Advance the batched state; returns amplitudes of shape (B, Q, N)."""
    if scheme in ("split4", "strang"):
        weights = (_YOSHIDA_W1, _YOSHIDA_W0, _YOSHIDA_W1) if scheme == "split4" else (1.0,)
        offsets = np.cumsum((0.0,) + weights[:-1])
        # substep midpoints, one row per weight
        sub_h = np.outer(weights, sizes)
        sub_mid = starts[None, :] + (offsets[:, None] + 0.5 * np.asarray(weights)[:, None]) * sizes
        E = _sample_fields(fields, sub_mid.T.reshape(-1))
        E = E.reshape(E.shape[0], sizes.size, len(weights))
        return _evolve_split(H, mu, psi0, E, sub_h.T, marks)
    if scheme == "exponential-midpoint":
        E = _sample_fields(fields, starts + 0.5 * sizes)
        return _evolve_midpoint(H, mu, psi0, E, sizes, marks)
    E = _sample_fields(fields, np.concatenate([starts, starts + 0.5 * sizes, starts + sizes]))
    E = E.reshape(E.shape[0], 3, sizes.size)
    return _evolve_rk4(H, mu, psi0, E, sizes, marks)


def _record(out, psi, marks, k, to_site=None):
    for q, mark in enumerate(marks):
        if mark == k:
            out[:, q] = psi if to_site is None else to_site(psi)


def _evolve_split(H, mu, psi0, E, sub_h, marks):
    lam_h, vec_h = np.linalg.eigh(H)
    lam_m, vec_m = np.linalg.eigh(mu)
    # coefficients in the H eigenbasis c relate to the mu eigenbasis d by c = W d
    W = np.matmul(np.swapaxes(vec_h, -1, -2), vec_m).astype(complex)
    Wt = np.swapaxes(W, -1, -2).copy()
    vec_h_c = vec_h.astype(complex)
    batch = np.broadcast_shapes(H.shape[:-2], E.shape[:1], psi0.shape[:-1])
    n = H.shape[-1]
    out = np.empty(batch + (len(marks), n), dtype=complex)
    c = np.matmul(np.swapaxes(vec_h_c, -1, -2), np.broadcast_to(psi0, batch + (n,))[..., None])
    to_site = lambda coeffs: np.matmul(vec_h_c, coeffs)[..., 0]
    _record(out, c, marks, 0, to_site)
    n_steps = sub_h.shape[0]
    lam_h = lam_h[..., None]
    lam_m = lam_m[..., None]
    half_phase = [np.exp(-0.5j * lam_h * h) for h in sub_h[0]] if n_steps else []
    uniform = n_steps > 0 and np.allclose(sub_h, sub_h[0], rtol=0, atol=1e-15)
    for k in range(n_steps):
        steps = sub_h[k]
        phases = half_phase if uniform else [np.exp(-0.5j * lam_h * h) for h in steps]
        for j, h in enumerate(steps):
            kick = np.exp(1j * h * lam_m * E[:, k, j, None, None])
            c = phases[j] * c
            c = np.matmul(W, kick * np.matmul(Wt, c))
            c = phases[j] * c
        _record(out, c, marks, k + 1, to_site)
    return out


def _evolve_midpoint(H, mu, psi0, E, sizes, marks):
    batch = np.broadcast_shapes(H.shape[:-2], E.shape[:1], psi0.shape[:-1])
    n = H.shape[-1]
    out = np.empty(batch + (len(marks), n), dtype=complex)
    psi = np.broadcast_to(psi0, batch + (n,)).astype(complex)[..., None]
    _record(out, psi[..., 0], marks, 0)
    for k, dt in enumerate(sizes):
        total = H - mu * E[:, k, None, None]
        lam, vec = np.linalg.eigh(total)
        vec = vec.astype(complex)
        coeffs = np.matmul(np.swapaxes(vec, -1, -2), psi)
        psi = np.matmul(vec, np.exp(-1j * lam * dt)[..., None] * coeffs)
        _record(out, psi[..., 0], marks, k + 1)
    return out


def _evolve_rk4(H, mu, psi0, E, sizes, marks):
    batch = np.broadcast_shapes(H.shape[:-2], E.shape[:1], psi0.shape[:-1])
    n = H.shape[-1]
    out = np.empty(batch + (len(marks), n), dtype=complex)
    psi = np.broadcast_to(psi0, batch + (n,)).astype(complex)[..., None]
    _record(out, psi[..., 0], marks, 0)

    def rhs(e, y):
        return -1j * np.matmul(H - mu * e[:, None, None], y)

    for k, dt in enumerate(sizes):
        e0, e_mid, e1 = E[:, 0, k], E[:, 1, k], E[:, 2, k]
        k1 = rhs(e0, psi)
        k2 = rhs(e_mid, psi + 0.5 * dt * k1)
        k3 = rhs(e_mid, psi + 0.5 * dt * k2)
        k4 = rhs(e1, psi + dt * k3)
        psi = psi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        _record(out, psi[..., 0], marks, k + 1)
    return out


def propagate_amplitudes(
    params,
    fields,
    obs_times: Sequence[float],
    initial: QuantumState | None = None,
    settings: PropagationSettings | None = None,
    duration: float | None = None,
    dimension: int | None = None,
) -> np.ndarray:
    """Batched propagation returning complex amplitudes at ``obs_times``.

    ``params`` is a parameter vector or a stack of shape ``(B, n_params)``;
    ``fields`` is one vectorized callable ``t -> E(t)`` or a sequence of them.
    The batch dimension is the broadcast of the two. Output shape is
    ``(B, Q, N)``.
    """
    settings = settings or PropagationSettings()
    h = _as_vector(params)
    if isinstance(params, HamiltonianParams):
        dimension = params.dimension
    h = np.atleast_2d(h)
    H, mu = assemble(h, dimension)
    n = H.shape[-1]
    if initial is None:
        initial = QuantumState.basis(n, 1)
    psi0 = initial.amplitudes
    if psi0.size != n:
        raise ValueError(f"initial state has {psi0.size} amplitudes, expected {n}")
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ValueError("initial state is not normalized")

    field_list = [fields] if callable(fields) else list(fields)
    if duration is None:
        durations = [getattr(f, "T", None) for f in field_list]
        duration = max(d for d in durations if d is not None) if any(
            d is not None for d in durations) else None
    times = np.asarray(obs_times, dtype=float).reshape(-1)
    if duration is None:
        duration = float(times.max()) if times.size else 0.0
    times = _check_times(times, duration)
    omegas = [_field_frequency(f) for f in field_list]
    omega_max = max((w for w in omegas if w is not None), default=None)
    dt_max = settings.step_bound(omega_max)

    starts, sizes, marks = _step_plan(times, dt_max)
    return _evolve(H, mu, psi0, fields, starts, sizes, marks, settings.scheme)


def propagate(
    params,
    field: Callable,
    initial: QuantumState | None = None,
    obs_times: Sequence[float] = (),
    settings: PropagationSettings | None = None,
    duration: float | None = None,
) -> np.ndarray:
    """Populations ``|<p|psi(t_q)>|^2`` as a ``(Q, N)`` array.

    The initial state defaults to the basis state ``|1>``.
    """
    amps = propagate_amplitudes(params, field, obs_times, initial, settings, duration)
    return np.abs(amps[0]) ** 2


def propagate_batch(params, fields, obs_times, initial=None, settings=None, duration=None,
                    dimension=None) -> np.ndarray:
    """Populations for a batch of parameter vectors and/or fields, ``(B, Q, N)``."""
    amps = propagate_amplitudes(params, fields, obs_times, initial, settings, duration, dimension)
    return np.abs(amps) ** 2


# --------------------------------------------------------------------------
# bundled model system


def ladder_system(
    dimension: int = 8,
    omega0: float = 150.0,
    chi: float = 2.0,
    coupling: float = 12.0,
    coupling_decay: float = 0.5,
    mu0: float = 3.0,
    overtone_ratio: float = 0.1,
) -> HamiltonianParams:
    """Anharmonic vibrational-ladder-like system.

    Diagonal energies are ``omega0*(p-1) - chi*(p-1)*p``. Off-diagonal elements
    of ``H`` fall off as ``coupling * coupling_decay**(|p-q|-1)`` so ``H`` is
    not diagonal in the measurement basis. Dipoles are ``mu0*sqrt(p)`` on the
    first off-diagonal and ``overtone_ratio*mu0*sqrt(p)`` on the second; the
    rest are zero.
    """
    p = np.arange(1, dimension + 1, dtype=float)
    H = np.diag(omega0 * (p - 1) - chi * (p - 1) * p)
    mu = np.zeros((dimension, dimension))
    for i in range(dimension):
        for j in range(i + 1, dimension):
            H[i, j] = H[j, i] = coupling * coupling_decay ** (j - i - 1)
    for i in range(dimension - 1):
        mu[i, i + 1] = mu[i + 1, i] = mu0 * math.sqrt(i + 1)
    for i in range(dimension - 2):
        mu[i, i + 2] = mu[i + 2, i] = overtone_ratio * mu0 * math.sqrt(i + 1)
    return HamiltonianParams.from_matrices(H, mu)
