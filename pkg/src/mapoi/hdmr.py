"""First-order cut-HDMR surrogate of the Hamiltonian -> observable map.

The map is anchored at a reference point ``r`` (the domain centre)::

    f(h) ~= f0 + sum_i g_i(h_i),    g_i(x) = f(r with h_i = x) - f0

Each ``g_i`` is a natural cubic spline through ``S`` uniformly spaced
samples of the cut plus the knot ``(r_i, 0)``, which costs no extra solve.
Evaluation is a single matrix product against a sparse spline-basis feature
matrix, so it is cheap enough to sit inside a genetic algorithm.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse import csr_matrix
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .control import PulseShape
from .exceptions import ConfigurationError, DomainError, MapBuildError
from .rng import as_seed

logger = logging.getLogger(__name__)

DOMAIN_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class MapDomain:
    """Axis-aligned box ``lower <= h <= upper`` around ``nominal``."""

    lower: np.ndarray
    upper: np.ndarray
    nominal: np.ndarray

    def __post_init__(self):
        for name in ("lower", "upper", "nominal"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.lower.size == self.upper.size == self.nominal.size):
            raise ConfigurationError("domain bounds and nominal must have equal length")
        if not (np.all(self.lower < self.nominal) and np.all(self.nominal < self.upper)):
            bad = np.flatnonzero(~((self.lower < self.nominal) & (self.nominal < self.upper)))
            raise ConfigurationError(f"degenerate domain: lower < nominal < upper fails at {bad.tolist()}")

    @classmethod
    def around(cls, nominal, rel: float = 0.3, zero_halfwidth=1.0) -> "MapDomain":
        """``nominal -/+ rel*|nominal|``; zero entries get ``zero_halfwidth``.

        ``zero_halfwidth`` may be a scalar or a per-entry array.
        """
        nominal = np.asarray(nominal, dtype=float)
        half = rel * np.abs(nominal)
        zero = np.broadcast_to(np.asarray(zero_halfwidth, dtype=float), nominal.shape)
        half = np.where(nominal == 0, zero, half)
        return cls(nominal - half, nominal + half, nominal)

    @property
    def size(self) -> int:
        return self.nominal.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, h, slack: float = DOMAIN_SLACK) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return (h >= self.lower - slack) & (h <= self.upper + slack)

    def sample(self, n: int, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.size))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "nominal": self.nominal.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["lower"], data["upper"], data["nominal"])


@dataclass
class MapDiagnostics:
    rms_err: np.ndarray
    max_err: np.ndarray
    n_test: int
    build_solves: int
    eval_seconds: float = float("nan")
    solve_seconds: float = float("nan")

    @property
    def worst_rms(self) -> float:
        return float(np.max(self.rms_err))

    @property
    def speedup(self) -> float:
        return self.solve_seconds / self.eval_seconds

    def to_dict(self):
        return {
            "rms_err": self.rms_err.tolist(),
            "max_err": self.max_err.tolist(),
            "n_test": self.n_test,
            "build_solves": self.build_solves,
            "eval_seconds": self.eval_seconds,
            "solve_seconds": self.solve_seconds,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["rms_err"]), np.asarray(data["max_err"]), data["n_test"],
                   data["build_solves"], data.get("eval_seconds", float("nan")),
                   data.get("solve_seconds", float("nan")))


def _linear_coefficients(x, y):
    slope = np.diff(y, axis=0) / np.diff(x)[:, None]
    zeros = np.zeros_like(slope)
    return np.stack([zeros, zeros, slope, y[:-1]])


class CutHdmrMap(BaseEstimator):
    """First-order cut-HDMR map, fitted from a forward solver.

    Parameters
    ----------
    n_samples : int
        Samples ``S`` per one-dimensional cut (at least 2).
    order : int
        Expansion order; only 1 can be constructed.
    rms_threshold : float
        ``validate`` flags the map when the worst per-observable RMS error
        exceeds this value.
    """

    def __init__(self, n_samples=6, order=1, rms_threshold=0.02):
        self.n_samples = n_samples
        self.order = order
        self.rms_threshold = rms_threshold

    # ------------------------------------------------------------------ build
    def fit(self, solver, domain: MapDomain, pulse: PulseShape | None = None):
        """Sample ``solver`` along every cut through ``domain.nominal``.

        ``solver`` maps a stack ``(B, n_params)`` to ``(B, M)``. It is called
        once on all ``1 + n_params * S`` points; if that call fails, the cuts
        are retried one by one to name the failing node.
        """
        S = int(self.n_samples)
        if S < 2:
            raise ConfigurationError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.order != 1:
            raise ConfigurationError("only first-order maps can be constructed")
        if not isinstance(domain, MapDomain):
            raise ConfigurationError("domain must be a MapDomain")
        ref = domain.nominal
        n = ref.size
        nodes = np.linspace(domain.lower, domain.upper, S).T  # (n, S)
        points = np.repeat(ref[None, :], 1 + n * S, axis=0)
        rows = 1 + np.arange(n * S)
        points[rows, np.repeat(np.arange(n), S)] = nodes.reshape(-1)

        try:
            outputs = np.asarray(solver(points), dtype=float)
            if not np.all(np.isfinite(outputs)):
                raise FloatingPointError("non-finite solver output")
        except Exception as exc:  # locate the node, then re-raise with context
            self._locate_failure(solver, points, nodes, exc)
            raise
        self.reference_ = ref.copy()
        self.domain_ = domain
        self.f0_ = outputs[0].copy()
        self.node_x_ = nodes
        self.node_values_ = outputs[1:].reshape(n, S, -1)
        self.build_solves_ = int(points.shape[0])
        self.pulse_ = pulse
        self.diagnostics_ = None
        self.flagged_ = False
        self._set_splines()
        return self

    def _locate_failure(self, solver, points, nodes, exc):
        ref_out = None
        try:
            ref_out = solver(points[:1])
        except Exception as inner:
            raise MapBuildError(f"solver failed at the reference point: {inner}", None, None) from exc
        if not np.all(np.isfinite(ref_out)):
            raise MapBuildError("solver returned non-finite values at the reference point") from exc
        S = nodes.shape[1]
        for i in range(nodes.shape[0]):
            for j in range(S):
                row = 1 + i * S + j
                try:
                    out = solver(points[row:row + 1])
                    ok = np.all(np.isfinite(out))
                except Exception:
                    ok = False
                if not ok:
                    raise MapBuildError(
                        f"solver failed at variable {i}, node {j} (h_{i} = {nodes[i, j]:.6g})",
                        i, j) from exc

    def _set_splines(self):
        S = self.node_x_.shape[1]
        n, _, m = self.node_values_.shape
        g = self.node_values_ - self.f0_[None, None, :]
        ref = self.reference_
        knots, coefs = [], []
        for i in range(n):
            x = self.node_x_[i]
            y = g[i]
            hit = np.isclose(x, ref[i], rtol=0, atol=1e-12 * max(1.0, abs(ref[i])))
            if hit.any():
                y = y.copy()
                y[hit] = 0.0  # the cut point itself: g vanishes exactly
            else:
                pos = int(np.searchsorted(x, ref[i]))
                x = np.insert(x, pos, ref[i])
                y = np.insert(y, pos, np.zeros(m), axis=0)
            knots.append(x)
            if S >= 4:
                coefs.append(CubicSpline(x, y, bc_type="natural", axis=0).c)
            else:
                coefs.append(_linear_coefficients(x, y))
        self.knots_ = np.array(knots)          # (n, K)
        coef = np.array(coefs)                 # (n, 4, K-1, m)
        # feature layout: variable-major, then interval, then power (3,2,1,0)
        self.coef_matrix_ = np.ascontiguousarray(coef.transpose(0, 2, 1, 3).reshape(-1, m))
        self.n_features_in_ = n

    # --------------------------------------------------------------- evaluate
    def _check_domain(self, X):
        inside = self.domain_.contains(X)
        if not np.all(inside):
            bad = np.argwhere(~inside)[0]
            comp = int(bad[-1])
            value = X[tuple(bad)]
            raise DomainError(
                f"component {comp} = {value:.6g} outside map domain "
                f"[{self.domain_.lower[comp]:.6g}, {self.domain_.upper[comp]:.6g}]", comp)

    def features(self, X) -> np.ndarray:
        """Spline-basis feature matrix, shape ``(B, n * (K-1) * 4)``."""
        return self._sparse_features(np.atleast_2d(np.asarray(X, dtype=float))).toarray()

    def _sparse_features(self, X):
        # row b holds (dx^3, dx^2, dx, 1) for the active interval of each variable
        n_rows, n = X.shape
        knots = self.knots_
        n_int = knots.shape[1] - 1
        idx = np.empty((n_rows, n), dtype=np.intp)
        for i in range(n):
            idx[:, i] = np.searchsorted(knots[i, 1:-1], X[:, i], side="right")
        dx = X - knots[np.arange(n)[None, :], idx]
        data = np.empty((n_rows, n, 4))
        data[:, :, 2] = dx
        np.multiply(dx, dx, out=data[:, :, 1])
        np.multiply(data[:, :, 1], dx, out=data[:, :, 0])
        data[:, :, 3] = 1.0
        cols = ((np.arange(n)[None, :] * n_int + idx) * 4)[:, :, None] + np.arange(4)
        indptr = np.arange(0, n_rows * n * 4 + 1, n * 4)
        return csr_matrix((data.reshape(-1), cols.reshape(-1), indptr),
                          shape=(n_rows, n * n_int * 4))

    def predict(self, X):
        """Predicted observables for one point ``(n,)`` or a stack ``(B, n)``."""
        check_is_fitted(self, "coef_matrix_")
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or not np.all(np.isfinite(X)):
            X = check_array(X, ensure_all_finite=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} parameters, got {X.shape[1]}")
        self._check_domain(X)
        out = self.f0_ + self._sparse_features(X) @ self.coef_matrix_
        return out[0] if single else out

    __call__ = predict

    def term(self, i: int, x) -> np.ndarray:
        """The one-dimensional component ``g_i`` evaluated at ``x``."""
        X = np.repeat(self.reference_[None, :], np.size(x), axis=0)
        X[:, i] = np.asarray(x, dtype=float).reshape(-1)
        return self.predict(X) - self.f0_

    # --------------------------------------------------------------- validate
    def validate(self, solver, n_test: int, rng) -> MapDiagnostics:
        """Compare against ``solver`` at ``n_test`` uniform random domain points."""
        check_is_fitted(self, "coef_matrix_")
        if n_test < 1:
            raise ValueError("n_test must be >= 1")
        gen = np.random.default_rng(as_seed(rng))
        X = self.domain_.sample(n_test, gen)
        t0 = time.perf_counter()
        exact = np.atleast_2d(solver(X))
        solve_seconds = (time.perf_counter() - t0) / n_test
        t0 = time.perf_counter()
        approx = self.predict(X)
        eval_seconds = (time.perf_counter() - t0) / n_test
        err = approx - exact
        diag = MapDiagnostics(
            rms_err=np.sqrt(np.mean(err**2, axis=0)),
            max_err=np.max(np.abs(err), axis=0),
            n_test=int(n_test),
            build_solves=self.build_solves_,
            eval_seconds=eval_seconds,
            solve_seconds=solve_seconds,
        )
        self.diagnostics_ = diag
        self.flagged_ = diag.worst_rms > self.rms_threshold
        if self.flagged_:
            logger.warning("map rms error %.3g exceeds threshold %.3g", diag.worst_rms,
                           self.rms_threshold)
        return diag

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_matrix_")
        return {
            "order": self.order,
            "n_samples": self.n_samples,
            "rms_threshold": self.rms_threshold,
            "domain": self.domain_.to_dict(),
            "reference": self.reference_.tolist(),
            "f0": self.f0_.tolist(),
            "node_x": self.node_x_.tolist(),
            "node_values": self.node_values_.tolist(),
            "build_solves": self.build_solves_,
            "pulse": self.pulse_.to_dict() if self.pulse_ is not None else None,
            "diagnostics": self.diagnostics_.to_dict() if self.diagnostics_ else None,
            "flagged": self.flagged_,
        }

    @classmethod
    def from_dict(cls, data) -> "CutHdmrMap":
        obj = cls(n_samples=data["n_samples"], order=data["order"],
                  rms_threshold=data["rms_threshold"])
        obj.domain_ = MapDomain.from_dict(data["domain"])
        obj.reference_ = np.asarray(data["reference"], dtype=float)
        obj.f0_ = np.asarray(data["f0"], dtype=float)
        obj.node_x_ = np.asarray(data["node_x"], dtype=float)
        obj.node_values_ = np.asarray(data["node_values"], dtype=float)
        obj.build_solves_ = data["build_solves"]
        obj.pulse_ = PulseShape.from_dict(data["pulse"]) if data.get("pulse") else None
        diag = data.get("diagnostics")
        obj.diagnostics_ = MapDiagnostics.from_dict(diag) if diag else None
        obj.flagged_ = data.get("flagged", False)
        obj._set_splines()
        return obj

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "CutHdmrMap":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_map(solver, pulse, domain: MapDomain, S: int, plan=None) -> CutHdmrMap:
    """Construct a first-order map with ``S`` samples per cut.

    ``plan`` is accepted for symmetry with the solver's construction; the
    observable layout is whatever ``solver`` returns.
    """
    return CutHdmrMap(n_samples=S).fit(solver, domain, pulse=pulse)


def eval_map(hdmr_map: CutHdmrMap, h) -> np.ndarray:
    return hdmr_map.predict(h)


def validate_map(hdmr_map: CutHdmrMap, solver, n_test: int, rng) -> MapDiagnostics:
    return hdmr_map.validate(solver, n_test, rng)
