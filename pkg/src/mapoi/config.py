"""Run configuration and system files.

Both are INI-style text (sections of ``key = value`` lines, ``#`` comments).
Every validation error names the file and, where the offending key is in the
file, its line number.

Run configuration schema (all keys optional)::

    [run]         seed, Q, conventional_Q, workers, out, scale (desk | paper)
    [system]      file (path relative to the config; default: bundled system)
    [pulse]       T, s, amplitude_min, amplitude_max, phase_min, phase_max
    [noise]       eps_obs, eps_fld, replicates, population_floor
    [map]         samples, domain_rel, zero_halfwidth, rms_threshold, validate_points
    [outer_ga]    pop_size, crossover_rate, mutation_rate, tournament_size,
                  max_generations, batch_size
    [inner_ga]    pop_size, crossover_rate, mutation_rate, tournament_size,
                  max_generations, batch_size, immigrant_rate,
                  n_family, dedup_dist, lambda_reg, init_fraction
    [cost]        alpha_start, alpha_end, beta_start, beta_end
    [propagation] scheme, dt_max

``scale`` picks the budget preset (generations, family size, map samples);
explicit keys override it.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .control import FieldNoiseModel
from .exceptions import ConfigurationError
from .ga import GAParams
from .inversion import InversionConfig
from .oi import OIConfig, Ramp
from .quantum import SCHEMES, HamiltonianParams, PropagationSettings, QuantumState

_KEY_RE = re.compile(r"^\s*([^=:#;\[]+?)\s*[=:]")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")

SCHEMA = {
    "run": {"seed", "q", "conventional_q", "workers", "out", "scale"},
    "system": {"file"},
    "pulse": {"t", "s", "amplitude_min", "amplitude_max", "phase_min", "phase_max"},
    "noise": {"eps_obs", "eps_fld", "replicates", "population_floor"},
    "map": {"samples", "domain_rel", "zero_halfwidth", "rms_threshold", "validate_points"},
    "outer_ga": {"pop_size", "crossover_rate", "mutation_rate", "tournament_size",
                 "max_generations", "batch_size"},
    "inner_ga": {"pop_size", "crossover_rate", "mutation_rate", "tournament_size",
                 "max_generations", "batch_size", "immigrant_rate", "n_family", "dedup_dist",
                 "lambda_reg", "init_fraction"},
    "cost": {"alpha_start", "alpha_end", "beta_start", "beta_end"},
    "propagation": {"scheme", "dt_max"},
}

SCALES = ("desk", "paper")


def bundled_system_path() -> Path:
    return Path(str(resources.files("mapoi") / "resources" / "default_system.ini"))


class _Source:
    """A parsed INI file that remembers where each key was written."""

    def __init__(self, path: Path):
        self.path = Path(path)
        try:
            text = self.path.read_text()
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {self.path}") from None
        self.lines: dict[tuple[str, str], int] = {}
        self.section_lines: dict[str, int] = {}
        section = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.lstrip().startswith(("#", ";")):
                continue
            m = _SECTION_RE.match(line)
            if m:
                section = m.group(1).strip()
                self.section_lines.setdefault(section, lineno)
                continue
            m = _KEY_RE.match(line)
            if m and section is not None:
                self.lines.setdefault((section, m.group(1).strip().lower()), lineno)
        self.parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            self.parser.read_string(text, source=str(self.path))
        except configparser.Error as exc:
            lineno = getattr(exc, "lineno", None)
            if lineno is None and getattr(exc, "errors", None):
                lineno = exc.errors[0][0]
            raise ConfigurationError(self.where(None, None, lineno) + f"{exc.message}") from None

    def where(self, section, key, lineno=None) -> str:
        if lineno is None and section is not None:
            lineno = self.lines.get((section, key)) if key else self.section_lines.get(section)
        return f"{self.path}:{lineno}: " if lineno else f"{self.path}: "

    def error(self, section, key, message) -> ConfigurationError:
        return ConfigurationError(self.where(section, key) + f"[{section}] {key}: {message}")

    def get(self, section, key, kind, default):
        if not self.parser.has_option(section, key):
            return default
        raw = self.parser.get(section, key).strip()
        try:
            if kind is int:
                value = int(raw)
            elif kind is float:
                value = float(raw)
                if not math.isfinite(value):
                    raise ValueError
            else:
                value = raw
        except ValueError:
            raise self.error(section, key, f"expected {kind.__name__}, got {raw!r}") from None
        return value


# --------------------------------------------------------------------------- system files

def load_system(path=None) -> tuple[HamiltonianParams, QuantumState]:
    """Read a system file; ``None`` loads the bundled 8-level system.

    Returns the Hamiltonian parameters and the initial state (basis state
    ``initial_level``, 1-based, default 1).
    """
    src = _Source(bundled_system_path() if path is None else path)
    p = src.parser
    if not p.has_section("system"):
        raise ConfigurationError(src.where(None, None) + "missing [system] section")
    for key in p.options("system"):
        if key not in ("dimension", "initial_level"):
            raise src.error("system", key, "unknown key")
    n = src.get("system", "dimension", int, None)
    if n is None:
        raise ConfigurationError(src.where("system", None) + "[system] dimension is required")
    if n < 2:
        raise src.error("system", "dimension", "must be >= 2")
    level = src.get("system", "initial_level", int, 1)
    if not 1 <= level <= n:
        raise src.error("system", "initial_level", f"must lie in 1..{n}")
    H = np.zeros((n, n))
    mu = np.zeros((n, n))
    for name, matrix, strict in (("H", H, False), ("mu", mu, True)):
        if not p.has_section(name):
            continue
        for key in p.options(name):
            parts = key.split()
            try:
                a, b = (int(v) for v in parts)
            except ValueError:
                raise src.error(name, key, "expected a key of the form 'p q'") from None
            if not (1 <= a <= n and 1 <= b <= n):
                raise src.error(name, key, f"indices must lie in 1..{n}")
            if a > b or (strict and a == b):
                rel = "p < q" if strict else "p <= q"
                raise src.error(name, key, f"only the upper triangle ({rel}) is given")
            matrix[a - 1, b - 1] = matrix[b - 1, a - 1] = src.get(name, key, float, 0.0)
    for section in p.sections():
        if section not in ("system", "H", "mu"):
            raise ConfigurationError(src.where(section, None) + f"unknown section [{section}]")
    return HamiltonianParams.from_matrices(H, mu), QuantumState.basis(n, level)


def dump_system(path, params: HamiltonianParams, initial_level: int = 1) -> None:
    """Write ``params`` as a system file readable by :func:`load_system`."""
    H, mu = params.matrices()
    n = params.dimension
    lines = ["[system]", f"dimension = {n}", f"initial_level = {initial_level}", "", "[H]"]
    lines += [f"{a + 1} {b + 1} = {float(H[a, b])!r}" for a in range(n) for b in range(a, n)]
    lines += ["", "[mu]"]
    lines += [f"{a + 1} {b + 1} = {float(mu[a, b])!r}" for a in range(n) for b in range(a + 1, n)]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- run config

@dataclass
class RunConfig:
    """Validated run configuration: the system, the OI settings, seed and output."""

    oi: OIConfig
    system_file: Path | None = None
    seed: int = 0
    out: Path = Path("results")
    scale: str = "desk"
    source: Path | None = None
    truth: HamiltonianParams = field(default=None, repr=False)
    initial: QuantumState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.truth is None:
            self.truth, self.initial = load_system(self.system_file)

    def to_dict(self) -> dict:
        """JSON-friendly record of every setting that can affect results.

        The worker count is deliberately absent: it changes speed, never output.
        """
        oi = self.oi
        return {
            "seed": self.seed,
            "scale": self.scale,
            "system_file": str(self.system_file) if self.system_file else "bundled",
            "Q": oi.Q,
            "conventional_Q": oi.conventional_Q,
            "pulse": {"T": oi.T, "s": oi.s, "amplitude_bounds": list(oi.amplitude_bounds),
                      "phase_bounds": list(oi.phase_bounds)},
            "noise": {"eps_obs": oi.eps_obs, "eps_fld": oi.noise.eps_fld,
                      "replicates": oi.noise.replicates, "population_floor": oi.population_floor},
            "map": {"samples": oi.map_samples, "domain_rel": oi.domain_rel,
                    "zero_halfwidth": oi.zero_halfwidth, "rms_threshold": oi.rms_threshold,
                    "validate_points": oi.validate_points},
            "outer_ga": asdict(oi.outer_ga),
            "inner_ga": asdict(oi.inversion.ga),
            "inversion": {"n_family": oi.inversion.n_family,
                          "dedup_dist": oi.inversion.dedup_dist,
                          "lambda_reg": oi.inversion.lambda_reg,
                          "init_fraction": oi.inversion.init_fraction},
            "cost": {"alpha": [oi.alpha.start, oi.alpha.end], "beta": [oi.beta.start, oi.beta.end]},
            "propagation": {"scheme": oi.propagation.scheme, "dt_max": oi.propagation.dt_max},
        }


def _ga(src: _Source, section: str, base: GAParams) -> GAParams:
    kw = {}
    for key, kind in (("pop_size", int), ("crossover_rate", float), ("mutation_rate", float),
                      ("tournament_size", int), ("max_generations", int), ("batch_size", int),
                      ("immigrant_rate", float)):
        if key in SCHEMA[section]:
            value = src.get(section, key, kind, None)
            if value is not None:
                kw[key] = value
    try:
        return replace(base, **kw)
    except ConfigurationError as exc:
        bad = next((k for k in kw if k.split("_")[0] in str(exc)), None)
        raise src.error(section, bad or "", str(exc)) from None


def load_config(path, *, seed: int | None = None, workers: int | None = None,
                paper_scale: bool = False, out=None) -> RunConfig:
    """Parse and validate a run configuration; keyword arguments override the file."""
    src = _Source(path)
    p = src.parser
    for section in p.sections():
        if section not in SCHEMA:
            raise ConfigurationError(src.where(section, None) + f"unknown section [{section}]")
        for key in p.options(section):
            if key not in SCHEMA[section]:
                raise src.error(section, key, "unknown key")

    scale = "paper" if paper_scale else src.get("run", "scale", str, "desk")
    if scale not in SCALES:
        raise src.error("run", "scale", f"must be one of {SCALES}")
    base = OIConfig.paper() if scale == "paper" else OIConfig.desk()

    def num(section, key, kind, default, check=None, message=""):
        value = src.get(section, key, kind, default)
        if check is not None and value is not None and not check(value):
            raise src.error(section, key, message)
        return value

    positive = (lambda v: v > 0, "must be positive")

    Q = num("run", "q", int, base.Q, lambda v: v >= 1, "must be >= 1")
    conventional_Q = num("run", "conventional_q", int, base.conventional_Q, lambda v: v >= 1,
                         "must be >= 1")
    file_workers = num("run", "workers", int, 1, lambda v: v >= 1, "must be >= 1")
    file_seed = num("run", "seed", int, 0, lambda v: 0 <= v < 2**64, "must be an unsigned 64-bit integer")

    T = num("pulse", "t", float, base.T, *positive)
    s = num("pulse", "s", float, base.s, *positive)
    a_lo = num("pulse", "amplitude_min", float, base.amplitude_bounds[0])
    a_hi = num("pulse", "amplitude_max", float, base.amplitude_bounds[1])
    if not a_lo < a_hi:
        raise src.error("pulse", "amplitude_max", "must exceed amplitude_min")
    t_lo = num("pulse", "phase_min", float, base.phase_bounds[0])
    t_hi = num("pulse", "phase_max", float, base.phase_bounds[1])
    if not t_lo < t_hi:
        raise src.error("pulse", "phase_max", "must exceed phase_min")

    eps_obs = num("noise", "eps_obs", float, base.eps_obs, lambda v: v >= 0, "must be non-negative")
    eps_fld = num("noise", "eps_fld", float, base.noise.eps_fld, lambda v: v >= 0,
                  "must be non-negative")
    replicates = num("noise", "replicates", int, base.noise.replicates, lambda v: v >= 1,
                     "must be >= 1")
    floor = num("noise", "population_floor", float, base.population_floor, *positive)

    samples = num("map", "samples", int, base.map_samples, lambda v: v >= 2, "must be >= 2 (S >= 2)")
    domain_rel = num("map", "domain_rel", float, base.domain_rel, lambda v: 0 < v < 1,
                     "must lie in (0, 1)")
    zero_hw = num("map", "zero_halfwidth", float, base.zero_halfwidth, *positive)
    rms = num("map", "rms_threshold", float, base.rms_threshold, *positive)
    validate = num("map", "validate_points", int, base.validate_points, lambda v: v >= 0,
                   "must be non-negative")

    outer = _ga(src, "outer_ga", base.outer_ga)
    inner_ga = _ga(src, "inner_ga", base.inversion.ga)
    inv = base.inversion
    n_family = num("inner_ga", "n_family", int, inv.n_family, lambda v: v >= 1, "must be >= 1")
    dedup = num("inner_ga", "dedup_dist", float, inv.dedup_dist, lambda v: v >= 0,
                "must be non-negative")
    lam = num("inner_ga", "lambda_reg", float, inv.lambda_reg, lambda v: v >= 0,
              "must be non-negative")
    init_fraction = num("inner_ga", "init_fraction", float, inv.init_fraction,
                        lambda v: 0 < v <= 1, "must lie in (0, 1]")
    alpha_end = num("cost", "alpha_end", float, base.alpha.end, *positive)
    alpha = Ramp(num("cost", "alpha_start", float, base.alpha.start,
                     lambda v: 0 < v <= alpha_end, "must be positive and <= alpha_end"), alpha_end)
    beta_end = num("cost", "beta_end", float, base.beta.end, *positive)
    beta = Ramp(num("cost", "beta_start", float, base.beta.start,
                    lambda v: 0 < v <= beta_end, "must be positive and <= beta_end"), beta_end)

    scheme = num("propagation", "scheme", str, base.propagation.scheme, lambda v: v in SCHEMES,
                 f"must be one of {SCHEMES}")
    dt_max = num("propagation", "dt_max", float, base.propagation.dt_max, *positive)

    oi = replace(
        base, Q=Q, T=T, s=s, amplitude_bounds=(a_lo, a_hi), phase_bounds=(t_lo, t_hi),
        alpha=alpha, beta=beta, outer_ga=outer,
        inversion=InversionConfig(n_family=n_family, ga=inner_ga, lambda_reg=lam,
                                  dedup_dist=dedup, alpha=alpha.end, init_fraction=init_fraction),
        map_samples=samples, domain_rel=domain_rel, zero_halfwidth=zero_hw, rms_threshold=rms,
        eps_obs=eps_obs, population_floor=floor,
        noise=FieldNoiseModel(eps_fld=eps_fld, replicates=replicates),
        propagation=PropagationSettings(dt_max=dt_max, scheme=scheme),
        validate_points=validate, workers=workers or file_workers, conventional_Q=conventional_Q,
    )

    system = src.get("system", "file", str, None)
    system_file = None
    if system:
        system_file = Path(system)
        if not system_file.is_absolute():
            system_file = src.path.parent / system_file
        if not system_file.exists():
            raise src.error("system", "file", f"system file not found: {system_file}")
    out_dir = Path(out) if out is not None else Path(src.get("run", "out", str, "results"))
    try:
        truth, initial = load_system(system_file)
    except FileNotFoundError as exc:
        raise src.error("system", "file", str(exc)) from None
    if seed is not None and not 0 <= seed < 2**64:
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    return RunConfig(oi=replace(oi, initial=initial), system_file=system_file,
                     seed=file_seed if seed is None else seed, out=out_dir, scale=scale,
                     source=src.path, truth=truth, initial=initial)
