"""Experiment configuration: a flat INI file with four sections.

Example::

    [experiment]
    id = kinetic-tv
    x0 = 0, 0
    T = 1
    deltas = 2^-6, 2^-7, 2^-8, 2^-9, 2^-10
    theta = 0.25
    bandwidth = 0.75

    [scheme]
    name = kinetic
    b = 0, -24, 4
    s = 1, 0, 0.5

    [law]
    name = uniform-mixture

    [run]
    n_paths = 100000
    seed = 1
    threads = 1
    out = runs/kinetic-tv

Unknown sections or keys are errors.  Scheme and law parameters are
checked against the builtin factory signatures.
"""

from __future__ import annotations

import configparser
import inspect
import io
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

from ..errors import ConfigError
from ..noise import LAWS
from ..scheme import SCHEMES, n_steps

EXPERIMENTS = ("simulate", "hormander", "ibp-check", "kinetic-tv", "density", "iterated-clt", "localization")

# experiment-section keys and their parsers
_LIST = "list"


def parse_number(text: str) -> float:
    """Floats, fractions ``a/b`` and powers ``b^e`` (e.g. ``2^-10``)."""
    s = text.strip()
    try:
        if "^" in s:
            base, exp = s.split("^", 1)
            return float(Fraction(base.strip()) ** int(exp.strip()))
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {text!r}") from None


def parse_list(text: str) -> list[float]:
    items = [t for t in text.replace(";", ",").split(",") if t.strip()]
    return [parse_number(t) for t in items]


def _format_number(v) -> str:
    return repr(float(v))


@dataclass
class ExperimentConfig:
    experiment: str
    scheme: str = "random-walk"
    scheme_params: dict = field(default_factory=dict)
    law: str = "gaussian"
    law_params: dict = field(default_factory=dict)
    x0: list = field(default_factory=lambda: [0.0])
    T: float = 1.0
    deltas: list = field(default_factory=lambda: [2.0**-4])
    theta: float = 0.25
    L: int = 1
    n_paths: int = 10_000
    seed: int = 1
    out: str = "out"
    threads: int = 1
    # experiment-specific options
    bandwidth: float | None = None
    reference_factor: int = 8
    reference_law: str = "gaussian"
    whiten: bool = True
    grid: list = field(default_factory=list)
    eta1: float | None = None
    eta2: float | None = None
    beta: list = field(default_factory=list)
    max_memory_mb: float = 2048.0
    write_paths: int = 16

    # ---- validation -------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment.id: unknown experiment {self.experiment!r}; known: {list(EXPERIMENTS)}")
        _check_params("scheme", self.scheme, SCHEMES, self.scheme_params)
        _check_params("law", self.law, LAWS, self.law_params)
        if self.reference_law not in LAWS:
            raise ConfigError(f"experiment.reference_law: unknown law {self.reference_law!r}")
        if not self.T > 0:
            raise ConfigError("experiment.T: must be positive")
        if not self.deltas:
            raise ConfigError("experiment.deltas: empty ladder")
        for i, dl in enumerate(self.deltas):
            try:
                n_steps(self.T, dl)
            except ValueError as e:
                raise ConfigError(f"experiment.deltas[{i}]: {e}") from None
        if self.experiment == "kinetic-tv":
            fine = min(self.deltas) / self.reference_factor
            try:
                n_steps(self.T, fine)
            except ValueError as e:
                raise ConfigError(f"experiment.reference_factor: {e}") from None
        if self.n_paths < 1:
            raise ConfigError("run.n_paths: must be >= 1")
        if self.threads < 1:
            raise ConfigError("run.threads: must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("run.seed: must be an unsigned 64-bit integer")
        if self.theta <= 0:
            raise ConfigError("experiment.theta: must be positive")
        if self.L < 0:
            raise ConfigError("experiment.L: must be >= 0")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("experiment.bandwidth: must be positive")
        for i, g in enumerate(self.grid):
            if len(g) != 3 or g[2] < 1 or int(g[2]) != g[2]:
                raise ConfigError(f"experiment.grid[{i}]: expected lo:hi:count")
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw).validate()

    # ---- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        exp = {"id": self.experiment, "x0": ", ".join(map(_format_number, self.x0)), "T": _format_number(self.T),
               "deltas": ", ".join(map(_format_number, self.deltas)), "theta": _format_number(self.theta),
               "L": str(self.L), "reference_factor": str(self.reference_factor),
               "reference_law": self.reference_law, "whiten": str(self.whiten).lower(),
               "max_memory_mb": _format_number(self.max_memory_mb), "write_paths": str(self.write_paths)}
        for k in ("bandwidth", "eta1", "eta2"):
            if getattr(self, k) is not None:
                exp[k] = _format_number(getattr(self, k))
        if self.grid:
            exp["grid"] = "; ".join(":".join(_format_number(v) for v in g) for g in self.grid)
        if self.beta:
            exp["beta"] = ", ".join(str(int(b)) for b in self.beta)
        cp["experiment"] = exp
        cp["scheme"] = {"name": self.scheme, **{k: _fmt_param(v) for k, v in self.scheme_params.items()}}
        cp["law"] = {"name": self.law, **{k: _fmt_param(v) for k, v in self.law_params.items()}}
        cp["run"] = {"n_paths": str(self.n_paths), "seed": str(self.seed), "threads": str(self.threads),
                     "out": self.out}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt_param(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(map(_format_number, v))
    if isinstance(v, int):
        return str(v)
    return _format_number(v)


def _check_params(section, name, registry, params):
    if name not in registry:
        raise ConfigError(f"{section}.name: unknown {section} {name!r}; known: {sorted(registry)}")
    sig = inspect.signature(registry[name])
    for k in params:
        if k not in sig.parameters:
            raise ConfigError(f"{section}.{k}: unknown parameter for {name!r}; allowed: {list(sig.parameters)}")


def _coerce_param(section, name, registry, key, text):
    if name not in registry:
        raise ConfigError(f"{section}.name: unknown {section} {name!r}; known: {sorted(registry)}")
    sig = inspect.signature(registry[name])
    if key not in sig.parameters:
        raise ConfigError(f"{section}.{key}: unknown parameter for {name!r}; allowed: {list(sig.parameters)}")
    default = sig.parameters[key].default
    try:
        if isinstance(default, (tuple, list)):
            return tuple(parse_list(text))
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        return parse_number(text)
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: {e}") from None


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_grid(text):
    out = []
    for part in text.split(";"):
        if part.strip():
            out.append([parse_number(v) for v in part.split(":")])
    return out


_EXPERIMENT_KEYS = {
    "id": ("experiment", str),
    "x0": ("x0", parse_list),
    "t": ("T", parse_number),
    "deltas": ("deltas", parse_list),
    "theta": ("theta", parse_number),
    "l": ("L", int),
    "bandwidth": ("bandwidth", parse_number),
    "reference_factor": ("reference_factor", int),
    "reference_law": ("reference_law", str),
    "whiten": ("whiten", _parse_bool),
    "grid": ("grid", _parse_grid),
    "eta1": ("eta1", parse_number),
    "eta2": ("eta2", parse_number),
    "beta": ("beta", lambda s: [int(v) for v in s.split(",") if v.strip()]),
    "max_memory_mb": ("max_memory_mb", parse_number),
    "write_paths": ("write_paths", int),
}
_RUN_KEYS = {"n_paths": int, "seed": int, "threads": int, "out": str}


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Parse INI text.  ``experiment`` fills in (or must agree with) ``experiment.id``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    for sec in cp.sections():
        if sec not in ("experiment", "scheme", "law", "run"):
            raise ConfigError(f"{sec}: unknown section")
    kw: dict = {}
    if cp.has_section("experiment"):
        for k, v in cp["experiment"].items():
            if k not in _EXPERIMENT_KEYS:
                raise ConfigError(f"experiment.{k}: unknown key")
            attr, conv = _EXPERIMENT_KEYS[k]
            try:
                kw[attr] = conv(v.strip())
            except ValueError as e:
                raise ConfigError(f"experiment.{k}: {e}") from None
    if experiment is not None:
        if kw.get("experiment", experiment) != experiment:
            raise ConfigError(f"experiment.id: config names {kw['experiment']!r} but {experiment!r} was requested")
        kw["experiment"] = experiment
    if "experiment" not in kw:
        raise ConfigError("experiment.id: missing")
    base = default_config(kw["experiment"]) if kw["experiment"] in EXPERIMENTS else ExperimentConfig(kw["experiment"])
    for sec, reg in (("scheme", SCHEMES), ("law", LAWS)):
        if not cp.has_section(sec):
            continue
        items = dict(cp[sec].items())
        name = items.pop("name", None)
        if name is None:
            raise ConfigError(f"{sec}.name: missing")
        name = name.strip()
        kw[sec] = name
        kw[f"{sec}_params"] = {k: _coerce_param(sec, name, reg, k, v) for k, v in items.items()}
    if cp.has_section("run"):
        for k, v in cp["run"].items():
            if k not in _RUN_KEYS:
                raise ConfigError(f"run.{k}: unknown key")
            try:
                kw[k] = _RUN_KEYS[k](v.strip())
            except ValueError as e:
                raise ConfigError(f"run.{k}: {e}") from None
    return replace(base, **kw).validate()


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, experiment)


def default_config(experiment: str) -> ExperimentConfig:
    """Builtin configurations, one per experiment."""
    ladder = lambda a, b: [2.0**-k for k in range(a, b + 1)]
    base = dict(experiment=experiment)
    if experiment == "kinetic-tv":
        base.update(scheme="kinetic", scheme_params={"b": (0.0, -24.0, 4.0), "s": (1.0, 0.0, 0.5)},
                    law="uniform-mixture", x0=[0.0, 0.0], T=1.0, deltas=ladder(6, 10), bandwidth=0.75,
                    n_paths=100_000, L=1)
    elif experiment == "iterated-clt":
        base.update(scheme="iterated-sum", scheme_params={"order": 1}, law="uniform-mixture", x0=[0.0, 0.0],
                    T=1.0, deltas=[2.0**-12, 2.0**-15], n_paths=50_000, L=0)
    elif experiment == "ibp-check":
        base.update(scheme="kinetic", scheme_params={"b": (0.1, -1.0, 0.5), "s": (1.0, 0.3, 0.25)},
                    law="gaussian", x0=[0.3, -0.2], T=1.0, deltas=[1 / 16], n_paths=20_000, eta1=6.0, eta2=2.2)
    elif experiment == "density":
        base.update(scheme="random-walk", law="gaussian", x0=[0.0], T=1.0, deltas=[1 / 16], n_paths=100_000,
                    grid=[[-6.0, 6.0, 241]], beta=[1])
    elif experiment == "localization":
        base.update(scheme="random-walk", law="bounded-uniform", x0=[0.0], T=0.25, deltas=ladder(9, 11),
                    n_paths=4096, L=0)
    elif experiment == "hormander":
        base.update(scheme="kinetic", scheme_params={"b": (0.0, 0.0, 0.0), "s": (0.0, 1.0, 0.0)}, x0=[0.0, 0.0],
                    grid=[[-1.0, 1.0, 5], [-1.0, 1.0, 3]], L=1)
    elif experiment == "simulate":
        base.update(scheme="kinetic", x0=[0.0, 0.0], T=1.0, deltas=[1 / 16], n_paths=1000)
    return ExperimentConfig(**base)
