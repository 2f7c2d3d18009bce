"""Run configuration: one JSON file with sections mirroring RunConfig.

Every section is a frozen dataclass; unknown keys, wrong types and
out-of-range values raise ConfigError at load time.  ``dumps`` writes the
canonical form (sorted keys, two-space indent), so parse -> dumps -> parse
is the identity and the canonical text has a stable hash.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError, InvalidParameterError
from ..model import make_model
from ..paths import TimeGrid

__all__ = [
    "ModelSection",
    "GridSection",
    "McSection",
    "SolverSection",
    "NormSection",
    "ExperimentSection",
    "RunConfig",
    "load_config",
    "parse_config",
]

XI_LAWS = {
    "normal": ("mean", "std"),
    "dirac": ("value",),
    "atoms": ("atoms", "probs"),
    "uniform": ("low", "high"),
}
ETA_KINDS = {
    "const": ("value",),
    "normal": ("mean", "std"),
    "indicator": ("atom",),
}


def _check_spec(spec, table, what):
    if not isinstance(spec, dict):
        raise ConfigError(f"{what} must be an object")
    key = "law" if what == "xi" else "kind"
    name = spec.get(key)
    if name not in table:
        raise ConfigError(f"{what}.{key} must be one of {sorted(table)}, got {name!r}")
    want = set(table[name]) | {key}
    if set(spec) != want:
        raise ConfigError(f"{what} ({name}) needs keys {sorted(want)}, got {sorted(spec)}")

    def num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    for k, v in spec.items():
        if k != key and not (num(v) or (isinstance(v, list) and all(num(u) for u in v))):
            raise ConfigError(f"{what}.{k} must be a number or a list of numbers")


@dataclass(frozen=True)
class ModelSection:
    kind: str = "lq"
    params: dict = field(default_factory=lambda: {"alpha": 1.0, "beta": 0.25, "r": 0.1})

    def build(self):
        return make_model(self.kind, **self.params)

    def validate(self):
        if not isinstance(self.params, dict):
            raise ConfigError("model.params must be an object")
        try:
            self.build()
        except InvalidParameterError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class GridSection:
    T: float = 40.0
    dt: float = 0.01

    def validate(self):
        try:
            TimeGrid(self.T, self.dt)
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None


@dataclass(frozen=True)
class McSection:
    N: int = 10_000
    seed: int = 0
    xi: dict = field(default_factory=lambda: {"law": "normal", "mean": 0.0, "std": 1.0})

    def validate(self):
        if self.N < 1:
            raise ConfigError("mc.N must be positive")
        if self.seed < 0:
            raise ConfigError("mc.seed must be non-negative")
        _check_spec(self.xi, XI_LAWS, "xi")
        law = self.xi["law"]
        if law == "normal" and not self.xi["std"] >= 0:
            raise ConfigError("xi.std must be non-negative")
        if law == "uniform" and not self.xi["high"] > self.xi["low"]:
            raise ConfigError("xi.high must exceed xi.low")
        if law == "atoms":
            a, p = self.xi["atoms"], self.xi["probs"]
            if not (isinstance(a, list) and isinstance(p, list) and len(a) == len(p) and a):
                raise ConfigError("xi.atoms and xi.probs must be lists of equal positive length")
            if any(v < 0 for v in p) or abs(sum(p) - 1.0) > 1e-9:
                raise ConfigError("xi.probs must be non-negative and sum to 1")


@dataclass(frozen=True)
class SolverSection:
    mode: str = "mfg"  # or "general" (continuation on the LQ-cast problem)
    picard_tol: float = 1e-5
    max_iters: int = 60
    theta: float = 0.5
    field_theta: float = 0.5
    anderson_memory: int = 10
    basis_degree: int = 3
    n_tilde: int = 256
    batch_size: int = 1  # members per batch; memory grows linearly with it
    workers: int = 1
    terminal: str = "zero"
    lambda_steps: list | None = None

    def validate(self):
        if self.mode not in ("mfg", "general"):
            raise ConfigError("solver.mode must be 'mfg' or 'general'")


@dataclass(frozen=True)
class NormSection:
    K: float | None = None  # None: use the model's discount r

    def validate(self):
        if self.K is not None and not self.K > 0:
            raise ConfigError("norm.K must be positive")


@dataclass(frozen=True)
class ExperimentSection:
    x: list = field(default_factory=lambda: [1.0])
    xtilde: list = field(default_factory=lambda: [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0])
    deltas: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    n_list: list = field(default_factory=lambda: [4, 8, 16])
    checkpoints: list = field(default_factory=lambda: [1.0, 5.0, 10.0])
    eta: dict = field(default_factory=lambda: {"kind": "const", "value": 1.0})
    h: float = 0.05  # step of the central difference of V in x
    seed_b: int | None = None  # second seed of the uniqueness test (default seed + 1)
    n_pairs: int = 10  # frozen-input pairs of the contraction diagnostic
    with_value: bool = False  # fdcheck: also difference V itself
    series_every: int = 10  # row stride of series.csv

    def validate(self):
        for name in ("x", "xtilde", "deltas", "n_list", "checkpoints"):
            v = getattr(self, name)
            if not isinstance(v, list) or not v:
                raise ConfigError(f"experiment.{name} must be a non-empty list")
        if any(d <= 0 for d in self.deltas) or any(b >= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ConfigError("experiment.deltas must be positive and decreasing")
        if any(int(n) != n or n < 1 for n in self.n_list) or any(b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            raise ConfigError("experiment.n_list must be increasing positive integers")
        if any(t < 0 for t in self.checkpoints):
            raise ConfigError("experiment.checkpoints must be non-negative")
        _check_spec(self.eta, ETA_KINDS, "eta")
        if not self.h > 0:
            raise ConfigError("experiment.h must be positive")
        if self.n_pairs < 1 or self.series_every < 1:
            raise ConfigError("experiment.n_pairs and series_every must be positive")


_SECTIONS = {
    "model": ModelSection,
    "grid": GridSection,
    "mc": McSection,
    "solver": SolverSection,
    "norm": NormSection,
    "experiment": ExperimentSection,
}

# JSON types accepted per annotation; ints are accepted where floats are expected
_TYPES = {
    "str": (str,),
    "float": (int, float),
    "int": (int,),
    "bool": (bool,),
    "dict": (dict,),
    "list": (list,),
    "float | None": (int, float, type(None)),
    "int | None": (int, type(None)),
    "list | None": (list, type(None)),
}


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(data) - set(known))
    if extra:
        raise ConfigError(f"unknown keys in section {name!r}: {extra}")
    kw = {}
    for key, val in data.items():
        ok = _TYPES[known[key].type]
        # bool is an int subclass; only accept it where a bool is expected
        if not isinstance(val, ok) or (isinstance(val, bool) and bool not in ok):
            raise ConfigError(f"{name}.{key} has type {type(val).__name__}, expected {known[key].type}")
        if known[key].type == "float" and isinstance(val, int):
            val = float(val)
        kw[key] = val
    sec = cls(**kw)
    sec.validate()
    return sec


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    mc: McSection = field(default_factory=McSection)
    solver: SolverSection = field(default_factory=SolverSection)
    norm: NormSection = field(default_factory=NormSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self):
        for name in _SECTIONS:
            getattr(self, name).validate()
        if max(self.experiment.checkpoints) > self.grid.T:
            raise ConfigError(f"experiment.checkpoints must lie in [0, T={self.grid.T}]")
        try:
            self.solver_config()
        except InvalidParameterError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        extra = sorted(set(data) - set(_SECTIONS))
        if extra:
            raise ConfigError(f"unknown sections: {extra}")
        return cls(**{k: _section(_SECTIONS[k], v, k) for k, v in data.items()})

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def hash(self) -> str:
        """sha256 of the canonical text without execution-only settings.

        ``solver.workers`` changes how work is scheduled but not the
        results, so it is left out and reports from runs that differ only
        in worker count carry the same hash.
        """
        d = self.to_dict()
        del d["solver"]["workers"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["mc"]["seed"] = int(seed)
        return RunConfig.from_dict(d)

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with some section entries replaced, e.g. mc={"N": 500}."""
        d = self.to_dict()
        for name, upd in sections.items():
            if name not in d:
                raise ConfigError(f"unknown section {name!r}")
            d[name].update(upd)
        return RunConfig.from_dict(d)

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.grid.T, self.grid.dt)

    def solver_config(self, seed: int | None = None, N: int | None = None):
        from ..solver import SolverConfig

        s = self.solver
        return SolverConfig(
            self.time_grid,
            N=self.mc.N if N is None else N,
            seed=self.mc.seed if seed is None else seed,
            basis_degree=s.basis_degree,
            picard_tol=s.picard_tol,
            max_iters=s.max_iters,
            theta=s.theta,
            field_theta=s.field_theta,
            anderson_memory=s.anderson_memory,
            lambda_steps=None if s.lambda_steps is None else tuple(s.lambda_steps),
            K=self.norm.K,
            n_tilde=s.n_tilde,
            batch_size=s.batch_size,
            workers=s.workers,
            terminal=s.terminal,
        )


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(data)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
