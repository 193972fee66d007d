"""Scenario configuration: JSON schema, validation and the built-in registry."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..core_numerics import UsageError
from ..free_space import MAX_OPTICAL_DEPTH
from ..optimizer import AscentConfig

SCHEMA_VERSION = 1

MODELS = ("cavity", "free_space", "crib_cavity", "crib_free")

# methods each model knows how to evaluate at a sweep point
METHODS = {
    "cavity": ("optimal", "adiabatic", "constant"),
    "free_space": ("optimal", "constant"),
    "crib_cavity": ("fast_homogeneous", "crib", "crib_ascent", "optimal"),
    "crib_free": ("fast_homogeneous", "crib", "optimal"),
}

PROFILE_SHAPES = ("two_class", "gaussian", "lorentzian", "uniform")

_ASCENT_FIELDS = {f.name for f in fields(AscentConfig)}


@dataclass
class ScenarioConfig:
    """One reproducible run.

    The sweep axis is the dimensionless product ``T * coupling * gamma``
    (``T C gamma`` for cavities, ``T d gamma`` in free space); every value
    of ``couplings`` is combined with every value of ``sweep``.

    ``initial_guesses`` are constant controls in units of ``gamma``;
    ``scaled_guesses`` are constant controls in units of ``1 / T``. Both
    lists are tried and the best result is kept.
    """

    name: str
    model: str
    couplings: list
    sweep: list
    input_shape: str = "gaussian_like"
    methods: list | None = None
    objective: str = "complete_backward"
    initial_guesses: list = field(default_factory=list)
    scaled_guesses: list = field(default_factory=lambda: [1.0, 5.0])
    jitter: float = 0.0
    optimizer: dict = field(default_factory=dict)
    profile_shape: str = "two_class"
    n_classes: int = 32
    width_scan: list = field(default_factory=lambda: [0.1, 20.0, 24])
    grid: dict = field(default_factory=dict)
    waveforms: bool = False
    output_dir: str | None = None
    seed: int = 0
    description: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    @property
    def method_list(self) -> list:
        return list(self.methods) if self.methods else list(METHODS[self.model])

    @property
    def coupling_name(self) -> str:
        return "C" if self.model in ("cavity", "crib_cavity") else "d"

    def ascent_config(self) -> AscentConfig:
        opts = {"step_growth": 2.0, "max_step_ratio": 1e8, "max_iters": 300}
        opts.update(self.optimizer)
        return AscentConfig(**opts)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise UsageError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if not self.name or any(c in self.name for c in "/\\"):
            raise UsageError("scenario name must be a non-empty plain file name")
        if self.model not in MODELS:
            raise UsageError(f"model must be one of {', '.join(MODELS)}; got {self.model!r}")
        for label, values in (("couplings", self.couplings), ("sweep", self.sweep)):
            if not isinstance(values, list) or not values:
                raise UsageError(f"{label} must be a non-empty list")
            if not all(isinstance(v, (int, float)) and np.isfinite(v) and v > 0 for v in values):
                raise UsageError(f"{label} entries must be positive numbers")
        if self.coupling_name == "d" and max(self.couplings) > MAX_OPTICAL_DEPTH:
            raise UsageError(f"optical depth above {MAX_OPTICAL_DEPTH} is not supported")
        unknown = set(self.method_list) - set(METHODS[self.model])
        if unknown:
            raise UsageError(f"methods {sorted(unknown)} are not available for model {self.model!r}")
        if self.objective not in ("storage", "complete_backward"):
            raise UsageError(f"objective must be 'storage' or 'complete_backward'; got {self.objective!r}")
        if self.input_shape not in ("gaussian_like", "square") and not Path(self.input_shape).exists():
            raise UsageError(f"input shape {self.input_shape!r} is neither a known shape nor an existing file")
        if not self.initial_guesses and not self.scaled_guesses and "optimal" in self.method_list:
            raise UsageError("the optimal method needs at least one initial guess")
        if any(not g > 0 for g in list(self.initial_guesses) + list(self.scaled_guesses)):
            raise UsageError("initial guesses must be positive")
        if self.jitter < 0:
            raise UsageError("jitter must be nonnegative")
        bad = set(self.optimizer) - _ASCENT_FIELDS
        if bad:
            raise UsageError(f"unknown optimizer settings {sorted(bad)}")
        self.ascent_config()
        if self.profile_shape not in PROFILE_SHAPES:
            raise UsageError(f"profile_shape must be one of {', '.join(PROFILE_SHAPES)}")
        lo, hi, n = self.width_scan
        if not (0 < lo < hi and int(n) >= 2):
            raise UsageError("width_scan must be [low, high, count] with 0 < low < high and count >= 2")
        bad = set(self.grid) - {"nodes_per_unit", "n_t", "n_z"}
        if bad:
            raise UsageError(f"unknown grid settings {sorted(bad)}")
        if any(not v > 0 for v in self.grid.values()):
            raise UsageError("grid settings must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ScenarioConfig":
        data = self.to_dict()
        data.update(changes)
        return ScenarioConfig(**data)


def from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise UsageError("configuration must be a JSON object")
    if "schema_version" not in data:
        raise UsageError("configuration lacks schema_version")
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown configuration keys {sorted(unknown)}")
    missing = {"name", "model", "couplings", "sweep"} - set(data)
    if missing:
        raise UsageError(f"configuration lacks {sorted(missing)}")
    return ScenarioConfig(**copy.deepcopy(data))


def load(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        if path.suffix == "" and str(path) in REGISTRY:
            return registry_config(str(path))
        raise UsageError(f"configuration file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None
    return from_dict(data)


def log_sweep(lo: float, hi: float, per_decade: int = 12) -> list:
    """Logarithmically spaced sweep with ``per_decade`` points per decade."""
    n = int(round(np.log10(hi / lo) * per_decade)) + 1
    return [float(v) for v in np.geomspace(lo, hi, n)]


REGISTRY = {
    "fig2a": dict(
        description="Cavity controls, C = 10, T = 50: optimal controls for four initial guesses",
        model="cavity", couplings=[10], sweep=[500.0], methods=["optimal", "adiabatic"],
        initial_guesses=[0.2, 0.5, 1.0, 1.5], scaled_guesses=[], waveforms=True,
    ),
    "fig2b": dict(
        description="Cavity controls, C = 10, T = 0.5: optimal controls for four initial guesses",
        model="cavity", couplings=[10], sweep=[5.0], methods=["optimal", "adiabatic"],
        initial_guesses=[2.0, 5.0, 8.0, 11.0], scaled_guesses=[], waveforms=True,
    ),
    "fig3a": dict(
        description="Cavity total efficiency vs T C gamma, Gaussian-like input, C = 1, 10, 100",
        model="cavity", couplings=[1, 10, 100], sweep=log_sweep(0.1, 1000.0), methods=["optimal", "adiabatic"],
    ),
    "fig3b": dict(
        description="Cavity total efficiency vs T C gamma, square input, C = 1, 10, 100",
        model="cavity", couplings=[1, 10, 100], sweep=log_sweep(0.1, 1000.0), input_shape="square",
        methods=["optimal", "adiabatic"],
    ),
    "fig4a": dict(
        description="Free-space controls, d = 10, T = 50, storage then complete backward retrieval",
        model="free_space", couplings=[10], sweep=[500.0], methods=["optimal"],
        initial_guesses=[0.2, 0.5, 1.0, 1.5], scaled_guesses=[], waveforms=True,
    ),
    "fig4b": dict(
        description="Free-space controls, d = 10, T = 0.5, storage then complete backward retrieval",
        model="free_space", couplings=[10], sweep=[5.0], methods=["optimal"],
        initial_guesses=[1.0, 3.0, 5.0, 7.0], scaled_guesses=[], waveforms=True,
    ),
    "fig5": dict(
        description="Free-space total efficiency vs T d gamma for d = 1, 10, 100",
        model="free_space", couplings=[1, 10, 100], sweep=log_sweep(0.1, 1000.0), methods=["optimal"],
    ),
    "fig6": dict(
        description="Cavity C = 50: fast homogeneous vs two-class CRIB vs optimal homogeneous, with CRIB width",
        model="crib_cavity", couplings=[50], sweep=log_sweep(0.1, 100.0, 6), profile_shape="two_class",
    ),
    "fig7": dict(
        description="Free space d = 100: fast homogeneous vs Gaussian CRIB vs optimal homogeneous",
        model="crib_free", couplings=[100], sweep=log_sweep(1.0, 100.0, 4), profile_shape="gaussian",
        width_scan=[0.2, 10.0, 10],
    ),
}


def registry_config(name: str) -> ScenarioConfig:
    if name not in REGISTRY:
        raise UsageError(f"unknown scenario {name!r}; known: {', '.join(REGISTRY)}")
    return from_dict({"schema_version": SCHEMA_VERSION, "name": name, **REGISTRY[name]})
