"""
Problem configuration loading utilities.

A problem config is a JSON document: plant dynamics as polynomial strings
over declared variables, an optional IQC block, degree and iteration
settings, solver options and a validation budget.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .certify import SynthesisConfig
from .constants import DEFAULT_DT, DEFAULT_MC_SAMPLES, HJ_DEFAULT_GRID, TIME_VARIABLE
from .errors import ConfigError, PolynomialParseError
from .lti_filters import Hardness, IqcKind, build_iqc
from .poly_core import PolynomialMatrix, parse_polynomial
from .sdp_backend import SolverOptions
from .system_builder import NominalSystem, augment_actuator, extend
from .validate import ValidationBudget

logger = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class PlantBlock(_Strict):
    """x' = f(x) + g(x) u, v = h(x, w, d), target {p_x <= 0}, inputs {P u <= b}"""

    name: str = 'plant'
    states: list[str]
    inputs: list[str]
    disturbances: list[str] = Field(default_factory=list)
    perturbation_outputs: list[str] = Field(default_factory=list)
    constants: dict[str, float] = Field(default_factory=dict)
    f: list[str]
    g: list[list[str]]
    h: list[str] = Field(default_factory=list)
    target: str
    T: float = Field(gt=0)
    R: float = Field(0.0, ge=0)
    P: list[list[float]]
    b: list[float]

    @model_validator(mode='after')
    def _check_names(self):
        declared = self.states + self.inputs + self.disturbances + self.perturbation_outputs
        reserved = {TIME_VARIABLE}
        if len(set(declared)) != len(declared):
            raise ValueError("variable names must be unique")
        clash = (set(declared) | set(self.constants)) & reserved
        if clash:
            raise ValueError(f"'{TIME_VARIABLE}' is reserved for time")
        if set(declared) & set(self.constants):
            raise ValueError("constants must not shadow declared variables")
        if len(self.f) != len(self.states):
            raise ValueError(f"f needs one entry per state ({len(self.states)})")
        if len(self.g) != len(self.states) or any(len(row) != len(self.inputs) for row in self.g):
            raise ValueError(f"g must be {len(self.states)} x {len(self.inputs)}")
        if len(self.P) != len(self.b) or any(len(row) != len(self.inputs) for row in self.P):
            raise ValueError("P must have one column per input and one row per entry of b")
        if self.disturbances and self.R <= 0:
            raise ValueError("R must be positive when disturbances are declared")
        return self


class IqcBlock(_Strict):
    kind: IqcKind
    hardness: Optional[Hardness] = None
    sigma: Optional[float] = Field(None, gt=0)
    alpha: Optional[float] = None
    beta: Optional[float] = None
    d: int = Field(1, ge=0)
    m: float = Field(10.0, gt=0)
    lambda_degree: int = Field(2, ge=0)
    channels: list[str] = Field(default_factory=list)

    @model_validator(mode='after')
    def _check_parameters(self):
        if self.kind in (IqcKind.D, IqcKind.DG, IqcKind.NL_GAIN) and self.sigma is None:
            raise ValueError(f"{self.kind.value} IQC needs sigma")
        if self.kind == IqcKind.SECTOR:
            if self.alpha is None or self.beta is None:
                raise ValueError("sector IQC needs alpha and beta")
            if self.alpha > self.beta:
                raise ValueError("sector IQC needs alpha <= beta")
        if self.kind == IqcKind.DG and self.hardness == Hardness.HARD:
            raise ValueError("DG multipliers only give soft IQCs")
        if self.lambda_degree % 2:
            raise ValueError("lambda_degree must be even")
        return self


class DegreeSettings(_Strict):
    V: int = 2
    k: Optional[int] = Field(None, ge=0)
    k_tilde: Optional[int] = Field(None, ge=0)
    multipliers: dict[str, int] = Field(default_factory=dict)


class IterationSettings(_Strict):
    n_iter: int = Field(20, ge=1)
    gamma_tol: float = Field(1e-4, gt=0)
    bisect_tol: float = Field(1e-4, gt=0)
    stall_patience: int = Field(2, ge=1)
    epsilon: float = Field(1e-6, ge=0)
    margin_cap: float = Field(1.0, gt=0)
    time_varying: bool = True


class InitializationSettings(_Strict):
    gamma0: float = Field(1.0, gt=0)
    lqr_Q: Optional[list[list[float]]] = None
    lqr_R: Optional[list[list[float]]] = None
    equilibrium_guess: dict[str, float] = Field(default_factory=dict)
    fixed_inputs: dict[str, float] = Field(default_factory=dict)
    scaling_directions: int = Field(2000, ge=1)


class OracleSettings(_Strict):
    """Grid Hamilton-Jacobi cross-check for two-state plants"""

    bounds: list[list[float]]
    n_grid: int = Field(HJ_DEFAULT_GRID, ge=3)
    parameter_values: list[float] = Field(default_factory=lambda: [0.0])
    dilation: int = Field(2, ge=0)
    refinements: int = Field(0, ge=0)

    @field_validator('bounds')
    @classmethod
    def _check_bounds(cls, value):
        if len(value) != 2 or any(len(pair) != 2 or pair[0] >= pair[1] for pair in value):
            raise ValueError("oracle bounds need two increasing (lower, upper) pairs")
        return value


class ValidationSettings(_Strict):
    box: list[list[float]]
    n_points: int = Field(100, ge=1)
    n_perturbations: int = Field(10, ge=1)
    n_disturbances: int = Field(3, ge=1)
    dt: float = Field(DEFAULT_DT, gt=0)
    n_samples: int = Field(DEFAULT_MC_SAMPLES, ge=1)
    oracle: Optional[OracleSettings] = None

    @field_validator('box')
    @classmethod
    def _check_box(cls, value):
        if any(len(pair) != 2 or pair[0] >= pair[1] for pair in value):
            raise ValueError("box entries must be increasing (lower, upper) pairs")
        return value


class ProblemConfig(_Strict):
    name: str
    description: str = ''
    plant: PlantBlock
    iqc: Optional[IqcBlock] = None
    degrees: DegreeSettings = Field(default_factory=DegreeSettings)
    iteration: IterationSettings = Field(default_factory=IterationSettings)
    initialization: InitializationSettings = Field(default_factory=InitializationSettings)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    validation: Optional[ValidationSettings] = None
    audit: bool = True
    seed: int = 0

    @model_validator(mode='after')
    def _check_cross_references(self):
        plant = self.plant
        channels = self.iqc.channels if self.iqc is not None else []
        for name in channels:
            if name not in plant.inputs:
                raise ValueError(f"IQC channel '{name}' is not a declared input")
        if self.iqc is not None and len(plant.h) == 0:
            raise ValueError("an IQC needs the perturbation input h")
        if self.iqc is None and plant.perturbation_outputs:
            raise ValueError("perturbation outputs are declared but no IQC is given")
        if self.validation is not None and len(self.validation.box) != len(plant.states):
            raise ValueError(f"validation box needs {len(plant.states)} (lower, upper) pairs")
        for name in self.initialization.equilibrium_guess:
            if name not in plant.states + plant.inputs:
                raise ValueError(f"equilibrium guess names unknown variable '{name}'")
        for name in self.initialization.fixed_inputs:
            if name not in plant.inputs:
                raise ValueError(f"fixed input '{name}' is not a declared input")
        return self


def _locate(text, snippet, offset=0):
    """1-based (line, column) of ``snippet`` in ``text`` shifted by ``offset`` characters"""
    start = text.find(snippet)
    if start < 0:
        return None, None
    position = start + offset
    line = text.count('\n', 0, position) + 1
    return line, position - text.rfind('\n', 0, position)


class ConfigLoader:
    """Loads a problem config and builds the domain objects it describes"""

    def __init__(self, config=None, source=None):
        self.config = config
        self.source = source
        self._text = None

    @classmethod
    def from_path(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loader = cls(source=str(path))
        loader.loads(path.read_text())
        return loader

    @classmethod
    def from_dict(cls, data, source='<dict>'):
        loader = cls(source=source)
        loader.loads(json.dumps(data, indent=2))
        return loader

    def loads(self, text):
        """Parse and validate a JSON document; every polynomial is parsed up front"""
        self._text = text
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.source}: invalid JSON: {e.msg}", e.lineno, e.colno)
        try:
            self.config = ProblemConfig.model_validate(data)
        except ValidationError as e:
            error = e.errors()[0]
            location = '.'.join(str(part) for part in error['loc']) or '<root>'
            raise ConfigError(f"{self.source}: {location}: {error['msg']}")
        self.nominal_system()
        logger.info(f"Loaded problem '{self.config.name}' from {self.source}")
        return self.config

    def dump(self):
        """Canonical JSON text; loading it again gives an equal config"""
        return self.config.model_dump_json(indent=2, exclude_none=True)

    # Builders

    @property
    def declared(self):
        plant = self.config.plant
        return tuple(plant.states + plant.inputs + plant.disturbances + plant.perturbation_outputs)

    def _parse(self, text, field_name):
        try:
            return parse_polynomial(text, self.declared, constants=self.config.plant.constants)
        except PolynomialParseError as e:
            line, column = (None, None)
            if self._text is not None:
                line, column = _locate(self._text, json.dumps(text)[1:-1], e.column - 1)
            raise ConfigError(f"{self.source}: plant.{field_name}: {e}", line, column)

    def _column(self, entries, field_name):
        return PolynomialMatrix.column([self._parse(e, f"{field_name}[{i}]") for i, e in enumerate(entries)])

    def nominal_system(self):
        plant = self.config.plant
        f = self._column(plant.f, 'f')
        g = PolynomialMatrix([[self._parse(e, f"g[{i}][{j}]") for j, e in enumerate(row)]
                              for i, row in enumerate(plant.g)])
        h = self._column(plant.h, 'h') if plant.h else None
        target = self._parse(plant.target, 'target')
        stray = [name for name in target.occurring_variables() if name not in plant.states]
        if stray:
            raise ConfigError(f"{self.source}: plant.target may only use states, found {stray}")
        try:
            G = NominalSystem(plant.states, plant.inputs, f, g, target, plant.T, np.array(plant.P), np.array(plant.b),
                              plant.R, plant.perturbation_outputs, plant.disturbances, h, plant.name)
        except ValueError as e:
            raise ConfigError(f"{self.source}: plant: {e}")
        channels = self.config.iqc.channels if self.config.iqc is not None else []
        if G.h_depends_on_input() and not channels:
            raise ConfigError(f"{self.source}: plant.h depends on inputs; list the perturbed channels in iqc.channels")
        return G

    def iqc_spec(self):
        block = self.config.iqc
        if block is None:
            return None
        try:
            return build_iqc(block.kind, block.hardness, block.sigma, block.alpha, block.beta, block.d, block.m,
                             n_channels=max(len(self.config.plant.perturbation_outputs), 1),
                             lambda_degree=block.lambda_degree)
        except ValueError as e:
            raise ConfigError(f"{self.source}: iqc: {e}")

    def extended_system(self):
        G = self.nominal_system()
        iqc = self.iqc_spec()
        channels = self.config.iqc.channels if self.config.iqc is not None else []
        try:
            if channels:
                return augment_actuator(G, iqc, channels)
            return extend(G, iqc)
        except ValueError as e:
            raise ConfigError(f"{self.source}: {e}")

    def synthesis_config(self, seed=None):
        cfg = self.config
        try:
            return self._synthesis_config(cfg, seed)
        except ValidationError as e:
            error = e.errors()[0]
            raise ConfigError(f"{self.source}: degrees: {error['msg']}")

    @staticmethod
    def _synthesis_config(cfg, seed):
        return SynthesisConfig(
            deg_V=cfg.degrees.V,
            deg_k=cfg.degrees.k,
            deg_k_tilde=cfg.degrees.k_tilde,
            multiplier_degrees=cfg.degrees.multipliers,
            n_iter=cfg.iteration.n_iter,
            gamma_tol=cfg.iteration.gamma_tol,
            bisect_tol=cfg.iteration.bisect_tol,
            stall_patience=cfg.iteration.stall_patience,
            epsilon=cfg.iteration.epsilon,
            margin_cap=cfg.iteration.margin_cap,
            time_varying=cfg.iteration.time_varying,
            gamma0=cfg.initialization.gamma0,
            lqr_Q=cfg.initialization.lqr_Q,
            lqr_R=cfg.initialization.lqr_R,
            equilibrium_guess=cfg.initialization.equilibrium_guess,
            fixed_inputs=cfg.initialization.fixed_inputs,
            scaling_directions=cfg.initialization.scaling_directions,
            seed=cfg.seed if seed is None else seed,
            audit=cfg.audit,
            solver=cfg.solver,
        )

    def validation_budget(self, seed=None):
        settings = self.config.validation
        if settings is None:
            raise ConfigError(f"{self.source}: no validation block")
        return ValidationBudget(
            box=np.array(settings.box, dtype=float),
            n_points=settings.n_points,
            n_perturbations=settings.n_perturbations,
            n_disturbances=settings.n_disturbances,
            dt=settings.dt,
            n_samples=settings.n_samples,
            seed=self.config.seed if seed is None else seed,
        )


def load_config(path):
    return ConfigLoader.from_path(path)
