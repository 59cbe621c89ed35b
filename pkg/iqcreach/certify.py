"""
Certificate synthesis by alternating SOS programs.

Each iteration fixes V and maximizes gamma over the controller and the
S-procedure multipliers (gamma-step), then fixes the controller and the
level-set multipliers and searches for a new V with a strictly interior
margin (V-step). The certified inner approximation of the backward
reachable set is {x_G : V(0, x_G, 0) <= gamma}.
"""

import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg
from pydantic import BaseModel, Field, field_validator

from .constants import (DEFAULT_BISECT_TOL, DEFAULT_GAMMA0, DEFAULT_GAMMA_TOL,
                        DEFAULT_MULTIPLIER_DEGREES, DEFAULT_N_ITER, GAMMA_UPPER_CAP,
                        KYP_PROGRAM_MARGIN, KYP_STRICT_MARGIN, MARGIN_CAP, SOS_AUDIT_TOL,
                        SOS_EPSILON, STALL_PATIENCE, TIME_VARIABLE, V0_RAY_STEPS,
                        V0_SCALING_DIRECTIONS)
from .errors import (ConvergenceError, InfeasibleInitialization, KypScreenError,
                     SolverFailure)
from .lti_filters import kyp_affine, kyp_find_y22, kyp_matrix
from .poly_core import Polynomial, PolynomialMatrix
from .sdp_backend import SdpStatus, SolverOptions, dump_sparse, solve
from .sos_compiler import ParamPolynomial, SosProgram, bind_affine, check_sos, decompile
from .system_builder import equilibrium, extended_equilibrium, linearize

logger = logging.getLogger(__name__)

FAMILIES = ('dissipation', 'containment', 'control')
CERTIFICATE_FORMAT = 'iqcreach.certificate'
CERTIFICATE_VERSION = 1


def _even_up(degree):
    degree = max(int(degree), 0) if degree != float('-inf') else 0
    return degree + degree % 2


def _degree(expression, variables):
    degree = expression.degree_in(variables)
    return 0 if degree == float('-inf') else int(degree)


def _entry(matrix, i, j):
    if isinstance(matrix, np.ndarray):
        return float(matrix[i, j])
    if isinstance(matrix, PolynomialMatrix):
        return matrix[i, j]
    return matrix[i][j]


def _is_numeric_zero(value):
    return isinstance(value, (int, float, np.number)) and value == 0


class SynthesisConfig(BaseModel):
    """Degrees, iteration limits and solver settings for one synthesis run"""

    deg_V: int = 2
    deg_k: Optional[int] = Field(None, ge=0)
    deg_k_tilde: Optional[int] = Field(None, ge=0)
    multiplier_degrees: dict[str, int] = Field(default_factory=dict)
    n_iter: int = Field(DEFAULT_N_ITER, ge=1)
    gamma_tol: float = Field(DEFAULT_GAMMA_TOL, gt=0)
    bisect_tol: float = Field(DEFAULT_BISECT_TOL, gt=0)
    stall_patience: int = Field(STALL_PATIENCE, ge=1)
    epsilon: float = Field(SOS_EPSILON, ge=0)
    gamma0: float = Field(DEFAULT_GAMMA0, gt=0)
    margin_cap: float = Field(MARGIN_CAP, gt=0)
    time_varying: bool = True
    lqr_Q: Optional[list[list[float]]] = None
    lqr_R: Optional[list[list[float]]] = None
    equilibrium_guess: dict[str, float] = Field(default_factory=dict)
    fixed_inputs: dict[str, float] = Field(default_factory=dict)
    scaling_directions: int = Field(V0_SCALING_DIRECTIONS, ge=1)
    seed: int = 0
    audit: bool = True
    audit_tol: float = Field(SOS_AUDIT_TOL, gt=0)
    solver: SolverOptions = Field(default_factory=SolverOptions)

    @field_validator('deg_V')
    @classmethod
    def _check_deg_V(cls, value):
        if value < 2 or value % 2:
            raise ValueError(f"deg_V must be even and at least 2, got {value}")
        return value

    @field_validator('multiplier_degrees')
    @classmethod
    def _check_multipliers(cls, value):
        known = {'s0', 's1', 's2', 's3', 's4', 's5', 's6', 'lambda'}
        for name, degree in value.items():
            if name not in known:
                raise ValueError(f"unknown multiplier '{name}'")
            if degree < 0 or degree % 2:
                raise ValueError(f"multiplier {name} needs an even non-negative degree, got {degree}")
        return value

    @property
    def controller_degree(self):
        return self.deg_k if self.deg_k is not None else max(self.deg_V - 1, 1)

    @property
    def tilde_degree(self):
        return self.deg_k_tilde if self.deg_k_tilde is not None else max(self.deg_V - 1, 1)


@dataclass
class Assignment:
    """Values held fixed while the remaining decisions move"""

    V: Optional[Polynomial] = None
    gamma: Optional[float] = None
    controller: Optional[dict] = None
    s2: Optional[Polynomial] = None
    s5: Optional[list] = None
    M: object = None
    Y22: Optional[np.ndarray] = None
    previous_V: Optional[Polynomial] = None


class ProgramAssembler:
    """Builds the dissipation, containment and control SOS programs of one system"""

    def __init__(self, system, config=None):
        self.system = system
        self.config = config or SynthesisConfig()
        self.iqc = system.iqc
        G = system.nominal
        self.time = (TIME_VARIABLE,) if self.config.time_varying else ()
        self.plant = system.plant_states
        self.filter = system.filter_states
        self.tilde = system.controller_states
        self.level_vars = self.time + self.plant + self.filter + self.tilde
        self.controller_vars = self.time + self.plant
        self.tilde_controller_vars = self.time + self.plant + self.tilde
        self.dissipation_vars = self.level_vars + system.w_names + system.d_names
        self.containment_vars = self.plant + self.filter + self.tilde
        self.lambda_vars = self.plant + self.tilde + system.w_names
        self.T = float(G.T)
        self.R2 = float(G.R) ** 2
        if self.time:
            t = Polynomial.variable(TIME_VARIABLE)
            self.p_t = t * (self.T - t)
        else:
            self.p_t = None
        self.p_x = G.target
        perturbed = [G.inputs.index(name) for name in system.perturbed_channels]
        self.s6_rows = [i for i in range(G.P.shape[0])
                        if perturbed and np.any(G.P[i] != 0)
                        and all(G.P[i, j] == 0 for j in range(G.n_inputs) if j not in perturbed)]

    @property
    def is_soft(self):
        return self.iqc is not None and self.iqc.is_soft

    def _degree_of(self, name, default):
        return self.config.multiplier_degrees.get(name, default)

    def assemble(self, fixed, families=FAMILIES, margin=False, gamma_decision=False, name='sos'):
        """SosProgram for the given partial assignment"""
        program = SosProgram(name)
        if fixed.V is not None:
            V = ParamPolynomial(fixed.V)
        else:
            V = program.new_free_polynomial('V', self.level_vars, self.config.deg_V)
        if gamma_decision:
            gamma = program.new_scalar('gamma', upper=GAMMA_UPPER_CAP)
            program.set_objective(gamma)
        else:
            gamma = float(fixed.gamma)

        M, Y22 = self._multipliers(program, fixed)
        level_V = V - self._storage(Y22) if self.is_soft else V
        level = level_V - gamma - self.R2
        controls = self._controls(program, fixed)

        if 'dissipation' in families:
            self._dissipation(program, V, level, controls, M, fixed)
        if 'containment' in families:
            self._containment(program, level_V, gamma)
        if 'control' in families:
            self._control(program, level, controls, fixed)
        if fixed.V is None and fixed.previous_V is not None:
            self._level_growth(program, V, fixed.previous_V, gamma)
        if margin:
            program.set_objective(program.enable_margin(self.config.margin_cap))
        return program

    def _multipliers(self, program, fixed):
        if self.iqc is None:
            return None, None
        if fixed.M is not None:
            if self.is_soft and fixed.Y22 is None:
                raise ValueError("soft IQC programs with a fixed multiplier also need Y22")
            return fixed.M, fixed.Y22 if self.is_soft else None
        M = self.iqc.mset.instantiate(program, 'M', self.lambda_vars)
        if not self.is_soft:
            return M, None
        filt = self.iqc.filter
        Y22 = program.new_symmetric_matrix('Y22', filt.n_states)
        lmi = kyp_affine(Y22, filt.A, filt.B2, filt.C, filt.D2, M)
        program.add_lmi('kyp', [[-e for e in row] for row in lmi], margin=KYP_PROGRAM_MARGIN)
        return M, Y22

    def _storage(self, Y22):
        """x_psi' Y22 x_psi"""
        xp = [Polynomial.variable(name) for name in self.filter]
        total = ParamPolynomial()
        for i in range(len(xp)):
            for j in range(len(xp)):
                entry = _entry(Y22, i, j)
                if not _is_numeric_zero(entry):
                    total = total + ParamPolynomial.lift(entry) * (xp[i] * xp[j])
        return total

    def _supply(self, M):
        """z' M z with z the filter output"""
        z = self.system.H.entries()
        total = ParamPolynomial()
        for i in range(len(z)):
            for j in range(len(z)):
                entry = _entry(M, i, j)
                if not _is_numeric_zero(entry):
                    total = total + ParamPolynomial.lift(entry) * (z[i] * z[j])
        return total

    def _controls(self, program, fixed):
        given = fixed.controller or {}
        controls = {}
        for name in self.system.direct_inputs:
            if name in given:
                controls[name] = ParamPolynomial.lift(given[name])
            else:
                controls[name] = program.new_free_polynomial(
                    f"k:{name}", self.controller_vars, self.config.controller_degree)
        for name in self.tilde:
            if name in given:
                controls[name] = ParamPolynomial.lift(given[name])
            else:
                controls[name] = program.new_free_polynomial(
                    f"k:{name}", self.tilde_controller_vars, self.config.tilde_degree)
        return controls

    def _input_vector(self, controls):
        tilde = dict(zip(self.system.perturbed_channels, self.tilde))
        return [controls[name] if name in controls else ParamPolynomial(Polynomial.variable(tilde[name]))
                for name in self.system.nominal.inputs]

    def _dissipation(self, program, V, level, controls, M, fixed):
        system = self.system
        variables = self.dissipation_vars
        direct = {name: controls[name] for name in system.direct_inputs}
        lie = V.differentiate(TIME_VARIABLE) if self.time else ParamPolynomial()
        for i, name in enumerate(system.states):
            lie = lie + V.differentiate(name) * bind_affine(system.F[i, 0], direct)
        for name in self.tilde:
            lie = lie + V.differentiate(name) * controls[name]
        supply = self._supply(M) if M is not None else ParamPolynomial()
        energy = Polynomial.zero()
        for name in system.d_names:
            energy = energy + Polynomial.variable(name) ** 2
        base = -(lie + supply - energy)

        if fixed.s2 is not None:
            s2 = ParamPolynomial(fixed.s2)
            s2_degree = _degree(fixed.s2, variables)
        else:
            s2 = None
            s2_degree = self._degree_of('s2', _even_up(self.config.deg_V))
        top = max(_degree(base, variables), s2_degree + _degree(level, variables))
        if s2 is None:
            s2 = program.new_sos_polynomial('s2', variables, s2_degree)
        expression = base + level * s2
        if self.time:
            s1_degree = self._degree_of('s1', _even_up(self.config.deg_V))
            highest = max(top, s1_degree + 2)
            if highest % 2 and 's1' not in self.config.multiplier_degrees:
                s1_degree = highest - 1
            s1 = program.new_sos_polynomial('s1', variables, s1_degree)
            expression = expression - s1 * self.p_t
        program.add_sos('dissipation', expression, variables, family='dissipation')

    def _containment(self, program, level_V, gamma):
        G = self.system.nominal
        variables = self.containment_vars
        terminal = level_V.substitute({TIME_VARIABLE: self.T}) if self.time else level_V
        base = terminal - gamma - self.R2
        base_degree = _degree(base, variables)
        expression = base
        top = base_degree
        if self.s6_rows:
            s6_degree = self._degree_of('s6', min(DEFAULT_MULTIPLIER_DEGREES['s6'], max(0, _even_up(base_degree) - 2)))
            tilde = dict(zip(self.system.perturbed_channels, self.tilde))
            for i in self.s6_rows:
                row = Polynomial.constant(-float(G.b[i]))
                for j, name in enumerate(G.inputs):
                    if G.P[i, j] != 0:
                        row = row + float(G.P[i, j]) * Polynomial.variable(tilde[name])
                s6 = program.new_sos_polynomial(f"s6[{i}]", variables, s6_degree)
                expression = expression + s6 * row
            top = max(top, s6_degree + 1)
        px_degree = _degree(self.p_x, variables)
        s3_degree = self._degree_of('s3', max(0, _even_up(top - px_degree)))
        highest = max(top, s3_degree + px_degree)
        if highest % 2 and 's3' not in self.config.multiplier_degrees:
            s3_degree = _even_up(highest + 1 - px_degree)
        s3 = program.new_sos_polynomial('s3', variables, s3_degree, offset=self.config.epsilon)
        expression = expression - s3 * self.p_x
        program.add_sos('containment', expression, variables, family='containment')

    def _control(self, program, level, controls, fixed):
        G = self.system.nominal
        variables = self.level_vars
        inputs = self._input_vector(controls)
        level_degree = _degree(level, variables)
        for i in range(G.P.shape[0]):
            row = ParamPolynomial(Polynomial.constant(-float(G.b[i])))
            for j, value in enumerate(inputs):
                if G.P[i, j] != 0:
                    row = row + value * float(G.P[i, j])
            base = -row
            if fixed.s5 is not None:
                s5 = ParamPolynomial(fixed.s5[i])
                s5_degree = _degree(fixed.s5[i], variables)
            else:
                s5_degree = self._degree_of('s5', DEFAULT_MULTIPLIER_DEGREES['s5'])
                s5 = program.new_sos_polynomial(f"s5[{i}]", variables, s5_degree)
            expression = base + level * s5
            if self.time:
                top = max(_degree(base, variables), s5_degree + level_degree)
                s4_degree = self._degree_of('s4', DEFAULT_MULTIPLIER_DEGREES['s4'])
                highest = max(top, s4_degree + 2)
                if highest % 2 and 's4' not in self.config.multiplier_degrees:
                    s4_degree = highest - 1
                s4 = program.new_sos_polynomial(f"s4[{i}]", variables, s4_degree)
                expression = expression - s4 * self.p_t
            program.add_sos(f"control[{i}]", expression, variables, family='control')

    def _level_growth(self, program, V, previous, gamma):
        """{V_prev(0, .) <= gamma} is contained in {V(0, .) <= gamma}"""
        variables = self.containment_vars
        current = V.substitute({TIME_VARIABLE: 0.0})
        previous = previous.substitute({TIME_VARIABLE: 0.0})
        s0 = program.new_sos_polynomial('s0', variables, self._degree_of('s0', 0))
        expression = (gamma - current) + s0 * (previous - gamma)
        program.add_sos('level_growth', expression, variables, family='level_growth')


def assemble_hard(system, config, fixed, **kwargs):
    """Program for a hard IQC (or no perturbation)"""
    if system.iqc is not None and system.iqc.is_soft:
        raise ValueError("assemble_hard needs a hard IQC")
    return ProgramAssembler(system, config).assemble(fixed, **kwargs)


def assemble_soft(system, config, fixed, **kwargs):
    """Program for a soft IQC, with the storage term and the KYP coupling"""
    if system.iqc is None or not system.iqc.is_soft:
        raise ValueError("assemble_soft needs a soft IQC")
    return ProgramAssembler(system, config).assemble(fixed, **kwargs)


# Initial iterate

@dataclass
class LinearDesign:
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    K: np.ndarray
    Y: np.ndarray
    point: dict
    order: tuple


def linear_design(system, config=None):
    """LQR gain and closed-loop Lyapunov matrix of the linearized extended system"""
    config = config or SynthesisConfig()
    G = system.nominal
    x_eq, u_eq = equilibrium(G, config.equilibrium_guess, config.fixed_inputs)
    A, B = linearize(system, x_eq, u_eq)
    n, m = B.shape
    if m:
        Q = np.asarray(config.lqr_Q, dtype=float) if config.lqr_Q is not None else np.eye(n)
        R = np.asarray(config.lqr_R, dtype=float) if config.lqr_R is not None else np.eye(m)
        try:
            P = scipy.linalg.solve_continuous_are(A, B, Q, R)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise ConvergenceError(f"Riccati equation has no stabilizing solution: {e}")
        K = np.linalg.solve(R, B.T @ P)
    else:
        P = np.zeros((n, n))
        K = np.zeros((0, n))
    closed = A - B @ K
    if np.max(np.linalg.eigvals(closed).real) >= 0:
        raise ConvergenceError("linearized closed loop is not stable; the pair (A, B) is not stabilizable")
    Y = scipy.linalg.solve_continuous_lyapunov(closed.T, -np.eye(n))
    Y = 0.5 * (Y + Y.T)
    point = extended_equilibrium(system, x_eq, u_eq)
    return LinearDesign(A, B, P, K, Y, point, system.all_states)


def _target_scale(system, design, config):
    """c such that {c d'Yd <= gamma0 + R^2} lies in the target (sampled rays)"""
    G = system.nominal
    level = config.gamma0 + float(G.R) ** 2
    order = design.order
    n = len(order)
    center = np.array([float(design.point.get(name, 0.0)) for name in order])
    plant_index = [order.index(name) for name in G.states]
    target = G.target.compile(G.states)
    if target(center[plant_index][None, :])[0] > 0:
        logger.warning("Equilibrium lies outside the target set, initial iterate left unscaled")
        return 1.0

    rng = np.random.default_rng(config.seed)
    directions = rng.standard_normal((config.scaling_directions, n))
    norms = np.sqrt(np.einsum('ij,jk,ik->i', directions, design.Y, directions))
    unit = directions / norms[:, None]
    fractions = np.linspace(0.0, 1.0, V0_RAY_STEPS + 1)[1:]

    def inside(radius):
        points = center + radius * fractions[:, None, None] * unit[None, :, :]
        return bool(np.all(target(points.reshape(-1, n)[:, plant_index]) <= 0))

    lo, hi = 0.0, 1.0
    while inside(hi) and hi < 1e8:
        lo, hi = hi, 2.0 * hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        logger.warning("No ellipsoid around the equilibrium fits inside the target, initial iterate left unscaled")
        return 1.0
    return level / lo ** 2


def init_V0(system, config=None):
    """Time-independent quadratic c (x - x_eq)' Y (x - x_eq) from an LQR design"""
    config = config or SynthesisConfig()
    design = linear_design(system, config)
    delta = [Polynomial.variable(name) - float(design.point.get(name, 0.0)) for name in design.order]
    quadratic = Polynomial.zero()
    for i in range(len(delta)):
        for j in range(len(delta)):
            if design.Y[i, j] != 0:
                quadratic = quadratic + float(design.Y[i, j]) * (delta[i] * delta[j])
    scale = _target_scale(system, design, config)
    logger.info(f"Initial iterate scaled by {scale:.6g}")
    return quadratic * scale


# Certificate

def _matrix_to_dict(value):
    if value is None:
        return None
    if isinstance(value, PolynomialMatrix):
        return {'kind': 'polynomial', 'value': value.to_dict()}
    return {'kind': 'numeric', 'value': [[float(e) for e in row] for row in np.atleast_2d(value)]}


def _matrix_from_dict(data):
    if data is None:
        return None
    if data['kind'] == 'polynomial':
        return PolynomialMatrix.from_dict(data['value'])
    return np.array(data['value'], dtype=float)


@dataclass
class Certificate:
    """Certified inner approximation {x_G : V(0, x_G, 0) <= gamma} and its controller"""

    V: Polynomial
    gamma: float
    R: float
    T: float
    controller: dict
    plant_states: tuple
    filter_states: tuple = ()
    controller_states: tuple = ()
    hardness: Optional[str] = None
    M: object = None
    Y22: Optional[np.ndarray] = None
    time_varying: bool = True
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)

    @property
    def is_soft(self):
        return self.hardness == 'Soft'

    @property
    def verified(self):
        return bool(self.audit.get('passed', False))

    @property
    def gamma_history(self):
        return [record['gamma'] for record in self.history]

    def slice_bindings(self):
        """Variables fixed to zero on the certified slice"""
        bindings = {name: 0.0 for name in self.filter_states + self.controller_states}
        bindings[TIME_VARIABLE] = 0.0
        return bindings

    def slice_polynomial(self):
        return self.V.substitute(self.slice_bindings())

    def level_polynomial(self):
        """V, or V - x_psi' Y22 x_psi for soft certificates"""
        if not self.is_soft or self.Y22 is None or not self.filter_states:
            return self.V
        xp = [Polynomial.variable(name) for name in self.filter_states]
        storage = Polynomial.zero()
        for i in range(len(xp)):
            for j in range(len(xp)):
                storage = storage + float(self.Y22[i, j]) * (xp[i] * xp[j])
        return self.V - storage

    def to_dict(self):
        return {
            'format': CERTIFICATE_FORMAT,
            'version': CERTIFICATE_VERSION,
            'V': self.V.to_dict(),
            'gamma': float(self.gamma),
            'R': float(self.R),
            'T': float(self.T),
            'controller': {name: p.to_dict() for name, p in self.controller.items()},
            'states': {
                'plant': list(self.plant_states),
                'filter': list(self.filter_states),
                'controller': list(self.controller_states),
            },
            'hardness': self.hardness,
            'M': _matrix_to_dict(self.M),
            'Y22': _matrix_to_dict(self.Y22),
            'time_varying': self.time_varying,
            'history': self.history,
            'metadata': self.metadata,
            'audit': self.audit,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get('format') != CERTIFICATE_FORMAT:
            raise ValueError(f"not a certificate document: format={data.get('format')!r}")
        states = data['states']
        return cls(
            V=Polynomial.from_dict(data['V']),
            gamma=data['gamma'],
            R=data['R'],
            T=data['T'],
            controller={name: Polynomial.from_dict(p) for name, p in data['controller'].items()},
            plant_states=tuple(states['plant']),
            filter_states=tuple(states['filter']),
            controller_states=tuple(states['controller']),
            hardness=data.get('hardness'),
            M=_matrix_from_dict(data.get('M')),
            Y22=_matrix_from_dict(data.get('Y22')),
            time_varying=data.get('time_varying', True),
            history=data.get('history', []),
            metadata=data.get('metadata', {}),
            audit=data.get('audit', {}),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())
        logger.info(f"Certificate written to {path}")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


# Alternation

@dataclass
class GammaStep:
    gamma: float
    upper: float
    controller: dict
    s2: Optional[Polynomial]
    s5: list
    M: object
    Y22: Optional[np.ndarray]
    program: SosProgram
    y: np.ndarray
    solves: int


@dataclass
class VStep:
    V: Polynomial
    margin: float
    M: object = None
    Y22: Optional[np.ndarray] = None


class ReachabilitySynthesizer:
    """Runs the gamma-step / V-step alternation for one extended system"""

    def __init__(self, system, config=None, dump_dir=None):
        self.system = system
        self.config = config or SynthesisConfig()
        self.assembler = ProgramAssembler(system, self.config)
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        self.dumped = []
        self.timings = []
        self.iterates = []

    @property
    def iqc(self):
        return self.system.iqc

    def _dump(self, program, compiled):
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        slug = re.sub(r'[^A-Za-z0-9.-]+', '_', program.name).strip('_')
        path = self.dump_dir / f"{len(self.dumped) + 1:04d}_{slug}.txt"
        self.dumped.append(dump_sparse(compiled.sdp, path))
        logger.debug(f"Dumped '{program.name}' to {path}")

    def _solve(self, program):
        compiled = program.compile()
        if self.dump_dir is not None:
            self._dump(program, compiled)
        solution = solve(compiled.sdp, self.config.solver)
        if solution.status == SdpStatus.NUMERICAL_FAILURE:
            logger.warning(f"Program '{program.name}' ended with a numerical failure ({solution.raw_status})")
        if not solution.is_optimal:
            return solution, None
        return solution, decompile(compiled, solution.y)

    def _attempt(self, fixed, gamma, families=FAMILIES):
        program = self.assembler.assemble(replace(fixed, gamma=gamma), families=families,
                                          name=f"gamma-step[{gamma:.6g}]")
        solution, values = self._solve(program)
        return (program, solution, values) if values is not None else None

    def gamma_upper_bound(self, V, M=None, Y22=None, iteration=1):
        """Largest gamma allowed by the target containment constraint alone"""
        fixed = Assignment(V=V, M=M, Y22=Y22)
        program = self.assembler.assemble(fixed, families=('containment',), gamma_decision=True,
                                          name='gamma-upper-bound')
        solution, values = self._solve(program)
        if values is None:
            if iteration == 1 and solution.status == SdpStatus.INFEASIBLE:
                raise InfeasibleInitialization('containment', iteration)
            raise SolverFailure(f"gamma upper bound ended with {solution.status.value}",
                                iteration=iteration, family='containment')
        upper = float(values['gamma'].constant_term())
        if upper >= GAMMA_UPPER_CAP * (1 - 1e-9):
            logger.warning("Target containment does not bound gamma; using the cap")
        return upper

    def diagnose(self, fixed, gamma):
        """First constraint family that is infeasible on its own"""
        for family in FAMILIES:
            if self._attempt(fixed, gamma, families=(family,)) is None:
                return family
        return 'joint'

    def gamma_step(self, V, previous_gamma=None, M=None, Y22=None, iteration=1):
        """Bisection on gamma with V (and, for soft IQCs, M and Y22) fixed"""
        fixed = Assignment(V=V, M=M, Y22=Y22)
        upper = self.gamma_upper_bound(V, M, Y22, iteration)
        solves = 1
        best = self._attempt(fixed, upper)
        solves += 1
        if best is not None:
            gamma = upper
        else:
            lower = previous_gamma if previous_gamma is not None else min(0.0, upper - 1.0)
            best = self._attempt(fixed, lower)
            solves += 1
            if best is None:
                if previous_gamma is None:
                    raise InfeasibleInitialization(self.diagnose(fixed, lower), iteration)
                logger.warning(f"Iteration {iteration}: previous gamma {previous_gamma:.6g} no longer solves")
                return None
            gamma, hi = lower, upper
            while hi - gamma > self.config.bisect_tol * max(1.0, abs(hi)):
                mid = 0.5 * (gamma + hi)
                attempt = self._attempt(fixed, mid)
                solves += 1
                if attempt is not None:
                    gamma, best = mid, attempt
                else:
                    hi = mid
        program, solution, values = best
        logger.debug(f"Iteration {iteration}: gamma-step settled at {gamma:.6g} after {solves} solves")
        controller = {name: values[f"k:{name}"]
                      for name in self.system.direct_inputs + self.system.controller_states}
        n_rows = self.system.nominal.P.shape[0]
        return GammaStep(
            gamma=gamma,
            upper=upper,
            controller=controller,
            s2=values['s2'] if 's2' in values else None,
            s5=[values[f"s5[{i}]"] for i in range(n_rows)],
            M=M if M is not None else (values['M'] if 'M' in values else None),
            Y22=Y22,
            program=program,
            y=solution.y,
            solves=solves,
        )

    def v_step(self, step, V_previous):
        """Maximize the interior margin over V with the controller and s2, s5 fixed"""
        fixed = Assignment(gamma=step.gamma, controller=step.controller, s2=step.s2, s5=step.s5,
                           previous_V=V_previous)
        program = self.assembler.assemble(fixed, margin=True, name='v-step')
        solution, values = self._solve(program)
        if values is None:
            return None
        M = values['M'] if 'M' in values else None
        Y22 = values['Y22'] if 'Y22' in values else None
        return VStep(values['V'], float(solution.objective), M, Y22)

    def initial_multipliers(self):
        """Default multiplier and a matching storage matrix for soft IQCs"""
        if self.iqc is None or not self.iqc.is_soft:
            return None, None
        M = self.iqc.mset.default()
        Y22 = kyp_find_y22(self.iqc, M, self.config.solver)
        if Y22 is None:
            raise KypScreenError(
                "no storage matrix satisfies the KYP condition for the default multiplier; "
                "use a hard factorization of this IQC"
            )
        return M, Y22

    def iterate(self, V0=None):
        """Alternate gamma- and V-steps and return the audited certificate"""
        cfg = self.config
        V = V0 if V0 is not None else init_V0(self.system, cfg)
        self.timings = []
        self.iterates = []
        M, Y22 = self.initial_multipliers()
        history = []
        gamma_previous = None
        stalls = 0
        final = None
        for j in range(1, cfg.n_iter + 1):
            start = time.perf_counter()
            try:
                step = self.gamma_step(V, gamma_previous, M, Y22, iteration=j)
            except SolverFailure as e:
                if e.iteration is None:
                    e.iteration = j
                raise
            if step is None:
                break
            final = (V, step)
            record = {'iteration': j, 'gamma': step.gamma, 'gamma_upper': step.upper, 'solves': step.solves}
            if gamma_previous is not None:
                improvement = (step.gamma - gamma_previous) / max(abs(gamma_previous), 1e-12)
                record['improvement'] = improvement
                stalls = stalls + 1 if improvement < cfg.gamma_tol else 0
            logger.info(f"Iteration {j}: gamma = {step.gamma:.6g}")
            if stalls >= cfg.stall_patience or j == cfg.n_iter:
                record['v_step'] = 'skipped'
                self.timings.append({'iteration': j, 'wall_time': time.perf_counter() - start})
                history.append(record)
                break
            update = self.v_step(step, V)
            if update is None:
                logger.warning(f"Iteration {j}: V-step stalled, keeping the previous V")
                record['v_step'] = 'stalled'
            else:
                self.iterates.append({'iteration': j, 'gamma': step.gamma, 'V_before': V, 'V_after': update.V})
                V = update.V
                record['v_step'] = 'ok'
                record['margin'] = update.margin
                if self.iqc is not None and self.iqc.is_soft:
                    M, Y22 = update.M, update.Y22
            self.timings.append({'iteration': j, 'wall_time': time.perf_counter() - start})
            history.append(record)
            gamma_previous = step.gamma
        if final is None:
            raise SolverFailure("no gamma-step completed", iteration=1)
        certificate = self._certificate(*final, history)
        if cfg.audit:
            certificate.audit = self.audit(final[1], certificate)
        return certificate

    def _certificate(self, V, step, history):
        system = self.system
        cfg = self.config
        metadata = {
            'plant': system.nominal.name,
            'iqc': self.iqc.kind.value if self.iqc is not None else None,
            'deg_V': cfg.deg_V,
            'deg_k': cfg.controller_degree,
            'deg_k_tilde': cfg.tilde_degree if system.controller_states else None,
            'multiplier_degrees': dict(cfg.multiplier_degrees),
            'iterations': len(history),
            'solver': cfg.solver.solver,
            'direct_inputs': list(system.direct_inputs),
            'perturbed_channels': list(system.perturbed_channels),
        }
        return Certificate(
            V=V,
            gamma=step.gamma,
            R=float(system.nominal.R),
            T=float(system.nominal.T),
            controller=dict(step.controller),
            plant_states=system.plant_states,
            filter_states=system.filter_states,
            controller_states=system.controller_states,
            hardness=self.iqc.hardness.value if self.iqc is not None else None,
            M=step.M,
            Y22=step.Y22,
            time_varying=cfg.time_varying,
            history=history,
            metadata=metadata,
        )

    def audit(self, step, certificate):
        """Re-check every SOS constraint of the final gamma-step on its own"""
        cfg = self.config
        report = {'tolerance': cfg.audit_tol, 'constraints': {}}
        passed = True
        for constraint in step.program.constraints:
            polynomial = constraint.expression.evaluate(step.y)
            result = check_sos(polynomial, cfg.audit_tol, cfg.solver, constraint.variables)
            report['constraints'][constraint.name] = {
                'is_sos': bool(result.is_sos),
                'residual': float(result.residual),
                'min_eig': float(result.min_eig),
            }
            passed = passed and result.is_sos
        if certificate.is_soft:
            filt = self.iqc.filter
            value = kyp_matrix(certificate.Y22, filt.A, filt.B2, filt.C, filt.D2, certificate.M)
            largest = float(np.linalg.eigvalsh(value).max())
            report['kyp_max_eig'] = largest
            passed = passed and largest <= -KYP_STRICT_MARGIN
        report['passed'] = bool(passed)
        if not passed:
            logger.warning("Certificate audit failed")
        return report


def iterate(system, config=None, V0=None):
    return ReachabilitySynthesizer(system, config).iterate(V0)
