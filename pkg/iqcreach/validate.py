"""
Certificate-free checks of a synthesized certificate.

Closed-loop trajectories are integrated with a fixed-step RK4 scheme under
sampled perturbation realizations and bounded-energy disturbances; the
certified slice is sampled by rejection for Monte-Carlo volume estimates.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd
from scipy import signal

from .constants import (BOUNDARY_FRACTION, CONTROL_TOL, DEFAULT_DT, DEFAULT_MC_SAMPLES,
                        DISTURBANCE_ENERGY_FACTOR, DISTURBANCE_SEGMENTS, DIVERGENCE_BOUND, LEVEL_TOL,
                        TARGET_TOL, TIME_VARIABLE, ZERO_HIT_CONFIDENCE)
from .errors import DimensionMismatchError
from .lti_filters import IqcKind

logger = logging.getLogger(__name__)


class PerturbationKind(str, Enum):
    SECTOR_NL = 'SectorNl'
    CONSTANT_DELTA = 'ConstantDelta'
    LTI_NORM_BOUND = 'LtiNormBound'
    NL_GAIN = 'NlGain'


@dataclass
class PerturbationSample:
    """One realization w = Delta(v), applied channel by channel.

    Construction fails unless the realization lies in its declared class.
    """

    kind: PerturbationKind
    params: dict = field(default_factory=dict)
    alpha: Optional[float] = None
    beta: Optional[float] = None
    sigma: Optional[float] = None

    def __post_init__(self):
        self.kind = PerturbationKind(self.kind)
        if not self.is_admissible():
            raise ValueError(f"{self.kind.value} realization {self.params} lies outside its class "
                             f"(alpha={self.alpha}, beta={self.beta}, sigma={self.sigma})")
        if self.kind == PerturbationKind.LTI_NORM_BOUND:
            gain, corner = self.params['gain'], self.params['corner']
            A, B, C, D = signal.tf2ss([-gain, gain * corner], [1.0, corner])
            self._ss = (float(A[0, 0]), float(B[0, 0]), float(C[0, 0]), float(D[0, 0]))

    @property
    def states_per_channel(self):
        return 1 if self.kind == PerturbationKind.LTI_NORM_BOUND else 0

    def _finite(self, *names):
        return all(name in self.params and math.isfinite(self.params[name]) for name in names)

    def is_admissible(self):
        """Whether the realization lies in its declared class"""
        p = self.params
        if self.kind == PerturbationKind.SECTOR_NL:
            # alpha + (beta - alpha) sin^2(.) stays in [alpha, beta] for every v
            return (self.alpha is not None and self.beta is not None
                    and math.isfinite(self.alpha) and math.isfinite(self.beta)
                    and self.alpha <= self.beta and self._finite('omega', 'phase'))
        if self.sigma is None or not self.sigma >= 0:
            return False
        if self.kind == PerturbationKind.CONSTANT_DELTA:
            return self._finite('delta') and abs(p['delta']) <= self.sigma
        if self.kind == PerturbationKind.NL_GAIN:
            return self._finite('amplitude', 'omega', 'phase') and abs(p['amplitude']) <= self.sigma
        # gain * (corner - s) / (corner + s) is all-pass with H-infinity norm |gain|
        return self._finite('gain', 'corner') and p['corner'] > 0 and abs(p['gain']) <= self.sigma

    def output(self, t, v, state):
        """w for inputs ``v`` of shape (N, channels)"""
        p = self.params
        if self.kind == PerturbationKind.SECTOR_NL:
            gain = self.alpha + (self.beta - self.alpha) * np.sin(p['omega'] * v + p['phase']) ** 2
            return gain * v
        if self.kind == PerturbationKind.CONSTANT_DELTA:
            return p['delta'] * v
        if self.kind == PerturbationKind.NL_GAIN:
            return p['amplitude'] * math.sin(p['omega'] * t + p['phase']) * v
        _, _, C, D = self._ss
        return C * state + D * v

    def derivative(self, t, v, state):
        if self.kind != PerturbationKind.LTI_NORM_BOUND:
            return np.zeros((v.shape[0], 0))
        A, B, _, _ = self._ss
        return A * state + B * v

    def to_dict(self):
        return {'kind': self.kind.value, 'params': dict(self.params),
                'alpha': self.alpha, 'beta': self.beta, 'sigma': self.sigma}


def sample_perturbations(iqc, count, rng):
    """Realizations covered by ``iqc``; extreme members come first"""
    if iqc is None:
        return [None]
    params = iqc.params
    samples = []
    if iqc.kind == IqcKind.SECTOR:
        alpha, beta = params['alpha'], params['beta']
        samples.append(PerturbationSample('SectorNl', {'omega': 0.0, 'phase': 0.0}, alpha, beta))
        samples.append(PerturbationSample('SectorNl', {'omega': 0.0, 'phase': math.pi / 2}, alpha, beta))
        while len(samples) < count:
            samples.append(PerturbationSample('SectorNl', {'omega': float(rng.uniform(0.5, 20.0)),
                                                           'phase': float(rng.uniform(0, math.pi))},
                                              alpha, beta))
    elif iqc.kind in (IqcKind.D, IqcKind.DG):
        sigma = params['sigma']
        samples.append(PerturbationSample('ConstantDelta', {'delta': sigma}, sigma=sigma))
        samples.append(PerturbationSample('ConstantDelta', {'delta': -sigma}, sigma=sigma))
        while len(samples) < count:
            if iqc.kind == IqcKind.D and len(samples) % 2:
                samples.append(PerturbationSample('LtiNormBound', {'gain': float(rng.uniform(-sigma, sigma)),
                                                                   'corner': float(rng.uniform(0.5, 20.0))},
                                                  sigma=sigma))
            else:
                samples.append(PerturbationSample('ConstantDelta', {'delta': float(rng.uniform(-sigma, sigma))},
                                                  sigma=sigma))
    else:
        sigma = params['sigma']
        for amplitude in (sigma, -sigma):
            samples.append(PerturbationSample('NlGain', {'amplitude': amplitude, 'omega': 0.0,
                                                         'phase': math.pi / 2}, sigma=sigma))
        while len(samples) < count:
            samples.append(PerturbationSample('NlGain', {'amplitude': float(rng.uniform(-sigma, sigma)),
                                                         'omega': float(rng.uniform(0.5, 20.0)),
                                                         'phase': float(rng.uniform(0, 2 * math.pi))},
                                              sigma=sigma))
    return samples[:count]


@dataclass
class DisturbanceSignal:
    """Piecewise-constant d(t) on equal segments of [0, T]"""

    levels: np.ndarray
    T: float

    def __post_init__(self):
        self.levels = np.atleast_2d(np.asarray(self.levels, dtype=float))

    @property
    def n_d(self):
        return self.levels.shape[1]

    def __call__(self, t):
        segments = self.levels.shape[0]
        index = min(max(int(t / self.T * segments), 0), segments - 1)
        return self.levels[index]

    def energy(self):
        return float(np.sum(self.levels ** 2) * self.T / self.levels.shape[0])


def disturbance_family(n_d, R, T, count, rng, segments=DISTURBANCE_SEGMENTS):
    """The zero signal followed by random signals with energy just below R^2"""
    family = [DisturbanceSignal(np.zeros((segments, n_d)), T)]
    if n_d == 0 or R <= 0:
        return family[:1]
    target = DISTURBANCE_ENERGY_FACTOR * R ** 2
    while len(family) < count:
        levels = rng.standard_normal((segments, n_d))
        candidate = DisturbanceSignal(levels, T)
        family.append(DisturbanceSignal(levels * math.sqrt(target / candidate.energy()), T))
    return family[:count]


@dataclass
class Trajectory:
    """Sampled closed-loop signals; arrays are indexed (time, run, channel)"""

    t: np.ndarray
    states: np.ndarray
    state_names: tuple
    u: np.ndarray
    input_names: tuple
    v: np.ndarray
    w: np.ndarray
    d: np.ndarray
    diverged_at: np.ndarray

    @property
    def n_runs(self):
        return self.states.shape[1]

    def state(self, name):
        return self.states[:, :, self.state_names.index(name)]

    def final_states(self):
        return self.states[-1]

    def to_frame(self, run=0):
        data = {'t': self.t}
        for i, name in enumerate(self.state_names):
            data[name] = self.states[:, run, i]
        for i, name in enumerate(self.input_names):
            data[name] = self.u[:, run, i]
        for label, values in (('v', self.v), ('w', self.w), ('d', self.d)):
            for i in range(values.shape[2]):
                data[f"{label}{i + 1}"] = values[:, run, i]
        return pd.DataFrame(data)


class ClosedLoopSimulator:
    """RK4 integration of plant, filter, controller states and perturbation states"""

    def __init__(self, system, certificate):
        self.system = system
        self.certificate = certificate
        G = system.nominal
        if tuple(certificate.plant_states) != tuple(system.plant_states):
            raise DimensionMismatchError(
                f"certificate states {certificate.plant_states} do not match system states {system.plant_states}"
            )
        self.order = (TIME_VARIABLE,) + system.all_states + G.w_names + G.d_names + system.direct_inputs
        self.index = {name: i for i, name in enumerate(self.order)}
        self.n_states = len(system.all_states)
        self.n_v = system.v.shape[0] if system.v is not None else 0
        if any(system.v[i, 0].degree_in(list(G.w_names)) > 0 for i in range(self.n_v)):
            raise ValueError("perturbation input depends on the perturbation output")
        self.field = [system.F[i, 0].compile(self.order) for i in range(len(system.states))]
        self.tilde = [certificate.controller[name].compile(self.order) for name in system.controller_states]
        self.controls = [certificate.controller[name].compile(self.order) for name in system.direct_inputs]
        self.v = [system.v[i, 0].compile(self.order) for i in range(self.n_v)]
        tilde_of = dict(zip(system.perturbed_channels, system.controller_states))
        self.commanded = [(name, tilde_of.get(name)) for name in G.inputs]

    def _signals(self, t, Z, perturbation, disturbance):
        """Fill the evaluation matrix and return it with (u, v, w, d)"""
        N = Z.shape[0]
        G = self.system.nominal
        X = np.zeros((N, len(self.order)))
        X[:, 0] = t
        X[:, 1:1 + self.n_states] = Z[:, :self.n_states]
        direct = np.column_stack([c(X) for c in self.controls]) if self.controls else np.zeros((N, 0))
        for j, name in enumerate(self.system.direct_inputs):
            X[:, self.index[name]] = direct[:, j]
        d = np.tile(disturbance(t), (N, 1)) if G.d_names else np.zeros((N, 0))
        for j, name in enumerate(G.d_names):
            X[:, self.index[name]] = d[:, j]
        v = np.column_stack([h(X) for h in self.v]) if self.v else np.zeros((N, 0))
        if perturbation is not None and G.w_names:
            w = perturbation.output(t, v, Z[:, self.n_states:])
        else:
            w = np.zeros((N, len(G.w_names)))
        for j, name in enumerate(G.w_names):
            X[:, self.index[name]] = w[:, j]
        u = np.column_stack([direct[:, self.system.direct_inputs.index(name)] if tilde is None
                             else X[:, self.index[tilde]] for name, tilde in self.commanded]) \
            if self.commanded else np.zeros((N, 0))
        return X, u, v, w, d

    def _rates(self, t, Z, perturbation, disturbance):
        X, _, v, _, _ = self._signals(t, Z, perturbation, disturbance)
        parts = [np.column_stack([f(X) for f in self.field])]
        if self.tilde:
            parts.append(np.column_stack([k(X) for k in self.tilde]))
        if perturbation is not None and perturbation.states_per_channel:
            parts.append(perturbation.derivative(t, v, Z[:, self.n_states:]))
        return np.hstack(parts)

    def run(self, x0, perturbation=None, disturbance=None, dt=DEFAULT_DT, tilde0=None):
        """Integrate from plant states ``x0`` (N x n_G) on the certified slice"""
        if dt <= 0:
            raise ValueError("dt must be positive")
        if perturbation is not None and not perturbation.is_admissible():
            raise ValueError(f"perturbation {perturbation.to_dict()} lies outside its class")
        system = self.system
        G = system.nominal
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        if x0.shape[1] != len(system.plant_states):
            raise DimensionMismatchError(f"initial states have {x0.shape[1]} columns, expected {G.n_states}")
        N = x0.shape[0]
        disturbance = disturbance or DisturbanceSignal(np.zeros((1, len(G.d_names))), G.T)
        extra = perturbation.states_per_channel * self.n_v if perturbation is not None else 0
        Z = np.zeros((N, self.n_states + extra))
        Z[:, :len(system.plant_states)] = x0
        if tilde0 is not None:
            start = len(system.states)
            Z[:, start:start + len(system.controller_states)] = np.asarray(tilde0, dtype=float)

        steps = max(int(round(G.T / dt)), 1)
        h = G.T / steps
        t_grid = np.linspace(0.0, G.T, steps + 1)
        states = np.full((steps + 1, N, self.n_states), np.nan)
        records = {key: [] for key in ('u', 'v', 'w', 'd')}
        diverged_at = np.full(N, np.nan)
        alive = np.ones(N, dtype=bool)

        with np.errstate(over='ignore', invalid='ignore'):
            for k, t in enumerate(t_grid):
                _, u, v, w, d = self._signals(t, Z, perturbation, disturbance)
                for key, value in zip(('u', 'v', 'w', 'd'), (u, v, w, d)):
                    records[key].append(np.where(alive[:, None], value, np.nan))
                bad = alive & ~(np.all(np.isfinite(Z), axis=1) & (np.max(np.abs(Z), axis=1) <= DIVERGENCE_BOUND))
                if bad.any():
                    diverged_at[bad] = t
                    alive &= ~bad
                    logger.debug(f"{int(bad.sum())} runs diverged at t={t:.4g}")
                states[k, alive] = Z[alive, :self.n_states]
                if k == steps:
                    break
                k1 = self._rates(t, Z, perturbation, disturbance)
                k2 = self._rates(t + h / 2, Z + h / 2 * k1, perturbation, disturbance)
                k3 = self._rates(t + h / 2, Z + h / 2 * k2, perturbation, disturbance)
                k4 = self._rates(t + h, Z + h * k3, perturbation, disturbance)
                Z = Z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                Z[~alive] = 0.0

        return Trajectory(t_grid, states, system.all_states,
                          np.stack(records['u']), G.inputs,
                          np.stack(records['v']), np.stack(records['w']), np.stack(records['d']),
                          diverged_at)


def simulate(system, certificate, x0, perturbation=None, disturbance=None, dt=DEFAULT_DT):
    """Closed-loop trajectory from one or more plant states on the certified slice"""
    return ClosedLoopSimulator(system, certificate).run(x0, perturbation, disturbance, dt)


# Level-set sampling

@dataclass
class LevelSetSample:
    points: np.ndarray
    variables: tuple
    draws: int
    box: np.ndarray

    @property
    def hits(self):
        return self.points.shape[0]

    @property
    def empty(self):
        return self.hits == 0

    @property
    def box_volume(self):
        return float(np.prod(self.box[:, 1] - self.box[:, 0]))

    @property
    def hit_fraction(self):
        return self.hits / self.draws

    def upper_bound(self):
        """Rule-of-three volume bound used when no draw hits the set"""
        return ZERO_HIT_CONFIDENCE / self.draws * self.box_volume


def sample_level_set(V, gamma, bindings, box, n=DEFAULT_MC_SAMPLES, seed=0, variables=None):
    """Uniform draws in ``box`` that satisfy V(bindings, x) <= gamma"""
    reduced = V.substitute(bindings or {})
    if variables is None:
        variables = tuple(name for name in reduced.variables if name not in (bindings or {}))
    variables = tuple(variables)
    box = np.asarray(box, dtype=float).reshape(len(variables), 2)
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("box bounds must satisfy lower < upper")
    rng = np.random.default_rng(seed)
    draws = rng.uniform(box[:, 0], box[:, 1], size=(n, len(variables)))
    values = reduced.compile(variables)(draws)
    points = draws[values <= gamma]
    sample = LevelSetSample(points, variables, n, box)
    if sample.empty:
        logger.info(f"No hits in {n} draws; volume below {sample.upper_bound():.3g} at 95% confidence")
    return sample


@dataclass
class VolumeEstimate:
    estimate: float
    stderr: float
    hits: int
    draws: int
    upper_bound: float

    @property
    def empty(self):
        return self.hits == 0


def mc_volume(V, gamma, bindings, box, n=DEFAULT_MC_SAMPLES, seed=0, variables=None):
    """Hit fraction times box volume with its binomial standard error"""
    sample = sample_level_set(V, gamma, bindings, box, n, seed, variables)
    p = sample.hit_fraction
    volume = sample.box_volume
    stderr = volume * math.sqrt(p * (1.0 - p) / n)
    return VolumeEstimate(p * volume, stderr, sample.hits, n, sample.upper_bound())


def certificate_volume(certificate, box, n=DEFAULT_MC_SAMPLES, seed=0):
    return mc_volume(certificate.slice_polynomial(), certificate.gamma, {}, box, n, seed,
                     certificate.plant_states)


def level_set_boundary(certificate, n_rays=360, r_max=10.0, seed=0, center=None):
    """Boundary points of the certified slice found by bisection along rays.

    Two-state slices use evenly spaced angles; higher dimensions use random
    unit directions. Rays that never leave the set within ``r_max`` are
    dropped.
    """
    variables = certificate.plant_states
    n = len(variables)
    compiled = certificate.slice_polynomial().compile(variables)
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    if n == 2:
        angles = np.linspace(0.0, 2 * math.pi, n_rays, endpoint=False)
        directions = np.column_stack([np.cos(angles), np.sin(angles)])
    elif n == 1:
        directions = np.array([[1.0], [-1.0]])
    else:
        directions = np.random.default_rng(seed).standard_normal((n_rays, n))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    lo = np.zeros(len(directions))
    hi = np.full(len(directions), r_max)
    escapes = compiled(center + hi[:, None] * directions) > certificate.gamma
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        inside = compiled(center + mid[:, None] * directions) <= certificate.gamma
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    points = center + lo[escapes, None] * directions[escapes]
    return pd.DataFrame(points, columns=list(variables))


def volume_table(certificates, box, n=DEFAULT_MC_SAMPLES, seed=0):
    """One row per certificate, keyed by kind, with gamma and the volume of its slice"""
    rows = []
    for name, certificate in certificates.items():
        estimate = certificate_volume(certificate, box, n, seed)
        rows.append({
            'kind': name,
            'hardness': certificate.hardness,
            'gamma': certificate.gamma,
            'volume': estimate.estimate,
            'stderr': estimate.stderr,
            'hits': estimate.hits,
            'draws': estimate.draws,
        })
    return pd.DataFrame(rows)


# Falsification

@dataclass
class ValidationBudget:
    box: np.ndarray
    n_points: int = 100
    n_perturbations: int = 10
    n_disturbances: int = 3
    dt: float = DEFAULT_DT
    n_samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0


@dataclass
class Counterexample:
    kind: str
    x0: dict
    time: float
    value: float
    perturbation: Optional[dict] = None
    disturbance: Optional[list] = None
    trajectory: Optional[pd.DataFrame] = field(default=None, repr=False)

    def to_dict(self):
        return {
            'kind': self.kind,
            'x0': self.x0,
            'time': self.time,
            'value': self.value,
            'perturbation': self.perturbation,
            'disturbance': self.disturbance,
        }


@dataclass
class ValidationReport:
    n_points: int = 0
    n_trajectories: int = 0
    max_level_excess: float = -math.inf
    max_target_value: float = -math.inf
    max_control_violation: float = -math.inf
    max_containment_value: float = -math.inf
    diverged: int = 0
    counterexample: Optional[Counterexample] = None

    @property
    def untested(self):
        """No closed loop was simulated, so absence of a counterexample proves nothing"""
        return self.n_trajectories == 0

    @property
    def passed(self):
        return self.counterexample is None and not self.untested

    def summary(self):
        return {
            'passed': self.passed,
            'untested': self.untested,
            'n_points': self.n_points,
            'n_trajectories': self.n_trajectories,
            'max_level_excess': self.max_level_excess,
            'max_target_value': self.max_target_value,
            'max_control_violation': self.max_control_violation,
            'max_containment_value': self.max_containment_value,
            'diverged': self.diverged,
            'counterexample': None if self.counterexample is None else self.counterexample.to_dict(),
        }


def _evaluate_along(polynomial, trajectory, order):
    """Evaluate a polynomial of (t, states) at every recorded sample"""
    K, N, n = trajectory.states.shape
    X = np.zeros((K * N, len(order)))
    X[:, 0] = np.repeat(trajectory.t, N)
    X[:, 1:1 + n] = trajectory.states.reshape(K * N, n)
    return polynomial.compile(order)(X).reshape(K, N)


def terminal_containment(certificate, target, box, n=DEFAULT_MC_SAMPLES, seed=0):
    """Worst target value over sampled points of the terminal level set.

    Samples {x_G : V(T, x_G, 0) <= gamma + R^2} with filter and controller
    states at zero and returns (max p_x, worst point or None).
    """
    bindings = {name: 0.0 for name in certificate.filter_states + certificate.controller_states}
    bindings[TIME_VARIABLE] = certificate.T
    level = certificate.level_polynomial().substitute(bindings)
    sample = sample_level_set(level, certificate.gamma + certificate.R ** 2, {}, box, n, seed,
                              certificate.plant_states)
    if sample.empty:
        return -math.inf, None
    values = target.compile(certificate.plant_states)(sample.points)
    worst = int(np.argmax(values))
    return float(values[worst]), sample.points[worst]


def initial_states(certificate, sample, n_points, boundary_fraction=BOUNDARY_FRACTION):
    """Pick up to ``n_points`` certified states, the first share nearest the level-set boundary.

    Points are ranked by V(0, x, 0) so the largest values, those closest to
    gamma, come first; the rest follow in sampled order.
    """
    if n_points <= 0 or sample.empty:
        return np.zeros((0, len(certificate.plant_states)))
    n_points = min(n_points, sample.hits)
    n_boundary = int(round(boundary_fraction * n_points))
    values = certificate.slice_polynomial().compile(certificate.plant_states)(sample.points)
    boundary = np.argsort(-values, kind='stable')[:n_boundary]
    taken = np.zeros(sample.hits, dtype=bool)
    taken[boundary] = True
    rest = np.flatnonzero(~taken)[:n_points - n_boundary]
    return sample.points[np.concatenate([boundary, rest])]


def check_certificate(system, certificate, budget):
    """Simulate sampled closed loops from the certified slice and record the worst violations"""
    G = system.nominal
    rng = np.random.default_rng(budget.seed)
    report = ValidationReport()
    value, point = terminal_containment(certificate, G.target, budget.box, budget.n_samples, budget.seed)
    report.max_containment_value = value
    if value > TARGET_TOL:
        report.counterexample = Counterexample('containment', dict(zip(G.states, point.tolist())), G.T, value)
        logger.warning(f"Terminal level set leaves the target at {report.counterexample.x0}")
    if budget.n_points <= 0:
        logger.warning("Validation budget has no initial states; nothing was simulated")
        return report
    sample = sample_level_set(certificate.slice_polynomial(), certificate.gamma, {}, budget.box,
                              budget.n_samples, budget.seed, certificate.plant_states)
    if sample.empty:
        logger.warning("Certified slice has no sampled points inside the validation box")
        return report
    x0 = initial_states(certificate, sample, budget.n_points)
    report.n_points = x0.shape[0]
    perturbations = sample_perturbations(system.iqc, budget.n_perturbations, rng)
    disturbances = disturbance_family(len(G.d_names), G.R, G.T, budget.n_disturbances, rng)
    simulator = ClosedLoopSimulator(system, certificate)
    order = (TIME_VARIABLE,) + system.all_states
    level = certificate.level_polynomial()
    bound = certificate.gamma + certificate.R ** 2
    state_index = [system.all_states.index(name) for name in G.states]

    def record(kind, trajectory, run, time, value, perturbation, disturbance):
        if report.counterexample is None:
            report.counterexample = Counterexample(
                kind, dict(zip(G.states, x0[run].tolist())), float(time), float(value),
                perturbation.to_dict() if perturbation is not None else None,
                disturbance.levels.tolist(),
                trajectory.to_frame(run),
            )
            logger.warning(f"Counterexample ({kind}) from {report.counterexample.x0} at t={time:.4g}")

    for perturbation in perturbations:
        for disturbance in disturbances:
            trajectory = simulator.run(x0, perturbation, disturbance, budget.dt)
            report.n_trajectories += x0.shape[0]
            diverged = np.isfinite(trajectory.diverged_at)
            report.diverged += int(diverged.sum())
            if diverged.any():
                run = int(np.argmax(diverged))
                record('divergence', trajectory, run, trajectory.diverged_at[run], math.inf,
                       perturbation, disturbance)

            excess = _evaluate_along(level, trajectory, order) - bound
            worst = np.nanmax(excess, axis=0)
            report.max_level_excess = max(report.max_level_excess, float(np.nanmax(worst)))
            if np.nanmax(worst) > LEVEL_TOL:
                run = int(np.nanargmax(worst))
                k = int(np.nanargmax(excess[:, run]))
                record('level', trajectory, run, trajectory.t[k], excess[k, run], perturbation, disturbance)

            final = trajectory.final_states()[:, state_index]
            target = G.target.compile(G.states)(final)
            report.max_target_value = max(report.max_target_value, float(np.nanmax(target)))
            if np.nanmax(target) > TARGET_TOL:
                run = int(np.nanargmax(target))
                record('target', trajectory, run, G.T, target[run], perturbation, disturbance)

            if G.P.size:
                violation = np.einsum('ij,knj->kni', G.P, trajectory.u) - G.b
                worst = np.nanmax(violation, axis=(0, 2))
                report.max_control_violation = max(report.max_control_violation, float(np.nanmax(worst)))
                if np.nanmax(worst) > CONTROL_TOL:
                    run = int(np.nanargmax(worst))
                    k = int(np.nanargmax(np.nanmax(violation[:, run, :], axis=1)))
                    record('control', trajectory, run, trajectory.t[k], worst[run], perturbation, disturbance)
    logger.info(f"Validated {report.n_trajectories} trajectories, passed={report.passed}")
    return report


@dataclass
class FalsificationResult:
    counterexample: Optional[Counterexample]
    n_trajectories: int

    @property
    def found(self):
        return self.counterexample is not None

    @property
    def untested(self):
        return self.n_trajectories == 0


def falsify(system, certificate, budget):
    """Search for a violating closed loop; ``untested`` is set when nothing was simulated"""
    report = check_certificate(system, certificate, budget)
    return FalsificationResult(report.counterexample, report.n_trajectories)
