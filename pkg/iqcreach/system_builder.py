"""
Nominal plants and their IQC extensions.

The nominal plant is x_G' = f(x_G) + g(x_G) u with perturbation input
v = h(x_G, w, d). Extending it with an IQC filter appends the filter states
and exposes z = Psi [v; w]. When the perturbation acts on the actuator, the
commanded input becomes a controller state x~ driven by a polynomial k~.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .constants import (CONTROLLER_STATE_PREFIX, FILTER_STATE_PREFIX, LINEARIZE_RESIDUAL_TOL,
                        NEWTON_MAX_ITERS, NEWTON_TOL)
from .errors import ConvergenceError, DimensionMismatchError
from .poly_core import Polynomial, PolynomialMatrix

logger = logging.getLogger(__name__)


@dataclass
class NominalSystem:
    """Control-affine polynomial plant with a polytopic input set and a target"""

    states: tuple
    inputs: tuple
    f: PolynomialMatrix
    g: PolynomialMatrix
    target: Polynomial
    T: float
    P: np.ndarray
    b: np.ndarray
    R: float = 0.0
    w_names: tuple = ()
    d_names: tuple = ()
    h: Optional[PolynomialMatrix] = None
    name: str = 'plant'

    def __post_init__(self):
        self.states = tuple(self.states)
        self.inputs = tuple(self.inputs)
        self.w_names = tuple(self.w_names)
        self.d_names = tuple(self.d_names)
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float)).reshape(-1, len(self.inputs))
        self.b = np.asarray(self.b, dtype=float).ravel()
        n = len(self.states)
        if self.f.shape != (n, 1):
            raise DimensionMismatchError(f"f has shape {self.f.shape}, expected ({n}, 1)")
        if self.g.shape != (n, len(self.inputs)):
            raise DimensionMismatchError(f"g has shape {self.g.shape}, expected ({n}, {len(self.inputs)})")
        if self.P.shape[0] != self.b.size:
            raise DimensionMismatchError("P and b disagree on the number of polytope rows")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.R < 0 or (self.R == 0 and self.d_names):
            raise ValueError("disturbance energy bound R must be positive when disturbances are present")
        for name in self.inputs:
            if any(e.degree_in(name) > 0 for row in self.f.to_list() + self.g.to_list() for e in row):
                raise ValueError(f"f and g must not depend on input '{name}'")
        if self.h is None:
            self.h = PolynomialMatrix.zeros(0, 1)

    @property
    def n_states(self):
        return len(self.states)

    @property
    def n_inputs(self):
        return len(self.inputs)

    @property
    def n_v(self):
        return self.h.shape[0]

    def h_depends_on_input(self):
        return any(name in self.h.variables and self.h[i, 0].degree_in(name) > 0
                   for name in self.inputs for i in range(self.n_v))

    def vector_field(self, controls):
        """f + g u as a column, with ``controls`` a list of polynomials or numbers"""
        u = PolynomialMatrix.column(list(controls))
        return self.f + self.g @ u


@dataclass
class ExtendedSystem:
    """Plant plus IQC filter (and actuator states when augmented)"""

    nominal: NominalSystem
    iqc: object
    F: PolynomialMatrix
    H: PolynomialMatrix
    plant_states: tuple
    filter_states: tuple
    controller_states: tuple = ()
    direct_inputs: tuple = ()
    perturbed_channels: tuple = ()
    v: Optional[PolynomialMatrix] = None

    @property
    def states(self):
        """Plant then filter states; controller states are listed separately"""
        return self.plant_states + self.filter_states

    @property
    def all_states(self):
        return self.states + self.controller_states

    @property
    def w_names(self):
        return self.nominal.w_names

    @property
    def d_names(self):
        return self.nominal.d_names

    @property
    def is_augmented(self):
        return bool(self.controller_states)

    @property
    def n_filter(self):
        return len(self.filter_states)

    def control_vector(self, direct, tilde=None):
        """Full input vector: direct channels from ``direct``, perturbed ones from x~"""
        direct = dict(zip(self.direct_inputs, direct))
        tilde_states = dict(zip(self.perturbed_channels, self.controller_states))
        out = []
        for name in self.nominal.inputs:
            if name in direct:
                out.append(direct[name])
            else:
                out.append(Polynomial.variable(tilde_states[name]))
        return out


def _filter_names(prefix, count):
    return tuple(f"{prefix}{i + 1}" for i in range(count))


def _filter_rows(iqc, v, w_names, filter_states):
    """A_psi x_psi + B_psi1 v + B_psi2 w and C_psi x_psi + D_psi1 v + D_psi2 w"""
    filt = iqc.filter
    xp = PolynomialMatrix.column([Polynomial.variable(n) for n in filter_states]) if filter_states else None
    w = PolynomialMatrix.column([Polynomial.variable(n) for n in w_names])

    def affine(Amat, Bmat1, Bmat2):
        total = Bmat1 @ v if Bmat1.size else PolynomialMatrix.zeros(Bmat1.shape[0], 1)
        total = total + (Bmat2 @ w if Bmat2.size else PolynomialMatrix.zeros(Bmat2.shape[0], 1))
        if xp is not None and Amat.size:
            total = total + Amat @ xp
        return total

    dynamics = affine(filt.A, filt.B1, filt.B2) if filter_states else PolynomialMatrix.zeros(0, 1)
    outputs = affine(filt.C, filt.D1, filt.D2)
    return dynamics, outputs


def extend(G, iqc=None):
    """Build F = [f + g u; A_psi x_psi + B_psi1 h + B_psi2 w] and H = Psi [h; w]"""
    u = [Polynomial.variable(name) for name in G.inputs]
    plant = G.vector_field(u)
    if iqc is None:
        return ExtendedSystem(G, None, plant, PolynomialMatrix.zeros(0, 1), G.states, (),
                              direct_inputs=G.inputs, v=G.h)
    if iqc.n_v != G.n_v or iqc.n_w != len(G.w_names):
        raise DimensionMismatchError(
            f"IQC expects n_v={iqc.n_v}, n_w={iqc.n_w}; plant has n_v={G.n_v}, n_w={len(G.w_names)}"
        )
    filter_states = _filter_names(FILTER_STATE_PREFIX, iqc.n_states)
    dynamics, outputs = _filter_rows(iqc, G.h, G.w_names, filter_states)
    F = PolynomialMatrix.vstack([plant, dynamics]) if filter_states else plant
    return ExtendedSystem(G, iqc, F, outputs, G.states, filter_states, direct_inputs=G.inputs, v=G.h)


def augment_actuator(G, iqc, channels):
    """Move the perturbed input channels behind controller states.

    For each perturbed channel i the plant receives x~_i + w_i, the
    commanded value x~_i feeds both the perturbation input and the input
    polytope, and x~_i' = k~_i is synthesized later.
    """
    channels = tuple(channels)
    if not channels:
        raise ValueError("no perturbed input channels given; use extend for output perturbations")
    for name in channels:
        if name not in G.inputs:
            raise ValueError(f"unknown input channel '{name}'")
    if len(G.w_names) != len(channels):
        raise DimensionMismatchError("one perturbation output per perturbed channel is required")
    tilde = _filter_names(CONTROLLER_STATE_PREFIX, len(channels))
    channel_w = dict(zip(channels, G.w_names))
    channel_tilde = dict(zip(channels, tilde))
    controls = []
    for name in G.inputs:
        if name in channel_w:
            controls.append(Polynomial.variable(channel_tilde[name]) + Polynomial.variable(channel_w[name]))
        else:
            controls.append(Polynomial.variable(name))
    plant = G.vector_field(controls)
    v = G.h.substitute({name: Polynomial.variable(channel_tilde[name]) for name in channels})
    direct = tuple(name for name in G.inputs if name not in channel_w)
    if iqc is None:
        return ExtendedSystem(G, None, plant, PolynomialMatrix.zeros(0, 1), G.states, (), tilde,
                              direct, channels, v)
    if iqc.n_v != v.shape[0] or iqc.n_w != len(G.w_names):
        raise DimensionMismatchError("IQC channel count does not match the perturbed actuators")
    filter_states = _filter_names(FILTER_STATE_PREFIX, iqc.n_states)
    dynamics, outputs = _filter_rows(iqc, v, G.w_names, filter_states)
    F = PolynomialMatrix.vstack([plant, dynamics]) if filter_states else plant
    return ExtendedSystem(G, iqc, F, outputs, G.states, filter_states, tilde, direct, channels, v)


def equilibrium(G, guess, fixed_inputs=None, tol=NEWTON_TOL, max_iters=NEWTON_MAX_ITERS):
    """Solve f + g u = 0 (w = 0, d = 0) by least-norm Newton steps.

    ``guess`` maps state and input names to starting values; inputs listed
    in ``fixed_inputs`` keep the given value.
    """
    fixed_inputs = dict(fixed_inputs or {})
    unknowns = list(G.states) + [u for u in G.inputs if u not in fixed_inputs]
    zero = {name: 0 for name in G.w_names + G.d_names}
    field_ = G.vector_field([Polynomial.variable(u) for u in G.inputs]).substitute(zero)
    field_ = field_.substitute(fixed_inputs)
    jacobian = field_.jacobian(unknowns)
    point = {name: float(guess.get(name, 0.0)) for name in unknowns}
    for iteration in range(max_iters + 1):
        residual = field_.evaluate(point).ravel()
        if np.max(np.abs(residual), initial=0.0) <= tol:
            logger.debug(f"Equilibrium found after {iteration} Newton steps")
            states = np.array([point[s] for s in G.states])
            inputs = np.array([fixed_inputs.get(u, point.get(u, 0.0)) for u in G.inputs], dtype=float)
            return states, inputs
        J = jacobian.evaluate(point)
        step = np.linalg.lstsq(J, -residual, rcond=None)[0]
        for name, delta in zip(unknowns, step):
            point[name] += delta
    raise ConvergenceError(f"Newton did not reach residual {tol} in {max_iters} iterations")


def extended_equilibrium(E, x_eq, u_eq):
    """Append the filter steady state and the commanded inputs to a plant equilibrium"""
    point = dict(zip(E.plant_states, x_eq))
    point.update(zip(E.nominal.inputs, u_eq))
    point.update({name: 0.0 for name in E.w_names + E.d_names})
    for channel, tilde in zip(E.perturbed_channels, E.controller_states):
        point[tilde] = point[channel]
    if E.filter_states:
        filt = E.iqc.filter
        v = E.v.evaluate(point).ravel()
        xp = np.linalg.solve(filt.A, -filt.B1 @ v)
        point.update(zip(E.filter_states, xp))
    return point


def linearize(E, x_eq, u_eq):
    """(A, B) of the extended dynamics at an equilibrium with w = 0, d = 0.

    States are plant, filter and controller states; inputs are the direct
    channels followed by one integrator input per controller state.
    """
    point = extended_equilibrium(E, x_eq, u_eq)
    zero = {name: 0 for name in E.w_names + E.d_names}
    direct = [Polynomial.variable(u) for u in E.direct_inputs]
    F = E.F.substitute(zero)
    states = list(E.states) + list(E.controller_states)
    n, n_tilde = len(E.states), len(E.controller_states)
    residual = F.evaluate(point).ravel()
    if np.max(np.abs(residual), initial=0.0) > LINEARIZE_RESIDUAL_TOL:
        logger.warning(f"Linearizing away from equilibrium, residual {np.max(np.abs(residual)):.2e}")
    A = np.zeros((n + n_tilde, n + n_tilde))
    A[:n, :] = F.jacobian(states).evaluate(point)
    B = np.zeros((n + n_tilde, len(direct) + n_tilde))
    if direct:
        B[:n, :len(direct)] = F.jacobian(list(E.direct_inputs)).evaluate(point)
    B[n:, len(direct):] = np.eye(n_tilde)
    return A, B

