"""
Linear filters, IQC multiplier sets and KYP machinery.

An IQC is a stable filter Psi driven by the perturbation input v and output
w, together with a set of multipliers M. The filter output z = Psi [v; w]
satisfies an integral quadratic constraint on z' M z whose time-domain
form is hard (every prefix) or soft (infinite horizon).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
from scipy import signal
from scipy.integrate import cumulative_trapezoid

from .constants import KYP_SCREEN_POINTS, KYP_SCREEN_RANGE, KYP_STRICT_MARGIN
from .errors import DimensionMismatchError, SolverFailure
from .sdp_backend import SdpStatus, solve
from .sos_compiler import ParamPolynomial, SosProgram, decompile

logger = logging.getLogger(__name__)


class IqcKind(str, Enum):
    D = 'D'
    DG = 'DG'
    NL_GAIN = 'NLgain'
    SECTOR = 'Sector'


class Hardness(str, Enum):
    HARD = 'Hard'
    SOFT = 'Soft'


def _as_matrix(value, rows, cols):
    value = np.asarray(value, dtype=float)
    if value.size == 0:
        return np.zeros((rows, cols))
    return value.reshape(rows, cols) if value.ndim < 2 else value


@dataclass(frozen=True)
class LinearSystem:
    """x' = A x + B1 v + B2 w,  z = C x + D1 v + D2 w"""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.A).shape[0] if np.asarray(self.A).size else 0
        n_z = np.asarray(self.D1).shape[0] if np.asarray(self.D1).ndim == 2 else np.asarray(self.C).shape[0]
        n_v = np.asarray(self.D1).shape[1] if np.asarray(self.D1).ndim == 2 else 0
        n_w = np.asarray(self.D2).shape[1] if np.asarray(self.D2).ndim == 2 else 0
        object.__setattr__(self, 'A', _as_matrix(self.A, n, n))
        object.__setattr__(self, 'B1', _as_matrix(self.B1, n, n_v))
        object.__setattr__(self, 'B2', _as_matrix(self.B2, n, n_w))
        object.__setattr__(self, 'C', _as_matrix(self.C, n_z, n))
        object.__setattr__(self, 'D1', _as_matrix(self.D1, n_z, n_v))
        object.__setattr__(self, 'D2', _as_matrix(self.D2, n_z, n_w))
        shapes = {
            'A': ((n, n), self.A.shape), 'B1': ((n, n_v), self.B1.shape),
            'B2': ((n, n_w), self.B2.shape), 'C': ((n_z, n), self.C.shape),
            'D2': ((n_z, n_w), self.D2.shape),
        }
        for name, (expected, actual) in shapes.items():
            if expected != actual:
                raise DimensionMismatchError(f"{name} has shape {actual}, expected {expected}")

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def n_v(self):
        return self.B1.shape[1]

    @property
    def n_w(self):
        return self.B2.shape[1]

    @property
    def n_z(self):
        return self.C.shape[0]

    @property
    def B(self):
        return np.hstack([self.B1, self.B2])

    @property
    def D(self):
        return np.hstack([self.D1, self.D2])

    def is_hurwitz(self):
        if self.n_states == 0:
            return True
        return bool(np.max(np.linalg.eigvals(self.A).real) < 0)

    def simulate(self, t, v, w=None):
        """Zero-initial-state response; returns (z, x) sampled on ``t``"""
        t = np.asarray(t, dtype=float)
        v = np.asarray(v, dtype=float).reshape(len(t), self.n_v)
        w = np.zeros((len(t), self.n_w)) if w is None else np.asarray(w, dtype=float).reshape(len(t), self.n_w)
        inputs = np.hstack([v, w])
        if self.n_states == 0:
            return inputs @ self.D.T, np.zeros((len(t), 0))
        system = signal.StateSpace(self.A, self.B, self.C, self.D)
        _, z, x = signal.lsim(system, inputs, t)
        return np.asarray(z).reshape(len(t), self.n_z), np.asarray(x).reshape(len(t), self.n_states)


def stack_filters(psi_v, psi_w):
    """diag(psi_v, psi_w) with v feeding the first copy and w the second"""
    A = scipy.linalg.block_diag(psi_v.A, psi_w.A)
    n_v, n_w = psi_v.n_states, psi_w.n_states
    B1 = np.vstack([psi_v.B1, np.zeros((n_w, psi_v.n_v))])
    B2 = np.vstack([np.zeros((n_v, psi_w.n_v)), psi_w.B1])
    C = scipy.linalg.block_diag(psi_v.C, psi_w.C)
    D1 = np.vstack([psi_v.D1, np.zeros((psi_w.n_z, psi_v.n_v))])
    D2 = np.vstack([np.zeros((psi_v.n_z, psi_w.n_v)), psi_w.D1])
    if A.size == 0:
        A = np.zeros((0, 0))
    return LinearSystem(A, B1, B2, C, D1, D2)


def make_psi_column(d, m):
    """Realization of [1, 1/(s+m), ..., 1/(s+m)^d]' as a Jordan chain"""
    if d < 0 or m <= 0:
        raise ValueError(f"need d >= 0 and m > 0, got d={d}, m={m}")
    A = -m * np.eye(d) + np.eye(d, k=-1)
    B = np.zeros((d, 1))
    if d:
        B[0, 0] = 1.0
    C = np.vstack([np.zeros((1, d)), np.eye(d)])
    D = np.zeros((d + 1, 1))
    D[0, 0] = 1.0
    return LinearSystem(A, B, np.zeros((d, 0)), C, D, np.zeros((d + 1, 0)))


def freq_response(system, omega):
    """C (j omega I - A)^-1 [B1 B2] + [D1 D2]"""
    if system.n_states == 0:
        return system.D.astype(complex)
    resolvent = np.linalg.solve(1j * omega * np.eye(system.n_states) - system.A, system.B)
    return system.C @ resolvent + system.D


def _kyp_data(A, B, C, D):
    """Normalize (A, B, C, D) shapes; D must be 2-D or a scalar"""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n_z, nb = D.shape
    A = np.asarray(A, dtype=float)
    n = int(round(np.sqrt(A.size)))
    return (A.reshape(n, n), np.asarray(B, dtype=float).reshape(n, nb),
            np.asarray(C, dtype=float).reshape(n_z, n), D)


def kyp_matrix(Y, A, B, C, D, M):
    """[[A'Y + YA, YB], [B'Y, 0]] + [C D]' M [C D]"""
    A, B, C, D = _kyp_data(A, B, C, D)
    n, nb = B.shape
    n_z = D.shape[0]
    Y = np.asarray(Y, dtype=float).reshape(n, n)
    M = np.asarray(M, dtype=float).reshape(n_z, n_z)
    out = np.zeros((n + nb, n + nb))
    out[:n, :n] = A.T @ Y + Y @ A
    out[:n, n:] = Y @ B
    out[n:, :n] = B.T @ Y
    CD = np.hstack([C, D])
    return out + CD.T @ M @ CD


def kyp_affine(Y, A, B, C, D, M):
    """KYP matrix with symbolic entries in Y and M (ParamPolynomial or numbers)"""
    A, B, C, D = _kyp_data(A, B, C, D)
    n, nb = B.shape
    n_z = D.shape[0]
    size = n + nb
    out = [[ParamPolynomial() for _ in range(size)] for _ in range(size)]
    zero_y = np.zeros((n, n))
    zero_m = np.zeros((n_z, n_z))

    def accumulate(entry, numeric):
        entry = ParamPolynomial.lift(entry)
        for r, c in zip(*np.nonzero(numeric)):
            out[r][c] = out[r][c] + entry * float(numeric[r, c])

    for i in range(n):
        for j in range(n):
            unit = zero_y.copy()
            unit[i, j] = 1.0
            accumulate(Y[i][j], kyp_matrix(unit, A, B, C, D, zero_m))
    for i in range(n_z):
        for j in range(n_z):
            entry = M[i][j]
            if not isinstance(entry, ParamPolynomial) and entry == 0:
                continue
            unit = zero_m.copy()
            unit[i, j] = 1.0
            accumulate(entry, kyp_matrix(zero_y, A, B, C, D, unit))
    return out


class MultiplierSet:
    """Convex set of multiplier matrices attached to one IQC"""

    kind = None

    def instantiate(self, program, name, variables=()):
        """Declare M as decisions of ``program`` with its side constraints"""
        raise NotImplementedError

    def default(self):
        """A fixed member of the set"""
        raise NotImplementedError


@dataclass
class DScaling(MultiplierSet):
    """M = diag(sigma^2 M11, -M11) with M11 PSD"""

    sigma: float
    size: int
    kind = IqcKind.D

    def build(self, M11):
        n = self.size
        scale = self.sigma ** 2
        top = [[M11[i][j] * scale for j in range(n)] + [0.0] * n for i in range(n)]
        bottom = [[0.0] * n + [-M11[i][j] for j in range(n)] for i in range(n)]
        return top + bottom

    def instantiate(self, program, name, variables=()):
        M11 = program.new_symmetric_matrix(f"{name}.M11", self.size)
        program.add_lmi(f"{name}.M11_psd", M11)
        M = self.build(M11)
        program.register(name, M)
        return M

    def default(self):
        return np.array(self.build(np.eye(self.size).tolist()), dtype=float)


@dataclass
class DgScaling(MultiplierSet):
    """M = [[sigma^2 M11, M12], [M12', -M11]], M12 skew, Psi11~ M11 Psi11 >= 0"""

    sigma: float
    psi11: LinearSystem
    kind = IqcKind.DG

    @property
    def size(self):
        return self.psi11.n_z

    def build(self, M11, M12):
        n = self.size
        scale = self.sigma ** 2
        top = [[M11[i][j] * scale for j in range(n)] + [M12[i][j] for j in range(n)] for i in range(n)]
        bottom = [[M12[j][i] for j in range(n)] + [-M11[i][j] for j in range(n)] for i in range(n)]
        return top + bottom

    def instantiate(self, program, name, variables=()):
        M11 = program.new_symmetric_matrix(f"{name}.M11", self.size)
        M12 = program.new_skew_matrix(f"{name}.M12", self.size)
        X = program.new_symmetric_matrix(f"{name}.X", self.psi11.n_states)
        negated = [[-e for e in row] for row in M11]
        lmi = kyp_affine(X, self.psi11.A, self.psi11.B1, self.psi11.C, self.psi11.D1, negated)
        program.add_lmi(f"{name}.positivity", [[-e for e in row] for row in lmi])
        M = self.build(M11, M12)
        program.register(name, M)
        return M

    def default(self):
        n = self.size
        return np.array(self.build(np.eye(n).tolist(), np.zeros((n, n)).tolist()), dtype=float)


@dataclass
class NlGainScaling(MultiplierSet):
    """M = lambda diag(sigma^2 I, -I), lambda >= 0"""

    sigma: float
    n_channels: int = 1
    kind = IqcKind.NL_GAIN

    def build(self, lam):
        n = self.n_channels
        size = 2 * n
        M = [[0.0] * size for _ in range(size)]
        for i in range(n):
            M[i][i] = lam * self.sigma ** 2
            M[n + i][n + i] = -lam
        return M

    def instantiate(self, program, name, variables=()):
        lam = program.new_scalar(f"{name}.lambda", lower=0.0)
        M = self.build(lam)
        program.register(name, M)
        return M

    def default(self):
        return np.array(self.build(1.0), dtype=float)


@dataclass
class SectorScaling(MultiplierSet):
    """M = lambda [[-2 alpha beta, alpha + beta], [alpha + beta, -2]], lambda SOS"""

    alpha: float
    beta: float
    lambda_degree: int = 2
    kind = IqcKind.SECTOR

    def build(self, lam):
        a, b = self.alpha, self.beta
        return [[lam * (-2.0 * a * b), lam * (a + b)], [lam * (a + b), lam * -2.0]]

    def instantiate(self, program, name, variables=()):
        lam = program.new_sos_polynomial(f"{name}.lambda", variables, self.lambda_degree)
        M = self.build(lam)
        program.register(name, M)
        return M

    def default(self):
        return np.array(self.build(1.0), dtype=float)


@dataclass
class IqcSpec:
    kind: IqcKind
    hardness: Hardness
    filter: LinearSystem
    mset: MultiplierSet
    params: dict = field(default_factory=dict)

    @property
    def n_v(self):
        return self.filter.n_v

    @property
    def n_w(self):
        return self.filter.n_w

    @property
    def n_states(self):
        return self.filter.n_states

    @property
    def is_soft(self):
        return self.hardness == Hardness.SOFT


_DEFAULT_HARDNESS = {
    IqcKind.D: Hardness.HARD,
    IqcKind.DG: Hardness.SOFT,
    IqcKind.NL_GAIN: Hardness.HARD,
    IqcKind.SECTOR: Hardness.HARD,
}


def build_iqc(kind, hardness=None, sigma=None, alpha=None, beta=None, d=1, m=10.0,
              n_channels=1, lambda_degree=2):
    """Filter and multiplier set for one perturbation class"""
    kind = IqcKind(kind)
    hardness = Hardness(hardness) if hardness is not None else _DEFAULT_HARDNESS[kind]
    if kind in (IqcKind.D, IqcKind.DG, IqcKind.NL_GAIN) and (sigma is None or sigma <= 0):
        raise ValueError(f"{kind.value} IQC needs a positive sigma")
    if kind == IqcKind.DG and hardness == Hardness.HARD:
        raise ValueError("DG multipliers only give soft IQCs")
    params = {'sigma': sigma, 'alpha': alpha, 'beta': beta, 'd': d, 'm': m}

    if kind in (IqcKind.D, IqcKind.DG):
        psi11 = make_psi_column(d, m)
        filt = stack_filters(psi11, psi11)
        mset = DScaling(sigma, psi11.n_z) if kind == IqcKind.D else DgScaling(sigma, psi11)
    elif kind == IqcKind.NL_GAIN:
        n = n_channels
        filt = LinearSystem(np.zeros((0, 0)), np.zeros((0, n)), np.zeros((0, n)), np.zeros((2 * n, 0)),
                            np.vstack([np.eye(n), np.zeros((n, n))]), np.vstack([np.zeros((n, n)), np.eye(n)]))
        mset = NlGainScaling(sigma, n)
    else:
        if alpha is None or beta is None or alpha > beta:
            raise ValueError("sector IQC needs alpha <= beta")
        filt = LinearSystem(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((2, 0)),
                            np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
        mset = SectorScaling(alpha, beta, lambda_degree)
    return IqcSpec(kind, hardness, filt, mset, params)


def frequency_grid():
    lo, hi = KYP_SCREEN_RANGE
    return np.concatenate([[0.0], np.logspace(np.log10(lo), np.log10(hi), KYP_SCREEN_POINTS)])


def pi22(spec, M, omega):
    """Psi_w(j omega)* M Psi_w(j omega) for the w columns of the filter"""
    response = freq_response(spec.filter, omega)[:, spec.n_v:]
    value = response.conj().T @ np.asarray(M, dtype=float) @ response
    return 0.5 * (value + value.conj().T)


def pi22_screen(spec, M):
    """True when Pi_22(j omega) < 0 on the screening grid"""
    return all(np.linalg.eigvalsh(pi22(spec, M, w)).max() < 0 for w in frequency_grid())


def kyp_find_y22(spec, M, options=None):
    """Y22 with KYP(Y22, A, B2, C, D2, M) < 0, or None when none exists.

    Solves an SDP that maximizes the strict margin; the returned matrix is
    re-verified with lambda_max <= -1e-9.
    """
    M = np.asarray(M, dtype=float)
    filt = spec.filter
    if not pi22_screen(spec, M):
        logger.info(f"Pi_22 frequency screen failed for {spec.kind.value} multiplier")
        return None
    n = filt.n_states
    if n == 0:
        value = kyp_matrix(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, filt.n_w)),
                           filt.C, filt.D2, M)
        return np.zeros((0, 0)) if np.linalg.eigvalsh(value).max() <= -KYP_STRICT_MARGIN else None

    program = SosProgram('kyp_find_y22')
    Y = program.new_symmetric_matrix('Y22', n)
    margin = program.new_scalar('margin', upper=1.0)
    lmi = kyp_affine(Y, filt.A, filt.B2, filt.C, filt.D2, M.tolist())
    size = len(lmi)
    program.add_lmi('kyp', [[-lmi[i][j] - (margin if i == j else 0.0) for j in range(size)]
                            for i in range(size)])
    program.set_objective(margin)
    compiled = program.compile()
    solution = solve(compiled.sdp, options)
    if solution.status == SdpStatus.INFEASIBLE:
        return None
    if solution.status != SdpStatus.OPTIMAL:
        raise SolverFailure(f"KYP search ended with {solution.status.value}")
    if solution.objective <= KYP_STRICT_MARGIN:
        return None
    Y22 = decompile(compiled, solution.y)['Y22']
    if np.linalg.eigvalsh(kyp_matrix(Y22, filt.A, filt.B2, filt.C, filt.D2, M)).max() > -KYP_STRICT_MARGIN:
        logger.warning("KYP solution failed strict re-verification")
        return None
    return Y22


def iqc_running_integral(t, z, M):
    """Running integral of z' M z sampled on ``t``"""
    integrand = np.einsum('ti,ij,tj->t', z, np.asarray(M, dtype=float), z)
    return cumulative_trapezoid(integrand, t, initial=0.0)


def soft_iqc_lower_bound(spec, M, Y22, t, v, w):
    """integral_0^t z'Mz + x_psi' Y22 x_psi along a simulated filter response"""
    z, x = spec.filter.simulate(t, v, w)
    storage = np.einsum('ti,ij,tj->t', x, np.asarray(Y22, dtype=float), x) if x.shape[1] else 0.0
    return iqc_running_integral(t, z, M) + storage
