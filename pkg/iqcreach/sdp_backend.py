"""
Semidefinite program data model and solver binding.

An ``SdpProblem`` maximizes ``b . y`` over a vector ``y`` subject to linear
equalities ``A y = c`` and PSD blocks that are affine in ``y``. Blocks are
stored in svec form: the lower triangle taken column by column, with
off-diagonal entries scaled by sqrt(2), so the Frobenius inner product is
preserved.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import cvxpy as cp
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from pydantic import BaseModel, Field
from scipy.sparse.linalg import lsqr

from .constants import (DEFAULT_FEAS_TOL, DEFAULT_GAP_TOL, DEFAULT_MAX_ITERS,
                        DEFAULT_SOLVER, FALLBACK_SOLVER, SCS_MAX_ITERS)
from .errors import DimensionMismatchError

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class SdpStatus(str, Enum):
    OPTIMAL = 'Optimal'
    INFEASIBLE = 'Infeasible'
    UNBOUNDED = 'Unbounded'
    NUMERICAL_FAILURE = 'NumericalFailure'


class SolverOptions(BaseModel):
    """Tolerances and backend selection for a single SDP solve"""

    feas_tol: float = Field(DEFAULT_FEAS_TOL, gt=0)
    gap_tol: float = Field(DEFAULT_GAP_TOL, gt=0)
    max_iters: int = Field(DEFAULT_MAX_ITERS, gt=0)
    solver: str = DEFAULT_SOLVER
    fallback_solver: Optional[str] = FALLBACK_SOLVER
    backend: str = Field('cvxpy', pattern='^(cvxpy|barrier)$')
    polish: bool = True
    verbose: bool = False


# svec helpers

def svec_length(n):
    return n * (n + 1) // 2


def svec_index(i, j, n):
    """Position of entry (i, j) of an n x n symmetric matrix in its svec"""
    if i < j:
        i, j = j, i
    return j * n - j * (j - 1) // 2 + (i - j)


def svec(matrix):
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    out = np.empty(svec_length(n))
    k = 0
    for j in range(n):
        for i in range(j, n):
            out[k] = matrix[i, j] if i == j else SQRT2 * matrix[i, j]
            k += 1
    return out


def smat(vector, n):
    vector = np.asarray(vector, dtype=float).ravel()
    if vector.size != svec_length(n):
        raise DimensionMismatchError(f"svec of length {vector.size} does not describe a {n}x{n} matrix")
    out = np.empty((n, n))
    k = 0
    for j in range(n):
        for i in range(j, n):
            value = vector[k] if i == j else vector[k] / SQRT2
            out[i, j] = value
            out[j, i] = value
            k += 1
    return out


@dataclass(frozen=True)
class PsdBlock:
    """G(y) = smat(constant + coefficients @ y), required PSD"""

    name: str
    size: int
    constant: np.ndarray
    coefficients: sp.csr_matrix

    def svec_value(self, y):
        return self.constant + self.coefficients @ y

    def matrix(self, y):
        return smat(self.svec_value(y), self.size)


@dataclass(frozen=True)
class SdpProblem:
    n_y: int
    blocks: tuple
    eq_matrix: sp.csr_matrix
    eq_rhs: np.ndarray
    objective: np.ndarray
    variable_names: tuple = ()

    def __post_init__(self):
        if self.eq_matrix.shape != (self.eq_rhs.size, self.n_y):
            raise DimensionMismatchError(
                f"equality matrix {self.eq_matrix.shape} does not match {self.eq_rhs.size} rows, {self.n_y} variables"
            )
        if self.objective.size != self.n_y:
            raise DimensionMismatchError("objective length differs from n_y")
        for block in self.blocks:
            if block.coefficients.shape != (svec_length(block.size), self.n_y):
                raise DimensionMismatchError(f"block '{block.name}' coefficient shape mismatch")

    @property
    def n_equalities(self):
        return self.eq_rhs.size

    def summary(self):
        return {
            'variables': self.n_y,
            'equalities': self.n_equalities,
            'blocks': len(self.blocks),
            'largest_block': max((b.size for b in self.blocks), default=0),
        }


class SdpBuilder:
    """Accumulates variables, PSD blocks and equalities in triplet form"""

    def __init__(self):
        self._names = []
        self._blocks = []
        self._eq_rows, self._eq_cols, self._eq_vals, self._eq_rhs = [], [], [], []
        self._objective = {}

    @property
    def n_y(self):
        return len(self._names)

    def add_variable(self, name):
        self._names.append(name)
        return len(self._names) - 1

    def add_block(self, name, size, entries):
        """``entries`` yields (i, j, var, value); var -1 is the constant term.

        Each entry sets both (i, j) and (j, i).
        """
        self._blocks.append((name, size, list(entries)))

    def add_equality(self, coefficients, rhs):
        row = len(self._eq_rhs)
        for var, value in coefficients.items():
            if value != 0:
                self._eq_rows.append(row)
                self._eq_cols.append(var)
                self._eq_vals.append(float(value))
        self._eq_rhs.append(float(rhs))
        return row

    def set_objective(self, coefficients):
        self._objective = dict(coefficients)

    def build(self):
        n_y = self.n_y
        blocks = []
        for name, size, entries in self._blocks:
            length = svec_length(size)
            constant = np.zeros(length)
            rows, cols, vals = [], [], []
            for i, j, var, value in entries:
                k = svec_index(i, j, size)
                scaled = value if i == j else SQRT2 * value
                if var < 0:
                    constant[k] += scaled
                else:
                    rows.append(k)
                    cols.append(var)
                    vals.append(scaled)
            coefficients = sp.csr_matrix((vals, (rows, cols)), shape=(length, n_y))
            blocks.append(PsdBlock(name, size, constant, coefficients))
        eq_matrix = sp.csr_matrix((self._eq_vals, (self._eq_rows, self._eq_cols)),
                                  shape=(len(self._eq_rhs), n_y))
        objective = np.zeros(n_y)
        for var, value in self._objective.items():
            objective[var] += value
        return SdpProblem(n_y, tuple(blocks), eq_matrix, np.asarray(self._eq_rhs, dtype=float),
                          objective, tuple(self._names))


@dataclass
class VerificationReport:
    block_min_eigs: dict
    equality_residual: float
    tolerance: float

    @property
    def min_eig(self):
        return min(self.block_min_eigs.values(), default=math.inf)

    @property
    def passed(self):
        return self.min_eig >= -self.tolerance and self.equality_residual <= self.tolerance


@dataclass
class SdpSolution:
    status: SdpStatus
    y: Optional[np.ndarray] = None
    objective: float = math.nan
    block_min_eigs: dict = field(default_factory=dict)
    equality_residual: float = math.nan
    iterations: int = 0
    wall_time: float = 0.0
    solver: str = ''
    raw_status: str = ''

    @property
    def is_optimal(self):
        return self.status == SdpStatus.OPTIMAL


def verify_solution(problem, y, tol=DEFAULT_FEAS_TOL):
    """Independent eigenvalue and residual check of a candidate ``y``"""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != problem.n_y:
        raise DimensionMismatchError(f"solution has {y.size} entries, problem has {problem.n_y}")
    eigs = {}
    for block in problem.blocks:
        if block.size == 0:
            continue
        eigs[block.name] = float(np.linalg.eigvalsh(block.matrix(y))[0])
    if problem.n_equalities:
        residual = float(np.max(np.abs(problem.eq_matrix @ y - problem.eq_rhs)))
    else:
        residual = 0.0
    return VerificationReport(eigs, residual, tol)


def _svec_selector(n):
    """Sparse map from the column-major vec of a symmetric matrix to its svec"""
    rows, cols, vals = [], [], []
    k = 0
    for j in range(n):
        for i in range(j, n):
            rows.append(k)
            cols.append(i + j * n)
            vals.append(1.0 if i == j else SQRT2)
            k += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(svec_length(n), n * n))


def _solver_kwargs(solver, options):
    if solver == 'CLARABEL':
        inner = min(options.feas_tol, options.gap_tol) * 0.1
        return {'max_iter': options.max_iters, 'tol_feas': inner,
                'tol_gap_abs': inner, 'tol_gap_rel': inner}
    if solver == 'SCS':
        return {'max_iters': max(options.max_iters, SCS_MAX_ITERS),
                'eps_abs': options.feas_tol, 'eps_rel': options.feas_tol}
    return {}


def _pick_solver(options):
    installed = cp.installed_solvers()
    if options.solver in installed:
        return options.solver
    if options.fallback_solver and options.fallback_solver in installed:
        logger.warning(f"Solver {options.solver} unavailable, falling back to {options.fallback_solver}")
        return options.fallback_solver
    raise RuntimeError(f"Neither {options.solver} nor {options.fallback_solver} is installed")


def _polish(problem, y):
    """Project y onto A y = c with a least-norm correction"""
    if not problem.n_equalities:
        return y
    residual = problem.eq_matrix @ y - problem.eq_rhs
    if not np.any(residual):
        return y
    correction = lsqr(problem.eq_matrix, residual, atol=1e-14, btol=1e-14, iter_lim=10 * problem.n_y)[0]
    return y - correction


_STATUS_MAP = {
    cp.OPTIMAL: SdpStatus.OPTIMAL,
    cp.OPTIMAL_INACCURATE: SdpStatus.OPTIMAL,
    cp.INFEASIBLE: SdpStatus.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: SdpStatus.INFEASIBLE,
    cp.UNBOUNDED: SdpStatus.UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: SdpStatus.UNBOUNDED,
}


def _finalize(problem, y, options, status, start, iterations, solver, raw):
    """Turn a candidate optimum into a verified solution or a numerical failure"""
    if status != SdpStatus.OPTIMAL or y is None:
        return SdpSolution(status=status, iterations=iterations, wall_time=time.perf_counter() - start,
                           solver=solver, raw_status=raw)
    if options.polish:
        y = _polish(problem, y)
    report = verify_solution(problem, y, options.feas_tol)
    if not report.passed:
        logger.warning(
            f"Solver reported {raw} but verification failed: min eig {report.min_eig:.3e}, "
            f"residual {report.equality_residual:.3e}"
        )
        status = SdpStatus.NUMERICAL_FAILURE
    return SdpSolution(status=status, y=y, objective=float(problem.objective @ y),
                       block_min_eigs=report.block_min_eigs, equality_residual=report.equality_residual,
                       iterations=iterations, wall_time=time.perf_counter() - start,
                       solver=solver, raw_status=raw)


def solve(problem, options=None):
    """Solve an SDP; an ``Optimal`` status is always independently verified"""
    options = options or SolverOptions()
    start = time.perf_counter()
    if options.backend == 'barrier':
        return BarrierSolver(options).solve(problem)
    if problem.n_y == 0:
        report = verify_solution(problem, np.zeros(0), options.feas_tol)
        status = SdpStatus.OPTIMAL if report.passed else SdpStatus.INFEASIBLE
        return SdpSolution(status=status, y=np.zeros(0) if report.passed else None, objective=0.0,
                           block_min_eigs=report.block_min_eigs, equality_residual=report.equality_residual,
                           wall_time=time.perf_counter() - start, solver='none', raw_status=status.value)

    y = cp.Variable(problem.n_y)
    constraints = []
    for block in problem.blocks:
        if block.size == 0:
            continue
        gram = cp.Variable((block.size, block.size), PSD=True)
        vec_gram = cp.reshape(gram, (block.size * block.size,), order='F')
        constraints.append(_svec_selector(block.size) @ vec_gram == block.constant + block.coefficients @ y)
    if problem.n_equalities:
        constraints.append(problem.eq_matrix @ y == problem.eq_rhs)
    program = cp.Problem(cp.Maximize(problem.objective @ y), constraints)

    solver = _pick_solver(options)
    try:
        program.solve(solver=solver, verbose=options.verbose, **_solver_kwargs(solver, options))
    except cp.error.SolverError as e:
        logger.warning(f"{solver} failed: {e}")
        if options.fallback_solver and options.fallback_solver != solver:
            fallback = options.model_copy(update={'solver': options.fallback_solver, 'fallback_solver': None})
            return solve(problem, fallback)
        return SdpSolution(status=SdpStatus.NUMERICAL_FAILURE, wall_time=time.perf_counter() - start,
                           solver=solver, raw_status=str(e))

    raw = program.status
    status = _STATUS_MAP.get(raw, SdpStatus.NUMERICAL_FAILURE)
    stats = program.solver_stats
    iterations = int(stats.num_iters) if stats is not None and stats.num_iters is not None else 0
    logger.debug(f"{solver}: {raw} after {iterations} iterations on {problem.summary()}")
    return _finalize(problem, y.value, options, status, start, iterations, solver, raw)


class BarrierSolver:
    """Dense log-det barrier method for small single-block problems.

    Equalities are eliminated through a null-space parametrization; a
    phase-one problem finds a strictly feasible start.
    """

    MAX_SIZE = 20
    MU = 10.0
    MAX_NEWTON = 100
    UNBOUNDED_LEVEL = 1e10

    def __init__(self, options=None):
        self.options = options or SolverOptions(backend='barrier')
        self.iterations = 0

    def solve(self, problem):
        start = time.perf_counter()
        self.iterations = 0
        if len(problem.blocks) != 1 or problem.blocks[0].size > self.MAX_SIZE:
            raise ValueError("barrier backend handles a single PSD block of size at most 20")
        block = problem.blocks[0]
        n = block.size
        base = smat(block.constant, n)
        coeffs = [smat(block.coefficients[:, i].toarray().ravel(), n) for i in range(problem.n_y)]

        if problem.n_equalities:
            A = problem.eq_matrix.toarray()
            y0 = np.linalg.lstsq(A, problem.eq_rhs, rcond=None)[0]
            if np.max(np.abs(A @ y0 - problem.eq_rhs)) > self.options.feas_tol:
                return self._result(problem, None, SdpStatus.INFEASIBLE, start)
            null = scipy.linalg.null_space(A)
        else:
            y0 = np.zeros(problem.n_y)
            null = np.eye(problem.n_y)

        g0 = base + sum((y0[i] * coeffs[i] for i in range(problem.n_y)), np.zeros((n, n)))
        gz = [sum((null[i, k] * coeffs[i] for i in range(problem.n_y)), np.zeros((n, n)))
              for k in range(null.shape[1])]
        cost = null.T @ problem.objective if null.size else np.zeros(0)

        z = np.zeros(len(gz))
        if np.linalg.eigvalsh(self._assemble(g0, gz, z))[0] <= 0:
            z, status = self._phase_one(g0, gz, z)
            if z is None:
                return self._result(problem, None, status, start)

        t = 1.0
        while n / t > self.options.gap_tol:
            z, unbounded = self._center(t, cost, g0, gz, z)
            if unbounded:
                return self._result(problem, None, SdpStatus.UNBOUNDED, start)
            t *= self.MU
        y = y0 + (null @ z if null.size else 0.0)
        return self._result(problem, y, SdpStatus.OPTIMAL, start)

    def _result(self, problem, y, status, start):
        return _finalize(problem, y, self.options, status, start, self.iterations, 'barrier', status.value)

    @staticmethod
    def _assemble(g0, gz, z):
        out = g0.copy()
        for coefficient, matrix in zip(z, gz):
            out = out + coefficient * matrix
        return out

    @staticmethod
    def _logdet(matrix):
        try:
            factor = np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError:
            return None
        return 2.0 * np.sum(np.log(np.diag(factor)))

    def _center(self, t, cost, g0, gz, z):
        """Maximize t * cost . z + log det G(z) by damped Newton steps"""
        for _ in range(self.MAX_NEWTON):
            self.iterations += 1
            G = self._assemble(g0, gz, z)
            Ginv = np.linalg.inv(G)
            if not gz:
                return z, False
            products = [Ginv @ m for m in gz]
            grad = t * cost + np.array([np.trace(p) for p in products])
            hess = np.array([[np.sum(p * q.T) for q in products] for p in products])
            hess = hess + 1e-12 * max(1.0, np.abs(hess).max()) * np.eye(len(gz))
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            decrement = float(grad @ step)
            if decrement / 2.0 < 1e-10:
                return z, False
            current = t * cost @ z + self._logdet(G)
            alpha = 1.0
            while alpha > 1e-14:
                candidate = z + alpha * step
                logdet = self._logdet(self._assemble(g0, gz, candidate))
                if logdet is not None and t * cost @ candidate + logdet >= current + 0.25 * alpha * decrement:
                    break
                alpha *= 0.5
            else:
                return z, False
            z = candidate
            if abs(cost @ z) > self.UNBOUNDED_LEVEL:
                return z, True
        return z, False

    def _phase_one(self, g0, gz, z):
        """Maximize s subject to G(z) - s I > 0 and s < 1 until s turns positive"""
        n = g0.shape[0]
        s = np.linalg.eigvalsh(self._assemble(g0, gz, z))[0] - 1.0
        base = scipy.linalg.block_diag(g0, np.ones((1, 1)))
        augmented = [scipy.linalg.block_diag(m, np.zeros((1, 1))) for m in gz]
        augmented.append(-np.eye(n + 1))
        cost = np.zeros(len(augmented))
        cost[-1] = 1.0
        w = np.append(z, s)
        t = 1.0
        while True:
            w, _ = self._center(t, cost, base, augmented, w)
            if w[-1] > 0:
                return w[:-1], SdpStatus.OPTIMAL
            if n / t <= self.options.gap_tol:
                break
            t *= self.MU
        if w[-1] < -self.options.feas_tol:
            return None, SdpStatus.INFEASIBLE
        return None, SdpStatus.NUMERICAL_FAILURE


def dump_sparse(problem, path):
    """Write the problem as plain text.

    Lines after the header are ``block row col var value`` with 1-based rows
    and columns. Block 0 holds the equalities (col 0); var 0 is the constant
    term, vars 1..n_y follow ``y``. PSD entries are the lower triangle of the
    unscaled matrices.
    """
    lines = ['# iqcreach sparse SDP',
             f'n_y {problem.n_y}',
             'blocks ' + ' '.join(str(b.size) for b in problem.blocks)]
    for var in np.flatnonzero(problem.objective):
        lines.append(f'objective {var + 1} {problem.objective[var]!r}')
    eq = problem.eq_matrix.tocoo()
    for row, col, value in zip(eq.row, eq.col, eq.data):
        lines.append(f'0 {row + 1} 0 {col + 1} {float(value)!r}')
    for row in np.flatnonzero(problem.eq_rhs):
        lines.append(f'0 {row + 1} 0 0 {problem.eq_rhs[row]!r}')
    for index, block in enumerate(problem.blocks, start=1):
        n = block.size
        positions = [(i, j) for j in range(n) for i in range(j, n)]
        for k in np.flatnonzero(block.constant):
            i, j = positions[k]
            value = block.constant[k] if i == j else block.constant[k] / SQRT2
            lines.append(f'{index} {i + 1} {j + 1} 0 {value!r}')
        coo = block.coefficients.tocoo()
        for k, var, value in zip(coo.row, coo.col, coo.data):
            i, j = positions[k]
            value = value if i == j else value / SQRT2
            lines.append(f'{index} {i + 1} {j + 1} {var + 1} {float(value)!r}')
    with open(path, 'w') as handle:
        handle.write('\n'.join(lines) + '\n')
    return path
