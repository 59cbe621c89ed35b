"""
Sum-of-squares programs compiled to SDP data.

A program collects decision handles (entries of ``y``), polynomials that are
affine in those handles (``ParamPolynomial``), SOS constraints, LMIs and
linear equalities. ``compile`` turns every SOS constraint into a Gram PSD
block plus coefficient-matching equalities; ``decompile`` maps a solution
vector back to concrete polynomials and matrices.
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .constants import MARGIN_CAP, SOS_AUDIT_TOL
from .errors import BilinearExpressionError, DimensionMismatchError, SosDegreeError
from .poly_core import Monomial, Polynomial, PolynomialMatrix, _merge_variables, grlex_key
from .sdp_backend import SdpBuilder, SdpStatus, SolverOptions, solve

logger = logging.getLogger(__name__)


class ParamPolynomial:
    """fixed + sum_h y[h] * basis[h], affine in the decision handles"""

    __array_ufunc__ = None

    def __init__(self, fixed=None, basis=None):
        if fixed is None:
            fixed = Polynomial.zero()
        elif not isinstance(fixed, Polynomial):
            fixed = Polynomial.constant(fixed)
        self.fixed = fixed
        self.basis = {h: p for h, p in (basis or {}).items() if not p.is_zero()}

    @classmethod
    def handle(cls, h, polynomial=None):
        return cls(None, {h: polynomial if polynomial is not None else Polynomial.constant(1)})

    @classmethod
    def lift(cls, value):
        if isinstance(value, ParamPolynomial):
            return value
        if isinstance(value, Polynomial):
            return cls(value)
        if isinstance(value, (int, float, np.number)):
            return cls(Polynomial.constant(value))
        raise TypeError(f"cannot lift {type(value).__name__} to a parametric polynomial")

    @property
    def handles(self):
        return tuple(self.basis)

    @property
    def is_fixed(self):
        return not self.basis

    @property
    def variables(self):
        names = self.fixed.variables
        for p in self.basis.values():
            names = _merge_variables(names, p.variables)
        return names

    def parts(self):
        yield self.fixed
        yield from self.basis.values()

    def degree(self):
        return max(p.degree() for p in self.parts())

    def degree_in(self, variables):
        return max(p.degree_in(variables) for p in self.parts())

    def max_abs_coefficient(self):
        return max(p.max_abs_coefficient() for p in self.parts())

    def __add__(self, other):
        try:
            other = ParamPolynomial.lift(other)
        except TypeError:
            return NotImplemented
        basis = dict(self.basis)
        for h, p in other.basis.items():
            basis[h] = basis[h] + p if h in basis else p
        return ParamPolynomial(self.fixed + other.fixed, basis)

    __radd__ = __add__

    def __neg__(self):
        return ParamPolynomial(-self.fixed, {h: -p for h, p in self.basis.items()})

    def __sub__(self, other):
        try:
            other = ParamPolynomial.lift(other)
        except TypeError:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return ParamPolynomial.lift(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, ParamPolynomial):
            if other.is_fixed:
                other = other.fixed
            elif self.is_fixed:
                return other * self.fixed
            else:
                raise BilinearExpressionError(
                    f"product of expressions in handles {self.handles[:3]} and {other.handles[:3]}"
                )
        if not isinstance(other, (Polynomial, int, float, np.number)):
            return NotImplemented
        return ParamPolynomial(self.fixed * other, {h: p * other for h, p in self.basis.items()})

    __rmul__ = __mul__

    def differentiate(self, variable):
        return ParamPolynomial(self.fixed.differentiate(variable),
                               {h: p.differentiate(variable) for h, p in self.basis.items()})

    def substitute(self, bindings):
        """Substitute fixed polynomials or numbers for variables"""
        return ParamPolynomial(self.fixed.substitute(bindings),
                               {h: p.substitute(bindings) for h, p in self.basis.items()})

    def evaluate(self, y):
        result = self.fixed
        for h, p in self.basis.items():
            value = float(y[h])
            if value != 0.0:
                result = result + value * p
        return result

    def affine_form(self):
        """(constant, {handle: coefficient}) for an expression without variables"""
        if any(not p.is_constant() for p in self.parts()):
            raise DimensionMismatchError("expression depends on polynomial variables")
        return (float(self.fixed.constant_term()),
                {h: float(p.constant_term()) for h, p in self.basis.items()})

    def coefficient_rows(self, order):
        """Map exponent tuple -> (fixed coefficient, {handle: coefficient}) over ``order``"""
        rows = {}
        for exps, c in self.fixed.with_variables(order).terms.items():
            rows.setdefault(exps, [0.0, {}])[0] = float(c)
        for h, p in self.basis.items():
            for exps, c in p.with_variables(order).terms.items():
                rows.setdefault(exps, [0.0, {}])[1][h] = float(c)
        return rows

    def __repr__(self):
        return f"ParamPolynomial({self.fixed}, handles={len(self.basis)})"


def bind_affine(polynomial, bindings):
    """Substitute parametric expressions for variables that enter affinely"""
    names = [n for n in bindings if n in polynomial.variables and polynomial.degree_in(n) > 0]
    if names and polynomial.degree_in(names) > 1:
        raise BilinearExpressionError(f"{names} do not enter affinely")
    zero = {n: 0 for n in names}
    result = ParamPolynomial(polynomial.substitute(zero))
    for name in names:
        coefficient = polynomial.differentiate(name).substitute(zero)
        result = result + ParamPolynomial.lift(bindings[name]) * coefficient
    return result


def monomials_up_to(variables, degree, min_degree=0):
    """All monomials with min_degree <= total degree <= degree, graded-lex ascending"""
    variables = tuple(variables)
    n = len(variables)
    out = []
    for d in range(min_degree, degree + 1):
        for combo in combinations_with_replacement(range(n), d):
            exps = [0] * n
            for i in combo:
                exps[i] += 1
            out.append(tuple(exps))
    out.sort(key=grlex_key)
    return out


def gram_basis(variables, degree):
    """Monomials of total degree <= degree/2 for an SOS polynomial of even degree"""
    if degree < 0 or degree % 2:
        raise SosDegreeError(f"SOS polynomial degree must be even and non-negative, got {degree}")
    variables = tuple(variables)
    return [Monomial(e, variables) for e in monomials_up_to(variables, degree // 2)]


def prune_basis(support, n_variables):
    """Half-support monomials consistent with ``support``.

    Keeps monomials inside half the per-variable exponent box and half the
    total-degree range, then repeatedly drops m when 2m is neither in the
    support nor a sum of two distinct surviving monomials.
    """
    support = set(support)
    if not support:
        return []
    lo = [math.ceil(min(e[i] for e in support) / 2) for i in range(n_variables)]
    hi = [max(e[i] for e in support) // 2 for i in range(n_variables)]
    degrees = [sum(e) for e in support]
    lo_degree = math.ceil(min(degrees) / 2)
    hi_degree = max(degrees) // 2
    candidates = [
        e for e in monomials_up_to(range(n_variables), hi_degree, lo_degree)
        if all(lo[i] <= e[i] <= hi[i] for i in range(n_variables))
    ]
    changed = True
    while changed:
        changed = False
        present = set(candidates)
        kept = []
        for m in candidates:
            doubled = tuple(2 * a for a in m)
            if doubled in support or any(
                other != m and tuple(d - o for d, o in zip(doubled, other)) in present
                for other in candidates
                if all(o <= d for o, d in zip(other, doubled))
            ):
                kept.append(m)
            else:
                changed = True
        candidates = kept
    return candidates


def _affine_close(first, second, tol=1e-9):
    (c1, d1), (c2, d2) = first, second
    if abs(c1 - c2) > tol * (1.0 + abs(c1)):
        return False
    return all(abs(d1.get(h, 0.0) - d2.get(h, 0.0)) <= tol * (1.0 + abs(d1.get(h, 0.0)))
               for h in set(d1) | set(d2))


@dataclass
class SosConstraint:
    name: str
    expression: ParamPolynomial
    variables: tuple
    family: str = ''
    with_margin: bool = True


@dataclass
class GramRecord:
    """Where the Gram matrix of one compiled SOS constraint lives in y"""

    name: str
    variables: tuple
    basis: list
    handles: np.ndarray
    scale: float
    margin_handle: Optional[int] = None

    def gram(self, y):
        n = len(self.basis)
        Q = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                Q[i, j] = Q[j, i] = float(y[self.handles[i, j]])
        if self.margin_handle is not None:
            Q = Q + float(y[self.margin_handle]) * np.eye(n)
        return Q / self.scale

    def monomials(self):
        return [Monomial(e, self.variables) for e in self.basis]


@dataclass
class CompiledProgram:
    sdp: object
    program: object
    grams: list = field(default_factory=list)


class SosProgram:
    """Builder for SOS programs that maximize a linear objective"""

    def __init__(self, name='sos'):
        self.name = name
        self.handle_names = []
        self.constraints = []
        self.decisions = {}
        self._gram_decisions = []
        self._lmis = []
        self._equalities = []
        self._objective = ParamPolynomial()
        self.margin_handle = None

    @property
    def n_handles(self):
        return len(self.handle_names)

    def new_handle(self, name):
        self.handle_names.append(name)
        return len(self.handle_names) - 1

    def new_scalar(self, name, lower=None, upper=None):
        value = ParamPolynomial.handle(self.new_handle(name))
        if lower is not None:
            self.add_lmi(f"{name}>=lower", [[value - lower]])
        if upper is not None:
            self.add_lmi(f"{name}<=upper", [[upper - value]])
        self.decisions[name] = value
        return value

    def new_free_polynomial(self, name, variables, degree, min_degree=0):
        variables = tuple(variables)
        basis = {}
        for exps in monomials_up_to(variables, max(degree, -1), min_degree):
            h = self.new_handle(f"{name}[{Monomial(exps, variables)}]")
            basis[h] = Polynomial({exps: 1}, variables)
        value = ParamPolynomial(Polynomial.zero(variables), basis)
        self.decisions[name] = value
        return value

    def new_sos_polynomial(self, name, variables, degree, offset=0.0):
        """offset + m' Q m with Q PSD over the full half-degree basis"""
        basis = gram_basis(variables, degree)
        n = len(basis)
        handles = np.zeros((n, n), dtype=int)
        terms = {}
        for i in range(n):
            for j in range(i, n):
                h = self.new_handle(f"{name}.Q[{i},{j}]")
                handles[i, j] = handles[j, i] = h
                product = basis[i].to_polynomial() * basis[j].to_polynomial()
                terms[h] = product * (1 if i == j else 2)
        self._gram_decisions.append((f"gram:{name}", handles))
        value = ParamPolynomial(Polynomial.constant(offset, tuple(variables)), terms)
        self.decisions[name] = value
        return value

    def new_symmetric_matrix(self, name, n):
        entries = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                entries[i][j] = entries[j][i] = ParamPolynomial.handle(self.new_handle(f"{name}[{i},{j}]"))
        self.decisions[name] = entries
        return entries

    def new_skew_matrix(self, name, n):
        entries = [[ParamPolynomial() for _ in range(n)] for _ in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                value = ParamPolynomial.handle(self.new_handle(f"{name}[{i},{j}]"))
                entries[i][j] = value
                entries[j][i] = -value
        self.decisions[name] = entries
        return entries

    def register(self, name, value):
        """Expose an expression under ``name`` in decompiled results"""
        self.decisions[name] = value

    def add_lmi(self, name, matrix, margin=0.0):
        """matrix - margin * I must be PSD; entries are variable-free expressions"""
        matrix = [[ParamPolynomial.lift(e) for e in row] for row in matrix]
        n = len(matrix)
        if any(len(row) != n for row in matrix):
            raise DimensionMismatchError(f"LMI '{name}' is not square")
        self._lmis.append((name, matrix, margin))

    def add_sos(self, name, expression, variables, family='', with_margin=True):
        constraint = SosConstraint(name, ParamPolynomial.lift(expression), tuple(variables),
                                   family or name, with_margin)
        self.constraints.append(constraint)
        return constraint

    def add_equality(self, name, expression):
        self._equalities.append((name, ParamPolynomial.lift(expression)))

    def set_objective(self, expression):
        """Maximize a variable-free affine expression"""
        self._objective = ParamPolynomial.lift(expression)

    def enable_margin(self, cap=MARGIN_CAP):
        """Margin delta in [0, cap] subtracted as delta * sum m_i^2 from each SOS constraint"""
        self.margin_handle = self.new_scalar('margin', lower=0.0, upper=cap).handles[0]
        return ParamPolynomial.handle(self.margin_handle)

    def families(self):
        counts = {}
        for constraint in self.constraints:
            counts[constraint.family] = counts.get(constraint.family, 0) + 1
        return counts

    def compile(self):
        builder = SdpBuilder()
        for name in self.handle_names:
            builder.add_variable(name)

        for name, handles in self._gram_decisions:
            n = handles.shape[0]
            builder.add_block(name, n, [(i, j, int(handles[i, j]), 1.0)
                                        for j in range(n) for i in range(j, n)])

        for name, matrix, margin in self._lmis:
            entries = []
            n = len(matrix)
            for j in range(n):
                for i in range(j, n):
                    constant, coefficients = matrix[i][j].affine_form()
                    if not _affine_close((constant, coefficients), matrix[j][i].affine_form()):
                        raise DimensionMismatchError(f"LMI '{name}' is not symmetric at ({i},{j})")
                    if i == j:
                        constant -= margin
                    if constant:
                        entries.append((i, j, -1, constant))
                    entries.extend((i, j, h, c) for h, c in coefficients.items())
            builder.add_block(name, n, entries)

        grams = [self._compile_constraint(builder, c) for c in self.constraints]

        for name, expression in self._equalities:
            constant, coefficients = expression.affine_form()
            builder.add_equality(coefficients, -constant)

        _, objective = self._objective.affine_form()
        builder.set_objective(objective)
        sdp = builder.build()
        logger.debug(f"Compiled '{self.name}': {sdp.summary()}")
        return CompiledProgram(sdp, self, [g for g in grams if g is not None])

    def _compile_constraint(self, builder, constraint):
        order = constraint.variables
        expression = constraint.expression
        stray = set(expression.variables) - set(order)
        for name in stray:
            if expression.degree_in(name) > 0:
                raise DimensionMismatchError(
                    f"constraint '{constraint.name}' uses '{name}' outside its variables {order}"
                )
        rows = expression.coefficient_rows(order)
        rows = {e: r for e, r in rows.items() if r[0] != 0.0 or r[1]}
        if not rows:
            return None
        degree = max(sum(e) for e in rows)
        if degree % 2:
            raise SosDegreeError(f"constraint '{constraint.name}' has odd degree {degree}")
        scale = expression.max_abs_coefficient()
        scale = 1.0 / scale if scale > 0 else 1.0

        basis = prune_basis(rows.keys(), len(order))
        if not basis:
            raise SosDegreeError(f"constraint '{constraint.name}' has an empty Gram basis")
        n = len(basis)
        handles = np.zeros((n, n), dtype=int)
        for i in range(n):
            for j in range(i, n):
                h = builder.add_variable(f"{constraint.name}.G[{i},{j}]")
                handles[i, j] = handles[j, i] = h
        builder.add_block(f"sos:{constraint.name}", n,
                          [(i, j, int(handles[i, j]), 1.0) for j in range(n) for i in range(j, n)])

        products = {}
        for i in range(n):
            for j in range(i, n):
                exps = tuple(a + b for a, b in zip(basis[i], basis[j]))
                products.setdefault(exps, []).append((int(handles[i, j]), 1.0 if i == j else 2.0))
        margin = self.margin_handle if constraint.with_margin else None
        diagonal = {tuple(2 * a for a in m) for m in basis}

        for exps in sorted(set(rows) | set(products), key=grlex_key):
            fixed, parametric = rows.get(exps, (0.0, {}))
            coefficients = {h: scale * c for h, c in parametric.items()}
            for h, weight in products.get(exps, []):
                coefficients[h] = coefficients.get(h, 0.0) - weight
            if margin is not None and exps in diagonal:
                coefficients[margin] = coefficients.get(margin, 0.0) - 1.0
            builder.add_equality(coefficients, -scale * fixed)
        return GramRecord(constraint.name, order, basis, handles, scale, margin)


@dataclass
class Decompiled:
    values: dict
    grams: dict
    y: np.ndarray

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values


def _decompile_value(value, y):
    if isinstance(value, ParamPolynomial):
        return value.evaluate(y)
    if isinstance(value, list):
        evaluated = [[ParamPolynomial.lift(e).evaluate(y) for e in row] for row in value]
        if all(p.is_constant() for row in evaluated for p in row):
            return np.array([[float(p.constant_term()) for p in row] for row in evaluated])
        return PolynomialMatrix(evaluated)
    return value


def decompile(compiled, y):
    """Concrete decisions and unscaled Gram matrices from a solution vector"""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != compiled.sdp.n_y:
        raise DimensionMismatchError(f"solution has {y.size} entries, program has {compiled.sdp.n_y}")
    values = {name: _decompile_value(v, y) for name, v in compiled.program.decisions.items()}
    grams = {g.name: (g.monomials(), g.gram(y)) for g in compiled.grams}
    return Decompiled(values, grams, y)


@dataclass
class SosCheckResult:
    is_sos: bool
    gram: Optional[np.ndarray]
    basis: list
    residual: float
    min_eig: float
    status: str


def gram_polynomial(basis, gram):
    result = Polynomial.zero()
    n = len(basis)
    for i in range(n):
        for j in range(n):
            if gram[i, j] != 0.0:
                result = result + float(gram[i, j]) * basis[i].to_polynomial() * basis[j].to_polynomial()
    return result


def check_sos(polynomial, tol=SOS_AUDIT_TOL, options=None, variables=None):
    """Search for a Gram certificate of a concrete polynomial.

    The reconstructed Gram matrix must be PSD within ``tol`` and reproduce
    the polynomial's coefficients within ``tol``.
    """
    variables = tuple(variables or polynomial.variables)
    if polynomial.is_zero():
        return SosCheckResult(True, np.zeros((0, 0)), [], 0.0, math.inf, 'zero')
    degree = polynomial.degree_in(variables)
    if degree % 2:
        return SosCheckResult(False, None, [], math.inf, -math.inf, 'odd degree')
    program = SosProgram('check_sos')
    program.add_sos('p', polynomial, variables, with_margin=False)
    try:
        compiled = program.compile()
    except SosDegreeError as e:
        return SosCheckResult(False, None, [], math.inf, -math.inf, str(e))
    solution = solve(compiled.sdp, options)
    if solution.status != SdpStatus.OPTIMAL:
        return SosCheckResult(False, None, [], math.inf, -math.inf, solution.status.value)
    basis, gram = decompile(compiled, solution.y).grams['p']
    residual = (polynomial - gram_polynomial(basis, gram)).max_abs_coefficient()
    min_eig = float(np.linalg.eigvalsh(gram)[0]) if gram.size else math.inf
    is_sos = residual <= tol and min_eig >= -tol
    return SosCheckResult(is_sos, gram, basis, residual, min_eig, solution.status.value)
