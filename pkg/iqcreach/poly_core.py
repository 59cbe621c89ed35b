"""
Sparse multivariate polynomials over named variables.

Terms are stored as a map from exponent tuples (aligned with the variable
order) to coefficients. Coefficients are floats or exact ``Fraction`` values;
no explicitly stored coefficient is ever zero. Monomials are ordered
graded-lexicographically with the variable declaration order.
"""

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from numbers import Number

import numpy as np

from .errors import DimensionMismatchError, PolynomialParseError, UnboundVariableError

DEGREE_OF_ZERO = float('-inf')


def _merge_variables(first, second):
    merged = list(first)
    seen = set(first)
    for name in second:
        if name not in seen:
            merged.append(name)
            seen.add(name)
    return tuple(merged)


def grlex_key(exponents):
    """Sort key for graded-lex order: total degree first, then earlier variables higher"""
    return (sum(exponents), tuple(-e for e in exponents))


def _normalize_coefficient(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, (int, Fraction, float)):
        return value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Number):
        return float(value)
    raise TypeError(f"unsupported coefficient type {type(value).__name__}")


def _is_scalar(value):
    return isinstance(value, (Number, np.number)) and not isinstance(value, complex)


def _format_coefficient(value):
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return str(value.numerator)
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Monomial:
    """Power product over an ordered variable tuple"""

    exponents: tuple
    variables: tuple

    @property
    def degree(self):
        return sum(self.exponents)

    def to_polynomial(self):
        return Polynomial({self.exponents: 1}, self.variables)

    def __str__(self):
        factors = []
        for name, exponent in zip(self.variables, self.exponents):
            if exponent == 1:
                factors.append(name)
            elif exponent > 1:
                factors.append(f"{name}^{exponent}")
        return '*'.join(factors) if factors else '1'


def _encode_coefficient(c):
    """JSON form of a coefficient: exact values survive as int or "p/q" text"""
    if isinstance(c, Fraction):
        return c.numerator if c.denominator == 1 else str(c)
    if isinstance(c, (int, np.integer)) and not isinstance(c, bool):
        return int(c)
    return float(c)


def _decode_coefficient(c):
    if isinstance(c, str):
        return Fraction(c)
    return c


class Polynomial:
    """Immutable sparse polynomial"""

    __slots__ = ('_variables', '_terms')
    __array_ufunc__ = None

    def __init__(self, terms=None, variables=()):
        variables = tuple(variables)
        if len(set(variables)) != len(variables):
            raise ValueError(f"duplicate variable names in {variables}")
        clean = {}
        for exponents, coefficient in (terms or {}).items():
            exponents = tuple(int(e) for e in exponents)
            if len(exponents) != len(variables):
                raise DimensionMismatchError(
                    f"exponent tuple {exponents} does not match variables {variables}"
                )
            if any(e < 0 for e in exponents):
                raise ValueError(f"negative exponent in {exponents}")
            coefficient = _normalize_coefficient(coefficient)
            total = clean.get(exponents, 0) + coefficient
            if total == 0:
                clean.pop(exponents, None)
            else:
                clean[exponents] = total
        self._variables = variables
        self._terms = clean

    # Construction helpers

    @classmethod
    def variable(cls, name):
        return cls({(1,): 1}, (name,))

    @classmethod
    def constant(cls, value, variables=()):
        variables = tuple(variables)
        return cls({(0,) * len(variables): value}, variables)

    @classmethod
    def zero(cls, variables=()):
        return cls({}, variables)

    @classmethod
    def from_monomials(cls, monomials, coefficients):
        result = cls.zero()
        for monomial, coefficient in zip(monomials, coefficients):
            result = result + coefficient * monomial.to_polynomial()
        return result

    # Accessors

    @property
    def variables(self):
        return self._variables

    @property
    def terms(self):
        return dict(self._terms)

    def items(self):
        """Terms in ascending graded-lex order"""
        return sorted(self._terms.items(), key=lambda item: grlex_key(item[0]))

    def monomials(self):
        return [Monomial(exps, self._variables) for exps, _ in self.items()]

    def coefficients(self):
        return [coefficient for _, coefficient in self.items()]

    def coefficient(self, powers):
        """Coefficient of the monomial given as {variable: exponent}"""
        exponents = [0] * len(self._variables)
        for name, exponent in powers.items():
            if exponent == 0:
                continue
            if name not in self._variables:
                return 0
            exponents[self._variables.index(name)] = exponent
        return self._terms.get(tuple(exponents), 0)

    def is_zero(self):
        return not self._terms

    def is_constant(self):
        return all(sum(exps) == 0 for exps in self._terms)

    def constant_term(self):
        return self._terms.get((0,) * len(self._variables), 0)

    def occurring_variables(self):
        """Variables with a nonzero exponent in some term"""
        return tuple(
            name for i, name in enumerate(self._variables)
            if any(exps[i] for exps in self._terms)
        )

    def degree(self):
        if not self._terms:
            return DEGREE_OF_ZERO
        return max(sum(exps) for exps in self._terms)

    def degree_in(self, variables):
        """Largest total degree in the given variable (or variables)"""
        if isinstance(variables, str):
            variables = (variables,)
        if not self._terms:
            return DEGREE_OF_ZERO
        positions = [self._variables.index(v) for v in variables if v in self._variables]
        return max(sum(exps[i] for i in positions) for exps in self._terms)

    def max_abs_coefficient(self):
        if not self._terms:
            return 0.0
        return max(abs(float(c)) for c in self._terms.values())

    # Variable alignment

    def with_variables(self, order):
        """Re-express over ``order``; dropped variables must not occur"""
        order = tuple(order)
        if order == self._variables:
            return self
        index = {name: i for i, name in enumerate(order)}
        for i, name in enumerate(self._variables):
            if name not in index and any(exps[i] for exps in self._terms):
                raise DimensionMismatchError(
                    f"variable '{name}' occurs in the polynomial but not in {order}"
                )
        terms = {}
        for exps, coefficient in self._terms.items():
            aligned = [0] * len(order)
            for i, name in enumerate(self._variables):
                if exps[i]:
                    aligned[index[name]] = exps[i]
            terms[tuple(aligned)] = coefficient
        return Polynomial(terms, order)

    def _aligned_pair(self, other):
        order = _merge_variables(self._variables, other._variables)
        return order, self.with_variables(order)._terms, other.with_variables(order)._terms

    @staticmethod
    def _coerce(value):
        if isinstance(value, Polynomial):
            return value
        if _is_scalar(value):
            return Polynomial.constant(value)
        return None

    # Arithmetic

    def __add__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        order, left, right = self._aligned_pair(other)
        terms = dict(left)
        for exps, coefficient in right.items():
            terms[exps] = terms.get(exps, 0) + coefficient
        return Polynomial(terms, order)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial({e: -c for e, c in self._terms.items()}, self._variables)

    def __pos__(self):
        return self

    def __sub__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        return other + (-self)

    def __mul__(self, other):
        if _is_scalar(other):
            other = _normalize_coefficient(other)
            if other == 0:
                return Polynomial.zero(self._variables)
            return Polynomial({e: c * other for e, c in self._terms.items()}, self._variables)
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        order, left, right = self._aligned_pair(other)
        terms = {}
        for e1, c1 in left.items():
            for e2, c2 in right.items():
                exps = tuple(a + b for a, b in zip(e1, e2))
                terms[exps] = terms.get(exps, 0) + c1 * c2
        return Polynomial(terms, order)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            return NotImplemented
        other = _normalize_coefficient(other)
        if other == 0:
            raise ZeroDivisionError("polynomial division by zero")
        if isinstance(other, int) and all(isinstance(c, (int, Fraction)) for c in self._terms.values()):
            return self * Fraction(1, other)
        return Polynomial({e: c / other for e, c in self._terms.items()}, self._variables)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, np.integer)) or exponent < 0:
            raise ValueError("polynomial exponent must be a non-negative integer")
        result = Polynomial.constant(1, self._variables)
        base = self
        exponent = int(exponent)
        while exponent:
            if exponent & 1:
                result = result * base
            base = base * base
            exponent >>= 1
        return result

    def __eq__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        _, left, right = self._aligned_pair(other)
        return left == right

    __hash__ = None

    def almost_equal(self, other, tol=1e-9):
        return (self - other).max_abs_coefficient() <= tol

    def prune(self, tol):
        """Drop terms whose magnitude does not exceed ``tol``"""
        return Polynomial(
            {e: c for e, c in self._terms.items() if abs(float(c)) > tol}, self._variables
        )

    # Calculus and substitution

    def differentiate(self, variable):
        if variable not in self._variables:
            return Polynomial.zero(self._variables)
        i = self._variables.index(variable)
        terms = {}
        for exps, coefficient in self._terms.items():
            if exps[i] == 0:
                continue
            lowered = exps[:i] + (exps[i] - 1,) + exps[i + 1:]
            terms[lowered] = coefficient * exps[i]
        return Polynomial(terms, self._variables)

    def gradient(self, variables):
        return [self.differentiate(v) for v in variables]

    def substitute(self, bindings):
        """Replace variables by polynomials or numbers; unbound variables stay"""
        bound = {name: Polynomial._coerce(value) for name, value in bindings.items()
                 if name in self._variables}
        if any(value is None for value in bound.values()):
            raise TypeError("substitution values must be polynomials or numbers")
        if not bound:
            return self
        free = tuple(v for v in self._variables if v not in bound)
        power_cache = {}

        def power(name, exponent):
            key = (name, exponent)
            if key not in power_cache:
                power_cache[key] = bound[name] ** exponent
            return power_cache[key]

        result = Polynomial.zero(free)
        for exps, coefficient in self._terms.items():
            free_exps = tuple(e for name, e in zip(self._variables, exps) if name not in bound)
            term = Polynomial({free_exps: coefficient}, free)
            for name, exponent in zip(self._variables, exps):
                if name in bound and exponent:
                    term = term * power(name, exponent)
            result = result + term
        return result

    def evaluate(self, point):
        """Evaluate at a full assignment, using compensated summation for floats"""
        values = []
        for i, name in enumerate(self._variables):
            if any(exps[i] for exps in self._terms):
                if name not in point:
                    raise UnboundVariableError(name)
                values.append(point[name])
            else:
                values.append(0)
        products = []
        for exps, coefficient in self._terms.items():
            product = coefficient
            for value, exponent in zip(values, exps):
                if exponent:
                    product = product * value ** exponent
            products.append(product)
        if all(isinstance(p, (int, Fraction)) for p in products):
            return sum(products, 0)
        return math.fsum(float(p) for p in products)

    def evaluate_batch(self, points):
        """Vectorized evaluation; ``points`` maps variable names to equal-length arrays"""
        compiled = self.compile(self.occurring_variables())
        if not compiled.order:
            size = len(next(iter(points.values()))) if points else 1
            return np.full(size, float(self.constant_term()))
        missing = [v for v in compiled.order if v not in points]
        if missing:
            raise UnboundVariableError(missing[0])
        stacked = np.column_stack([np.asarray(points[v], dtype=float) for v in compiled.order])
        return compiled(stacked)

    def compile(self, order):
        return CompiledPolynomial(self, order)

    # Text form

    def to_string(self):
        if not self._terms:
            return '0'
        pieces = []
        for exps, coefficient in reversed(self.items()):
            monomial = str(Monomial(exps, self._variables))
            if monomial == '1':
                text = _format_coefficient(coefficient)
            elif coefficient == 1:
                text = monomial
            elif coefficient == -1:
                text = f"-{monomial}"
            else:
                text = f"{_format_coefficient(coefficient)}*{monomial}"
            if not pieces:
                pieces.append(text)
            elif text.startswith('-'):
                pieces.append(f" - {text[1:]}")
            else:
                pieces.append(f" + {text}")
        return ''.join(pieces)

    def __str__(self):
        return self.to_string()

    def __repr__(self):
        return f"Polynomial('{self.to_string()}', variables={self._variables})"

    def to_dict(self):
        return {
            'variables': list(self._variables),
            'terms': [[list(exps), _encode_coefficient(c)] for exps, c in self.items()],
        }

    @classmethod
    def from_dict(cls, data):
        return cls({tuple(exps): _decode_coefficient(c) for exps, c in data['terms']}, data['variables'])


class CompiledPolynomial:
    """Fast batch evaluator: rows of ``X`` follow ``order``"""

    def __init__(self, polynomial, order):
        self.order = tuple(order)
        aligned = polynomial.with_variables(self.order)
        items = aligned.items()
        self.exponents = np.array([exps for exps, _ in items], dtype=int).reshape(len(items), len(self.order))
        self.coefficients = np.array([float(c) for _, c in items], dtype=float)

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.coefficients.size == 0:
            return np.zeros(X.shape[0])
        if not self.order:
            return np.full(X.shape[0], self.coefficients.sum())
        powers = np.prod(X[:, None, :] ** self.exponents[None, :, :], axis=2)
        return powers @ self.coefficients


class PolynomialMatrix:
    """Rectangular matrix of polynomials sharing one variable set"""

    __array_ufunc__ = None

    def __init__(self, entries):
        rows = [[self._coerce_entry(e) for e in row] for row in entries]
        widths = {len(row) for row in rows}
        if len(widths) > 1:
            raise DimensionMismatchError("ragged polynomial matrix")
        variables = ()
        for row in rows:
            for entry in row:
                variables = _merge_variables(variables, entry.variables)
        self._variables = variables
        self._rows = tuple(tuple(e.with_variables(variables) for e in row) for row in rows)
        self._shape = (len(rows), widths.pop() if widths else 0)

    @staticmethod
    def _coerce_entry(entry):
        coerced = Polynomial._coerce(entry)
        if coerced is None:
            raise TypeError(f"matrix entries must be polynomials or numbers, got {type(entry).__name__}")
        return coerced

    @classmethod
    def column(cls, entries):
        return cls([[e] for e in entries])

    @classmethod
    def from_numeric(cls, array):
        array = np.atleast_2d(np.asarray(array, dtype=float))
        return cls([[float(v) for v in row] for row in array])

    @classmethod
    def zeros(cls, rows, cols):
        return cls([[0] * cols for _ in range(rows)])

    @classmethod
    def vstack(cls, blocks):
        rows = []
        for block in blocks:
            rows.extend(block.to_list())
        return cls(rows)

    @property
    def shape(self):
        return self._shape

    @property
    def variables(self):
        return self._variables

    def __getitem__(self, index):
        i, j = index
        return self._rows[i][j]

    def to_list(self):
        return [list(row) for row in self._rows]

    def entries(self):
        """Column vector entries, top to bottom"""
        if self._shape[1] != 1:
            raise DimensionMismatchError("entries() expects a column vector")
        return [row[0] for row in self._rows]

    def transpose(self):
        return PolynomialMatrix([[self._rows[i][j] for i in range(self._shape[0])]
                                 for j in range(self._shape[1])])

    @property
    def T(self):
        return self.transpose()

    def _as_matrix(self, other):
        if isinstance(other, PolynomialMatrix):
            return other
        if isinstance(other, np.ndarray):
            return PolynomialMatrix.from_numeric(other)
        return None

    def __add__(self, other):
        other = self._as_matrix(other)
        if other is None:
            return NotImplemented
        if other.shape != self.shape:
            raise DimensionMismatchError(f"cannot add {self.shape} and {other.shape}")
        return PolynomialMatrix([[a + b for a, b in zip(r1, r2)]
                                 for r1, r2 in zip(self._rows, other._rows)])

    __radd__ = __add__

    def __neg__(self):
        return PolynomialMatrix([[-e for e in row] for row in self._rows])

    def __sub__(self, other):
        other = self._as_matrix(other)
        if other is None:
            return NotImplemented
        return self + (-other)

    def __mul__(self, scalar):
        if isinstance(scalar, PolynomialMatrix) or isinstance(scalar, np.ndarray):
            return NotImplemented
        return PolynomialMatrix([[e * scalar for e in row] for row in self._rows])

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._as_matrix(other)
        if other is None:
            return NotImplemented
        n, k = self.shape
        k2, m = other.shape
        if k != k2:
            raise DimensionMismatchError(f"cannot multiply {self.shape} by {other.shape}")
        rows = []
        for i in range(n):
            row = []
            for j in range(m):
                entry = Polynomial.zero()
                for r in range(k):
                    if self._rows[i][r].is_zero() or other._rows[r][j].is_zero():
                        continue
                    entry = entry + self._rows[i][r] * other._rows[r][j]
                row.append(entry)
            rows.append(row)
        return PolynomialMatrix(rows)

    def __rmatmul__(self, other):
        left = self._as_matrix(other)
        if left is None:
            return NotImplemented
        return left @ self

    def __eq__(self, other):
        if not isinstance(other, PolynomialMatrix) or other.shape != self.shape:
            return False
        return all(a == b for r1, r2 in zip(self._rows, other._rows) for a, b in zip(r1, r2))

    __hash__ = None

    def map(self, function):
        return PolynomialMatrix([[function(e) for e in row] for row in self._rows])

    def substitute(self, bindings):
        return self.map(lambda e: e.substitute(bindings))

    def differentiate(self, variable):
        return self.map(lambda e: e.differentiate(variable))

    def evaluate(self, point):
        return np.array([[float(e.evaluate(point)) for e in row] for row in self._rows], dtype=float)

    def jacobian(self, variables):
        """Jacobian of a column vector with respect to ``variables``"""
        return PolynomialMatrix([[e.differentiate(v) for v in variables] for e in self.entries()])

    def degree(self):
        degrees = [e.degree() for row in self._rows for e in row]
        return max(degrees) if degrees else DEGREE_OF_ZERO

    def to_dict(self):
        return [[e.to_dict() for e in row] for row in self._rows]

    @classmethod
    def from_dict(cls, data):
        return cls([[Polynomial.from_dict(e) for e in row] for row in data])

    def __str__(self):
        return '[' + '; '.join(', '.join(str(e) for e in row) for row in self._rows) + ']'


# Parsing

_TOKEN_SPEC = [
    ('NUMBER', r'(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?'),
    ('IDENT', r'[A-Za-z_][A-Za-z_0-9]*'),
    ('OP', r'[-+*/^()]'),
    ('SKIP', r'\s+'),
    ('MISMATCH', r'.'),
]
_TOKEN_RE = re.compile('|'.join(f'(?P<{name}>{pattern})' for name, pattern in _TOKEN_SPEC), re.S)


class _Parser:
    def __init__(self, text, variables, exact, constants=None):
        self.text = text
        self.constants = dict(constants or {})
        self.declared = None if variables is None else tuple(variables)
        self.exact = exact
        self.tokens = []
        for match in _TOKEN_RE.finditer(text):
            kind = match.lastgroup
            if kind == 'SKIP':
                continue
            if kind == 'MISMATCH':
                raise PolynomialParseError(f"unexpected character '{match.group()}'", text, match.start())
            self.tokens.append((kind, match.group(), match.start()))
        self.tokens.append(('END', '', len(text)))
        self.index = 0

    def peek(self):
        return self.tokens[self.index]

    def take(self):
        token = self.tokens[self.index]
        self.index += 1
        return token

    def error(self, message, token=None):
        token = token or self.peek()
        return PolynomialParseError(message, self.text, token[2])

    def parse(self):
        if self.peek()[0] == 'END':
            raise self.error("empty polynomial")
        result = self.expression()
        if self.peek()[0] != 'END':
            raise self.error(f"unexpected '{self.peek()[1]}'")
        return result

    def expression(self):
        result = self.term()
        while self.peek()[1] in ('+', '-') and self.peek()[0] == 'OP':
            op = self.take()[1]
            right = self.term()
            result = result + right if op == '+' else result - right
        return result

    def term(self):
        result = self.factor()
        while self.peek()[0] == 'OP' and self.peek()[1] in ('*', '/'):
            op_token = self.take()
            right = self.factor()
            if op_token[1] == '*':
                result = result * right
            else:
                if not right.is_constant():
                    raise self.error("division by a non-constant expression", op_token)
                divisor = right.constant_term()
                if divisor == 0:
                    raise self.error("division by zero", op_token)
                if self.exact:
                    divisor = Fraction(divisor)
                result = result / divisor
        return result

    def factor(self):
        token = self.peek()
        if token[0] == 'OP' and token[1] in ('+', '-'):
            self.take()
            operand = self.factor()
            return -operand if token[1] == '-' else operand
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == 'OP' and self.peek()[1] == '^':
            self.take()
            token = self.take()
            if token[0] != 'NUMBER' or not token[1].isdigit():
                raise self.error("exponent must be a non-negative integer literal", token)
            base = base ** int(token[1])
        return base

    def atom(self):
        token = self.take()
        kind, value, _ = token
        if kind == 'NUMBER':
            if self.exact:
                return Polynomial.constant(Fraction(value))
            if re.fullmatch(r'\d+', value):
                return Polynomial.constant(int(value))
            return Polynomial.constant(float(value))
        if kind == 'IDENT':
            if value in self.constants:
                return Polynomial.constant(self.constants[value])
            if self.declared is not None and value not in self.declared:
                raise PolynomialParseError(f"undeclared variable '{value}'", self.text, token[2])
            return Polynomial.variable(value)
        if kind == 'OP' and value == '(':
            inner = self.expression()
            closing = self.take()
            if closing[1] != ')':
                raise PolynomialParseError("expected ')'", self.text, closing[2])
            return inner
        if kind == 'END':
            raise PolynomialParseError("unexpected end of input", self.text, token[2])
        raise PolynomialParseError(f"unexpected '{value}'", self.text, token[2])


def parse_polynomial(text, variables=None, exact=False, constants=None):
    """Parse text such as ``-1.492*x1^3 + 0.923*x2``.

    With ``variables`` given, identifiers outside that tuple are rejected and
    the result is expressed over exactly that order. ``exact`` reads decimal
    literals as ``Fraction``. Identifiers found in ``constants`` are replaced
    by their numeric value while parsing, so they may appear as divisors.
    """
    result = _Parser(text, variables, exact, constants).parse()
    if variables is not None:
        result = result.with_variables(tuple(variables))
    return result


def variables(*names):
    """Convenience: ``x, y = variables('x', 'y')``"""
    return tuple(Polynomial.variable(name) for name in names)
