"""
Tests for sparse polynomial arithmetic and parsing
"""

import json
from fractions import Fraction

import numpy as np
import pytest

from iqcreach.errors import DimensionMismatchError, PolynomialParseError, UnboundVariableError
from iqcreach.poly_core import Polynomial, PolynomialMatrix, parse_polynomial, variables


def test_binomial_square_expands():
    x, y = variables("x", "y")
    assert (x + y) ** 2 == x ** 2 + 2 * x * y + y ** 2
    assert ((x + y) ** 2).degree() == 2


def test_cancellation_leaves_zero():
    x, y = variables("x", "y")
    p = (x - y) * (x + y) - x ** 2 + y ** 2
    assert p.is_zero()
    assert p == 0


def test_parse_matches_operator_construction():
    x1, x2 = variables("x1", "x2")
    parsed = parse_polynomial("-1.492*x1^3 + 0.923*x2 + (0.240*x1 - 0.317)*x2", ("x1", "x2"))
    built = -1.492 * x1 ** 3 + 0.923 * x2 + (0.240 * x1 - 0.317) * x2
    assert parsed.almost_equal(built, 1e-12)
    assert parsed.variables == ("x1", "x2")


def test_parse_reports_column_of_bad_token():
    with pytest.raises(PolynomialParseError) as info:
        parse_polynomial("x + * y")
    assert info.value.line == 1
    assert info.value.column == 5


def test_parse_rejects_undeclared_variable():
    with pytest.raises(PolynomialParseError, match="undeclared variable 'z'"):
        parse_polynomial("x + z", ("x",))


def test_parse_rejects_non_constant_divisor():
    with pytest.raises(PolynomialParseError, match="non-constant"):
        parse_polynomial("x / y")


def test_named_constants_can_divide():
    p = parse_polynomial("x^2/r^2 - 1", ("x",), constants={"r": 2.0})
    assert p.coefficient({"x": 2}) == pytest.approx(0.25)
    assert p.constant_term() == -1


def test_exact_mode_keeps_fractions():
    p = parse_polynomial("0.1*x + 1/3", ("x",), exact=True)
    assert p.coefficient({"x": 1}) == Fraction(1, 10)
    assert p.constant_term() == Fraction(1, 3)


def test_differentiate_and_substitute():
    x, y = variables("x", "y")
    p = x ** 3 * y + 2 * y ** 2
    assert p.differentiate("x") == 3 * x ** 2 * y
    assert p.differentiate("z").is_zero()
    assert p.substitute({"y": x + 1}) == x ** 4 + x ** 3 + 2 * x ** 2 + 4 * x + 2


def test_evaluate_needs_every_occurring_variable():
    x, y = variables("x", "y")
    p = x * y + 1
    assert p.evaluate({"x": 2.0, "y": 3.0}) == pytest.approx(7.0)
    with pytest.raises(UnboundVariableError):
        p.evaluate({"x": 2.0})


def test_compiled_batch_matches_pointwise():
    p = parse_polynomial("x^2 - 3*x*y + y^3 - 2", ("x", "y"))
    rng = np.random.default_rng(0)
    points = rng.uniform(-2, 2, size=(50, 2))
    batch = p.compile(("x", "y"))(points)
    pointwise = [p.evaluate({"x": a, "y": b}) for a, b in points]
    np.testing.assert_allclose(batch, pointwise, rtol=1e-12, atol=1e-12)


def test_with_variables_refuses_to_drop_occurring_variable():
    x, y = variables("x", "y")
    with pytest.raises(DimensionMismatchError):
        (x + y).with_variables(("x",))


def test_degree_in_subset():
    p = parse_polynomial("t*x^2 + t^2 + x*w", ("t", "x", "w"))
    assert p.degree() == 3
    assert p.degree_in(("x", "w")) == 2
    assert p.degree_in("t") == 2


def test_dict_form_survives_json_types():
    p = parse_polynomial("0.1*x^2 - 3*x*y + 7", ("x", "y"))
    assert Polynomial.from_dict(p.to_dict()) == p


def test_exact_coefficients_survive_the_dict_form():
    p = parse_polynomial("x^2/3 - 0.1*x + 2", ("x",), exact=True)
    data = json.loads(json.dumps(p.to_dict()))
    restored = Polynomial.from_dict(data)
    assert restored == p
    assert isinstance(restored.coefficient({"x": 2}), Fraction)
    assert restored.coefficient({"x": 2}) == Fraction(1, 3)
    assert restored.coefficient({"x": 1}) == Fraction(-1, 10)
    assert restored.constant_term() == 2


def test_matrix_product_and_jacobian():
    x, y = variables("x", "y")
    A = PolynomialMatrix([[x, 1], [0, y]])
    v = PolynomialMatrix.column([y, x])
    product = A @ v
    assert product[0, 0] == x * y + x
    assert product[1, 0] == x * y
    J = product.jacobian(["x", "y"]).evaluate({"x": 1.0, "y": 2.0})
    np.testing.assert_allclose(J, [[3.0, 1.0], [2.0, 1.0]])


def test_matrix_shape_mismatch():
    x, _ = variables("x", "y")
    with pytest.raises(DimensionMismatchError):
        PolynomialMatrix([[x, 1]]) @ PolynomialMatrix([[x, 1]])
