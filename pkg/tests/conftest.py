"""
Shared fixtures for the iqcreach test suite
"""

from pathlib import Path

import numpy as np
import pytest

from iqcreach.poly_core import PolynomialMatrix, parse_polynomial
from iqcreach.sdp_backend import SolverOptions
from iqcreach.system_builder import NominalSystem

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def config_dir():
    return CONFIG_DIR


@pytest.fixture
def solver_options():
    return SolverOptions()


def scalar_plant(target="x^2 - 1", R=0.1, T=1.0, f="-x + d"):
    """x' = f + u with disturbance d and |u| <= 1"""
    names = ("x", "u", "d")
    return NominalSystem(
        states=("x",),
        inputs=("u",),
        f=PolynomialMatrix.column([parse_polynomial(f, names)]),
        g=PolynomialMatrix([[1]]),
        target=parse_polynomial(target, ("x",)),
        T=T,
        P=np.array([[1.0], [-1.0]]),
        b=np.array([1.0, 1.0]),
        R=R,
        d_names=("d",) if "d" in f else (),
        name="scalar",
    )


@pytest.fixture
def scalar_system():
    return scalar_plant()


def gtm_plant():
    names = ("x1", "x2", "u")
    f = [
        "-1.492*x1^3 + 4.239*x1^2 + 0.003*x1*x2 + 0.006*x2^2 - 3.236*x1 + 0.923*x2",
        "-7.228*x1^3 + 1.103*x2^3 + 18.365*x1^2 - 45.339*x1 - 4.373*x2",
    ]
    g = [["0.240*x1 - 0.317"], ["41.505*x1 - 59.989"]]
    return NominalSystem(
        states=("x1", "x2"),
        inputs=("u",),
        f=PolynomialMatrix.column([parse_polynomial(e, names) for e in f]),
        g=PolynomialMatrix([[parse_polynomial(e, names) for e in row] for row in g]),
        target=parse_polynomial("x1^2 + x2^2 - 0.0135385", ("x1", "x2")),
        T=2.0,
        P=np.array([[1.0], [-1.0]]),
        b=np.array([0.261, 0.261]),
        w_names=("w",),
        h=PolynomialMatrix.column([parse_polynomial("u", names)]),
        name="gtm",
    )


@pytest.fixture
def gtm_system():
    return gtm_plant()
