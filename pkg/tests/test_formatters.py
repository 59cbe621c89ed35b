"""
Tests for formatting helpers
"""

import math

import numpy as np
import pytest

from iqcreach.certify import Certificate
from iqcreach.formatters import (HISTORY_COLUMNS, format_gamma, format_matrix, format_polynomial,
                                 format_wall_time, history_frame, report_frame)
from iqcreach.poly_core import Polynomial, parse_polynomial


@pytest.mark.parametrize("seconds, text", [
    (1.5, "0:01.500"),
    (75.25, "1:15.250"),
    (3725, "1:02:05"),
    (None, "N/A"),
    (-1.0, "N/A"),
])
def test_format_wall_time(seconds, text):
    assert format_wall_time(seconds) == text


def test_format_gamma():
    assert format_gamma(0.98765432) == "0.987654"
    assert format_gamma(None) == "N/A"
    assert format_gamma(math.nan) == "N/A"


def test_format_polynomial_drops_tiny_terms():
    assert format_polynomial(Polynomial.zero()) == "0"
    text = format_polynomial(parse_polynomial("x^2 + 1e-14*x", ("x",)))
    assert "x" in text
    assert "e-14" not in text


def test_format_matrix():
    assert format_matrix(None) == "N/A"
    assert len(format_matrix(np.eye(2)).splitlines()) == 2


def test_history_frame_has_fixed_columns():
    certificate = Certificate(V=parse_polynomial("x^2", ("x",)), gamma=0.5, R=0.0, T=1.0, controller={},
                              plant_states=("x",), history=[{"iteration": 1, "gamma": 0.5}])
    frame = history_frame(certificate, [{"iteration": 1, "wall_time": 2.0}])
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame["wall_time"].iloc[0] == 2.0


def test_report_frame_names_the_counterexample_kind():
    frame = report_frame({"passed": False, "counterexample": {"kind": "level"}})
    assert frame.iloc[-1].tolist() == ["counterexample", "level"]
