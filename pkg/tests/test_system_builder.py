"""
Tests for nominal plants, IQC extension and actuator augmentation
"""

import numpy as np
import pytest

from iqcreach.errors import DimensionMismatchError
from iqcreach.lti_filters import build_iqc
from iqcreach.system_builder import augment_actuator, equilibrium, extend, linearize

from conftest import gtm_plant, scalar_plant


def test_plant_rejects_nonpositive_horizon():
    with pytest.raises(ValueError):
        scalar_plant(T=0.0)


def test_disturbances_need_an_energy_bound():
    with pytest.raises(ValueError):
        scalar_plant(R=0.0)
    assert scalar_plant(R=0.0, f="-x").d_names == ()


def test_drift_must_not_depend_on_inputs():
    with pytest.raises(ValueError):
        scalar_plant(f="-x + u")


def test_extend_without_iqc_keeps_the_plant():
    E = extend(scalar_plant())
    assert E.states == ("x",)
    assert E.filter_states == ()
    assert E.F.evaluate({"x": 0.5, "u": 0.25, "d": 0.0}).ravel() == pytest.approx([-0.25])


def test_extend_checks_channel_counts():
    with pytest.raises(DimensionMismatchError):
        extend(scalar_plant(), build_iqc("D", sigma=0.2))


def test_actuator_augmentation_routes_the_commanded_input(gtm_system):
    iqc = build_iqc("Sector", alpha=0.0, beta=0.2)
    E = augment_actuator(gtm_system, iqc, ("u",))
    assert E.controller_states == ("xt1",)
    assert E.direct_inputs == ()
    assert E.perturbed_channels == ("u",)
    assert E.is_augmented

    point = {"x1": 0.1, "x2": -0.2, "xt1": 0.05, "w": 0.01}
    plain = gtm_system.vector_field([0.06]).evaluate({"x1": 0.1, "x2": -0.2}).ravel()
    np.testing.assert_allclose(E.F.evaluate(point).ravel(), plain)
    # the perturbation sees the commanded value, not the perturbed one
    assert E.v.evaluate(point).ravel() == pytest.approx([0.05])
    assert E.H.evaluate(point).ravel() == pytest.approx([0.05, 0.01])


def test_actuator_augmentation_rejects_unknown_channel(gtm_system):
    with pytest.raises(ValueError):
        augment_actuator(gtm_system, build_iqc("Sector", alpha=0.0, beta=0.2), ("thrust",))


def test_actuator_augmentation_needs_a_channel(gtm_system):
    with pytest.raises(ValueError, match="no perturbed input channels"):
        augment_actuator(gtm_system, build_iqc("Sector", alpha=0.0, beta=0.2), ())


def test_delta_iqc_appends_filter_states(gtm_system):
    E = augment_actuator(gtm_system, build_iqc("D", sigma=0.2, d=1, m=10.0), ("u",))
    assert E.filter_states == ("xp1", "xp2")
    assert E.states == ("x1", "x2", "xp1", "xp2")
    assert E.all_states[-1] == "xt1"
    assert E.H.shape == (4, 1)


def test_equilibrium_with_a_fixed_input():
    states, inputs = equilibrium(scalar_plant(), {"x": 0.0}, fixed_inputs={"u": 0.5})
    assert states == pytest.approx([0.5])
    assert inputs == pytest.approx([0.5])


def test_gtm_trim_is_the_origin(gtm_system):
    states, inputs = equilibrium(gtm_system, {"x1": 0.01, "x2": -0.01}, fixed_inputs={"u": 0.0})
    np.testing.assert_allclose(states, [0.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(inputs, [0.0], atol=1e-8)


def test_linearize_scalar_plant():
    A, B = linearize(extend(scalar_plant()), [0.0], [0.0])
    np.testing.assert_allclose(A, [[-1.0]])
    np.testing.assert_allclose(B, [[1.0]])


def test_linearize_augmented_plant_adds_an_integrator(gtm_system):
    E = augment_actuator(gtm_system, build_iqc("Sector", alpha=0.0, beta=0.2), ("u",))
    A, B = linearize(E, [0.0, 0.0], [0.0])
    np.testing.assert_allclose(A[:2, :2], [[-3.236, 0.923], [-45.339, -4.373]])
    np.testing.assert_allclose(A[:2, 2], [-0.317, -59.989])
    np.testing.assert_allclose(A[2], 0.0)
    np.testing.assert_allclose(B, [[0.0], [0.0], [1.0]])
