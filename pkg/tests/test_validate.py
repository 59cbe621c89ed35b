"""
Tests for closed-loop falsification and level-set sampling
"""

import math

import numpy as np
import pytest

from iqcreach.certify import Certificate
from iqcreach.lti_filters import build_iqc
from iqcreach.poly_core import parse_polynomial
from iqcreach.system_builder import extend
from iqcreach.validate import (DisturbanceSignal, PerturbationSample, ValidationBudget, check_certificate,
                               disturbance_family, falsify, initial_states, level_set_boundary, mc_volume,
                               sample_level_set, sample_perturbations, simulate, terminal_containment)

from conftest import scalar_plant


def _scalar_certificate(gamma, controller="-2*x", V="x^2"):
    return Certificate(V=parse_polynomial(V, ("x",)), gamma=gamma, R=0.0, T=1.0,
                       controller={"u": parse_polynomial(controller, ("x",))}, plant_states=("x",))


def _budget(**overrides):
    settings = dict(box=np.array([[-1.2, 1.2]]), n_points=50, n_perturbations=1, n_disturbances=1,
                    dt=1e-2, n_samples=4000, seed=0)
    settings.update(overrides)
    return ValidationBudget(**settings)


@pytest.fixture
def unstable_plant():
    """x' = x + u, stabilized by u = -2x"""
    return extend(scalar_plant(f="x", R=0.0))


def test_small_level_set_passes_falsification(unstable_plant):
    report = check_certificate(unstable_plant, _scalar_certificate(0.25), _budget())
    assert report.passed
    assert report.n_trajectories == report.n_points > 0
    assert report.max_control_violation <= 0
    assert report.max_containment_value == pytest.approx(-0.75, abs=1e-2)


def test_large_level_set_saturates_the_input(unstable_plant):
    result = falsify(unstable_plant, _scalar_certificate(1.0), _budget())
    assert result.found
    assert not result.untested
    assert result.counterexample.kind == "control"
    assert abs(result.counterexample.x0["x"]) > 0.5


def test_counterexample_carries_its_trajectory(unstable_plant):
    counterexample = falsify(unstable_plant, _scalar_certificate(1.0), _budget()).counterexample
    frame = counterexample.trajectory
    assert {"t", "x", "u"} <= set(frame.columns)
    assert frame["x"].iloc[0] == pytest.approx(counterexample.x0["x"])
    assert frame["t"].iloc[-1] == pytest.approx(1.0)
    assert "trajectory" not in counterexample.to_dict()


def test_zero_point_budget_is_untested(unstable_plant):
    report = check_certificate(unstable_plant, _scalar_certificate(0.25), _budget(n_points=0))
    assert report.counterexample is None
    assert report.untested
    assert not report.passed
    assert report.summary()["untested"]
    result = falsify(unstable_plant, _scalar_certificate(0.25), _budget(n_points=0))
    assert not result.found
    assert result.untested


def test_initial_states_favour_the_level_set_boundary():
    certificate = _scalar_certificate(0.25)
    sample = sample_level_set(certificate.slice_polynomial(), 0.25, {}, [[-1.2, 1.2]], n=4000, seed=0,
                              variables=("x",))
    x0 = initial_states(certificate, sample, 10)
    assert x0.shape == (10, 1)
    assert len(np.unique(x0)) == 10
    assert np.abs(x0[:5]).min() > 0.49
    assert np.abs(x0).max() <= 0.5
    assert initial_states(certificate, sample, 0).shape == (0, 1)


def test_terminal_level_set_outside_the_target_is_a_counterexample(unstable_plant):
    certificate = _scalar_certificate(1.5)
    value, point = terminal_containment(certificate, unstable_plant.nominal.target, [[-1.5, 1.5]], n=20000)
    assert value == pytest.approx(0.5, abs=1e-2)
    assert point[0] ** 2 > 1.0
    report = check_certificate(unstable_plant, certificate, _budget(box=np.array([[-1.5, 1.5]])))
    assert report.counterexample.kind == "containment"


def test_empty_slice_yields_no_trajectories(unstable_plant):
    report = check_certificate(unstable_plant, _scalar_certificate(-1.0), _budget())
    assert report.n_trajectories == 0
    assert not report.passed
    assert report.max_containment_value == -math.inf


def test_simulation_matches_the_exact_solution():
    """x' = -x + d with d = 1 from x = 0 reaches 1 - exp(-1)"""
    system = extend(scalar_plant())
    certificate = _scalar_certificate(1.0, controller="0")
    trajectory = simulate(system, certificate, [[0.0]], disturbance=DisturbanceSignal(np.ones((1, 1)), 1.0))
    assert trajectory.final_states()[0, 0] == pytest.approx(1.0 - math.exp(-1.0), abs=1e-9)
    frame = trajectory.to_frame()
    assert list(frame.columns) == ["t", "x", "u", "d1"]
    assert frame["d1"].eq(1.0).all()


def test_rk4_error_shrinks_at_fourth_order():
    """x' = -x from x = 1; halving dt cuts the error at T = 1 about sixteenfold"""
    system = extend(scalar_plant(f="-x", R=0.0))
    certificate = _scalar_certificate(1.0, controller="0")
    errors = [abs(simulate(system, certificate, [[1.0]], dt=dt).final_states()[0, 0] - math.exp(-1.0))
              for dt in (0.1, 0.05)]
    assert errors[1] < errors[0]
    assert 12.0 <= errors[0] / errors[1] <= 20.0


def test_diverging_runs_are_flagged():
    system = extend(scalar_plant(f="x^3", R=0.0))
    certificate = _scalar_certificate(1.0, controller="0")
    trajectory = simulate(system, certificate, [[0.0], [10.0]], dt=1e-2)
    assert np.isnan(trajectory.diverged_at[0])
    assert np.isfinite(trajectory.diverged_at[1])


def test_disturbance_family_stays_inside_the_energy_bound():
    family = disturbance_family(1, 0.1, 1.0, 4, np.random.default_rng(0))
    assert len(family) == 4
    assert family[0].energy() == 0.0
    for signal in family[1:]:
        assert 0.99 * 0.01 < signal.energy() < 0.01


def test_sector_samples_start_at_the_sector_edges():
    iqc = build_iqc("Sector", alpha=0.0, beta=0.2)
    samples = sample_perturbations(iqc, 5, np.random.default_rng(0))
    assert len(samples) == 5
    assert all(sample.is_admissible() for sample in samples)
    v = np.array([[1.0]])
    assert samples[0].output(0.0, v, None)[0, 0] == pytest.approx(0.0)
    assert samples[1].output(0.0, v, None)[0, 0] == pytest.approx(0.2)


def test_delta_samples_include_lti_members():
    iqc = build_iqc("D", sigma=0.2)
    samples = sample_perturbations(iqc, 6, np.random.default_rng(1))
    kinds = {sample.kind.value for sample in samples}
    assert kinds == {"ConstantDelta", "LtiNormBound"}
    assert all(sample.is_admissible() for sample in samples)
    assert all(sample.kind.value == "ConstantDelta" for sample in samples[:2])


def test_sector_samples_stay_inside_the_sector():
    iqc = build_iqc("Sector", alpha=0.05, beta=0.2)
    v = np.linspace(-5.0, 5.0, 201)[:, None]
    v = v[v != 0.0][:, None]
    for sample in sample_perturbations(iqc, 20, np.random.default_rng(3)):
        gain = sample.output(0.0, v, None) / v
        assert gain.min() >= 0.05 - 1e-12
        assert gain.max() <= 0.2 + 1e-12


def test_gain_samples_start_at_both_bounds():
    iqc = build_iqc("NLgain", sigma=0.2)
    samples = sample_perturbations(iqc, 6, np.random.default_rng(0))
    v = np.array([[1.0]])
    assert samples[0].output(0.0, v, None)[0, 0] == pytest.approx(0.2)
    assert samples[1].output(0.0, v, None)[0, 0] == pytest.approx(-0.2)
    assert all(abs(sample.params["amplitude"]) <= 0.2 for sample in samples)


def test_lti_samples_are_all_pass_at_the_norm_bound():
    sample = PerturbationSample("LtiNormBound", {"gain": 0.2, "corner": 2.0}, sigma=0.2)
    one, zero = np.array([[1.0]]), np.array([[0.0]])
    pole = sample.derivative(0.0, zero, one)[0, 0]
    drive = sample.derivative(0.0, one, zero)[0, 0]
    assert pole < 0
    steady = np.array([[-drive / pole]])
    assert sample.output(0.0, one, steady)[0, 0] == pytest.approx(0.2)
    assert sample.output(0.0, one, zero)[0, 0] == pytest.approx(-0.2)


@pytest.mark.parametrize("kind, params, bounds", [
    ("ConstantDelta", {"delta": 0.3}, {"sigma": 0.2}),
    ("NlGain", {"amplitude": 5.0, "omega": 1.0, "phase": 0.0}, {"sigma": 0.2}),
    ("LtiNormBound", {"gain": 0.1, "corner": -1.0}, {"sigma": 0.2}),
    ("LtiNormBound", {"gain": 0.5, "corner": 1.0}, {"sigma": 0.2}),
    ("SectorNl", {"omega": 1.0, "phase": 0.0}, {"alpha": 0.2, "beta": 0.0}),
    ("SectorNl", {"omega": math.nan, "phase": 0.0}, {"alpha": 0.0, "beta": 0.2}),
])
def test_out_of_class_realizations_are_rejected(kind, params, bounds):
    with pytest.raises(ValueError):
        PerturbationSample(kind, params, **bounds)


def test_simulator_rejects_an_altered_realization(unstable_plant):
    sample = PerturbationSample("ConstantDelta", {"delta": 0.1}, sigma=0.2)
    sample.params["delta"] = 0.5
    with pytest.raises(ValueError):
        simulate(unstable_plant, _scalar_certificate(0.25), [[0.1]], perturbation=sample)


def test_no_iqc_means_a_single_nominal_run():
    assert sample_perturbations(None, 10, np.random.default_rng(0)) == [None]


def test_monte_carlo_volume_of_the_unit_disk():
    V = parse_polynomial("x^2 + y^2", ("x", "y"))
    estimate = mc_volume(V, 1.0, {}, [[-1, 1], [-1, 1]], n=200_000, seed=0)
    assert abs(estimate.estimate - math.pi) <= 4 * estimate.stderr
    assert estimate.hits > 0


def test_empty_level_set_reports_a_rule_of_three_bound():
    V = parse_polynomial("x^2 + y^2", ("x", "y"))
    estimate = mc_volume(V, -1.0, {}, [[-1, 1], [-1, 1]], n=1000, seed=0)
    assert estimate.empty
    assert estimate.estimate == 0.0
    assert estimate.upper_bound == pytest.approx(3.0 / 1000 * 4.0)


def test_volume_sampling_is_seeded():
    V = parse_polynomial("x^2 + y^2", ("x", "y"))
    first = mc_volume(V, 0.5, {}, [[-1, 1], [-1, 1]], n=5000, seed=7)
    second = mc_volume(V, 0.5, {}, [[-1, 1], [-1, 1]], n=5000, seed=7)
    assert first.hits == second.hits


def test_level_set_boundary_of_a_disk():
    certificate = Certificate(V=parse_polynomial("x1^2 + x2^2", ("x1", "x2")), gamma=1.0, R=0.0, T=1.0,
                              controller={}, plant_states=("x1", "x2"))
    boundary = level_set_boundary(certificate, n_rays=90)
    assert boundary.shape == (90, 2)
    np.testing.assert_allclose(np.hypot(boundary["x1"], boundary["x2"]), 1.0, atol=1e-9)


def test_smaller_level_sets_sample_inside_larger_ones():
    V = parse_polynomial("x^2 + y^2", ("x", "y"))
    box = [[-1, 1], [-1, 1]]
    small = sample_level_set(V, 0.5, {}, box, n=20000, seed=4)
    large = sample_level_set(V, 1.0, {}, box, n=20000, seed=4)
    assert 0 < small.hits < large.hits
    assert mc_volume(V, 0.5, {}, box, n=20000, seed=4).estimate < mc_volume(V, 1.0, {}, box, n=20000, seed=4).estimate
    inside = {tuple(point) for point in large.points}
    assert all(tuple(point) in inside for point in small.points)
