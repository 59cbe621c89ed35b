"""
Tests for the gamma-step / V-step alternation and certificates
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from iqcreach.certify import (Certificate, ReachabilitySynthesizer, SynthesisConfig, assemble_hard, init_V0,
                              iterate, linear_design)
from iqcreach.errors import InfeasibleInitialization, KypScreenError
from iqcreach.lti_filters import build_iqc
from iqcreach.poly_core import parse_polynomial
from iqcreach.system_builder import augment_actuator, extend

from conftest import scalar_plant

SQUARE = parse_polynomial("x^2", ("x",))


@pytest.fixture
def config():
    return SynthesisConfig(deg_V=2, deg_k=1, n_iter=3)


def test_synthesis_config_defaults():
    cfg = SynthesisConfig(deg_V=4)
    assert cfg.controller_degree == 3
    assert cfg.tilde_degree == 3
    assert cfg.time_varying


@pytest.mark.parametrize("overrides", [
    {"deg_V": 3},
    {"deg_V": 0},
    {"multiplier_degrees": {"s9": 2}},
    {"multiplier_degrees": {"s2": 3}},
    {"n_iter": 0},
])
def test_synthesis_config_rejects_bad_settings(overrides):
    with pytest.raises(ValidationError):
        SynthesisConfig(**overrides)


def test_first_gamma_step_is_bound_by_target_containment(config):
    synthesizer = ReachabilitySynthesizer(extend(scalar_plant()), config)
    step = synthesizer.gamma_step(SQUARE)
    assert step.gamma == pytest.approx(0.99, abs=1e-3)
    assert step.upper == pytest.approx(0.99, abs=1e-4)
    assert set(step.controller) == {"u"}


def test_smaller_target_lowers_gamma(config):
    synthesizer = ReachabilitySynthesizer(extend(scalar_plant(target="x^2 - 0.25")), config)
    assert synthesizer.gamma_step(SQUARE).gamma == pytest.approx(0.24, abs=1e-3)


def test_negative_definite_iterate_is_reported_as_infeasible(config):
    synthesizer = ReachabilitySynthesizer(extend(scalar_plant()), config)
    with pytest.raises(InfeasibleInitialization) as excinfo:
        synthesizer.gamma_step(-SQUARE)
    assert excinfo.value.family == "containment"
    assert excinfo.value.iteration == 1


def test_linear_design_matches_the_scalar_riccati_solution():
    """x' = x + u with Q = R = 1 gives P = K = 1 + sqrt(2)"""
    design = linear_design(extend(scalar_plant(f="x", R=0.0)))
    assert design.P[0, 0] == pytest.approx(1.0 + math.sqrt(2.0))
    assert design.K[0, 0] == pytest.approx(1.0 + math.sqrt(2.0))
    assert design.Y[0, 0] == pytest.approx(1.0 / (2.0 * math.sqrt(2.0)))


def test_initial_iterate_touches_the_target_boundary():
    V0 = init_V0(extend(scalar_plant(f="x", R=0.0)), SynthesisConfig(scaling_directions=50))
    assert V0.coefficient({"x": 2}) == pytest.approx(1.0, rel=1e-6)
    assert V0.constant_term() == pytest.approx(0.0, abs=1e-12)


def test_scalar_alternation_reaches_the_analytic_optimum(config):
    synthesizer = ReachabilitySynthesizer(extend(scalar_plant()), config)
    certificate = synthesizer.iterate()
    history = certificate.gamma_history
    assert len(history) <= 3
    assert all(later >= earlier - 1e-6 for earlier, later in zip(history, history[1:]))
    assert certificate.gamma >= 0.98
    assert certificate.verified
    assert [record["iteration"] for record in synthesizer.timings] == list(range(1, len(history) + 1))


def test_certificate_is_reproducible(config):
    first = iterate(extend(scalar_plant()), config)
    second = iterate(extend(scalar_plant()), config)
    assert first.to_json() == second.to_json()


def test_certificate_round_trips_through_json(config, tmp_path):
    certificate = iterate(extend(scalar_plant()), config)
    path = tmp_path / "certificate.json"
    certificate.save(path)
    loaded = Certificate.load(path)
    assert loaded.V == certificate.V
    assert loaded.gamma == certificate.gamma
    assert loaded.controller == certificate.controller
    assert loaded.history == certificate.history
    assert loaded.verified == certificate.verified


def test_certificate_rejects_foreign_documents():
    with pytest.raises(ValueError):
        Certificate.from_dict({"format": "something-else"})


def test_slice_polynomial_fixes_time_and_filter_states():
    V = parse_polynomial("x^2 + t*x + xp1^2", ("t", "x", "xp1"))
    certificate = Certificate(V=V, gamma=1.0, R=0.0, T=1.0, controller={}, plant_states=("x",),
                              filter_states=("xp1",))
    assert certificate.slice_polynomial().evaluate({"x": 0.5}) == pytest.approx(0.25)


def test_soft_level_polynomial_subtracts_storage():
    V = parse_polynomial("x^2 + xp1^2", ("x", "xp1"))
    certificate = Certificate(V=V, gamma=1.0, R=0.0, T=1.0, controller={}, plant_states=("x",),
                              filter_states=("xp1",), hardness="Soft", Y22=np.array([[0.5]]))
    assert certificate.level_polynomial().evaluate({"x": 1.0, "xp1": 2.0}) == pytest.approx(3.0)


def test_hard_assembler_refuses_soft_iqc(gtm_system, config):
    system = augment_actuator(gtm_system, build_iqc("DG", sigma=0.2), ("u",))
    with pytest.raises(ValueError):
        assemble_hard(system, config, None)


def test_soft_iqc_without_storage_stops_before_solving(gtm_system, config, monkeypatch):
    iqc = build_iqc("DG", sigma=0.2)
    flipped = -iqc.mset.default()
    monkeypatch.setattr(iqc.mset, "default", lambda: flipped)
    synthesizer = ReachabilitySynthesizer(augment_actuator(gtm_system, iqc, ("u",)), config)
    with pytest.raises(KypScreenError):
        synthesizer.initial_multipliers()


def test_soft_iqc_default_multiplier_has_storage(gtm_system, config):
    iqc = build_iqc("DG", sigma=0.2)
    synthesizer = ReachabilitySynthesizer(augment_actuator(gtm_system, iqc, ("u",)), config)
    M, Y22 = synthesizer.initial_multipliers()
    assert M.shape == (4, 4)
    assert Y22.shape == (2, 2)


@pytest.mark.slow
def test_gtm_sector_certificate(config_dir):
    from iqcreach.config_loader import load_config

    loader = load_config(config_dir / "gtm_sector_T1.json")
    certificate = iterate(loader.extended_system(), loader.synthesis_config())
    assert certificate.verified
    assert certificate.gamma > 0
