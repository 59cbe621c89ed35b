"""
Tests for IQC filters, multiplier sets and the KYP search
"""

import numpy as np
import pytest

from iqcreach.lti_filters import (Hardness, IqcKind, build_iqc, freq_response, iqc_running_integral,
                                  kyp_find_y22, kyp_matrix, make_psi_column, pi22_screen, soft_iqc_lower_bound,
                                  stack_filters)


def test_psi_column_is_a_chain_of_first_order_lags():
    psi = make_psi_column(2, 10.0)
    assert psi.n_states == 2
    assert psi.n_z == 3
    assert psi.is_hurwitz()
    np.testing.assert_allclose(freq_response(psi, 0.0).real.ravel(), [1.0, 0.1, 0.01])
    response = freq_response(psi, 10.0).ravel()
    assert response[1] == pytest.approx(1.0 / (10j + 10.0))


def test_psi_column_rejects_unstable_pole():
    with pytest.raises(ValueError):
        make_psi_column(1, 0.0)


def test_stacked_filter_routes_v_and_w_separately():
    psi = make_psi_column(1, 10.0)
    filt = stack_filters(psi, psi)
    assert (filt.n_states, filt.n_v, filt.n_w, filt.n_z) == (2, 1, 1, 4)
    response = freq_response(filt, 0.0).real
    np.testing.assert_allclose(response[:, 0], [1.0, 0.1, 0.0, 0.0])
    np.testing.assert_allclose(response[:, 1], [0.0, 0.0, 1.0, 0.1])


@pytest.mark.parametrize("kind, hardness", [("D", Hardness.HARD), ("DG", Hardness.SOFT),
                                            ("NLgain", Hardness.HARD)])
def test_default_hardness(kind, hardness):
    assert build_iqc(kind, sigma=0.2).hardness == hardness


def test_invalid_iqc_parameters_are_rejected():
    with pytest.raises(ValueError):
        build_iqc("DG", hardness="Hard", sigma=0.2)
    with pytest.raises(ValueError):
        build_iqc("D", sigma=0.0)
    with pytest.raises(ValueError):
        build_iqc("Sector", alpha=0.3, beta=0.1)


def test_nl_gain_filter_is_static():
    spec = build_iqc(IqcKind.NL_GAIN, sigma=0.2, n_channels=2)
    assert spec.n_states == 0
    assert (spec.n_v, spec.n_w) == (2, 2)
    np.testing.assert_allclose(spec.mset.default(), np.diag([0.04, 0.04, -1.0, -1.0]))


def test_sector_multiplier_matches_the_quadratic_form():
    spec = build_iqc("Sector", alpha=0.0, beta=0.2)
    M = spec.mset.default()
    v, w = 1.0, 0.1
    z = np.array([v, w])
    # lambda * 2 (w - alpha v)(beta v - w)
    assert z @ M @ z == pytest.approx(2.0 * (w - 0.0 * v) * (0.2 * v - w))


def test_delta_iqc_holds_for_a_gain_inside_the_bound():
    spec = build_iqc("D", sigma=0.2, d=1, m=10.0)
    t = np.linspace(0.0, 5.0, 2001)
    v = np.sin(3.0 * t)
    z, _ = spec.filter.simulate(t, v, 0.1 * v)
    integral = iqc_running_integral(t, z, spec.mset.default())
    assert integral.min() >= -1e-9


def test_delta_iqc_is_violated_for_a_gain_outside_the_bound():
    spec = build_iqc("D", sigma=0.2, d=1, m=10.0)
    t = np.linspace(0.0, 5.0, 2001)
    v = np.sin(3.0 * t)
    z, _ = spec.filter.simulate(t, v, 0.5 * v)
    assert iqc_running_integral(t, z, spec.mset.default())[-1] < 0


def test_soft_bound_without_storage_is_the_running_integral():
    spec = build_iqc("DG", sigma=0.2)
    t = np.linspace(0.0, 2.0, 501)
    v = np.cos(t)
    M = spec.mset.default()
    z, _ = spec.filter.simulate(t, v, 0.1 * v)
    Y22 = np.zeros((spec.n_states, spec.n_states))
    np.testing.assert_allclose(soft_iqc_lower_bound(spec, M, Y22, t, v, 0.1 * v),
                               iqc_running_integral(t, z, M))


def test_pi22_screen_detects_sign_of_the_w_block():
    spec = build_iqc("DG", sigma=0.2)
    M = spec.mset.default()
    assert pi22_screen(spec, M)
    assert not pi22_screen(spec, -M)


def test_kyp_storage_exists_for_the_dg_multiplier():
    spec = build_iqc("DG", sigma=0.2, d=1, m=10.0)
    M = spec.mset.default()
    Y22 = kyp_find_y22(spec, M)
    assert Y22 is not None
    filt = spec.filter
    assert np.linalg.eigvalsh(kyp_matrix(Y22, filt.A, filt.B2, filt.C, filt.D2, M)).max() <= -1e-9


def test_kyp_search_gives_up_when_the_screen_fails():
    spec = build_iqc("DG", sigma=0.2)
    assert kyp_find_y22(spec, -spec.mset.default()) is None
