"""
End-to-end tests on the scalar problem
"""

import json

import numpy as np
import pandas as pd
import pytest

from iqcreach.certify import Certificate
from iqcreach.errors import ConfigError
from iqcreach.pipeline import ORACLE_PARAMETER, ReachabilityPipeline, compare, derive_seeds

from conftest import CONFIG_DIR

SCALAR = CONFIG_DIR / "scalar.json"


@pytest.fixture(scope="module")
def certified(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("scalar")
    pipeline = ReachabilityPipeline.from_path(SCALAR, out_dir=out_dir)
    return pipeline, pipeline.certify()


def test_seed_streams_are_reproducible_and_distinct():
    seeds = derive_seeds(0)
    assert seeds == derive_seeds(0)
    assert len(set(seeds.values())) == len(seeds)
    assert seeds != derive_seeds(1)


def test_tolerance_override_reaches_the_synthesis_settings():
    pipeline = ReachabilityPipeline.from_path(SCALAR, tol=1e-3)
    cfg = pipeline.synthesis_config()
    assert cfg.gamma_tol == cfg.bisect_tol == 1e-3


def test_certify_dumps_every_solved_sdp(tmp_path):
    dump_dir = tmp_path / "sdp"
    pipeline = ReachabilityPipeline.from_path(SCALAR, dump_dir=dump_dir)
    result = pipeline.certify()
    dumps = sorted(dump_dir.glob("*.txt"))
    assert result.files["sdp_dumps"] == dump_dir
    assert dumps[0].name.startswith("0001_")
    assert all(path.read_text().startswith("# iqcreach sparse SDP") for path in dumps)
    assert len(dumps) >= len(result.certificate.history)


def test_scalar_certificate_meets_the_acceptance_level(certified):
    _, result = certified
    certificate = result.certificate
    assert certificate.gamma >= 0.98
    assert len(certificate.history) <= 3
    assert certificate.verified
    assert certificate.metadata["config"] == "scalar"


def test_certify_writes_its_artifacts(certified):
    pipeline, result = certified
    assert set(result.files) == {"certificate", "history", "solver_stats"}
    history = pd.read_csv(result.files["history"])
    assert list(history["iteration"]) == list(range(1, len(result.certificate.history) + 1))
    assert history["wall_time"].notna().all()
    stats = json.loads(result.files["solver_stats"].read_text())
    assert stats["config"] == "scalar"
    loaded = pipeline.load_certificate(result.files["certificate"])
    assert loaded.gamma == result.certificate.gamma


def test_certificate_file_has_no_wall_times(certified):
    _, result = certified
    assert "wall_time" not in result.files["certificate"].read_text()


def test_validation_of_the_scalar_certificate_passes(certified):
    pipeline, result = certified
    outcome = pipeline.validate(result.certificate)
    assert outcome.passed, outcome.report
    assert outcome.report["gamma_monotone"]
    assert "counterexample" not in outcome.files
    boundary = pd.read_csv(outcome.files["boundary"])
    assert list(boundary.columns) == ["x"]
    assert len(boundary) == 2
    trajectories = pd.read_csv(outcome.files["trajectories"])
    assert {"run", "t", "x", "u"} <= set(trajectories.columns)


def test_inflated_gamma_is_caught(certified, tmp_path):
    pipeline, result = certified
    data = result.certificate.to_dict()
    data["gamma"] *= 4
    outcome = pipeline.validate(Certificate.from_dict(data))
    assert not outcome.passed
    assert outcome.report["counterexample"] is not None
    assert not outcome.report["untested"]
    kind = outcome.report["counterexample"]["kind"]
    assert "trajectory" not in outcome.report["counterexample"]
    assert ("counterexample_trajectory" in outcome.files) == (kind != "containment")


def test_volume_of_the_scalar_slice(certified):
    pipeline, result = certified
    estimate = pipeline.volume(result.certificate, n=20000)
    # the slice is an interval inside the target [-1, 1]
    assert 0.0 < estimate.estimate <= 2.0 + 4 * estimate.stderr


def test_simulate_writes_one_run(certified):
    pipeline, result = certified
    trajectory, frame = pipeline.simulate(result.certificate, [0.5])
    assert frame["t"].iloc[-1] == pytest.approx(1.0)
    assert (pipeline.out_dir / "scalar_simulation.csv").is_file()
    assert trajectory.n_runs == 1


def test_load_certificate_errors(certified, tmp_path):
    pipeline, _ = certified
    with pytest.raises(ConfigError):
        pipeline.load_certificate(tmp_path / "absent.json")
    bogus = tmp_path / "bogus.json"
    bogus.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ConfigError):
        pipeline.load_certificate(bogus)


def test_load_certificate_rejects_other_plants(tmp_path):
    pipeline = ReachabilityPipeline.from_path(SCALAR)
    certificate = Certificate(V=pipeline.system.nominal.target, gamma=1.0, R=0.0, T=1.0, controller={},
                              plant_states=("x1", "x2"))
    path = tmp_path / "other.json"
    certificate.save(path)
    with pytest.raises(ConfigError, match="do not match"):
        pipeline.load_certificate(path)


def test_oracle_field_freezes_the_perturbation():
    pipeline = ReachabilityPipeline.from_path(CONFIG_DIR / "gtm_sector_T1.json")
    field = pipeline.oracle_field()
    point = {"x1": 0.1, "x2": -0.1, "u": 0.2, ORACLE_PARAMETER: 0.1}
    expected = pipeline.system.nominal.vector_field([0.2 * 1.1]).evaluate(point)
    np.testing.assert_allclose(field.evaluate(point), expected)


def test_compare_reuses_given_certificates(certified, tmp_path):
    _, result = certified
    certificates = {"hard": result.certificate, "soft": result.certificate}
    frame, report = compare(SCALAR, SCALAR, out_dir=tmp_path, certificates=certificates)
    assert list(frame["kind"]) == ["hard", "soft"]
    assert list(frame.columns) == ["config", "kind", "hardness", "gamma", "volume", "stderr", "hits", "draws"]
    assert set(frame["config"]) == {"scalar"}
    assert frame["volume"].iloc[0] == frame["volume"].iloc[1]
    assert report["ordered"]
    assert (tmp_path / "comparison.csv").is_file()
    assert json.loads((tmp_path / "comparison.json").read_text())["ordered"]


@pytest.mark.slow
def test_soft_delta_iqc_certifies_at_least_the_hard_volume(tmp_path):
    _, report = compare(CONFIG_DIR / "gtm_delta_hard.json", CONFIG_DIR / "gtm_delta_soft.json",
                        out_dir=tmp_path, jobs=2)
    assert report["ordered"]
