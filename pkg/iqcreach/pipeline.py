"""
End-to-end runs over a problem config: certify, validate, compare, volume
and simulate. Output files are written under an optional directory.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .certify import Certificate, ReachabilitySynthesizer
from .config_loader import ConfigLoader
from .errors import ConfigError
from .formatters import certificate_summary, history_frame, report_frame
from .hj_oracle import grid_hj_oracle, polytope_controls
from .lti_filters import kyp_matrix, pi22_screen
from .poly_core import Polynomial
from .validate import (check_certificate, disturbance_family, level_set_boundary, mc_volume,
                       sample_level_set, sample_perturbations, simulate, volume_table)

logger = logging.getLogger(__name__)

ORACLE_PARAMETER = 'p_delta'
SEED_STREAMS = ('synthesis', 'validation', 'volume', 'simulation')


def derive_seeds(seed):
    """One integer seed per stream, split from the top-level seed"""
    children = np.random.SeedSequence(seed).spawn(len(SEED_STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_STREAMS, children)}


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, default=_json_default))
    logger.info(f"Wrote {path}")


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


@dataclass
class CertifyResult:
    certificate: Certificate
    timings: list = field(default_factory=list)
    files: dict = field(default_factory=dict)

    def summary(self):
        return certificate_summary(self.certificate, self.timings)


@dataclass
class ValidateResult:
    passed: bool
    report: dict
    files: dict = field(default_factory=dict)


class ReachabilityPipeline:
    """Runs the toolkit on one loaded problem config"""

    def __init__(self, loader, out_dir=None, seed=None, tol=None, jobs=1, dump_dir=None):
        self.loader = loader
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.seed = loader.config.seed if seed is None else seed
        self.seeds = derive_seeds(self.seed)
        self.tol = tol
        self.jobs = max(int(jobs), 1)
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        self.system = loader.extended_system()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_path(cls, path, **kwargs):
        return cls(ConfigLoader.from_path(path), **kwargs)

    @property
    def name(self):
        return self.loader.config.name

    def _path(self, suffix):
        return self.out_dir / f"{self.name}_{suffix}" if self.out_dir is not None else None

    def synthesis_config(self):
        config = self.loader.synthesis_config(seed=self.seeds['synthesis'])
        if self.tol is not None:
            config = config.model_copy(update={'gamma_tol': self.tol, 'bisect_tol': self.tol})
        return config

    def budget(self):
        return self.loader.validation_budget(seed=self.seeds['validation'])

    # Commands

    def certify(self):
        """Synthesize a certificate and write it with its gamma table and solver statistics"""
        synthesizer = ReachabilitySynthesizer(self.system, self.synthesis_config(), dump_dir=self.dump_dir)
        certificate = synthesizer.iterate()
        certificate.metadata['config'] = self.name
        certificate.metadata['seed'] = self.seed
        result = CertifyResult(certificate, list(synthesizer.timings))
        if synthesizer.dumped:
            result.files['sdp_dumps'] = self.dump_dir
            logger.info(f"Dumped {len(synthesizer.dumped)} SDPs to {self.dump_dir}")
        logger.info(f"Certified '{self.name}': gamma = {certificate.gamma:.6g}, verified = {certificate.verified}")
        if self.out_dir is not None:
            result.files['certificate'] = self._path('certificate.json')
            certificate.save(result.files['certificate'])
            result.files['history'] = self._path('gamma_history.csv')
            history_frame(certificate, result.timings).to_csv(result.files['history'], index=False)
            result.files['solver_stats'] = self._path('solver_stats.json')
            _write_json(result.files['solver_stats'], {
                'config': self.name,
                'solver': certificate.metadata.get('solver'),
                'timings': result.timings,
                'solves': [record.get('solves') for record in certificate.history],
                'summary': result.summary(),
            })
        return result

    def load_certificate(self, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"certificate file not found: {path}")
        try:
            certificate = Certificate.load(path)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"{path}: not a certificate: {e}")
        if tuple(certificate.plant_states) != tuple(self.system.plant_states):
            raise ConfigError(f"{path}: certificate states {certificate.plant_states} do not match the config")
        return certificate

    def static_checks(self, certificate):
        """Checks that need no simulation: stored audit, KYP screen and gamma monotonicity"""
        checks = {'audit_passed': certificate.verified or not certificate.audit}
        gammas = certificate.gamma_history
        checks['gamma_monotone'] = all(b >= a - 1e-9 for a, b in zip(gammas, gammas[1:]))
        if certificate.is_soft:
            filt = self.system.iqc.filter
            M = np.asarray(certificate.M, dtype=float)
            largest = float(np.linalg.eigvalsh(kyp_matrix(certificate.Y22, filt.A, filt.B2, filt.C, filt.D2, M)).max())
            checks['kyp_max_eig'] = largest
            checks['kyp_passed'] = largest <= -1e-9 and pi22_screen(self.system.iqc, M)
        return checks

    def validate(self, certificate):
        """Audit plus falsification; writes the report, boundary samples and trajectories"""
        budget = self.budget()
        report = check_certificate(self.system, certificate, budget)
        summary = report.summary()
        summary.update(self.static_checks(certificate))
        oracle = self.oracle_check(certificate)
        if oracle is not None:
            summary['oracle'] = oracle
        passed = (report.passed and summary['audit_passed'] and summary['gamma_monotone']
                  and summary.get('kyp_passed', True) and (oracle is None or oracle['passed']))
        summary['passed'] = bool(passed)
        result = ValidateResult(bool(passed), summary)
        if self.out_dir is not None:
            result.files['report'] = self._path('report.json')
            _write_json(result.files['report'], summary)
            result.files['metrics'] = self._path('report.csv')
            report_frame(summary).to_csv(result.files['metrics'], index=False)
            result.files['boundary'] = self._path('level_set_boundary.csv')
            level_set_boundary(certificate, seed=self.seeds['validation']).to_csv(result.files['boundary'], index=False)
            result.files['trajectories'] = self._path('trajectories.csv')
            self.trajectory_table(certificate, budget).to_csv(result.files['trajectories'], index=False)
            if report.counterexample is not None:
                result.files['counterexample'] = self._path('counterexample.json')
                _write_json(result.files['counterexample'], report.counterexample.to_dict())
                if report.counterexample.trajectory is not None:
                    result.files['counterexample_trajectory'] = self._path('counterexample_trajectory.csv')
                    report.counterexample.trajectory.to_csv(result.files['counterexample_trajectory'], index=False)
        return result

    def trajectory_table(self, certificate, budget, count=10):
        """Closed-loop runs from sampled certified points under the first perturbation sample"""
        sample = sample_level_set(certificate.slice_polynomial(), certificate.gamma, {}, budget.box,
                                  budget.n_samples, budget.seed, certificate.plant_states)
        if sample.empty:
            return pd.DataFrame()
        rng = np.random.default_rng(self.seeds['simulation'])
        perturbation = sample_perturbations(self.system.iqc, 1, rng)[0]
        trajectory = simulate(self.system, certificate, sample.points[:count], perturbation, dt=budget.dt)
        frames = []
        for run in range(trajectory.n_runs):
            frame = trajectory.to_frame(run)
            frame.insert(0, 'run', run)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def oracle_field(self):
        """Plant field with each perturbation frozen to w = p_delta * v"""
        G = self.system.nominal
        delta = Polynomial.variable(ORACLE_PARAMETER)
        channels = dict(zip(self.system.perturbed_channels, range(len(self.system.perturbed_channels))))
        controls = []
        for name in G.inputs:
            u = Polynomial.variable(name)
            if name in channels:
                controls.append(u + delta * G.h[channels[name], 0])
            else:
                controls.append(u)
        field_ = G.vector_field(controls)
        if G.w_names and not channels:
            field_ = field_.substitute({w: delta * G.h[i, 0] for i, w in enumerate(G.w_names)})
        return field_

    def oracle_check(self, certificate):
        """Certified samples against the grid backward reachable set, when configured"""
        settings = self.loader.config.validation.oracle if self.loader.config.validation else None
        if settings is None:
            return None
        G = self.system.nominal
        field_ = self.oracle_field()
        result = grid_hj_oracle(field_, G.states, G.inputs, G.target, G.T, polytope_controls(G.P, G.b),
                                settings.bounds, settings.n_grid, ORACLE_PARAMETER,
                                tuple(settings.parameter_values), refinements=settings.refinements)
        sample = sample_level_set(certificate.slice_polynomial(), certificate.gamma, {}, settings.bounds,
                                  self.budget().n_samples, self.seeds['validation'], certificate.plant_states)
        inside = result.contains(sample.points, settings.dilation) if not sample.empty else np.ones(0, dtype=bool)
        outside = int((~inside).sum())
        if outside:
            logger.warning(f"{outside} certified samples fall outside the grid reachable set")
        if self.out_dir is not None:
            result.export(self._path('oracle_grid.csv'))
        consistent = result.consistent is not False
        return {'passed': outside == 0 and consistent, 'samples': int(sample.hits), 'outside': outside,
                'oracle_area': result.area(), 'steps': result.steps, 'refinement_consistent': consistent}

    def volume(self, certificate, n=None):
        settings = self.loader.config.validation
        if settings is None:
            raise ConfigError(f"{self.loader.source}: volume estimates need a validation box")
        estimate = mc_volume(certificate.slice_polynomial(), certificate.gamma, {}, settings.box,
                             n or settings.n_samples, self.seeds['volume'], certificate.plant_states)
        logger.info(f"Volume of '{self.name}': {estimate.estimate:.4g} +/- {estimate.stderr:.2g}")
        return estimate

    def simulate(self, certificate, x0, perturbation_index=0, disturbance_index=0, dt=None):
        G = self.system.nominal
        budget = self.budget() if self.loader.config.validation else None
        rng = np.random.default_rng(self.seeds['simulation'])
        count = max(perturbation_index + 1, 1)
        perturbations = sample_perturbations(self.system.iqc, count, rng)
        perturbation = perturbations[min(perturbation_index, len(perturbations) - 1)]
        disturbances = disturbance_family(len(G.d_names), G.R, G.T, disturbance_index + 1, rng)
        disturbance = disturbances[min(disturbance_index, len(disturbances) - 1)]
        dt = dt or (budget.dt if budget is not None else 1e-3)
        trajectory = simulate(self.system, certificate, np.atleast_2d(x0), perturbation, disturbance, dt)
        frame = trajectory.to_frame(0)
        if self.out_dir is not None:
            path = self._path('simulation.csv')
            frame.to_csv(path, index=False)
            logger.info(f"Wrote {path}")
        return trajectory, frame


def _certify_for_compare(path, seed, tol):
    pipeline = ReachabilityPipeline.from_path(path, seed=seed, tol=tol)
    result = pipeline.certify()
    return result.certificate.to_dict(), result.timings


def compare(hard_path, soft_path, out_dir=None, seed=None, tol=None, jobs=1, certificates=None):
    """Volumes of two certificates on a common box and the soft >= hard - 3 stderr test.

    ``certificates`` may hold already computed certificates keyed 'hard' and
    'soft'; otherwise both configs are certified, in parallel when jobs > 1.
    """
    pipelines = {
        'hard': ReachabilityPipeline.from_path(hard_path, out_dir=out_dir, seed=seed, tol=tol),
        'soft': ReachabilityPipeline.from_path(soft_path, out_dir=out_dir, seed=seed, tol=tol),
    }
    if pipelines['hard'].system.plant_states != pipelines['soft'].system.plant_states:
        raise ConfigError("compared configs must share the plant states")
    certificates = dict(certificates or {})
    missing = [key for key in ('hard', 'soft') if key not in certificates]
    if missing and jobs > 1:
        paths = {'hard': hard_path, 'soft': soft_path}
        with ProcessPoolExecutor(max_workers=min(jobs, len(missing))) as pool:
            futures = {key: pool.submit(_certify_for_compare, paths[key], pipelines[key].seed, tol) for key in missing}
            for key, future in futures.items():
                certificates[key] = Certificate.from_dict(future.result()[0])
    else:
        for key in missing:
            certificates[key] = pipelines[key].certify().certificate

    box = pipelines['hard'].loader.config.validation.box
    n = pipelines['hard'].loader.config.validation.n_samples
    volume_seed = pipelines['hard'].seeds['volume']
    frame = volume_table({key: certificates[key] for key in ('hard', 'soft')}, box, n, volume_seed)
    frame.insert(0, 'config', [pipelines[key].name for key in frame['kind']])
    volumes = frame.set_index('kind')
    slack = 3.0 * math.hypot(volumes.loc['hard', 'stderr'], volumes.loc['soft', 'stderr'])
    ordered = volumes.loc['soft', 'volume'] >= volumes.loc['hard', 'volume'] - slack
    report = {'ordered': bool(ordered), 'slack': float(slack), 'rows': frame.to_dict('records')}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        frame.to_csv(Path(out_dir) / 'comparison.csv', index=False)
        _write_json(Path(out_dir) / 'comparison.json', report)
    logger.info(f"Soft volume {volumes.loc['soft', 'volume']:.4g} vs hard {volumes.loc['hard', 'volume']:.4g}, "
                f"ordering holds: {ordered}")
    return frame, report
