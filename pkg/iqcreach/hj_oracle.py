"""
Grid Hamilton-Jacobi oracle for two-state systems.

The fixed-time backward reachable set of each frozen parameter value is the
zero sublevel set of a value function propagated backward from p_x with a
semi-Lagrangian scheme; the oracle returns the intersection over the
parameter values. It is only meant as a desk-scale cross-check.
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np
import pandas as pd
from scipy import ndimage

from .constants import HJ_DEFAULT_CFL, HJ_DEFAULT_GRID, HJ_DILATION_CELLS, HJ_FLUX_TOL
from .errors import OracleError

logger = logging.getLogger(__name__)


def polytope_controls(P, b, tol=1e-9):
    """Vertices of {u : P u <= b} and the midpoints of vertex pairs"""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    n_u = P.shape[1]
    vertices = []
    for rows in combinations(range(P.shape[0]), n_u):
        A = P[list(rows)]
        if abs(np.linalg.det(A)) < tol:
            continue
        u = np.linalg.solve(A, b[list(rows)])
        if np.all(P @ u <= b + 1e-9) and not any(np.allclose(u, v) for v in vertices):
            vertices.append(u)
    if not vertices:
        raise OracleError("input polytope has no vertices; it must be bounded and nonempty")
    candidates = list(vertices)
    for first, second in combinations(vertices, 2):
        candidates.append(0.5 * (first + second))
    return np.array(candidates)


@dataclass
class HjResult:
    axes: tuple
    occupancy: np.ndarray
    values: dict
    states: tuple
    dt: float
    steps: int
    coarser: list = field(default_factory=list)
    consistent: Optional[bool] = None

    @property
    def spacing(self):
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    def area(self):
        return float(self.occupancy.sum() * np.prod(self.spacing))

    def _cells(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        index = []
        for k, axis in enumerate(self.axes):
            position = np.rint((points[:, k] - axis[0]) / (axis[1] - axis[0])).astype(int)
            index.append(position)
        return index

    def contains(self, points, dilation=HJ_DILATION_CELLS):
        """Membership of ``points`` in the occupancy grid grown by ``dilation`` cells"""
        grid = ndimage.binary_dilation(self.occupancy, iterations=dilation) if dilation else self.occupancy
        index = self._cells(points)
        inside = np.ones(len(index[0]), dtype=bool)
        for k, position in enumerate(index):
            inside &= (position >= 0) & (position < grid.shape[k])
        result = np.zeros(len(index[0]), dtype=bool)
        clipped = [np.clip(p, 0, grid.shape[k] - 1) for k, p in enumerate(index)]
        result[inside] = grid[tuple(c[inside] for c in clipped)]
        return result

    def to_frame(self):
        mesh = np.meshgrid(*self.axes, indexing='ij')
        data = {name: m.ravel() for name, m in zip(self.states, mesh)}
        data['inside'] = self.occupancy.ravel()
        return pd.DataFrame(data)

    def export(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Oracle grid written to {path}")


def refined_grid(n_grid):
    """Node counts after halving the spacing; every old node stays a node"""
    return tuple(2 * (n - 1) + 1 for n in n_grid)


def refinement_consistent(coarse, fine):
    """Whether the coarse set, eroded by one cell, lies inside the finer one.

    Coarse node i coincides with fine node 2 i on each axis.
    """
    if refined_grid(coarse.shape) != fine.shape:
        raise OracleError(f"grids {coarse.shape} and {fine.shape} are not one halving apart")
    core = ndimage.binary_erosion(coarse.occupancy)
    return bool(np.all(fine.occupancy[::2, ::2][core]))


def _propagate(rows, order, n_inputs, parameter, target, states, T, controls, bounds, n_grid,
               parameter_values, dt, cfl):
    axes = tuple(np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, n_grid))
    spacing = np.array([a[1] - a[0] for a in axes])
    upper = np.array(n_grid, dtype=float) - 1
    mesh = np.meshgrid(*axes, indexing='ij')
    points = np.column_stack([m.ravel() for m in mesh])

    def velocity(u, delta):
        X = np.zeros((points.shape[0], len(order)))
        X[:, :2] = points
        X[:, 2:2 + n_inputs] = u
        if parameter:
            X[:, -1] = delta
        return np.column_stack([row(X) for row in rows])

    velocities = {delta: [velocity(u, delta) for u in controls] for delta in parameter_values}
    speed = max(float(np.max(np.abs(v) / spacing)) for vs in velocities.values() for v in vs)
    dt_max = cfl / speed if speed > 0 else T
    if dt is None:
        steps = max(int(math.ceil(T / dt_max)), 1)
        dt = T / steps
    else:
        if dt > dt_max * (1 + 1e-12):
            raise OracleError(f"dt={dt} violates the CFL bound {dt_max:.4g}")
        steps = int(round(T / dt))

    terminal = target.compile(states)(points).reshape(mesh[0].shape)
    values = {}
    occupancy = np.ones(mesh[0].shape, dtype=bool)
    for delta in parameter_values:
        feet = []
        leaving = np.zeros(mesh[0].shape, dtype=bool)
        for v in velocities[delta]:
            ahead = (points + dt * v - bounds[:, 0]) / spacing
            outside = np.any((ahead < -HJ_FLUX_TOL) | (ahead > upper + HJ_FLUX_TOL), axis=1)
            leaving |= outside.reshape(mesh[0].shape)
            feet.append(ahead.T)
        value = terminal.copy()
        for step in range(steps + 1):
            # characteristics of reachable cells must stay on the grid
            flux = leaving & (value <= 0)
            if flux.any():
                cell = tuple(int(i) for i in np.argwhere(flux)[0])
                at = [float(axes[k][cell[k]]) for k in range(2)]
                raise OracleError(f"out-of-grid flux at {dict(zip(states, at))} after {step} steps; "
                                  f"widen the oracle bounds")
            if step == steps:
                break
            best = None
            for ahead in feet:
                moved = ndimage.map_coordinates(value, ahead, order=1, mode='nearest').reshape(value.shape)
                best = moved if best is None else np.minimum(best, moved)
            value = best
        values[delta] = value
        occupancy &= value <= 0
        logger.debug(f"Parameter {delta}: {int((value <= 0).sum())} cells reach the target")
    logger.info(f"Grid oracle on {n_grid[0]}x{n_grid[1]}: {steps} steps of {dt:.4g}, "
                f"area {occupancy.sum() * np.prod(spacing):.4g}")
    return HjResult(axes, occupancy, values, states, dt, steps)


def grid_hj_oracle(field, states, inputs, target, T, controls, bounds, n_grid=HJ_DEFAULT_GRID,
                   parameter=None, parameter_values=(None,), dt=None, cfl=HJ_DEFAULT_CFL, refinements=0):
    """Occupancy grid of the fixed-time backward reachable set.

    ``field`` is a two-row PolynomialMatrix in ``states``, ``inputs`` and the
    optional ``parameter``; ``controls`` lists candidate input values and
    ``bounds`` gives one (lower, upper) pair per state. With ``refinements``
    the grid spacing (and a given ``dt``) is halved that many times; the
    finest result is returned with the coarser ones in ``coarser`` and
    ``consistent`` set when every coarse set sits inside its successor.
    """
    states = tuple(states)
    inputs = tuple(inputs)
    if len(states) != 2 or field.shape != (2, 1):
        raise OracleError("the grid oracle handles two-state systems only")
    if T <= 0:
        raise OracleError("horizon must be positive")
    if refinements < 0:
        raise OracleError("refinements must be nonnegative")
    bounds = np.asarray(bounds, dtype=float).reshape(2, 2)
    if isinstance(n_grid, int):
        n_grid = (n_grid, n_grid)
    n_grid = tuple(int(n) for n in n_grid)
    controls = np.atleast_2d(np.asarray(controls, dtype=float)).reshape(-1, len(inputs))
    order = states + inputs + ((parameter,) if parameter else ())
    rows = [field[i, 0].compile(order) for i in range(2)]

    results = []
    for _ in range(refinements + 1):
        results.append(_propagate(rows, order, len(inputs), parameter, target, states, T, controls, bounds,
                                  n_grid, parameter_values, dt, cfl))
        n_grid = refined_grid(n_grid)
        dt = dt / 2 if dt is not None else None
    finest = results[-1]
    if refinements:
        finest.coarser = results[:-1]
        finest.consistent = all(refinement_consistent(a, b) for a, b in zip(results, results[1:]))
        if not finest.consistent:
            logger.warning("Oracle sets are not nested under grid refinement")
    return finest
