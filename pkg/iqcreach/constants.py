"""
Constants for the robust reachability toolkit
"""

import math

# Variable naming
TIME_VARIABLE = 't'
FILTER_STATE_PREFIX = 'xp'
CONTROLLER_STATE_PREFIX = 'xt'

# Conic solver defaults
DEFAULT_FEAS_TOL = 1e-7
DEFAULT_GAP_TOL = 1e-7
DEFAULT_MAX_ITERS = 200
DEFAULT_SOLVER = 'CLARABEL'
FALLBACK_SOLVER = 'SCS'
SCS_MAX_ITERS = 20000

# SOS programming
SOS_EPSILON = 1e-6
SOS_AUDIT_TOL = 1e-6
MARGIN_CAP = 1.0

# Iteration
DEFAULT_N_ITER = 20
DEFAULT_GAMMA_TOL = 1e-4
DEFAULT_BISECT_TOL = 1e-4
STALL_PATIENCE = 2
DEFAULT_GAMMA0 = 1.0
GAMMA_UPPER_CAP = 1e6

# Initial iterate scaling
V0_SCALING_DIRECTIONS = 2000
V0_RAY_STEPS = 10

# Multiplier degree defaults, before parity balancing
DEFAULT_MULTIPLIER_DEGREES = {
    's4': 2,
    's5': 2,
    's6': 2,
    'lambda': 2,
}

# KYP
KYP_STRICT_MARGIN = 1e-9
KYP_PROGRAM_MARGIN = 1e-6
KYP_SCREEN_POINTS = 50
KYP_SCREEN_RANGE = (1e-3, 1e3)

# Equilibrium search
NEWTON_TOL = 1e-10
NEWTON_MAX_ITERS = 100
LINEARIZE_RESIDUAL_TOL = 1e-8

# Validation
DEFAULT_DT = 1e-3
DIVERGENCE_BOUND = 1e6
DISTURBANCE_SEGMENTS = 20
DISTURBANCE_ENERGY_FACTOR = 1.0 - 1e-3
LEVEL_TOL = 1e-4
TARGET_TOL = 1e-6
CONTROL_TOL = 1e-6
DEFAULT_MC_SAMPLES = 100_000
ZERO_HIT_CONFIDENCE = 3.0  # rule-of-three numerator for a 95% bound
BOUNDARY_FRACTION = 0.5  # share of initial states taken nearest the level-set boundary

# Hamilton-Jacobi grid oracle
HJ_DEFAULT_CFL = 0.9
HJ_DEFAULT_GRID = 201
HJ_DILATION_CELLS = 2
HJ_FLUX_TOL = 1e-9  # grid cells a characteristic foot may sit outside the grid

# Exit codes for the command line surface
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE_INIT = 3
EXIT_SOLVER = 4
EXIT_AUDIT = 5

# Generic transport model (short-period longitudinal dynamics)
GTM_ELEVATOR_LIMIT = 0.261
GTM_TARGET_RADIUS = math.pi / 27
GTM_SECTOR = (0.0, 0.2)
GTM_DELTA_BOUND = 0.2
GTM_FILTER_POLE = 10.0
GTM_FILTER_ORDER = 1

# Planar quadrotor
QUADROTOR_GRAVITY = 9.8
QUADROTOR_K = 0.89 / 1.4
QUADROTOR_D0 = 70.0
QUADROTOR_D1 = 17.0
QUADROTOR_N0 = 55.0
QUADROTOR_THRUST_DEVIATION = 1.5
QUADROTOR_ROLL_LIMIT = math.pi / 12
QUADROTOR_GAIN_BOUND = 0.2
