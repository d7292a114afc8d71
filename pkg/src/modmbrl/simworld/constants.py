"""Simulator constants. All lengths in metres, times in seconds."""

import math

from ..design import (HIP_LIMIT, KNEE_LIMIT, SHANK, STANCE_DEPTH, THIGH,  # noqa: F401
                      WHEEL_RADIUS, WHEEL_STRUT)

DT = 1.0 / 60.0
SUBSTEPS = 5
DT_CONTROL = DT * SUBSTEPS

VMAX = 6.0          # joint velocity limit, rad/s
ALPHA = 0.5         # per-substep velocity tracking gain
TORQUE_GAIN = 1.0   # torque proxy = gain * (command - velocity)
# substep-averaged tracking error relative to the first substep, when unclipped
TRACK_AVG = sum((1.0 - ALPHA) ** k for k in range(SUBSTEPS)) / SUBSTEPS
GRAVITY = 9.81
PITCH_RATE = 5.0    # 1/s relaxation toward the contact slope
TIP_RATE = 30.0     # 1/s, tipping of an unsupported body toward the next limb
TIP_MARGIN = 0.01   # m, support span slack before tipping starts
CONTACT_TOL = 1e-3
FAIL_DEPTH = 0.05
FAIL_PITCH = 1.2
PITCH_MAX = 0.5 * math.pi  # a tipped body rests on its end

# tallest riser an endpoint can mount without being blocked
LEG_CLIMB = 0.02
WHEEL_CLIMB = 0.75 * WHEEL_RADIUS
RISER_SCAN = 10     # cells searched behind a blocked endpoint

# heightfield grid
HF_X0 = -2.0
HF_X1 = 30.0
HF_DX = 0.05
HF_N = int(round((HF_X1 - HF_X0) / HF_DX)) + 1

# terrain window in the body frame
WIN_N = 21
WIN_X0 = -0.25
WIN_DX = 0.075

# observation noise
SIGMA_ANGLE = 0.01
SIGMA_RATE = 0.05
SIGMA_HEIGHT = 0.01

# reward weights
W_PITCH = 0.05
W_EFFORT = 0.001
W_STANCE = 0.01
W_FAIL = 2.0

EPISODE_STEPS = 200
