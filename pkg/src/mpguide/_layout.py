"""Column layouts shared by both kernel backends.

The compiled core repeats these numbers as C enums; ``tests/test_backends.py``
checks the two stay in sync.
"""

# shape rows
SH_KIND, SH_MAT, SH_C, SH_EU, SH_EV, SH_HU, SH_HV, SH_RAD, SH_AREA, SH_N, SH_CURV = (
    0, 1, 2, 5, 8, 11, 12, 13, 14, 15, 18)
SH_WIDTH = 19
KIND_QUAD, KIND_SPHERE = 0, 1

# material rows
MT_CLASS, MT_IOR, MT_COL, MT_ROUGH = 0, 1, 2, 5
MT_WIDTH = 8
DIFFUSE, GLOSSY, DIELECTRIC, CONDUCTOR = 0, 1, 2, 3

# emitter rows
EM_KIND, EM_POS, EM_RAD, EM_LE = 0, 1, 4, 5
EM_WIDTH = 8
EMIT_POINT, EMIT_SPHERE = 0, 1

# integrator / solver parameter vector
P_MAX_ITER = 0
P_TOL = 1
P_BETA0 = 2
P_GROWTH = 3
P_CLAMP = 4
P_DELTA_SAME = 5
P_FD_DELTA = 6
P_TOL_POLISH = 7
P_KMAX = 8
P_RETRIES = 9
P_ALPHA = 10
P_RR_START = 11
P_RR_GAMMA = 12
P_MAX_DEPTH = 13
P_NMAX = 14
P_TIMING = 15
P_MODE = 16
P_SELECTIVE = 17
P_TRAINING = 18
P_BETA_MIN = 19
P_P0 = 32  # P0[n] stored at P_P0 + n, n = 0..13
PRM_WIDTH = 48

MODE_PT, MODE_SMS, MODE_MPG = 0, 1, 2

# walk status
ADMISSIBLE, NOT_CONVERGED, ESCAPED = 0, 1, 2

# deduction status
DEDUCE_OK, DEDUCE_MISS, DEDUCE_TIR, DEDUCE_MISMATCH = 0, 1, 2, 3

# statistics vector
ST_ESTIMATES = 0
ST_FOUND = 1
ST_WALKS = 2
ST_WALKS_OK = 3
ST_TRIALS = 4
ST_TRUNCATED = 5
ST_DEDUCE_FAIL = 6
ST_GGT_FAIL = 7
ST_ACT_QUERIES = 8
ST_ACT_ACTIVE = 9
ST_GUIDE_TIME = 10
ST_SPEC_TIME = 11
ST_RECORDS = 12
ST_PATHS = 13
ST_CHAIN_NONZERO = 14
ST_ESCAPED = 15
ST_LEARNED = 16
ST_WIDTH = 17

# training record row (float64 before packing to the 40-byte dtype)
REC_WIDTH = 14  # x_d(3) x_l(3) dir(3) n bits throughput recip bsdf

N_MAX = 13
