"""Numeric defaults for every tunable in the package.

GI scale and selection fraction, histogram geometry and optimizer settings
live here so they can be audited and overridden in one place.

=========================  ==========  =========================================
Name                       Value       Used by
=========================  ==========  =========================================
SATURATION_FRACTION        0.98        imaging: pixel >= this is clipped
DARK_THRESHOLD             1/1024      imaging: all channels below -> masked
GI_SIGMA                   0.5         grayness: LoG scale (px)
GI_TOP_FRACTION            0.001       grayness: share of grayest pixels kept
GI_MIN_PIXELS              10          grayness: lower bound on kept pixels
GI_EPSILON                 1e-4        grayness: log floor / flatness guard
HIST_BINS                  64          chroma: bins per axis
HIST_BIN_SIZE              0.03125     chroma: log-chroma units per bin
LEARNING_RATE              1.0         ffcc: gradient step
MOMENTUM                   0.9         ffcc: heavy-ball coefficient
EPOCHS                     500         ffcc: full-batch iterations
L2_FILTER                  1e-4        ffcc: filter weight decay
L2_BIAS                    1e-4        ffcc: bias weight decay
SEED                       0           all seeded operations
CAP_DEGREES                20.0        synth: illuminant cone half-angle
=========================  ==========  =========================================
"""

SATURATION_FRACTION = 0.98
DARK_THRESHOLD = 1.0 / 1024.0

GI_SIGMA = 0.5
GI_TOP_FRACTION = 0.001
GI_MIN_PIXELS = 10
GI_EPSILON = 1e-4

HIST_BINS = 64
HIST_BIN_SIZE = 0.03125

LEARNING_RATE = 1.0
MOMENTUM = 0.9
EPOCHS = 500
L2_FILTER = 1e-4
L2_BIAS = 1e-4

SEED = 0

CAP_DEGREES = 20.0

# guard below which an illuminant component counts as zero
ILLUMINANT_TOLERANCE = 1e-9
