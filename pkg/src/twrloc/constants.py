"""Physical constants shared by the solver and scene modules."""

import math

# Wave speed is the rounded 3e8 m/s so that a 3 GHz source gives a
# wavelength of exactly 0.1 m and a lambda/10 mesh of exactly 0.01 m.
# EPS0 is derived from MU0 and C0, keeping the unit system self-consistent
# (waves propagate at exactly C0 on a sufficiently fine grid).
C0 = 3.0e8
MU0 = 4.0e-7 * math.pi
EPS0 = 1.0 / (MU0 * C0 * C0)
ETA0 = math.sqrt(MU0 / EPS0)
