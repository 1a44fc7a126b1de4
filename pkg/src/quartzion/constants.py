"""Physical constants (CODATA 2018 exact/recommended values, SI units)."""

import math

ELEMENTARY_CHARGE = 1.602176634e-19  # C
BOLTZMANN = 1.380649e-23  # J/K
PLANCK = 6.62607015e-34  # J s
HBAR = PLANCK / (2.0 * math.pi)  # J s
ATOMIC_MASS_UNIT = 1.66053906660e-27  # kg

TWO_PI = 2.0 * math.pi

# 40Ca+ : 39.962590863 u minus one electron mass
ELECTRON_MASS = 9.1093837015e-31  # kg
CA40_ION_MASS = 39.962590863 * ATOMIC_MASS_UNIT - ELECTRON_MASS
