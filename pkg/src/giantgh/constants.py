"""Physical constants (CODATA 2018, SI units)."""

NEUTRON_MASS = 1.67492749804e-27  # kg
HBAR = 1.054571817e-34  # J s

NM = 1e-9  # m per nm
MM = 1e-3  # m per mm
