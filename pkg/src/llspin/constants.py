"""Physical constants (SI) pinned for reproducible arithmetic."""

GAMMA_1H = 2.6752218744e8  # rad s^-1 T^-1
HBAR = 1.054571817e-34  # J s
K_B = 1.380649e-23  # J K^-1
MU0_OVER_4PI = 1.0e-7  # T m A^-1

ANGSTROM = 1.0e-10

# ortho H-H separation on a benzene ring
ORTHO_HH_DISTANCE = 2.48 * ANGSTROM

ROOM_TEMPERATURE = 300.0  # K
