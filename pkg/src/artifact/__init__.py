"""Open boundary-driven exclusion process laboratory.

Simulation, exact enumeration and kernel PDE numerics for the symmetric
simple exclusion process coupled to two particle reservoirs.
"""

from .lattice import Params, Profile, steady_profile, centered

__version__ = "0.1.0"

__all__ = ["Params", "Profile", "steady_profile", "centered", "__version__"]
