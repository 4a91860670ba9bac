from .world import (DEFAULT_DT, GRAVITY, ExternalForce, NumericalError,
                    SimState, World)

__all__ = ["World", "SimState", "ExternalForce", "NumericalError",
           "DEFAULT_DT", "GRAVITY"]
