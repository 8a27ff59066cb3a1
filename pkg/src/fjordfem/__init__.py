"""2D continuous-Galerkin solver for buoyancy-driven flow under ice shelves."""

__version__ = "0.1.0"
