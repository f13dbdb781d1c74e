"""Shape optimization with obstacle-type variational inequality constraints on P1 meshes."""

__version__ = "0.1.0"
