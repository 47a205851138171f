"""Numerical laboratory for a stiff laser-matter system.

Subpackages
-----------
quantum
    Atomic species data and matter-side matrix algebra.
spectral
    Mode lattice, projectors, transverse eigenstructure, averages.
stiff_solver
    Direct two-scale integrator of the transverse-magnetic system.
reduced_model
    Limiting envelope / rate-equation dynamics.
profile_builder
    Multiscale expansion: lifting, correctors, assembly.
harness
    Residual norms, convergence studies, decay fits, averaging diagnostics.
cli
    Configuration and command-line pipelines.
"""

__version__ = "0.1.0"
