"""phckit: plane-wave-expansion and FDTD toolkit for heterostructure
microcavities in hexagonal photonic-crystal slabs."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    LatticeSpec,
    HeterostructureProfile,
    StepProfile,
    GradualProfile,
    DielectricGrid,
    build_hole_centers,
    index_at,
    rasterize,
    effective_slab_index,
)

# The heavier solver modules (bands, fdtd, resonance, oracles,
# experiment, cli) are imported on demand:
#   from phckit import bands, fdtd, resonance, oracles, experiment
