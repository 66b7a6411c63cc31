"""2D-to-3D whole-body pose lifting with semantic graph attention."""

from wholebody_lift.skeleton import (
    SkeletonTopology,
    TopologyError,
    build_adjacency,
    default_topology,
    flip_permutation,
    load_topology,
)

__version__ = "0.1.0"

__all__ = [
    "SkeletonTopology",
    "TopologyError",
    "build_adjacency",
    "default_topology",
    "flip_permutation",
    "load_topology",
]
