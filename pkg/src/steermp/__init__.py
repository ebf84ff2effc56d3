"""steermp: O(3) steerable tensor algebra, equivariant message passing on
point-cloud graphs, and N-body experiments on self-generated data.

Everything is float64 numpy.  The public surface is re-exported here; see
the README for a tour and ``demos/`` for runnable walkthroughs.
"""

from .o3 import (
    Irrep,
    IrrepsLayout,
    GroupElement,
    spherical_harmonics,
    wigner_d,
    rep_matrix,
    cg_coefficients,
    random_group_element,
    fibonacci_sphere,
)

__version__ = "0.1.0"
