"""Identifiability and stable recovery of deep structured linear networks.

The product ``M_1(h_1) ... M_K(h_K)`` of parameter-dependent factors is a
linear map applied to the rank-one tensor built from ``h``; this package
materializes that map, probes its rank and kernel, and turns the results
into identifiability verdicts, null-space constants and recovery bounds.
Convolutional networks on rooted DAGs get an exact topology test.
"""

__version__ = "0.1.0"

from .convnet import (  # noqa: E402
    ConvTopology,
    algo_check,
    assemble_factors,
    make_chain_topology,
    make_haar_topology,
    make_parallel_dirac_topology,
    network_class_distance,
)
from .lifting import (  # noqa: E402
    FactorFamily,
    LiftedOperator,
    eval_product,
    estimate_rank_random,
    materialize_lifting,
)
from .tensor_core import class_distance, normalize_to_diag, segre_embed  # noqa: E402
