"""Product-form analysis, proportional fairness and simulation for multi-class PS networks."""

from .errors import (
    ConfigError,
    DidNotConverge,
    NumericallySingular,
    PfqnError,
    ResourceCapError,
    SolverFault,
    StateNotInSn,
    StateSpaceTooLarge,
    TableMiss,
    TableTooLarge,
    TopologyError,
    UnstableDrift,
    UnstableNetwork,
)
from .fairness import (
    Manifold,
    PFSolution,
    alpha_dual,
    alpha_primal,
    beta_rate,
    collapse_margin,
    kkt_residuals,
    kl_decompose,
    manifold_distance,
    manifold_point,
    solve_pf,
)
from .productform import (
    Allocation,
    NormalizingTable,
    bn_bruteforce,
    bn_table,
    check_feasibility,
    closed_conditional_pmf,
    doc_pmf,
    doc_pmf_box,
    little_identity_residual,
    open_normalizer,
    spinning_allocation,
)
from .simulate import (
    SimConfig,
    Trajectory,
    empirical_tv_distance,
    simulate_closed_network,
    simulate_flow_level,
    simulate_flow_level_general_sizes,
    simulate_open_packet,
)
from .topology import (
    PacketVector,
    SizeDist,
    Topology,
    TrafficProfile,
    enumerate_states,
    linear_network,
    single_queue,
    stability_check,
    validate_topology,
)

__version__ = "0.1.0"
