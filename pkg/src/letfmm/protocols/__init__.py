"""Exchange protocols for local essential trees."""

from .exchange import (
    ALL_KINDS,
    Bundle,
    ExchangeContext,
    ExchangeResult,
    Protocol,
    ProtocolKind,
    default_grains,
    exchange,
    max_pair_cells,
    overlap_units,
    subtree_end,
    sweep_grain,
)
from .graph import (
    CommGraph,
    ConfigurationError,
    NeighborSet,
    build_comm_graph,
    build_neighbors,
    default_epsilon,
    nb_bound,
    realized_nb_bound,
    two_hop_count,
)

__all__ = [
    "ALL_KINDS", "Bundle", "CommGraph", "ConfigurationError", "ExchangeContext", "ExchangeResult",
    "NeighborSet", "Protocol", "ProtocolKind", "build_comm_graph", "build_neighbors",
    "default_epsilon", "default_grains", "exchange", "max_pair_cells", "nb_bound",
    "overlap_units", "realized_nb_bound", "subtree_end", "sweep_grain", "two_hop_count",
]
