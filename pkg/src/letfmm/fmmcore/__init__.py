"""Serial FMM engine: octree, Cartesian Laplace expansions, traversal."""

from .evaluate import (EvalResult, Interactions, LetIncompleteError, direct_sum,
                       evaluate, traverse)
from .tree import Cell, TraversalConfig, Tree, build_tree, upward_pass

__all__ = [
    "Cell", "EvalResult", "Interactions", "LetIncompleteError", "TraversalConfig",
    "Tree", "build_tree", "direct_sum", "evaluate", "traverse", "upward_pass",
]
