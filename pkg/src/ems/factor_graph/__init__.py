"""Graph-structured sparse linear algebra for ``A x = b``."""

from .numeric import NumericFactors, SingularMatrixError, factorize, solve
from .ordering import natural, order
from .pcg import PCGResult, pcg_solve
from .sparse import SparseFormatError, SparseSystem, read_coordinate, write_coordinate
from .symbolic import SymbolicStructure, symbolic_analyze

__all__ = [
    "NumericFactors", "PCGResult", "SingularMatrixError", "SparseFormatError",
    "SparseSystem", "SymbolicStructure", "factorize", "natural", "order",
    "pcg_solve", "read_coordinate", "solve", "symbolic_analyze", "write_coordinate",
]
