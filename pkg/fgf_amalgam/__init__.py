"""
fgf_amalgam package.

Exact symbolic computation of amalgamated free products A *_D B of finite direct sums of
matrix algebras, hyperfinite algebras and interpolated free group factors, over a
finite-dimensional abelian D:
- Inclusion data, the graph G_D^(A,B) and Bratteli diagrams
- Finite-dimensional stage approximations of hyperfinite summands
- Per-atom block products glued along connectors, with an fdim ledger
- Free group factor summands handled by peeling, one at a time
"""

__all__ = ["__version__"]
__version__ = "0.1.0"
