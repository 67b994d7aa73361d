from __future__ import annotations

from typing import List, Optional, Sequence


class AmalgamError(Exception):
    """Base class for every failure raised by fgf_amalgam."""

    exit_code = 1


class DomainError(AmalgamError, ValueError):
    exit_code = 2


class ValidationError(AmalgamError, ValueError):
    """
    Raised when an input violates a stated invariant.
    `violations` lists one human readable line per failed check.
    """

    exit_code = 2

    def __init__(self, message: str, violations: Optional[Sequence[str]] = None) -> None:
        self.violations: List[str] = list(violations or [])
        if self.violations:
            message = message + ": " + "; ".join(self.violations)
        super().__init__(message)


class NonAbelianAmalgamError(ValidationError):
    def __init__(self, sizes: Sequence[int]) -> None:
        super().__init__(
            "amalgamated subalgebra D must be abelian (got block sizes "
            + ", ".join(str(n) for n in sizes)
            + "); reduce first: A *_D B is computed from an abelian masa of D by the standard "
            "reduction that assumes without loss of generality that D is abelian"
        )


class DisconnectedGraphError(AmalgamError):
    exit_code = 3

    def __init__(self, components: Sequence[Sequence[int]]) -> None:
        self.components = [list(c) for c in components]
        parts = " | ".join("{" + ",".join(str(k + 1) for k in c) + "}" for c in self.components)
        super().__init__(
            f"graph G_D^(A,B) is disconnected ({parts}); compute per component "
            "(rerun with --per-component)"
        )


class LedgerError(AmalgamError):
    """Internal consistency failure; `dump` carries the ledger at the time of failure."""

    exit_code = 4

    def __init__(self, message: str, dump: Optional[object] = None) -> None:
        self.dump = dump
        super().__init__(message)
