"""Exception types shared across the package."""

from __future__ import annotations


class StackgameError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(StackgameError):
    """Matrix or vector shapes are inconsistent with the declared dimensions."""


class ActionNotInSet(StackgameError):
    """A leader action value is not a member of that leader's action set."""


class ValidationFailed(StackgameError):
    """A problem bundle failed structural validation.

    Carries the full list of violation messages.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        msg = "; ".join(self.violations) if self.violations else "validation failed"
        super().__init__(msg)


class ParseError(StackgameError):
    """A problem file or series file could not be parsed.

    The message carries file/field/row provenance so the offending input
    can be located without a debugger.
    """


class FollowerInfeasible(StackgameError):
    """The follower-layer feasible set is empty for the given leader profile."""

    def __init__(self, profile, detail: str = ""):
        self.profile = tuple(profile)
        msg = f"follower problem infeasible at leader profile {self.profile}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class FollowerSolveFailed(StackgameError):
    """A follower-layer solve terminated without an optimality or
    infeasibility certificate (iteration cap with large residuals)."""


class LatticeTooLarge(StackgameError):
    """The leader action lattice exceeds the enumeration cap."""


class AllProfilesInfeasible(StackgameError):
    """Every leader profile in the lattice yields an infeasible follower problem."""


class NoEquilibriumFound(StackgameError):
    """No pure leader equilibrium exists at the requested tolerance."""


class InfeasibleSpec(StackgameError):
    """The synthetic generator could not produce a feasible instance within
    its retry budget."""
