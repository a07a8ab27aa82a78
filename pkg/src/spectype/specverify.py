"""Speculative-path verification.

Re-runs the abstract interpretation, additionally exploring at every
conditional branch BOTH arms as predicted outcomes: an arm explored this way
keeps the pre-branch state with branch refinement suspended (the transient
machine ignores the branch's semantic implication) and runs for at most
``max_spec_depth`` further instructions, nesting up to ``max_nesting``
simultaneous predicted arms.  A program is rejected iff an unsafe access --
a non-pointer dereference, an out-of-bounds or misaligned access, or a read
of definitely-unwritten stack bytes -- is reachable on such an arm (null-ness
is waived there: a transient null-object access lands in the machine's dead
zone).  Architectural path segments keep the full rule set, so every
architectural rejection is also a speculative rejection.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import isa
from .verifier import PATH_BUDGET, VerdictReport, _Explorer


@dataclass(frozen=True)
class SpecBudget:
    """Abstract stand-in for the speculation window."""

    max_spec_depth: int = 64   # instructions explored along a predicted arm
    max_nesting: int = 4       # simultaneous predicted branches

    def __post_init__(self):
        if self.max_spec_depth < 0 or self.max_nesting <= 0:
            raise ValueError("bad speculation budget")


def verify_speculative(p: isa.Program, budget: SpecBudget | None = None, *,
                       state_budget: int = PATH_BUDGET) -> VerdictReport:
    """Verdict over architectural AND speculatively reachable paths."""
    isa.validate_structure(p)
    b = budget or SpecBudget()
    ex = _Explorer(p, spec_depth=b.max_spec_depth, spec_nesting=b.max_nesting,
                   budget=state_budget)
    return ex.run()
