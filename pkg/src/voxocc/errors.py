"""Error taxonomy shared across the package.

Contract violations are caller bugs (bad shapes, bad arguments); numeric
errors are runtime states we refuse to propagate (NaN/Inf); gradient errors
are misuse of the tape; degenerate-rig errors mean geometry left nothing to
train on.
"""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, dtype, range)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared. Carries the id of the op that made it."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value in op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class GradientError(RuntimeError):
    """Backward was asked for something the tape never saw."""


class DegenerateRigError(ContractViolation):
    """No voxel projects into any camera; the view transform would be empty."""


class CheckpointError(IOError):
    """A serialized blob is malformed or inconsistent with the model."""
