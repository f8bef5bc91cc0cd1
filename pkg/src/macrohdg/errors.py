"""Typed exceptions shared across the package."""


class InvalidConfig(ValueError):
    """A configuration value or combination is unusable."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegenerateElement(ValueError):
    """An element has non-positive volume or is otherwise degenerate."""


class TopologyError(ValueError):
    """Mesh connectivity is inconsistent (non-manifold, unmatched faces)."""


class NonAdmissibleState(FloatingPointError):
    """A conservative state has non-positive density or pressure.

    `where` carries optional context (macro id, quadrature point) for the
    solver's step-rejection logic.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class NonAdmissibleEntropyState(NonAdmissibleState):
    """An entropy-variable state violates v_last < 0."""


class SingularLocalMatrix(ArithmeticError):
    """A per-macro factorization failed; reports the macro id."""

    def __init__(self, message, macro=None):
        super().__init__(message)
        self.macro = macro


class SingularBlock(ArithmeticError):
    """A preconditioner block could not be factorized."""


class KrylovStagnation(ArithmeticError):
    """The Krylov solver made no progress over a restart cycle."""


class LinearSolveFailure(ArithmeticError):
    """The condensed linear solve did not reach its tolerance."""


class NewtonDivergence(ArithmeticError):
    """Nonlinear residual grew over a sustained window of iterations."""


class StepFailure(RuntimeError):
    """A time step could not be completed; carries diagnostics.

    `time` is the simulation time at which the failure occurred and
    `diagnostics` a dict of solver state useful for postmortems.
    """

    def __init__(self, message, time=None, diagnostics=None):
        super().__init__(message)
        self.time = time
        self.diagnostics = diagnostics or {}
