"""Exception hierarchy shared across the library."""


class ParafleetError(Exception):
    """Base class for all library-specific errors."""


# --- model-level ---

class SingularAttitude(ParafleetError):
    """Pitch magnitude too close to 90 deg; Euler-rate transform is singular."""


class SingularMass(ParafleetError):
    """Composite mass/inertia matrix is not invertible."""


class OutOfBounds(ParafleetError):
    """Control or flap deflection outside its admissible box."""


class TurnRateExceeded(ParafleetError):
    """Commanded turn rate exceeds the kinematic-model limit."""


# --- solver-level ---

class NlpError(ParafleetError):
    """Base class for NLP solver failures."""


class MaxIterations(NlpError):
    """Iteration budget exhausted before convergence."""


class EvaluationFailure(NlpError):
    """An evaluator returned NaN/Inf or raised."""


class LineSearchFailure(NlpError):
    """Backtracking line search could not make progress."""


class SingularKkt(NlpError):
    """KKT system is rank deficient; no sensitivity direction available."""


# --- transcription-level ---

class InvalidMesh(ParafleetError):
    """Mesh element/point counts outside the supported range."""


class AltitudeBelowTarget(ParafleetError):
    """Initial altitude does not exceed the terminal altitude."""


class ReferenceTooShort(ParafleetError):
    """Reference trajectory does not cover the requested horizon."""


class HistoryTooShort(ParafleetError):
    """Measurement window holds fewer than two samples."""


class NotConverged(ParafleetError):
    """Requested a solution artifact from a non-converged solve."""


# --- allocation / coordination ---

class NonFinite(ParafleetError):
    """Cost matrix contains NaN or Inf entries."""


class ReplanFailed(ParafleetError):
    """A replanning subproblem failed for a specific parafoil."""

    def __init__(self, parafoil: int, reason: str = ""):
        self.parafoil = parafoil
        super().__init__(f"replan failed for parafoil {parafoil}: {reason}")


class AgentUnresponsive(ParafleetError):
    """An agent failed to produce a trajectory twice in a row."""


# --- configuration ---

class ScenarioError(ParafleetError):
    """Scenario file failed schema validation."""
