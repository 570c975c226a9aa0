"""Exception hierarchy shared by every module."""


class LabError(Exception):
    """Base class; carries the pipeline stage that raised it when known."""

    stage = "lab"


class PreconditionError(LabError):
    stage = "precondition"


class ConfigurationError(LabError):
    stage = "configuration"


class DataError(LabError):
    stage = "data"


class IntegrabilityError(DataError):
    """The jump measure fails the small-jump rho^2 integrability requirement."""

    stage = "jump-integrability"


class GeometryError(LabError):
    stage = "geometry"

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SimulationError(LabError):
    stage = "simulation"

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ReflectionError(SimulationError):
    stage = "reflection"

    def __init__(self, message, point=None, step=None):
        super().__init__(message, step=step)
        self.point = point


class AssemblyError(LabError):
    stage = "assembly"


class ResolutionError(LabError):
    stage = "grid"


class ExtrapolationError(LabError):
    stage = "interpolation"


class SolverError(LabError):
    stage = "solve"

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
