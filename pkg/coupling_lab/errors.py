"""Exception hierarchy shared by the library and the command line runner."""


class LabError(RuntimeError):
    exit_code = 1


class ConfigError(LabError):
    exit_code = 2


class AssumptionError(LabError):
    exit_code = 3


class MembershipError(AssumptionError):
    pass


class NumericalError(LabError):
    exit_code = 4


class ProfileError(NumericalError):
    pass


class SimulationError(NumericalError):
    pass


class EstimationError(NumericalError):
    pass


class TransportError(NumericalError):
    pass


class BoundError(NumericalError):
    pass


class AcceptanceError(LabError):
    exit_code = 5
