"""Exception hierarchy shared across the toolkit.

Every error raised on a documented failure path derives from
:class:`FalconError`, so callers (and the CLI) can distinguish our
failures from programming errors.
"""


class FalconError(Exception):
    """Base class for all toolkit errors."""


# --- configuration / input errors ---------------------------------------

class ConfigError(FalconError):
    """A run configuration failed to parse or validate."""


class SchemaError(ConfigError):
    """A config document is missing or mistypes a field; message carries the field path."""


class EmptyArchitecture(FalconError):
    """A network needs at least an input and an output layer."""


class DimMismatch(FalconError):
    """Vector dimension does not match the network or model config."""


class ShapeMismatch(FalconError):
    """Array shapes disagree between paired arguments."""


class InvalidTopology(FalconError):
    """Circuit config is not a valid tree network (cycles, missing BCs, bad parameters)."""


class InvalidFractions(FalconError):
    """Split fractions do not sum to one or are out of range."""


class OutOfRange(FalconError):
    """A scalar argument lies outside its documented range."""


# --- data errors ---------------------------------------------------------

class EmptyTrace(FalconError):
    """Time traces contain no samples."""


class EmptyDataset(FalconError):
    """A training set has no rows."""


class EmptyCloud(FalconError):
    """A point cloud has no points."""


class UnlabeledPoints(FalconError):
    """Encoder input is missing branch labels."""


class TooFewPoints(FalconError):
    """Subsampling without replacement asked for more points than available."""


class DegenerateTemplate(FalconError):
    """Template cloud has zero extent along every axis."""


class InsufficientSamples(FalconError):
    """Waveform fit asked for more harmonics than the samples support."""


class ZeroVariance(FalconError):
    """A column is constant and cannot be standardized."""


class MissingColumnSpec(FalconError):
    """Noise spec does not cover every target column."""


class NonPositiveNominal(FalconError):
    """Prior sampling requires strictly positive nominal values."""


class NonPositiveResistance(FalconError):
    """Resistance rescaling requires strictly positive entries."""


# --- numerical failures ---------------------------------------------------

class NumericalFailure(FalconError):
    """Base class for solver and training breakdowns."""


class NonConvergent(NumericalFailure):
    """Periodicity tolerance unmet within the allotted cycles (strict mode)."""


class NumericalBlowup(NumericalFailure):
    """A state variable exceeded the guard magnitude."""


class UnstableTimestep(NumericalFailure):
    """Requested dt exceeds the explicit-integrator stability estimate."""


class DivergedLoss(NumericalFailure):
    """Training loss became non-finite."""


class StepFailure(NumericalFailure):
    """Adaptive ODE controller could not take a step."""


class SimulationFailure(NumericalFailure):
    """A forward simulation failed inside an outer loop (optimizer, metrics)."""


class MaxIterExceeded(NumericalFailure):
    """Optimizer hit its iteration budget before converging."""


# --- sampling errors -------------------------------------------------------

class RejectionError(FalconError):
    """Base class for posterior rejection-sampling failures."""


class AllRejected(RejectionError):
    """No draw satisfied the prior bounds within the tries budget."""


class RejectionBudgetExceeded(RejectionError):
    """Some draws were accepted but the budget ran out before n were collected."""
