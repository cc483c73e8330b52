"""Exception hierarchy.

Every error carries a module-qualified ``code`` so the command line can
surface it without parsing messages.
"""


class DidImputeError(Exception):
    code = "didimpute.error"


class PanelError(DidImputeError, ValueError):
    code = "panel.error"


class MissingColumn(PanelError, KeyError):
    code = "panel.missing_column"

    def __str__(self):
        return Exception.__str__(self)


class DuplicateObservation(PanelError):
    code = "panel.duplicate_observation"


class InconsistentEventDate(PanelError):
    code = "panel.inconsistent_event_date"


class UnknownObservation(PanelError, KeyError):
    code = "panel.unknown_observation"

    def __str__(self):
        return Exception.__str__(self)


class DesignError(DidImputeError, ValueError):
    code = "design.error"


class EmptySupport(DesignError):
    code = "design.empty_support"


class MissingDose(DesignError):
    code = "design.missing_dose"


class RankDeficientAfterNormalization(DesignError):
    """The design stays rank deficient after the fixed-effect normalization.

    ``dimension`` is the null-space dimension and ``group`` names the column
    group whose columns could not be pivoted in.
    """

    code = "design.rank_deficient"

    def __init__(self, message, dimension=0, group=None, columns=()):
        super().__init__(message)
        self.dimension = dimension
        self.group = group
        self.columns = list(columns)


class NotIdentified(DesignError):
    """The estimand is not identified; ``certificate`` maps column labels to
    the component of ``Z1' w1`` outside the row space of the untreated design."""

    code = "estimator.not_identified"

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = dict(certificate or {})


class ThetaNotIdentified(RankDeficientAfterNormalization):
    code = "estimator.theta_not_identified"


class SingularB1(DesignError):
    code = "estimator.singular_b1"


class LsqError(DidImputeError, RuntimeError):
    code = "lsq.error"


class EmptyDesign(LsqError, ValueError):
    code = "lsq.empty_design"


class NoConvergence(LsqError):
    code = "lsq.no_convergence"

    def __init__(self, message, iterations=0, last_change=float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.last_change = last_change


class SolverFailure(LsqError):
    code = "estimator.solver_failure"


class CollinearTreatment(DesignError):
    code = "weights.collinear_treatment"


class InferenceError(DidImputeError, ValueError):
    code = "inference.error"


class DegenerateDenominator(InferenceError):
    code = "inference.degenerate_denominator"


class InsufficientPreperiods(InferenceError):
    code = "inference.insufficient_preperiods"


class SingularCovariance(InferenceError):
    code = "inference.singular_covariance"


class EmptyControlGroup(DidImputeError, ValueError):
    code = "benchmark.empty_control_group"


class DimensionMismatch(DidImputeError, ValueError):
    code = "benchmark.dimension_mismatch"


class NothingToPlot(DidImputeError, ValueError):
    code = "cli.nothing_to_plot"
