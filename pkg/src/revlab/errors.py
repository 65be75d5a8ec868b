"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: validation errors exit 2, training
errors exit 3, evaluation errors exit 4.
"""


class RevlabError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(RevlabError):
    """Malformed input data, bad configuration, or violated precondition."""


class UnaugmentableError(ValidationError):
    """An example (or a whole class) has no lexicon-replaceable tokens."""


class TrainingError(RevlabError):
    """Training failed (non-finite gradients, inconsistent shapes, ...)."""


class EvaluationError(RevlabError):
    """Evaluation failed (inconsistent folds, missing predictions, ...)."""


class DegenerateDataError(EvaluationError):
    """A statistic is undefined on the given data (e.g. zero variance)."""
