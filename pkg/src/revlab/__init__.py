"""Desk-scale toolkit for classifying desirable reasoning revisions:
corpus modeling, sentence alignment, synonym augmentation, four BiLSTM
training regimes (STL / Union / MTL / TL), and intrinsic + extrinsic
evaluation over synthetic stand-in corpora."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    AlignmentPair,
    Corpus,
    CorpusMeta,
    EssayPair,
    FoldAssignment,
    ImprovementRule,
    Label,
    Op,
    Revision,
    SentenceRecord,
)
from .errors import (  # noqa: F401
    DegenerateDataError,
    EvaluationError,
    RevlabError,
    TrainingError,
    UnaugmentableError,
    ValidationError,
)
