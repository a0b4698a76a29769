"""Cloze-based re-ranking for text-to-image person anomaly search.

A coarse retriever's top candidates are re-ranked by masking the query's
verbs and colors, asking a multimodal model to fill the blanks from each
candidate image, and letting a language model order the candidates by how
well their fills match.  The order is turned into scores by rank decay and
fused with the retriever's scores.
"""

from .core import (
    UNKNOWN,
    Completion,
    DecayPolicy,
    EvalReport,
    FinalRanking,
    FusionWeights,
    GalleryItem,
    InitialRanking,
    MaskedQuery,
    QueryRecord,
    RerankResult,
    Slot,
    SlotKind,
    average_precision,
    decay_scores,
    fuse_scores,
    mean_metrics,
    merge_ranking,
    recall_at_k,
)
from .config import RunConfig

__version__ = "0.1.0"
