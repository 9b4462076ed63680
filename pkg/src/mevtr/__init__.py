"""Multi-event video-text retrieval over frozen embeddings.

Pipeline pieces: a binary embedding corpus format with a synthetic
generator, K-Medoids key-event selection, multi-instance video-text
similarity, a multi-positive contrastive loss with analytic gradients,
a linear-head trainer, retrieval metrics, and a text-collapse probe.
"""

__version__ = "0.1.0"

from .corpus import (
    Corpus,
    EmbeddingMatrix,
    SyntheticConfig,
    TextItem,
    VideoItem,
    generate_synthetic,
    load_corpus,
    load_embeddings,
    load_labels,
    save_corpus,
    save_embeddings,
)
from .errors import (
    EmbeddingFormatError,
    InvariantError,
    ManifestError,
    MevtrError,
    TrainingDiverged,
)
from .evaluation import (
    DEFAULT_KS,
    CollapseReport,
    MetricsReport,
    SubsetSpec,
    Task,
    collapse_diagnostic,
    evaluate_t2v,
    evaluate_v2t,
    partition_subsets,
    restrict_to_videos,
)
from .keyevents import (
    ClusterConfig,
    KeyEventSet,
    clustering_objective,
    gather_key_embeddings,
    load_key_events,
    save_key_events,
    select_key_events,
)
from .loss import (
    Batch,
    LossConfig,
    LossOutput,
    Weighting,
    baseline_loss,
    loss_t2v,
    loss_v2t,
    loss_v2t_plain,
    mevtr_loss,
)
from .similarity import (
    SimilarityMatrix,
    SimilarityMode,
    load_similarity,
    save_similarity,
    score_matrix,
    score_pair,
)
from .trainer import (
    ProjectionHead,
    Recluster,
    TrainConfig,
    TrainReport,
    head_gradient,
    load_head,
    project_corpus,
    save_head,
    train,
)

__all__ = [
    "Batch",
    "ClusterConfig",
    "CollapseReport",
    "Corpus",
    "DEFAULT_KS",
    "EmbeddingFormatError",
    "EmbeddingMatrix",
    "InvariantError",
    "KeyEventSet",
    "LossConfig",
    "LossOutput",
    "ManifestError",
    "MetricsReport",
    "MevtrError",
    "ProjectionHead",
    "Recluster",
    "SimilarityMatrix",
    "SimilarityMode",
    "SubsetSpec",
    "SyntheticConfig",
    "Task",
    "TextItem",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "VideoItem",
    "Weighting",
    "baseline_loss",
    "clustering_objective",
    "collapse_diagnostic",
    "evaluate_t2v",
    "evaluate_v2t",
    "gather_key_embeddings",
    "generate_synthetic",
    "head_gradient",
    "load_corpus",
    "load_embeddings",
    "load_head",
    "load_key_events",
    "load_labels",
    "load_similarity",
    "loss_t2v",
    "loss_v2t",
    "loss_v2t_plain",
    "mevtr_loss",
    "partition_subsets",
    "project_corpus",
    "restrict_to_videos",
    "save_corpus",
    "save_embeddings",
    "save_head",
    "save_key_events",
    "save_similarity",
    "score_matrix",
    "score_pair",
    "select_key_events",
    "train",
]
