"""Post-processing and evaluation of deep feature embeddings.

L2 normalization, PCA / random orthogonal projection, the probability
invariant shift distance, k-means + NMI clustering scores, Recall@K
retrieval, and small numpy trainers for softmax classifiers and
contrastive embedders.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataFormatError, EmbedEvalError, NumericError
from .dataio import (
    LabeledDataset,
    SplitSpec,
    class_disjoint_split,
    load_dataset,
    load_features,
    load_labels,
    save_features,
    save_labels,
    subsample_per_class,
)
from .transforms import (
    Projection,
    apply_projection,
    fit_pca,
    fit_random_projection,
    identity_projection,
    l2_normalize,
)
from .metrics import (
    InvariantShiftMetric,
    cross_entropy,
    invariant_distance,
    invariant_shift_basis,
    pairwise_distances,
    softmax,
)
from .clustering import ClusteringEval, KMeansResult, clustering_eval, kmeans, nmi
from .retrieval import RetrievalEval, knn_indices, recall_at_k

__all__ = [
    "__version__",
    "ConfigError",
    "DataFormatError",
    "EmbedEvalError",
    "NumericError",
    "LabeledDataset",
    "SplitSpec",
    "class_disjoint_split",
    "load_dataset",
    "load_features",
    "load_labels",
    "save_features",
    "save_labels",
    "subsample_per_class",
    "Projection",
    "apply_projection",
    "fit_pca",
    "fit_random_projection",
    "identity_projection",
    "l2_normalize",
    "InvariantShiftMetric",
    "cross_entropy",
    "invariant_distance",
    "invariant_shift_basis",
    "pairwise_distances",
    "softmax",
    "ClusteringEval",
    "KMeansResult",
    "clustering_eval",
    "kmeans",
    "nmi",
    "RetrievalEval",
    "knn_indices",
    "recall_at_k",
]
