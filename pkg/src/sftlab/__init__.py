"""Spectral feature transformation for embedding-space retrieval.

Feature rows of a batch define an exponentiated-cosine affinity graph;
row-normalizing it gives a random-walk transition matrix whose product
with the features pulls every embedding toward its neighborhood.  The
package provides the transform and its gradients, graph-cut and
random-walk diagnostics, a toy supervised trainer with margin-softmax
deep supervision, retrieval evaluation (CMC/mAP) and top-n re-ranking.
"""

from .data import (
    DatasetManifest,
    FeatureMatrix,
    Partition,
    SampleRecord,
    SyntheticSpec,
    generate_synthetic,
    hold_out_eval_split,
    load_features,
    load_manifest,
    save_features,
    save_manifest,
)
from .graphcut import (
    RandomWalkStats,
    cut,
    escape_probability,
    ncut,
    ncut_escape_identity_check,
    ncut_loss,
    stationary,
    volume,
)
from .ranking import (
    EvalReport,
    QueryRanking,
    RankingList,
    evaluate,
    k_reciprocal_rerank,
    rank,
    refine_ranking,
    sft_refine,
)
from .rng import Xoshiro256StarStar
from .training import (
    AmSoftmaxClassifier,
    EmbedModel,
    PKBatch,
    TrainConfig,
    am_softmax_loss,
    forward_backward,
    lr_at,
    sample_pk,
    train,
)
from .transform import (
    AffinityMatrix,
    StochasticMatrix,
    ZeroNormRowError,
    affinity,
    sft_backward,
    sft_transform,
    transition,
)

__version__ = "0.1.0"
