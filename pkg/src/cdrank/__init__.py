"""Contrastive representation learning and ranking toolkit for drug response.

The package covers the full path from raw screening tables to ranked drug
lists: effective-response scoring and labeling, siamese pretraining of drug
and cell line encoders, three from-scratch classifiers (logistic regression,
random forest, dense network), precision-at-k evaluation with significance
testing, and representation diagnostics (cosine separability, exact t-SNE).
"""

__version__ = "0.1.0"

from .classifiers import (
    DnnScorer,
    LogisticScorer,
    RandomForestScorer,
    feature_importance,
)
from .contrastive import (
    EncoderSpec,
    SiameseEncoder,
    assign_cell_groups,
    assign_drug_groups,
    embed,
    pretrain_encoder,
    siamese_probability,
)
from .data import (
    Dataset,
    SplitPlan,
    label_pairs,
    make_splits,
    parse_dataset,
    score_pairs,
)
from .datasets import PlantedScreen, make_planted_screen
from .evaluation import (
    Ranking,
    fda_priority_analysis,
    precision_cancer_at_k,
    precision_cell_at_k,
    rank_drugs,
    spearman,
    ttest_bonferroni,
)
from .expressiveness import (
    EmbeddingSet,
    ExactTSNE,
    compare_separability,
    separability,
    tsne_embed,
)
from .neural import MlpModel, TrainConfig, gradient_check, init_model, train
from .pipeline import (
    Variant,
    build_features,
    cross_validate,
    precision_summary,
    pretrain_cell_encoder,
    pretrain_drug_encoder,
    train_final_and_evaluate,
)
from .scoring import (
    DEFAULT_GATE_THRESHOLD,
    ThresholdSpec,
    binarize,
    effective_score,
    score_threshold,
)

__all__ = [
    "DEFAULT_GATE_THRESHOLD",
    "Dataset",
    "DnnScorer",
    "EmbeddingSet",
    "EncoderSpec",
    "ExactTSNE",
    "LogisticScorer",
    "MlpModel",
    "PlantedScreen",
    "RandomForestScorer",
    "Ranking",
    "SiameseEncoder",
    "SplitPlan",
    "ThresholdSpec",
    "TrainConfig",
    "Variant",
    "assign_cell_groups",
    "assign_drug_groups",
    "binarize",
    "build_features",
    "compare_separability",
    "cross_validate",
    "effective_score",
    "embed",
    "fda_priority_analysis",
    "feature_importance",
    "gradient_check",
    "init_model",
    "label_pairs",
    "make_planted_screen",
    "make_splits",
    "parse_dataset",
    "precision_cancer_at_k",
    "precision_cell_at_k",
    "precision_summary",
    "pretrain_cell_encoder",
    "pretrain_drug_encoder",
    "pretrain_encoder",
    "rank_drugs",
    "score_pairs",
    "score_threshold",
    "separability",
    "siamese_probability",
    "spearman",
    "train",
    "train_final_and_evaluate",
    "tsne_embed",
    "ttest_bonferroni",
    "__version__",
]
