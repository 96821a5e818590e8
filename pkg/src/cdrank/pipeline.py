"""End-to-end orchestration: feature assembly, training, cross-validation.

This layer connects the data records to the estimators. It owns the
representation vocabulary (raw fingerprint or expression versus pretrained
embeddings), builds concatenated feature tables with per-column source
tags, runs the fold protocol, and sweeps hyperparameter grids with a
deterministic ranking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .classifiers import DnnScorer, LogisticScorer, RandomForestScorer
from .contrastive import (
    EncoderSpec,
    assign_cell_groups,
    assign_drug_groups,
    embed,
    pretrain_encoder,
)
from .errors import ConfigError
from .evaluation import (
    precision_cancer_at_k,
    precision_cell_at_k,
    rank_drugs,
    ttest_bonferroni,
)
from .neural import TrainConfig, encoder_half, train_autoencoder

# Representation tokens as they appear in configs and file names.
DRUG_FINGERPRINT = "f"
DRUG_EMBEDDING = "e_d"
CELL_EXPRESSION = "g"
CELL_EMBEDDING = "e_c"

DRUG_REPRS = (DRUG_FINGERPRINT, DRUG_EMBEDDING)
CELL_REPRS = (CELL_EXPRESSION, CELL_EMBEDDING)
CLASSIFIER_KINDS = ("lr", "rf", "dnn")

DEFAULT_TOP_KS = (1, 2, 3, 4, 5, 10)


@dataclass(frozen=True)
class Variant:
    """One model architecture: drug representation, cell representation, classifier."""

    drug_repr: str = DRUG_FINGERPRINT
    cell_repr: str = CELL_EXPRESSION
    classifier: str = "rf"

    def __post_init__(self):
        if self.drug_repr not in DRUG_REPRS:
            raise ConfigError(f"drug_repr must be one of {DRUG_REPRS}, got {self.drug_repr!r}")
        if self.cell_repr not in CELL_REPRS:
            raise ConfigError(f"cell_repr must be one of {CELL_REPRS}, got {self.cell_repr!r}")
        if self.classifier not in CLASSIFIER_KINDS:
            raise ConfigError(
                f"classifier must be one of {CLASSIFIER_KINDS}, got {self.classifier!r}"
            )

    @classmethod
    def parse(cls, text: str) -> "Variant":
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) != 3:
            raise ConfigError(
                f"variant must be 'drug_repr,cell_repr,classifier', got {text!r}"
            )
        return cls(*parts)

    def __str__(self) -> str:
        return f"{self.drug_repr},{self.cell_repr},{self.classifier}"

    @property
    def needs_drug_encoder(self) -> bool:
        return self.drug_repr == DRUG_EMBEDDING

    @property
    def needs_cell_encoder(self) -> bool:
        return self.cell_repr == CELL_EMBEDDING


# ------------------------------------------------------------------ features


@dataclass
class FeatureTable:
    """Pair-level design matrix with provenance tags per column."""

    X: np.ndarray
    y: np.ndarray
    pair_keys: list  # (drug_id, cell_id) per row
    source_mask: tuple  # "drug" or "cell" per column

    def rows_for_cells(self, cell_ids) -> np.ndarray:
        keep = set(cell_ids)
        return np.array([key[1] in keep for key in self.pair_keys], dtype=bool)


def _representation_matrix(ids, vectors, model, what: str):
    matrix = np.vstack([vectors[i] for i in ids])
    if model is None:
        return matrix
    expected = model.layer_dims[0]
    if matrix.shape[1] != expected:
        raise ConfigError(
            f"{what} encoder expects width {expected}, inputs have {matrix.shape[1]}"
        )
    return embed(model, matrix)


def build_features(
    pairs,
    drugs: dict,
    cells: dict,
    variant: Variant,
    drug_model=None,
    cell_model=None,
) -> FeatureTable:
    """Concatenate the chosen drug and cell representations per labeled pair.

    The drug block comes first, then the cell block; `source_mask` records
    which is which. Embedding variants require the matching pretrained
    encoder model.
    """
    if not pairs:
        raise ConfigError("no pairs to featurize")
    if variant.needs_drug_encoder and drug_model is None:
        raise ConfigError("variant uses the drug embedding but no drug encoder was given")
    if variant.needs_cell_encoder and cell_model is None:
        raise ConfigError("variant uses the cell embedding but no cell encoder was given")

    for pair in pairs:
        if pair.label is None:
            raise ConfigError("pairs must be labeled before featurization")

    drug_ids = sorted({p.drug_id for p in pairs})
    cell_ids = sorted({p.cell_id for p in pairs})
    missing = [d for d in drug_ids if d not in drugs]
    if missing:
        raise ConfigError(f"pair references unknown drug {missing[0]!r}")
    missing = [c for c in cell_ids if c not in cells]
    if missing:
        raise ConfigError(f"pair references unknown cell line {missing[0]!r}")

    drug_matrix = _representation_matrix(
        drug_ids,
        {d: drugs[d].fingerprint for d in drug_ids},
        drug_model if variant.needs_drug_encoder else None,
        "drug",
    )
    cell_matrix = _representation_matrix(
        cell_ids,
        {c: cells[c].expression for c in cell_ids},
        cell_model if variant.needs_cell_encoder else None,
        "cell",
    )
    drug_row = {d: i for i, d in enumerate(drug_ids)}
    cell_row = {c: i for i, c in enumerate(cell_ids)}

    n = len(pairs)
    width = drug_matrix.shape[1] + cell_matrix.shape[1]
    X = np.empty((n, width))
    y = np.empty(n)
    pair_keys = []
    for i, pair in enumerate(pairs):
        X[i, : drug_matrix.shape[1]] = drug_matrix[drug_row[pair.drug_id]]
        X[i, drug_matrix.shape[1]:] = cell_matrix[cell_row[pair.cell_id]]
        y[i] = pair.label
        pair_keys.append((pair.drug_id, pair.cell_id))
    mask = ("drug",) * drug_matrix.shape[1] + ("cell",) * cell_matrix.shape[1]
    return FeatureTable(X=X, y=y, pair_keys=pair_keys, source_mask=mask)


# --------------------------------------------------------------- classifiers


def make_classifier(kind: str, params: dict | None = None, seed: int = 0):
    """Instantiate an unfitted scorer of the requested kind."""
    params = dict(params or {})
    if kind == "lr":
        return LogisticScorer(**params)
    if kind == "rf":
        params.setdefault("seed", seed)
        return RandomForestScorer(**params)
    if kind == "dnn":
        params.setdefault("seed", seed)
        return DnnScorer(**params)
    raise ConfigError(f"classifier must be one of {CLASSIFIER_KINDS}, got {kind!r}")


# ----------------------------------------------------------------- rankings


def effective_sets(pairs) -> dict:
    """Per cell line, the drugs labeled effective."""
    out: dict = {}
    for pair in pairs:
        out.setdefault(pair.cell_id, set())
        if pair.label == 1:
            out[pair.cell_id].add(pair.drug_id)
    return out


def rankings_from_scores(pair_keys, scores) -> dict:
    """Group pair scores per cell line into best-first rankings."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(pair_keys) != scores.shape[0]:
        raise ValueError("pair_keys and scores lengths differ")
    per_cell: dict = {}
    for (drug_id, cell_id), score in zip(pair_keys, scores):
        per_cell.setdefault(cell_id, {})[drug_id] = float(score)
    return {
        cell_id: rank_drugs(drug_scores, cell_id)
        for cell_id, drug_scores in sorted(per_cell.items())
    }


@dataclass
class PrecisionSummary:
    """Top-k precision at several cutoffs, per cell, per cancer, and overall."""

    ks: tuple
    per_cell: dict  # k -> {cell_id: precision}
    per_cancer: dict  # k -> {cancer: mean precision}
    overall: dict  # k -> unweighted mean of per-cancer means

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "per_cell": {
                str(k): dict(sorted(self.per_cell[k].items())) for k in self.ks
            },
            "per_cancer": {str(k): self.per_cancer[k] for k in self.ks},
            "overall": {str(k): self.overall[k] for k in self.ks},
        }

    def mean_cell(self, k: int) -> float:
        values = list(self.per_cell[k].values())
        return float(np.mean(values))


def precision_summary(rankings: dict, effective: dict, cancer_of: dict, ks=DEFAULT_TOP_KS):
    """Evaluate cell-level and cancer-level top-k precision for each k."""
    if not rankings:
        raise ValueError("no rankings to evaluate")
    ks = tuple(int(k) for k in ks)
    shortest = min(len(r) for r in rankings.values())
    usable = tuple(k for k in ks if k <= shortest)
    if not usable:
        raise ValueError(f"no requested k fits the shortest ranking ({shortest})")
    per_cell = {}
    per_cancer = {}
    overall = {}
    for k in usable:
        cell_values = {
            cell_id: precision_cell_at_k(r, effective.get(cell_id, set()), k)
            for cell_id, r in rankings.items()
        }
        cancers, mean_of_means = precision_cancer_at_k(cell_values, cancer_of)
        per_cell[k] = cell_values
        per_cancer[k] = cancers
        overall[k] = mean_of_means
    return PrecisionSummary(ks=usable, per_cell=per_cell, per_cancer=per_cancer, overall=overall)


# --------------------------------------------------------- cross-validation


@dataclass
class FoldResult:
    fold_index: int
    model: object
    summary: PrecisionSummary

    def metric(self, spec: str, k: int) -> float:
        if spec == "cell":
            return self.summary.mean_cell(k)
        if spec == "cancer":
            return self.summary.overall[k]
        raise ConfigError(f"metric must be 'cell' or 'cancer', got {spec!r}")


def _evaluate_rows(model, table: FeatureTable, rows: np.ndarray, effective, cancer_of, ks):
    keys = [key for key, keep in zip(table.pair_keys, rows) if keep]
    scores = model.predict_proba(table.X[rows])
    rankings = rankings_from_scores(keys, scores)
    return precision_summary(rankings, effective, cancer_of, ks)


def cross_validate(
    table: FeatureTable,
    folds,
    effective: dict,
    cancer_of: dict,
    classifier: str,
    params: dict | None = None,
    seed: int = 0,
    ks=DEFAULT_TOP_KS,
) -> list:
    """Train on all folds but one, evaluate the held-out fold; repeat.

    Fold f trains with seed seed+f so forests and networks differ across
    folds but never across reruns.
    """
    folds = [tuple(f) for f in folds]
    if len(folds) < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    results = []
    for i, held_out in enumerate(folds):
        val_rows = table.rows_for_cells(held_out)
        if not val_rows.any():
            raise ConfigError(f"fold {i} has no pairs")
        train_rows = ~val_rows & table.rows_for_cells(
            {cell for j, f in enumerate(folds) if j != i for cell in f}
        )
        if not train_rows.any():
            raise ConfigError(f"training pool for fold {i} has no pairs")
        model = make_classifier(classifier, params, seed=seed + i)
        model.fit(table.X[train_rows], table.y[train_rows])
        summary = _evaluate_rows(model, table, val_rows, effective, cancer_of, ks)
        results.append(FoldResult(fold_index=i, model=model, summary=summary))
    return results


def fold_metric_means(results, spec: str, k: int) -> np.ndarray:
    return np.array([r.metric(spec, k) for r in results], dtype=np.float64)


def compare_variants(results_a, results_b, spec: str, k: int, n_tests: int = 1):
    """Fold-level t-test between two cross-validated runs on one metric."""
    return ttest_bonferroni(
        fold_metric_means(results_a, spec, k),
        fold_metric_means(results_b, spec, k),
        n_tests=n_tests,
    )


@dataclass
class EvaluationRun:
    """A final model trained on every fold plus its test-set summaries."""

    variant: Variant
    model: object
    trained_on: PrecisionSummary | None
    novel: PrecisionSummary | None
    fold_results: list = field(default_factory=list)


def train_final_and_evaluate(
    table: FeatureTable,
    plan,
    effective: dict,
    cancer_of: dict,
    variant: Variant,
    params: dict | None = None,
    seed: int = 0,
    ks=DEFAULT_TOP_KS,
    with_cv: bool = True,
) -> EvaluationRun:
    """Fit the final classifier on the full fold pool and score both test sets."""
    train_rows = table.rows_for_cells(plan.fold_union())
    if not train_rows.any():
        raise ConfigError("no training pairs under the split plan")
    model = make_classifier(variant.classifier, params, seed=seed)
    model.fit(table.X[train_rows], table.y[train_rows])

    def summary_for(cells):
        rows = table.rows_for_cells(cells)
        if not rows.any():
            return None
        return _evaluate_rows(model, table, rows, effective, cancer_of, ks)

    fold_results = []
    if with_cv:
        fold_results = cross_validate(
            table, plan.folds, effective, cancer_of, variant.classifier,
            params, seed=seed, ks=ks,
        )
    return EvaluationRun(
        variant=variant,
        model=model,
        trained_on=summary_for(plan.trained_on_test),
        novel=summary_for(plan.novel_test),
        fold_results=fold_results,
    )


# -------------------------------------------------------------- pretraining


def pretrain_drug_encoder(
    drugs: dict,
    spec: EncoderSpec | None = None,
    config: TrainConfig | None = None,
    rule: str = "overlap",
):
    """Contrastively pretrain the drug encoder on fingerprints.

    Only drugs with at least one recorded gene target participate; their
    target sets define the same-group relation.
    """
    spec = spec or EncoderSpec()
    config = config or TrainConfig()
    with_targets = {d: rec for d, rec in drugs.items() if rec.gene_targets}
    if len(with_targets) < 4:
        raise ConfigError("drug pretraining needs at least 4 drugs with gene targets")
    assignment = assign_drug_groups(with_targets.values(), rule=rule)
    items = {d: rec.fingerprint for d, rec in with_targets.items()}
    return pretrain_encoder(items, assignment, spec, config)


def pretrain_cell_encoder(
    cells: dict,
    spec: EncoderSpec | None = None,
    config: TrainConfig | None = None,
):
    """Contrastively pretrain the cell encoder on expression profiles.

    Cancer types define the same-group relation; the caller chooses the
    pool (typically cell lines without response data).
    """
    spec = spec or EncoderSpec()
    config = config or TrainConfig()
    if len(cells) < 4:
        raise ConfigError("cell pretraining needs at least 4 cell lines")
    assignment = assign_cell_groups(cells.values())
    items = {c: rec.expression for c, rec in cells.items()}
    return pretrain_encoder(items, assignment, spec, config)


def pretrain_cell_autoencoder(
    cells: dict,
    hidden_dims=(64, 16),
    activation: str = "relu",
    dropout_rate: float = 0.0,
    config: TrainConfig | None = None,
):
    """Reconstruction-baseline cell embedding: autoencoder bottleneck.

    Returns the encoder half (inputs to bottleneck) plus the training
    report of the full reconstruction network.
    """
    config = config or TrainConfig(loss="mse")
    if len(cells) < 4:
        raise ConfigError("autoencoder pretraining needs at least 4 cell lines")
    matrix = np.vstack([cells[c].expression for c in sorted(cells)])
    full, report = train_autoencoder(
        matrix, config, hidden_dims=hidden_dims,
        activation=activation, dropout_rate=dropout_rate,
    )
    return encoder_half(full, len(tuple(hidden_dims))), report


# -------------------------------------------------------------- grid search


def default_rf_grid() -> list:
    grid = []
    for criterion in ("gini", "entropy"):
        for n_estimators in (10, 25, 50, 100):
            for min_samples_split in (5, 10, 20, 25):
                grid.append({
                    "criterion": criterion,
                    "n_estimators": n_estimators,
                    "min_samples_split": min_samples_split,
                })
    return grid


DNN_HIDDEN_OPTIONS = (
    (64, 32, 16), (64, 32, 8), (64, 16, 8), (32, 16, 8),
    (64, 64, 64), (32, 32, 32), (16, 16, 16),
    (64, 64), (32, 32), (16, 16), (64, 32), (64, 16), (32, 16),
    (36,), (32,), (16,),
)


def default_dnn_grid() -> list:
    grid = []
    for hidden_dims in DNN_HIDDEN_OPTIONS:
        for activation in ("relu", "sigmoid"):
            for dropout_rate in (0.0, 0.1, 0.3):
                for learning_rate in (0.01, 0.001):
                    for decay_steps in (50, 500):
                        grid.append({
                            "hidden_dims": hidden_dims,
                            "activation": activation,
                            "dropout_rate": dropout_rate,
                            "learning_rate": learning_rate,
                            "decay_steps": decay_steps,
                        })
    return grid


def default_classifier_grid(kind: str) -> list:
    if kind == "rf":
        return default_rf_grid()
    if kind == "dnn":
        return default_dnn_grid()
    if kind == "lr":
        return [{"l2": l2} for l2 in (0.0, 1e-4, 1e-2)]
    raise ConfigError(f"classifier must be one of {CLASSIFIER_KINDS}, got {kind!r}")


def default_encoder_grid() -> list:
    grid = []
    for n_layers in (1, 2):
        for units in (16, 32, 64):
            for activation in ("relu", "sigmoid"):
                for dropout_rate in (0.0, 0.1, 0.3):
                    for learning_rate in (0.01, 0.001, 0.0001):
                        grid.append({
                            "hidden_dims": (units,) * n_layers,
                            "activation": activation,
                            "dropout_rate": dropout_rate,
                            "learning_rate": learning_rate,
                        })
    return grid


@dataclass
class GridRow:
    """One configuration's cross-validated outcome."""

    index: int
    variant: Variant
    params: dict
    metric_value: float
    fold_values: tuple

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "variant": str(self.variant),
            "params": json.dumps(self.params, sort_keys=True),
            "metric": self.metric_value,
            "folds": json.dumps(list(self.fold_values)),
        }


def grid_search(
    table_builder,
    plan,
    effective: dict,
    cancer_of: dict,
    variant: Variant,
    param_grid,
    metric: str = "cell",
    k: int = 5,
    seed: int = 0,
    ks=DEFAULT_TOP_KS,
) -> list:
    """Cross-validate every parameter set; rank by metric desc, index asc.

    `table_builder` maps a params dict to the FeatureTable to use. Plain
    classifier grids ignore the params and reuse one table; encoder sweeps
    rebuild features per encoder configuration and are expected to cache.
    """
    param_grid = list(param_grid)
    if not param_grid:
        raise ConfigError("parameter grid is empty")
    if k not in tuple(ks):
        ks = tuple(ks) + (k,)
    rows = []
    for index, params in enumerate(param_grid):
        table = table_builder(params)
        classifier_params = {
            key: value for key, value in params.items() if not key.startswith("encoder_")
        }
        results = cross_validate(
            table, plan.folds, effective, cancer_of, variant.classifier,
            classifier_params, seed=seed, ks=ks,
        )
        values = fold_metric_means(results, metric, k)
        rows.append(GridRow(
            index=index,
            variant=variant,
            params=dict(params),
            metric_value=float(np.mean(values)),
            fold_values=tuple(float(v) for v in values),
        ))
    rows.sort(key=lambda row: (-row.metric_value, row.index))
    return rows
