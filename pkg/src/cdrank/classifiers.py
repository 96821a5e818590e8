"""End classifiers over concatenated drug/cell feature vectors.

Three interchangeable scorers share the fit / predict_proba / predict
surface: a full-batch logistic regression, a from-scratch random forest,
and a dense-network wrapper. All emit a probability-like score in [0, 1]
that downstream ranking consumes directly.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import (
    as_rng,
    check_binary_labels,
    check_in,
    check_is_fitted,
    check_matrix,
)
from .neural import (
    TrainConfig,
    forward,
    init_model,
    model_from_dict,
    model_to_dict,
    sigmoid,
    train,
)

CRITERIA = ("gini", "entropy")

_MIN_DECREASE = 1e-12
_THREADS_ENV = "CDR_THREADS"


def _thread_count(n_tasks: int) -> int:
    raw = os.environ.get(_THREADS_ENV)
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ValueError(f"{_THREADS_ENV} must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ValueError(f"{_THREADS_ENV} must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


# ------------------------------------------------------------------ logistic


class LogisticScorer(BaseEstimator):
    """Binary logistic regression fit by full-batch gradient descent.

    The step size halves whenever a step would increase the regularized
    loss, so the descent is monotone. L2 strength applies to the weights
    only, never the intercept.
    """

    def __init__(self, l2=0.0, learning_rate=1.0, max_iter=5000, tol=1e-6):
        self.l2 = l2
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.tol = tol

    def _loss(self, X, y, w, b):
        p = sigmoid(X @ w + b)
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        bce = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
        return float(bce + 0.5 * self.l2 * float(w @ w))

    def fit(self, X, y):
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.learning_rate <= 0 or self.max_iter < 1 or self.tol <= 0:
            raise ValueError("learning_rate, max_iter and tol must be positive")
        X = check_matrix(X, "X")
        y = check_binary_labels(y, length=X.shape[0])
        if X.shape[0] < 2:
            raise ValueError("need at least 2 rows to fit")

        self.fit_warning_ = None
        if len(np.unique(y)) == 1 and self.l2 == 0.0:
            self.fit_warning_ = (
                "labels contain a single class and l2 is 0; "
                "the intercept diverges and iteration stops at max_iter"
            )
            warnings.warn(self.fit_warning_, UserWarning, stacklevel=2)

        n, d = X.shape
        w = np.zeros(d)
        b = 0.0
        lr = float(self.learning_rate)
        loss = self._loss(X, y, w, b)
        self.converged_ = False
        it = 0
        for it in range(1, self.max_iter + 1):
            p = sigmoid(X @ w + b)
            gw = X.T @ (p - y) / n + self.l2 * w
            gb = float(np.mean(p - y))
            if max(np.max(np.abs(gw)), abs(gb)) < self.tol:
                self.converged_ = True
                break
            while True:
                w_new = w - lr * gw
                b_new = b - lr * gb
                new_loss = self._loss(X, y, w_new, b_new)
                if new_loss <= loss or lr < 1e-12:
                    break
                lr *= 0.5
            if lr < 1e-12 and new_loss > loss:
                break
            w, b, loss = w_new, b_new, new_loss
        self.coef_ = w
        self.intercept_ = float(b)
        self.n_iter_ = it
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        X = check_matrix(X, "X", n_cols=self.coef_.shape[0])
        return sigmoid(X @ self.coef_ + self.intercept_)

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "kind": "logistic",
            "l2": self.l2,
            "coefficients": [float(v) for v in self.coef_],
            "intercept": self.intercept_,
            "converged": self.converged_,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "LogisticScorer":
        est = cls(l2=payload.get("l2", 0.0))
        est.coef_ = np.asarray(payload["coefficients"], dtype=np.float64)
        est.intercept_ = float(payload["intercept"])
        est.converged_ = bool(payload.get("converged", False))
        est.n_iter_ = 0
        est.fit_warning_ = None
        return est


# -------------------------------------------------------------------- forest


@dataclass
class TreeNode:
    value: float  # positive-class fraction at this node
    n_samples: int
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value, "n_samples": self.n_samples}
        return {
            "value": self.value,
            "n_samples": self.n_samples,
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TreeNode":
        node = cls(value=float(payload["value"]), n_samples=int(payload["n_samples"]))
        if "feature" in payload:
            node.feature = int(payload["feature"])
            node.threshold = float(payload["threshold"])
            node.left = cls.from_dict(payload["left"])
            node.right = cls.from_dict(payload["right"])
        return node


def _impurity(pos, total, criterion):
    """Binary impurity for vectors of positive counts and totals."""
    p = pos / total
    if criterion == "gini":
        return 2.0 * p * (1.0 - p)
    out = np.zeros_like(p)
    for q in (p, 1.0 - p):
        inside = (q > 0.0) & (q < 1.0)
        out = out - np.where(inside, q * np.log2(np.where(inside, q, 0.5)), 0.0)
    return out


def _best_split(X, y, criterion):
    """Exhaustive search over features and midpoint thresholds.

    Returns (feature, threshold, impurity_decrease) or None when no split
    reduces impurity. Ties keep the lowest feature index, then the lowest
    threshold, so growth is deterministic.
    """
    n = len(y)
    total_pos = float(y.sum())
    parent = float(_impurity(np.array([total_pos]), np.array([float(n)]), criterion)[0])
    best = None
    for j in range(X.shape[1]):
        xs = X[:, j]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        boundaries = np.nonzero(xs_sorted[1:] != xs_sorted[:-1])[0]
        if boundaries.size == 0:
            continue
        pos_prefix = np.cumsum(y[order])
        n_left = (boundaries + 1).astype(np.float64)
        n_right = n - n_left
        pos_left = pos_prefix[boundaries]
        pos_right = total_pos - pos_left
        weighted = (
            n_left * _impurity(pos_left, n_left, criterion)
            + n_right * _impurity(pos_right, n_right, criterion)
        ) / n
        decrease = parent - weighted
        k = int(np.argmax(decrease))
        if decrease[k] > _MIN_DECREASE and (best is None or decrease[k] > best[2]):
            cut = boundaries[k]
            threshold = float((xs_sorted[cut] + xs_sorted[cut + 1]) / 2.0)
            best = (j, threshold, float(decrease[k]))
    return best


def _grow_tree(X, y, min_samples_split, criterion, importance, n_total):
    node = TreeNode(value=float(y.mean()), n_samples=len(y))
    if len(y) < min_samples_split or y.min() == y.max():
        return node
    split = _best_split(X, y, criterion)
    if split is None:
        return node
    feature, threshold, decrease = split
    importance[feature] += (len(y) / n_total) * decrease
    node.feature = feature
    node.threshold = threshold
    go_left = X[:, feature] <= threshold
    node.left = _grow_tree(X[go_left], y[go_left], min_samples_split, criterion, importance, n_total)
    node.right = _grow_tree(X[~go_left], y[~go_left], min_samples_split, criterion, importance, n_total)
    return node


def _tree_predict(root: TreeNode, X) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(root, np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if idx.size == 0:
            continue
        if node.is_leaf:
            out[idx] = node.value
            continue
        go_left = X[idx, node.feature] <= node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


class RandomForestScorer(BaseEstimator):
    """Bagged decision trees grown to purity with exhaustive split search.

    Every tree sees a seeded bootstrap of the rows and all of the columns;
    depth is bounded only by min_samples_split and node purity. Prediction
    averages leaf positive-fractions across trees. Importances are mean
    impurity decrease, normalized to sum 1.
    """

    def __init__(self, n_estimators=100, criterion="gini", min_samples_split=2, seed=0):
        self.n_estimators = n_estimators
        self.criterion = criterion
        self.min_samples_split = min_samples_split
        self.seed = seed

    def _fit_one(self, X, y, child_seed):
        rng = np.random.default_rng(child_seed)
        rows = rng.integers(0, X.shape[0], size=X.shape[0])
        importance = np.zeros(X.shape[1])
        root = _grow_tree(
            X[rows], y[rows], self.min_samples_split, self.criterion, importance, len(rows)
        )
        return root, importance

    def fit(self, X, y):
        check_in(self.criterion, CRITERIA, "criterion")
        if self.n_estimators < 1 or self.min_samples_split < 2:
            raise ValueError("n_estimators must be >= 1 and min_samples_split >= 2")
        X = check_matrix(X, "X")
        y = check_binary_labels(y, length=X.shape[0])
        if X.shape[0] < self.min_samples_split:
            raise ValueError(
                f"need at least min_samples_split={self.min_samples_split} rows"
            )
        children = np.random.SeedSequence(self.seed).spawn(self.n_estimators)
        workers = _thread_count(self.n_estimators)
        if workers == 1:
            fitted = [self._fit_one(X, y, c) for c in children]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(self._fit_one, X, y, c) for c in children]
                fitted = [f.result() for f in futures]  # index order, not completion
        self.trees_ = [root for root, _ in fitted]
        raw = np.mean([imp for _, imp in fitted], axis=0)
        total = raw.sum()
        self.feature_importances_ = raw / total if total > 0 else raw
        self.n_features_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "trees_")
        X = check_matrix(X, "X", n_cols=self.n_features_)
        votes = np.zeros(X.shape[0])
        for root in self.trees_:
            votes += _tree_predict(root, X)
        return votes / len(self.trees_)

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "kind": "forest",
            "criterion": self.criterion,
            "n_estimators": self.n_estimators,
            "min_samples_split": self.min_samples_split,
            "seed": self.seed,
            "n_features": self.n_features_,
            "feature_importances": [float(v) for v in self.feature_importances_],
            "trees": [root.to_dict() for root in self.trees_],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RandomForestScorer":
        est = cls(
            n_estimators=payload["n_estimators"],
            criterion=payload["criterion"],
            min_samples_split=payload["min_samples_split"],
            seed=payload["seed"],
        )
        est.trees_ = [TreeNode.from_dict(t) for t in payload["trees"]]
        est.feature_importances_ = np.asarray(payload["feature_importances"], dtype=np.float64)
        est.n_features_ = int(payload["n_features"])
        return est


# ----------------------------------------------------------------------- dnn


class DnnScorer(BaseEstimator):
    """Feed-forward network with a sigmoid head, trained on binary labels.

    A seeded fraction of the rows is carved off as a validation set for
    early stopping; the returned parameters come from the best validation
    epoch.
    """

    def __init__(
        self,
        hidden_dims=(64, 64),
        activation="relu",
        dropout_rate=0.1,
        learning_rate=0.01,
        decay_rate=0.99,
        decay_steps=500,
        batch_size=256,
        max_epochs=1000,
        patience=10,
        min_delta=1e-4,
        val_fraction=0.1,
        seed=0,
    ):
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        X = check_matrix(X, "X")
        y = check_binary_labels(y, length=X.shape[0])
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        n = X.shape[0]
        if n < 2:
            raise ValueError("need at least 2 rows to fit")
        rng = as_rng(self.seed)
        order = rng.permutation(n)
        n_val = min(n - 1, max(1, int(n * self.val_fraction + 0.5)))
        val_idx, train_idx = order[:n_val], order[n_val:]
        model = init_model(
            [X.shape[1], *self.hidden_dims, 1],
            self.activation,
            "sigmoid",
            self.dropout_rate,
            self.seed,
        )
        config = TrainConfig(
            loss="bce",
            learning_rate=self.learning_rate,
            decay_rate=self.decay_rate,
            decay_steps=self.decay_steps,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
            seed=self.seed,
        )
        self.model_, self.report_ = train(
            model,
            (X[train_idx], y[train_idx].reshape(-1, 1)),
            (X[val_idx], y[val_idx].reshape(-1, 1)),
            config,
        )
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, X, "eval")[-1].ravel()

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        check_is_fitted(self, "model_")
        payload = model_to_dict(self.model_, seed=self.seed)
        payload["kind"] = "dnn"
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "DnnScorer":
        est = cls()
        est.model_ = model_from_dict(payload)
        return est


# ------------------------------------------------------------- introspection


@dataclass(frozen=True)
class ImportanceResult:
    values: np.ndarray  # one entry per feature column
    by_source: dict | None  # mean importance per source tag, None without a mask

    def to_dict(self) -> dict:
        out = {"values": [float(v) for v in self.values]}
        if self.by_source is not None:
            out["by_source"] = {k: float(v) for k, v in self.by_source.items()}
        return out


def _bce(pred, y) -> float:
    p = np.clip(pred, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def feature_importance(
    model, X=None, y=None, n_repeats: int = 10, seed: int = 0, source_mask=None
) -> ImportanceResult:
    """Per-feature importance, with optional per-source-tag means.

    Logistic models report |coefficient|; forests report their normalized
    mean impurity decrease; networks report permutation importance (the
    mean increase in log loss over seeded shuffles of one column, which is
    exactly 0 for a constant column).
    """
    if isinstance(model, LogisticScorer):
        check_is_fitted(model, "coef_")
        values = np.abs(model.coef_)
    elif isinstance(model, RandomForestScorer):
        check_is_fitted(model, "trees_")
        values = model.feature_importances_.copy()
    elif isinstance(model, DnnScorer):
        check_is_fitted(model, "model_")
        if X is None or y is None:
            raise ValueError("permutation importance needs X and y")
        X = check_matrix(X, "X")
        y = check_binary_labels(y, length=X.shape[0])
        if n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        rng = as_rng(seed)
        baseline = _bce(model.predict_proba(X), y)
        values = np.zeros(X.shape[1])
        for col in range(X.shape[1]):
            bumps = []
            for _ in range(n_repeats):
                shuffled = X.copy()
                shuffled[:, col] = shuffled[rng.permutation(X.shape[0]), col]
                bumps.append(_bce(model.predict_proba(shuffled), y) - baseline)
            values[col] = float(np.mean(bumps))
    else:
        raise TypeError(f"no importance rule for {type(model).__name__}")

    by_source = None
    if source_mask is not None:
        tags = np.asarray(source_mask)
        if tags.shape[0] != values.shape[0]:
            raise ValueError("source_mask length must match the feature count")
        seen = list(dict.fromkeys(tags.tolist()))
        by_source = {tag: float(values[tags == tag].mean()) for tag in seen}
    return ImportanceResult(values=values, by_source=by_source)


def coefficient_stability(fold_models) -> tuple[float, float]:
    """(mean |coefficient|, mean per-dimension variance) across fold models.

    Accepts fitted logistic scorers or raw coefficient vectors. Variance is
    the population variance per dimension, averaged over dimensions.
    """
    coefs = []
    for m in fold_models:
        vec = m.coef_ if isinstance(m, LogisticScorer) else np.asarray(m, dtype=np.float64)
        coefs.append(np.asarray(vec, dtype=np.float64))
    if len(coefs) < 2:
        raise ValueError("need at least 2 fold models")
    width = coefs[0].shape[0]
    if any(c.shape != (width,) for c in coefs):
        raise ValueError("fold models disagree on coefficient width")
    stack = np.vstack(coefs)
    mean_abs = float(np.mean(np.abs(stack)))
    variances = np.var(stack, axis=0)
    variances[np.all(stack == stack[0], axis=0)] = 0.0  # constant dims: exactly 0
    mean_var = float(np.mean(variances))
    return mean_abs, mean_var


def prediction_variance_by_drug(scores, drug_ids, cutoff: float = 0.5):
    """Score spread across cells, per drug that ever scores above the cutoff.

    Returns (mean_variance, per_drug) where per_drug maps each qualifying
    drug to the population variance of its scores. A model whose score
    ignores the cell line yields variance 0 for every drug.
    """
    scores = np.asarray(scores, dtype=np.float64)
    drug_ids = list(drug_ids)
    if scores.ndim != 1 or len(drug_ids) != scores.shape[0]:
        raise ValueError("scores and drug_ids must align one-to-one")
    groups: dict = {}
    for drug, s in zip(drug_ids, scores):
        groups.setdefault(drug, []).append(float(s))
    per_drug = {}
    for drug in sorted(groups):
        values = np.asarray(groups[drug])
        if values.max() > cutoff:
            constant = bool(np.all(values == values[0]))
            per_drug[drug] = 0.0 if constant else float(np.var(values))
    mean_var = float(np.mean(list(per_drug.values()))) if per_drug else 0.0
    return mean_var, per_drug
