"""Siamese pretraining of item encoders from group structure.

Two items form a training pair labeled 1 when they come from different
groups and 0 when they come from the same group. One shared encoder embeds
both items; the predicted probability that a pair is a different-group pair
is sigmoid(||Enc(left) - Enc(right)||), trained under binary cross entropy.

Since the Euclidean distance is non-negative, the predicted probability
never falls below 0.5; training therefore works by pushing different-group
pairs apart while collapsing same-group distances toward zero.

Drugs are grouped by their gene-target signatures: with the "overlap" rule
two drugs share a group when their target sets intersect, with "exact" the
sets must match. Cell lines use their cancer type, which is plain equality
under either rule.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_rng, check_is_fitted, check_in, check_matrix
from .errors import NumericalError
from .neural import (
    EarlyStopper,
    MlpModel,
    TrainConfig,
    TrainReport,
    _forward_cache,
    backward_from_embedding_grad,
    decayed_learning_rate,
    forward,
    init_model,
    sigmoid,
)

GROUP_RULES = ("exact", "overlap")

_EPS = 1e-12


@dataclass(frozen=True)
class ContrastivePair:
    left: str
    right: str
    label: int  # 1 = different groups, 0 = same group


class GroupAssignment:
    """Maps item ids to group labels and decides same-group membership.

    Labels may be atomic (strings) or frozensets. Atomic labels always
    compare by equality; set labels compare by intersection under the
    "overlap" rule and by equality under "exact".
    """

    def __init__(self, labels: dict, rule: str = "exact"):
        check_in(rule, GROUP_RULES, "rule")
        if not labels:
            raise ValueError("group assignment is empty")
        self.labels = dict(labels)
        self.rule = rule
        for item, label in self.labels.items():
            if isinstance(label, frozenset):
                if not label:
                    raise ValueError(f"item {item!r} has an empty set label")
            elif not isinstance(label, str) or not label:
                raise ValueError(f"item {item!r} has an invalid label {label!r}")

    def items(self) -> list:
        return sorted(self.labels)

    def label_of(self, item):
        try:
            return self.labels[item]
        except KeyError:
            raise ValueError(f"item {item!r} has no group label") from None

    def same_group(self, a, b) -> bool:
        la, lb = self.label_of(a), self.label_of(b)
        if isinstance(la, frozenset) and isinstance(lb, frozenset):
            if self.rule == "overlap":
                return bool(la & lb)
            return la == lb
        return la == lb


def assign_drug_groups(drugs, rule: str = "overlap") -> GroupAssignment:
    """Group drugs by gene-target signature. All drugs need targets."""
    labels = {}
    for drug in drugs:
        if not drug.gene_targets:
            raise ValueError(
                f"drug {drug.drug_id!r} has no gene targets; "
                "restrict the pool before grouping"
            )
        labels[drug.drug_id] = frozenset(drug.gene_targets)
    return GroupAssignment(labels, rule)


def assign_cell_groups(cells) -> GroupAssignment:
    """Group cell lines by cancer type."""
    labels = {cell.cell_id: cell.cancer_type for cell in cells}
    return GroupAssignment(labels, "exact")


class PairPool:
    """All unordered pairs of an assignment, split by label."""

    def __init__(self, assignment: GroupAssignment):
        ids = assignment.items()
        n = len(ids)
        if n < 2:
            raise ValueError("need at least 2 items to form pairs")
        same_mask = _same_group_matrix(assignment, ids)
        iu, ju = np.triu_indices(n, k=1)
        same_sel = same_mask[iu, ju]
        self.ids = ids
        self.same = np.stack([iu[same_sel], ju[same_sel]], axis=1)
        self.diff = np.stack([iu[~same_sel], ju[~same_sel]], axis=1)
        if len(self.same) == 0:
            raise ValueError("no same-group pair exists under this assignment")
        if len(self.diff) == 0:
            raise ValueError("no different-group pair exists under this assignment")

    def draw(self, n_pairs: int, rng, forbidden: set | None = None) -> list[ContrastivePair]:
        """Balanced draw without replacement within this call."""
        if n_pairs < 2:
            raise ValueError("n_pairs must be >= 2")
        n_same = n_pairs // 2 + n_pairs % 2
        n_diff = n_pairs // 2
        same_pool = self._available(self.same, forbidden)
        diff_pool = self._available(self.diff, forbidden)
        if n_same > len(same_pool) or n_diff > len(diff_pool):
            raise ValueError(
                f"cannot draw {n_same} same / {n_diff} different pairs from "
                f"pools of {len(same_pool)} / {len(diff_pool)}"
            )
        picks = []
        for pool, count, label in ((same_pool, n_same, 0), (diff_pool, n_diff, 1)):
            chosen = rng.choice(len(pool), size=count, replace=False)
            for k in np.sort(chosen):
                i, j = pool[k]
                picks.append(ContrastivePair(self.ids[i], self.ids[j], label))
        order = rng.permutation(len(picks))
        return [picks[k] for k in order]

    def _available(self, pool, forbidden):
        if not forbidden:
            return pool
        keep = [k for k in range(len(pool)) if (pool[k][0], pool[k][1]) not in forbidden]
        return pool[keep]

    def balanced_capacity(self, forbidden: set | None = None) -> int:
        same = len(self._available(self.same, forbidden))
        diff = len(self._available(self.diff, forbidden))
        return 2 * min(same, diff)


def _same_group_matrix(assignment: GroupAssignment, ids) -> np.ndarray:
    labels = [assignment.label_of(i) for i in ids]
    if all(isinstance(l, frozenset) for l in labels):
        vocab = sorted(set().union(*labels))
        index = {t: k for k, t in enumerate(vocab)}
        member = np.zeros((len(ids), len(vocab)), dtype=bool)
        for row, label in enumerate(labels):
            for t in label:
                member[row, index[t]] = True
        if assignment.rule == "overlap":
            mask = member @ member.T
        else:
            codes = {}
            arr = np.array([codes.setdefault(l, len(codes)) for l in labels])
            mask = arr[:, None] == arr[None, :]
    else:
        codes = {}
        arr = np.array([codes.setdefault(l, len(codes)) for l in labels])
        mask = arr[:, None] == arr[None, :]
    np.fill_diagonal(mask, False)
    return mask


def sample_pairs(assignment: GroupAssignment, n_pairs: int, seed: int = 0) -> list[ContrastivePair]:
    """Draw a balanced batch of distinct pairs (50/50 labels, odd goes to same)."""
    return PairPool(assignment).draw(n_pairs, as_rng(seed))


def siamese_probability(encoder: MlpModel, left, right) -> np.ndarray:
    """P(pair is different-group) = sigmoid of embedding distance, rowwise."""
    left = check_matrix(left, "left", n_cols=encoder.layer_dims[0])
    right = check_matrix(right, "right", n_cols=encoder.layer_dims[0])
    if left.shape[0] != right.shape[0]:
        raise ValueError("left and right batches differ in length")
    el = forward(encoder, left, "eval")[-1]
    er = forward(encoder, right, "eval")[-1]
    dist = np.sqrt(np.sum((el - er) ** 2, axis=1))
    return sigmoid(dist)


def embed(encoder: MlpModel, items) -> np.ndarray:
    """Eval-mode embeddings for a batch of item vectors."""
    return forward(encoder, items, "eval")[-1]


@dataclass
class EncoderSpec:
    """Architecture and pair-sampling settings for siamese pretraining."""

    hidden_dims: tuple = (16, 16)
    activation: str = "relu"
    dropout_rate: float = 0.1
    pairs_per_epoch: int | None = None  # None: 4x the number of items
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.hidden_dims:
            raise ValueError("hidden_dims must not be empty")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def _pair_batches(pairs, batch_size):
    for start in range(0, len(pairs), batch_size):
        yield pairs[start : start + batch_size]


def _pair_loss(p, labels) -> float:
    p = np.clip(p, _EPS, 1.0 - _EPS)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))))


def pair_gradients(encoder: MlpModel, left, right, labels, mode="eval", rng=None):
    """Loss and parameter gradients for one batch of contrast pairs.

    The loss sits on sigmoid(distance), so the chain rule routes
    (p - y)/B through the unit vector between the two embeddings; a
    coincident pair contributes zero gradient. Branch contributions are
    summed because the encoder weights are shared.
    """
    labels = np.asarray(labels, dtype=np.float64)
    acts_l, masks_l = _forward_cache(encoder, left, mode, rng)
    acts_r, masks_r = _forward_cache(encoder, right, mode, rng)
    delta = acts_l[-1] - acts_r[-1]
    dist = np.sqrt(np.sum(delta**2, axis=1))
    loss = _pair_loss(sigmoid(dist), labels)
    ddist = (sigmoid(dist) - labels) / len(labels)
    safe = np.where(dist > _EPS, dist, 1.0)
    direction = np.where(dist[:, None] > _EPS, delta / safe[:, None], 0.0)
    de = ddist[:, None] * direction
    dw_l, db_l = backward_from_embedding_grad(encoder, acts_l, masks_l, de)
    dw_r, db_r = backward_from_embedding_grad(encoder, acts_r, masks_r, -de)
    dw = [a + b for a, b in zip(dw_l, dw_r)]
    db = [a + b for a, b in zip(db_l, db_r)]
    return loss, dw, db


def pretrain_encoder(
    items: dict,
    assignment: GroupAssignment,
    spec: EncoderSpec,
    config: TrainConfig,
) -> tuple[MlpModel, TrainReport]:
    """Train a shared-weight encoder on group-contrast pairs.

    `items` maps item id to feature vector. A fixed validation pair set is
    drawn first and held out; training pairs are redrawn every epoch from
    the remaining pool, balanced 50/50. Returns the encoder from the epoch
    with the best validation loss, plus the training report.
    """
    ids = assignment.items()
    missing = [i for i in ids if i not in items]
    if missing:
        raise ValueError(f"item {missing[0]!r} has a group but no feature vector")
    X = check_matrix(np.vstack([np.asarray(items[i], dtype=np.float64) for i in ids]), "items")
    row_of = {item: k for k, item in enumerate(ids)}

    pool = PairPool(assignment)
    requested = spec.pairs_per_epoch or 4 * len(ids)
    n_val = max(2, int(requested * spec.val_fraction + 0.5))
    rng = as_rng(config.seed)
    val_pairs = pool.draw(min(n_val, pool.balanced_capacity()), rng)
    held_out = {tuple(sorted((row_of[p.left], row_of[p.right]))) for p in val_pairs}
    per_epoch = min(requested, pool.balanced_capacity(held_out))
    if per_epoch < 2:
        raise ValueError("not enough distinct pairs left for training")

    encoder = init_model(
        [X.shape[1], *spec.hidden_dims],
        spec.activation,
        spec.activation,
        spec.dropout_rate,
        config.seed,
    )
    val_left = X[[row_of[p.left] for p in val_pairs]]
    val_right = X[[row_of[p.right] for p in val_pairs]]
    val_labels = np.array([p.label for p in val_pairs], dtype=np.float64)

    stopper = EarlyStopper(config.patience, config.min_delta)
    report = TrainReport()
    best_params = (copy.deepcopy(encoder.weights), copy.deepcopy(encoder.biases))
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_pairs = pool.draw(per_epoch, rng, held_out)
        batch_losses = []
        for batch in _pair_batches(epoch_pairs, config.batch_size):
            left_idx = [row_of[p.left] for p in batch]
            right_idx = [row_of[p.right] for p in batch]
            labels = [p.label for p in batch]
            loss, dw, db = pair_gradients(
                encoder, X[left_idx], X[right_idx], labels, "train", rng
            )
            batch_losses.append(loss)
            lr = decayed_learning_rate(config, step)
            for i in range(encoder.n_layers):
                encoder.weights[i] -= lr * dw[i]
                encoder.biases[i] -= lr * db[i]
            step += 1
        val_p = siamese_probability(encoder, val_left, val_right)
        val_loss = _pair_loss(val_p, val_labels)
        train_loss = float(np.mean(batch_losses))
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise NumericalError(f"contrastive loss diverged at epoch {epoch}")
        report.train_curve.append(train_loss)
        report.val_curve.append(val_loss)
        report.epochs_run = epoch
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_params = (copy.deepcopy(encoder.weights), copy.deepcopy(encoder.biases))
        if stop:
            report.stopped_early = True
            break
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = float(stopper.best)
    best = encoder.copy()
    best.weights, best.biases = best_params
    return best, report


class SiameseEncoder(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit on (vectors, group labels), transform to embeddings.

    `y` passed to fit may contain strings or frozensets; set labels combined
    with rule="overlap" give intersection-based grouping.
    """

    def __init__(
        self,
        hidden_dims=(16, 16),
        activation="relu",
        dropout_rate=0.1,
        rule="exact",
        pairs_per_epoch=None,
        val_fraction=0.1,
        learning_rate=0.01,
        decay_rate=0.99,
        decay_steps=1024,
        batch_size=512,
        max_epochs=1000,
        patience=10,
        min_delta=1e-4,
        seed=0,
    ):
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.rule = rule
        self.pairs_per_epoch = pairs_per_epoch
        self.val_fraction = val_fraction
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.seed = seed

    def fit(self, X, y):
        X = check_matrix(X, "X")
        labels = list(y)
        if len(labels) != X.shape[0]:
            raise ValueError("X and y differ in length")
        items = {str(i): X[i] for i in range(X.shape[0])}
        mapping = {
            str(i): l if isinstance(l, frozenset) else str(l)
            for i, l in enumerate(labels)
        }
        assignment = GroupAssignment(mapping, self.rule)
        spec = EncoderSpec(
            hidden_dims=tuple(self.hidden_dims),
            activation=self.activation,
            dropout_rate=self.dropout_rate,
            pairs_per_epoch=self.pairs_per_epoch,
            val_fraction=self.val_fraction,
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
        self.model_, self.report_ = pretrain_encoder(items, assignment, spec, config)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed(self.model_, X)
