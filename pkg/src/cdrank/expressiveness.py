"""Embedding-quality diagnostics.

Measures how tightly items of a shared group cluster in an embedding,
relative to everything else: pairwise cosine similarity within and across
groups, the intra/inter separability ratio, and an exact t-SNE projection
for visual inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_rng, check_matrix
from .errors import NumericalError
from .evaluation import TTestResult, ttest_bonferroni

INTER_FLOOR = 1e-12

TSNE_EXAGGERATION = 12.0
TSNE_EXAGGERATION_ITERS = 250
TSNE_MOMENTUM_EARLY = 0.5
TSNE_MOMENTUM_LATE = 0.8
TSNE_LEARNING_RATE = 200.0

_AFFINITY_FLOOR = 1e-12
_BISECT_ITERS = 50
_BISECT_TOL = 1e-5


def cosine(u, v) -> float:
    """Cosine similarity of two vectors; zero vectors are undefined."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError("vectors differ in length")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(u @ v / (nu * nv))


@dataclass(frozen=True)
class EmbeddingSet:
    """Vectors with ids and group labels, one row per item."""

    ids: tuple
    groups: tuple
    matrix: np.ndarray

    def __post_init__(self):
        matrix = check_matrix(self.matrix, "matrix")
        object.__setattr__(self, "matrix", matrix)
        if len(self.ids) != matrix.shape[0] or len(self.groups) != matrix.shape[0]:
            raise ValueError("ids, groups and matrix rows must align")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("item ids must be unique")

    @classmethod
    def from_items(cls, items) -> "EmbeddingSet":
        """Build from an iterable of (item_id, vector, group_label)."""
        rows = list(items)
        if not rows:
            raise ValueError("no items given")
        return cls(
            ids=tuple(r[0] for r in rows),
            groups=tuple(r[2] for r in rows),
            matrix=np.vstack([np.asarray(r[1], dtype=np.float64) for r in rows]),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def group_members(self) -> dict:
        members: dict = {}
        for idx, group in enumerate(self.groups):
            members.setdefault(group, []).append(idx)
        return members

    def filter_min_size(self, min_size: int) -> "EmbeddingSet":
        """Keep only items whose group has at least min_size members."""
        members = self.group_members()
        keep = [i for i, g in enumerate(self.groups) if len(members[g]) >= min_size]
        if not keep:
            raise ValueError(f"no group reaches min_size={min_size}")
        return EmbeddingSet(
            ids=tuple(self.ids[i] for i in keep),
            groups=tuple(self.groups[i] for i in keep),
            matrix=self.matrix[keep],
        )


def _unit_rows(es: EmbeddingSet) -> np.ndarray:
    norms = np.linalg.norm(es.matrix, axis=1)
    for idx in np.nonzero(norms == 0.0)[0]:
        raise ValueError(f"item {es.ids[idx]!r} is a zero vector; cosine undefined")
    return es.matrix / norms[:, None]


@dataclass(frozen=True)
class GroupSimilarity:
    group: str
    n_members: int
    intra: float | None  # None for singleton groups
    inter: float

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "n_members": self.n_members,
            "intra": self.intra,
            "inter": self.inter,
        }


@dataclass(frozen=True)
class SimilarityReport:
    per_group: tuple
    mean_intra: float
    mean_inter: float
    singleton_groups: tuple

    def to_dict(self) -> dict:
        return {
            "per_group": [g.to_dict() for g in self.per_group],
            "mean_intra": self.mean_intra,
            "mean_inter": self.mean_inter,
            "singleton_groups": list(self.singleton_groups),
        }


def group_similarities(es: EmbeddingSet) -> SimilarityReport:
    """Mean pairwise cosine within each group and against everyone outside it.

    Intra averages unordered member pairs, so singleton groups have no
    intra value and are flagged instead of contributing. Needs at least two
    groups, otherwise there is no outside to compare against.
    """
    members = es.group_members()
    if len(members) < 2:
        raise ValueError("need at least 2 groups for inter-group similarity")
    unit = _unit_rows(es)
    sims = unit @ unit.T
    per_group = []
    singletons = []
    for group in sorted(members, key=str):
        idx = np.asarray(members[group])
        outside = np.asarray([i for i in range(len(es)) if es.groups[i] != group])
        inter = float(np.mean(sims[np.ix_(idx, outside)]))
        if len(idx) < 2:
            singletons.append(group)
            intra = None
        else:
            block = sims[np.ix_(idx, idx)]
            pairs = block[np.triu_indices(len(idx), k=1)]
            intra = float(np.mean(pairs))
        per_group.append(
            GroupSimilarity(group=group, n_members=len(idx), intra=intra, inter=inter)
        )
    with_intra = [g.intra for g in per_group if g.intra is not None]
    if not with_intra:
        raise ValueError("every group is a singleton; intra similarity undefined")
    return SimilarityReport(
        per_group=tuple(per_group),
        mean_intra=float(np.mean(with_intra)),
        mean_inter=float(np.mean([g.inter for g in per_group])),
        singleton_groups=tuple(singletons),
    )


@dataclass(frozen=True)
class GroupSeparability:
    group: str
    ratio: float

    def to_dict(self) -> dict:
        return {"group": self.group, "ratio": self.ratio}


@dataclass(frozen=True)
class SeparabilityReport:
    per_group: tuple
    mean_ratio: float
    skipped: tuple  # (group, reason) pairs excluded from the mean

    def ratios(self) -> list:
        return [g.ratio for g in self.per_group]

    def to_dict(self) -> dict:
        return {
            "per_group": [g.to_dict() for g in self.per_group],
            "mean_ratio": self.mean_ratio,
            "skipped": [list(pair) for pair in self.skipped],
        }


def separability(es: EmbeddingSet) -> SeparabilityReport:
    """Intra/inter cosine ratio per group; higher means tighter groups.

    Groups whose inter similarity sits within the division guard, and
    singletons with no intra value, are skipped with a reason rather than
    poisoning the mean.
    """
    report = group_similarities(es)
    per_group = []
    skipped = []
    for g in report.per_group:
        if g.intra is None:
            skipped.append((g.group, "singleton"))
        elif abs(g.inter) < INTER_FLOOR:
            skipped.append((g.group, "inter similarity below the division guard"))
        else:
            per_group.append(GroupSeparability(group=g.group, ratio=g.intra / g.inter))
    if not per_group:
        raise ValueError("no group has a defined separability ratio")
    return SeparabilityReport(
        per_group=tuple(per_group),
        mean_ratio=float(np.mean([g.ratio for g in per_group])),
        skipped=tuple(skipped),
    )


def compare_separability(
    report_a: SeparabilityReport, report_b: SeparabilityReport, n_tests: int = 1
) -> tuple[TTestResult, float, float]:
    """Significance of a separability gap between two representations.

    Runs the pooled t-test over the two per-group ratio lists and returns
    it with both mean ratios.
    """
    result = ttest_bonferroni(report_a.ratios(), report_b.ratios(), n_tests)
    return result, report_a.mean_ratio, report_b.mean_ratio


# -------------------------------------------------------------------- t-sne


def conditional_affinities(X, perplexity: float) -> np.ndarray:
    """Row-stochastic Gaussian affinities matched to a perplexity target.

    Each row's bandwidth comes from bisecting the precision until the
    natural-log entropy of the row hits log(perplexity) within tolerance.
    Diagonal is zero; every row sums to 1.
    """
    X = check_matrix(X, "X")
    n = X.shape[0]
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    target = float(np.log(perplexity))
    P = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        probs = None
        for _ in range(_BISECT_ITERS):
            logits = -beta * (row - row.min())
            w = np.exp(logits)
            total = max(float(w.sum()), _AFFINITY_FLOOR)
            probs = w / total
            positive = probs[probs > 0.0]
            entropy = float(-np.sum(positive * np.log(positive)))
            gap = entropy - target
            if abs(gap) < _BISECT_TOL:
                break
            if gap > 0.0:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (lo + beta) / 2.0
        P[i, np.arange(n) != i] = probs
    return P


@dataclass(frozen=True)
class TsneResult:
    coords: np.ndarray  # (n, 2)
    kl: float
    kl_initial: float
    perplexity: float
    n_iters: int


def _kl_divergence(P, Q) -> float:
    mask = P > 0.0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def _student_kernel(Y) -> tuple[np.ndarray, np.ndarray]:
    """(unnormalized inverse-distance kernel, floored Q matrix) for points Y."""
    ysq = np.sum(Y * Y, axis=1)
    inv = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2.0 * (Y @ Y.T), 0.0))
    np.fill_diagonal(inv, 0.0)
    Q = np.maximum(inv / inv.sum(), _AFFINITY_FLOOR)
    np.fill_diagonal(Q, 0.0)
    return inv, Q


def tsne_embed(
    X,
    perplexity: float = 30.0,
    n_iters: int = 1000,
    seed: int = 0,
    learning_rate: float = TSNE_LEARNING_RATE,
) -> TsneResult:
    """Exact t-SNE to 2-D with the standard schedule.

    Early exaggeration multiplies the affinities by 12 for the first 250
    iterations; momentum steps from 0.5 to 0.8 at the same point. The
    divergence is tracked against the unexaggerated affinities, and its
    start and end values are both returned so descent is checkable.
    """
    X = check_matrix(X, "X")
    n = X.shape[0]
    if n < 4:
        raise ValueError("need at least 4 points")
    if perplexity <= 0 or perplexity > (n - 1) / 3:
        raise ValueError(f"perplexity must be in (0, {(n - 1) / 3:g}] for {n} points")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")

    cond = conditional_affinities(X, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, _AFFINITY_FLOOR)
    np.fill_diagonal(P, 0.0)

    rng = as_rng(seed)
    Y = rng.normal(size=(n, 2)) * 1e-4
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_initial = None
    for it in range(n_iters):
        exaggerating = it < TSNE_EXAGGERATION_ITERS
        momentum = TSNE_MOMENTUM_EARLY if exaggerating else TSNE_MOMENTUM_LATE
        P_eff = P * TSNE_EXAGGERATION if exaggerating else P

        inv, Q = _student_kernel(Y)
        kl = _kl_divergence(P, Q)
        if not np.isfinite(kl):
            raise NumericalError(f"divergence became non-finite at iteration {it}")
        if kl_initial is None:
            kl_initial = kl

        weight = (P_eff - inv / inv.sum()) * inv
        grad = 4.0 * ((np.diag(weight.sum(axis=1)) - weight) @ Y)
        # adaptive per-coordinate gains from the reference schedule: grow
        # while the gradient fights the velocity, shrink while they agree
        agree = np.sign(grad) == np.sign(velocity)
        gains = np.where(agree, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)

    _, Q = _student_kernel(Y)
    return TsneResult(
        coords=Y, kl=_kl_divergence(P, Q), kl_initial=float(kl_initial),
        perplexity=float(perplexity), n_iters=n_iters,
    )


class ExactTSNE(BaseEstimator):
    """Estimator wrapper around the exact projection."""

    def __init__(self, perplexity=30.0, n_iters=1000, seed=0, learning_rate=TSNE_LEARNING_RATE):
        self.perplexity = perplexity
        self.n_iters = n_iters
        self.seed = seed
        self.learning_rate = learning_rate

    def fit_transform(self, X, y=None):
        result = tsne_embed(
            X, self.perplexity, self.n_iters, self.seed, self.learning_rate
        )
        self.kl_ = result.kl
        self.kl_initial_ = result.kl_initial
        return result.coords


# --------------------------------------------------------------------- svg

_PALETTE = (
    "#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#3ca951",
    "#ff8ab7", "#a463f2", "#97bbf5", "#9c6b4e", "#9498a0",
)
_SHAPES = ("circle", "square", "triangle", "diamond")


def _marker(shape: str, x: float, y: float, color: str, title: str = "") -> str:
    r = 4.0
    label = f"<title>{title}</title>" if title else ""
    if shape == "circle":
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}">{label}</circle>'
    if shape == "square":
        return (
            f'<rect x="{x - r:.2f}" y="{y - r:.2f}" width="{2 * r}" height="{2 * r}" '
            f'fill="{color}">{label}</rect>'
        )
    if shape == "triangle":
        points = f"{x:.2f},{y - r:.2f} {x - r:.2f},{y + r:.2f} {x + r:.2f},{y + r:.2f}"
    else:
        points = (
            f"{x:.2f},{y - r:.2f} {x + r:.2f},{y:.2f} "
            f"{x:.2f},{y + r:.2f} {x - r:.2f},{y:.2f}"
        )
    return f'<polygon points="{points}" fill="{color}">{label}</polygon>'


def scatter_svg(ids, groups, coords, title: str = "") -> str:
    """Self-contained SVG scatter, one marker style per group, with legend.

    Output is a deterministic function of the inputs, so repeated renders
    are byte-identical.
    """
    coords = check_matrix(np.asarray(coords, dtype=np.float64), "coords", n_cols=2)
    ids = list(ids)
    groups = [str(g) for g in groups]
    if len(ids) != coords.shape[0] or len(groups) != coords.shape[0]:
        raise ValueError("ids, groups and coords must align")
    width, height, pad = 640, 480, 40
    span_x = float(coords[:, 0].max() - coords[:, 0].min()) or 1.0
    span_y = float(coords[:, 1].max() - coords[:, 1].min()) or 1.0
    x0, y0 = float(coords[:, 0].min()), float(coords[:, 1].min())
    unique_groups = sorted(set(groups))
    style = {
        g: (_PALETTE[i % len(_PALETTE)], _SHAPES[i % len(_SHAPES)])
        for i, g in enumerate(unique_groups)
    }
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white" />',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>'
        )
    for item_id, group, (cx, cy) in zip(ids, groups, coords):
        px = pad + (cx - x0) / span_x * (width - 2 * pad - 120)
        py = height - pad - (cy - y0) / span_y * (height - 2 * pad)
        color, shape = style[group]
        parts.append(_marker(shape, px, py, color, title=str(item_id)))
    legend_x = width - 110
    for i, group in enumerate(unique_groups):
        color, shape = style[group]
        ly = pad + 18 * i
        parts.append(_marker(shape, legend_x, ly, color))
        parts.append(
            f'<text x="{legend_x + 10}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="11">{group}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
