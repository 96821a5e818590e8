"""Ranking metrics, significance tests, and approved-drug priority reports.

Everything here is pure: rankings in, numbers out. Drug rankings order by
score descending with drug id as the tie-break, so every downstream metric
is reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

DEFAULT_RHO_GATE = 0.35
DEFAULT_P_GATE = 0.1


@dataclass(frozen=True)
class Ranking:
    """Drugs for one cell line, ordered best-first."""

    cell_id: str
    entries: tuple  # ((drug_id, score), ...) descending by score, then id

    def __len__(self) -> int:
        return len(self.entries)

    def drugs(self) -> list:
        return [drug for drug, _ in self.entries]

    def top(self, k: int) -> set:
        return {drug for drug, _ in self.entries[:k]}

    def rank_of(self, drug_id: str) -> int:
        for position, (drug, _) in enumerate(self.entries, start=1):
            if drug == drug_id:
                return position
        raise ValueError(f"drug {drug_id!r} is not ranked for cell {self.cell_id!r}")

    def restrict(self, keep) -> "Ranking":
        """Same order, only the given drugs."""
        keep = set(keep)
        return Ranking(
            cell_id=self.cell_id,
            entries=tuple((d, s) for d, s in self.entries if d in keep),
        )


def rank_drugs(scores: dict, cell_id: str = "") -> Ranking:
    """Order a drug -> score map descending, ids ascending on ties."""
    if not scores:
        raise ValueError("cannot rank an empty score map")
    for drug, score in scores.items():
        if not np.isfinite(score):
            raise ValueError(f"score for drug {drug!r} is not finite")
    ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return Ranking(cell_id=cell_id, entries=tuple((d, float(s)) for d, s in ordered))


def precision_cell_at_k(ranking: Ranking, effective: set, k: int) -> float:
    """Fraction of the top k that is truly effective for this cell line."""
    if not 1 <= k <= len(ranking):
        raise ValueError(f"k must be in [1, {len(ranking)}], got {k}")
    stray = set(effective) - set(ranking.drugs())
    if stray:
        raise ValueError(f"effective drugs not in the ranking: {sorted(stray)}")
    return len(ranking.top(k) & set(effective)) / k


def precision_cancer_at_k(per_cell: dict, cancer_of: dict) -> tuple[dict, float]:
    """Mean per-cell precision within each cancer, plus the unweighted overall.

    The overall value averages the per-cancer means, not the cells, so small
    cancers weigh the same as large ones.
    """
    if not per_cell:
        raise ValueError("no per-cell precisions given")
    groups: dict = {}
    for cell, value in per_cell.items():
        if cell not in cancer_of:
            raise ValueError(f"cell {cell!r} has no cancer assignment")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"precision for cell {cell!r} is outside [0, 1]")
        groups.setdefault(cancer_of[cell], []).append(value)
    per_cancer = {cancer: float(np.mean(vals)) for cancer, vals in sorted(groups.items())}
    overall = float(np.mean(list(per_cancer.values())))
    return per_cancer, overall


# -------------------------------------------------------------- significance


def two_tailed_p(t_stat: float, df: int) -> float:
    """Two-tailed tail mass of Student's t via the regularized incomplete beta."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if not np.isfinite(t_stat):
        return 0.0
    x = df / (df + t_stat * t_stat)
    return float(betainc(df / 2.0, 0.5, x))


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    df: int
    p: float
    p_adjusted: float
    n_tests: int

    def to_dict(self) -> dict:
        return {
            "t_stat": self.t_stat,
            "df": self.df,
            "p": self.p,
            "p_adjusted": self.p_adjusted,
            "n_tests": self.n_tests,
        }


def ttest_bonferroni(sample_a, sample_b, n_tests: int = 1) -> TTestResult:
    """Two-sample pooled-variance t-test with Bonferroni adjustment.

    Zero pooled variance degenerates cleanly: equal means give t=0, p=1;
    different means give an infinite statistic and p=0.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
        raise ValueError("both samples must be 1-D with at least 2 values")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("samples must be finite")
    if n_tests < 1:
        raise ValueError("n_tests must be >= 1")
    na, nb = len(a), len(b)
    df = na + nb - 2
    mean_gap = float(a.mean() - b.mean())
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    if pooled == 0.0:
        if mean_gap == 0.0:
            t_stat, p = 0.0, 1.0
        else:
            t_stat, p = float(np.sign(mean_gap)) * float("inf"), 0.0
    else:
        t_stat = mean_gap / float(np.sqrt(pooled * (1.0 / na + 1.0 / nb)))
        p = two_tailed_p(t_stat, df)
    return TTestResult(
        t_stat=t_stat,
        df=df,
        p=p,
        p_adjusted=min(1.0, n_tests * p),
        n_tests=n_tests,
    )


def significance_stars(p_adjusted: float) -> str:
    """Star notation for corrected p-values: thresholds 0.1 / 0.05 / 0.01."""
    if p_adjusted <= 0.01:
        return "***"
    if p_adjusted <= 0.05:
        return "**"
    if p_adjusted <= 0.1:
        return "*"
    return ""


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average position."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> tuple[float, float]:
    """Rank correlation with a t-approximation p-value.

    Ties get midranks; a perfectly monotone relation returns p = 0. Either
    input having zero rank variance makes the coefficient undefined.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("x and y must be 1-D and the same length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("x and y must be finite")
    rx, ry = _midranks(x), _midranks(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise ValueError("zero rank variance makes the correlation undefined")
    # identical (or exactly mirrored) rank patterns are a perfect monotone
    # relation; decide that exactly instead of through rounded arithmetic
    if np.array_equal(rx, ry):
        return 1.0, 0.0
    if np.array_equal(rx + ry, np.full(n, n + 1.0)):
        return -1.0, 0.0
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sx, sy = float(np.sqrt(np.sum(dx * dx))), float(np.sqrt(np.sum(dy * dy)))
    rho = float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))
    if abs(rho) == 1.0:
        return rho, 0.0
    t_stat = rho * float(np.sqrt((n - 2) / (1.0 - rho * rho)))
    return rho, two_tailed_p(t_stat, n - 2)


# ------------------------------------------------------------- fda priority


@dataclass(frozen=True)
class CellPriority:
    cell_id: str
    cancer_type: str
    approved_ranks: tuple  # ascending 1-based ranks of approved drugs
    mean_rank: float
    best_rank: int
    top_drug: str

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "cancer_type": self.cancer_type,
            "approved_ranks": list(self.approved_ranks),
            "mean_rank": self.mean_rank,
            "best_rank": self.best_rank,
            "top_drug": self.top_drug,
        }


@dataclass(frozen=True)
class CancerPriority:
    cancer_type: str
    n_cells: int
    mean_rank: float
    mean_best_rank: float
    top_drug: str  # most frequent per-cell top drug, ties to the smaller id
    top_drug_share: float  # percent of the cancer's cells picking it
    top_drug_rank_std: float  # population std of that drug's rank across cells

    def to_dict(self) -> dict:
        return {
            "cancer_type": self.cancer_type,
            "n_cells": self.n_cells,
            "mean_rank": self.mean_rank,
            "mean_best_rank": self.mean_best_rank,
            "top_drug": self.top_drug,
            "top_drug_share": self.top_drug_share,
            "top_drug_rank_std": self.top_drug_rank_std,
        }


@dataclass(frozen=True)
class FdaPriorityReport:
    per_cell: tuple
    per_cancer: tuple
    excluded_cells: tuple  # cells whose cancer has no approved drug on offer
    mean_top_rank_std: float

    def to_dict(self) -> dict:
        return {
            "per_cell": [c.to_dict() for c in self.per_cell],
            "per_cancer": [c.to_dict() for c in self.per_cancer],
            "excluded_cells": list(self.excluded_cells),
            "mean_top_rank_std": self.mean_top_rank_std,
        }


def fda_priority_analysis(
    rankings: dict, indications: dict, cancer_of: dict
) -> FdaPriorityReport:
    """How highly approved drugs rank, per cell line and per cancer.

    Candidates are restricted to drugs carrying at least one indication.
    For each cell line the drugs approved for its cancer are located in the
    restricted ranking; cells whose cancer matches no candidate are listed
    as excluded rather than failing the whole analysis.
    """
    with_indication = {d for d, ind in indications.items() if ind}
    if not with_indication:
        raise ValueError("no drug carries an indication")
    per_cell = []
    excluded = []
    for cell_id in sorted(rankings):
        ranking = rankings[cell_id]
        if cell_id not in cancer_of:
            raise ValueError(f"cell {cell_id!r} has no cancer assignment")
        cancer = cancer_of[cell_id]
        restricted = ranking.restrict(with_indication)
        if len(restricted) == 0:
            raise ValueError(f"cell {cell_id!r} ranks no drug with an indication")
        approved = [d for d in restricted.drugs() if cancer in indications[d]]
        if not approved:
            excluded.append(cell_id)
            continue
        ranks = sorted(restricted.rank_of(d) for d in approved)
        best = ranks[0]
        top_drug = min(d for d in approved if restricted.rank_of(d) == best)
        per_cell.append(
            CellPriority(
                cell_id=cell_id,
                cancer_type=cancer,
                approved_ranks=tuple(ranks),
                mean_rank=float(np.mean(ranks)),
                best_rank=best,
                top_drug=top_drug,
            )
        )

    by_cancer: dict = {}
    for cp in per_cell:
        by_cancer.setdefault(cp.cancer_type, []).append(cp)
    per_cancer = []
    for cancer in sorted(by_cancer):
        cells = by_cancer[cancer]
        counts: dict = {}
        for cp in cells:
            counts[cp.top_drug] = counts.get(cp.top_drug, 0) + 1
        modal = min(counts, key=lambda d: (-counts[d], d))
        modal_ranks = [
            rankings[cp.cell_id].restrict(with_indication).rank_of(modal) for cp in cells
        ]
        per_cancer.append(
            CancerPriority(
                cancer_type=cancer,
                n_cells=len(cells),
                mean_rank=float(np.mean([cp.mean_rank for cp in cells])),
                mean_best_rank=float(np.mean([cp.best_rank for cp in cells])),
                top_drug=modal,
                top_drug_share=100.0 * counts[modal] / len(cells),
                top_drug_rank_std=float(np.std(modal_ranks)),
            )
        )
    mean_std = float(np.mean([c.top_drug_rank_std for c in per_cancer])) if per_cancer else 0.0
    return FdaPriorityReport(
        per_cell=tuple(per_cell),
        per_cancer=tuple(per_cancer),
        excluded_cells=tuple(excluded),
        mean_top_rank_std=mean_std,
    )


# --------------------------------------------------------------- gene screen


@dataclass(frozen=True)
class GeneCorrelation:
    gene: str
    rho: float
    p: float

    def to_dict(self) -> dict:
        return {"gene": self.gene, "rho": self.rho, "p": self.p}


def priority_correlation_screen(
    priority_ranks,
    expression,
    gene_names,
    rho_min: float = DEFAULT_RHO_GATE,
    p_max: float = DEFAULT_P_GATE,
) -> tuple[list, list]:
    """Genes whose expression tracks a drug's priority rank across cell lines.

    Runs the rank correlation per gene and keeps those with |rho| above
    rho_min and p below p_max, strongest first. Genes with constant
    expression are undefined and come back in the skipped list.
    """
    ranks = np.asarray(priority_ranks, dtype=np.float64)
    matrix = np.asarray(expression, dtype=np.float64)
    gene_names = list(gene_names)
    if matrix.ndim != 2 or matrix.shape[0] != len(ranks):
        raise ValueError("expression must be (n_cells, n_genes) aligned with ranks")
    if matrix.shape[1] != len(gene_names):
        raise ValueError("gene_names must match the expression columns")
    if np.all(ranks == ranks[0]):
        raise ValueError("priority ranks are constant; nothing to correlate")
    hits = []
    skipped = []
    for col, gene in enumerate(gene_names):
        values = matrix[:, col]
        if np.all(values == values[0]):
            skipped.append(gene)
            continue
        rho, p = spearman(values, ranks)
        if abs(rho) > rho_min and p < p_max:
            hits.append(GeneCorrelation(gene=gene, rho=rho, p=p))
    hits.sort(key=lambda g: (-abs(g.rho), g.gene))
    return hits, skipped
