import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from cdrank.evaluation import (
    CancerPriority,
    CellPriority,
    GeneCorrelation,
    Ranking,
    TTestResult,
    fda_priority_analysis,
    precision_cancer_at_k,
    precision_cell_at_k,
    priority_correlation_screen,
    rank_drugs,
    significance_stars,
    spearman,
    ttest_bonferroni,
    two_tailed_p,
)

# Per-cancer top-5 precision rows for the bagged-forest variant, with the
# final column's published Overall back-solving one cell (see decisions log).
CANCER_PRECISION_ROWS = {
    "Bladder": (1.0000, 1.0000, 1.0000, 0.9167, 0.9333),
    "Brain": (1.0000, 0.8750, 0.8333, 0.8125, 0.7500),
    "Breast": (1.0000, 1.0000, 0.7778, 0.7500, 0.8000),
    "Colorectal": (1.0000, 1.0000, 1.0000, 0.8750, 0.9000),
    "Endometrial": (1.0000, 1.0000, 1.0000, 0.9167, 0.8667),
    "Esophageal": (1.0000, 0.8333, 0.7778, 0.7500, 0.8000),
    "Head and Neck": (1.0000, 1.0000, 1.0000, 1.0000, 0.9333),
    "Liver": (1.0000, 1.0000, 1.0000, 1.0000, 0.9000),
    "Lung": (0.9231, 0.9231, 0.8974, 0.8846, 0.8615),
    "Ovarian": (1.0000, 1.0000, 1.0000, 0.8750, 0.8000),
    "Pancreatic": (0.7500, 0.8750, 0.8333, 0.8125, 0.8000),
    "Skin": (1.0000, 1.0000, 0.8667, 0.9000, 0.8000),
}
EXPECTED_OVERALL = (0.9728, 0.9589, 0.9155, 0.8744, 0.8454)


# ----------------------------------------------------------------- rankings


def test_rank_drugs_orders_by_score_then_id():
    r = rank_drugs({"A": 0.9, "B": 0.1}, "c1")
    assert r.drugs() == ["A", "B"]
    tied = rank_drugs({"B": 0.5, "A": 0.5})
    assert tied.drugs() == ["A", "B"]


def test_rank_drugs_is_input_order_independent():
    scores = {"D": 0.3, "A": 0.8, "C": 0.3, "B": 0.9}
    forward_order = rank_drugs(scores)
    reversed_order = rank_drugs(dict(reversed(list(scores.items()))))
    assert forward_order.entries == reversed_order.entries
    assert forward_order.drugs() == ["B", "A", "C", "D"]


def test_rank_drugs_rejects_nan_and_empty():
    with pytest.raises(ValueError, match="not finite"):
        rank_drugs({"A": float("nan")})
    with pytest.raises(ValueError, match="empty"):
        rank_drugs({})


def test_ranking_rank_of_and_restrict():
    r = rank_drugs({"A": 0.9, "B": 0.5, "C": 0.1}, "c1")
    assert r.rank_of("B") == 2
    sub = r.restrict({"A", "C"})
    assert sub.drugs() == ["A", "C"]
    assert sub.rank_of("C") == 2
    with pytest.raises(ValueError, match="not ranked"):
        sub.rank_of("B")


# ---------------------------------------------------------------- precision


def _ranking_of(drugs):
    return Ranking(cell_id="c", entries=tuple((d, 1.0 - i) for i, d in enumerate(drugs)))


def test_precision_cell_hand_counts():
    r = _ranking_of(["A", "C", "B", "D"])
    assert precision_cell_at_k(r, {"A", "B"}, 2) == pytest.approx(0.5)
    assert precision_cell_at_k(r, {"A", "B"}, 3) == pytest.approx(2 / 3)
    assert precision_cell_at_k(r, set(), 1) == 0.0
    assert precision_cell_at_k(r, set(), 4) == 0.0


def test_precision_cell_validates_inputs():
    r = _ranking_of(["A", "B"])
    with pytest.raises(ValueError, match="k must be"):
        precision_cell_at_k(r, {"A"}, 0)
    with pytest.raises(ValueError, match="k must be"):
        precision_cell_at_k(r, {"A"}, 3)
    with pytest.raises(ValueError, match="not in the ranking"):
        precision_cell_at_k(r, {"Z"}, 1)


def test_precision_cell_against_brute_force():
    """200 random instances against an independent set-count implementation."""
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        drugs = [f"d{i:02d}" for i in range(n)]
        scores = {d: float(np.round(rng.random(), 2)) for d in drugs}
        effective = {d for d in drugs if rng.random() < 0.4}
        k = int(rng.integers(1, n + 1))
        expected_order = sorted(drugs, key=lambda d: (-scores[d], d))
        expected = len(set(expected_order[:k]) & effective) / k
        got = precision_cell_at_k(rank_drugs(scores), effective, k)
        assert got == pytest.approx(expected)


def test_precision_hit_count_non_decreasing_in_k():
    rng = np.random.default_rng(7)
    scores = {f"d{i}": float(rng.random()) for i in range(9)}
    effective = {"d1", "d4", "d6"}
    r = rank_drugs(scores)
    counts = [precision_cell_at_k(r, effective, k) * k for k in range(1, 10)]
    rounded = [round(c) for c in counts]
    assert all(abs(c - rc) < 1e-9 for c, rc in zip(counts, rounded))
    assert all(b >= a for a, b in zip(rounded, rounded[1:]))


def test_precision_cancer_means_and_unweighted_overall():
    per_cell = {"c1": 1.0, "c2": 0.0, "c3": 1.0, "c4": 1.0, "c5": 1.0, "c6": 0.0}
    cancer_of = {"c1": "Lung", "c2": "Lung", "c3": "Lung", "c4": "Lung", "c5": "Skin", "c6": "Skin"}
    per_cancer, overall = precision_cancer_at_k(per_cell, cancer_of)
    assert per_cancer == {"Lung": pytest.approx(0.75), "Skin": pytest.approx(0.5)}
    assert overall == pytest.approx(0.625)  # mean of means, not of cells

    lopsided = {f"c{i}": 1.0 for i in range(10)} | {"z": 0.0}
    lopsided_cancers = {f"c{i}": "Big" for i in range(10)} | {"z": "Small"}
    _, lop_overall = precision_cancer_at_k(lopsided, lopsided_cancers)
    assert lop_overall == pytest.approx(0.5)


def test_precision_cancer_single_cell_identity_and_errors():
    per_cancer, overall = precision_cancer_at_k({"c": 0.4}, {"c": "Lung"})
    assert per_cancer == {"Lung": pytest.approx(0.4)}
    assert overall == pytest.approx(0.4)
    with pytest.raises(ValueError, match="no cancer assignment"):
        precision_cancer_at_k({"c": 0.4}, {})
    with pytest.raises(ValueError, match="no per-cell"):
        precision_cancer_at_k({}, {})


def test_published_per_cancer_rows_reproduce_overall():
    """Overall row = unweighted mean of the 12 per-cancer rows, each k."""
    for col in range(5):
        per_cell = {cancer: rows[col] for cancer, rows in CANCER_PRECISION_ROWS.items()}
        cancer_of = {cancer: cancer for cancer in CANCER_PRECISION_ROWS}
        _, overall = precision_cancer_at_k(per_cell, cancer_of)
        assert overall == pytest.approx(EXPECTED_OVERALL[col], abs=5e-4)


# ------------------------------------------------------------------- t-test


def _t_density(u: float, df: int) -> float:
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1.0 + u * u / df) ** (-(df + 1) / 2)


def test_ttest_frozen_example_and_integration_oracle():
    result = ttest_bonferroni([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    assert result.t_stat == pytest.approx(-3.674234614174767, abs=1e-12)
    assert result.df == 4
    assert result.p == pytest.approx(0.0213, abs=5e-5)
    tail, _ = quad(_t_density, abs(result.t_stat), np.inf, args=(result.df,))
    assert result.p == pytest.approx(2.0 * tail, abs=1e-6)


def test_ttest_identical_samples_degenerate():
    result = ttest_bonferroni([2.0, 2.0, 2.0], [2.0, 2.0], n_tests=3)
    assert result.t_stat == 0.0
    assert result.p == 1.0
    assert result.p_adjusted == 1.0


def test_ttest_zero_variance_distinct_means():
    result = ttest_bonferroni([1.0, 1.0], [2.0, 2.0])
    assert result.t_stat == -np.inf
    assert result.p == 0.0


def test_ttest_bonferroni_arithmetic_and_cap():
    base = ttest_bonferroni([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], n_tests=4)
    assert base.p_adjusted == pytest.approx(4 * base.p)
    capped = ttest_bonferroni([1.0, 2.0, 3.0], [1.1, 2.1, 2.9], n_tests=50)
    assert capped.p_adjusted == 1.0


def test_ttest_swap_negates_t_keeps_p():
    a, b = [1.0, 3.0, 2.0, 5.0], [4.0, 6.0, 5.5]
    fwd = ttest_bonferroni(a, b)
    rev = ttest_bonferroni(b, a)
    assert fwd.t_stat == pytest.approx(-rev.t_stat)
    assert fwd.p == pytest.approx(rev.p)


def test_ttest_input_validation():
    with pytest.raises(ValueError):
        ttest_bonferroni([1.0], [2.0, 3.0])
    with pytest.raises(ValueError):
        ttest_bonferroni([1.0, np.nan], [2.0, 3.0])
    with pytest.raises(ValueError):
        ttest_bonferroni([1.0, 2.0], [2.0, 3.0], n_tests=0)


def test_two_tailed_p_edges():
    assert two_tailed_p(0.0, 10) == pytest.approx(1.0)
    assert two_tailed_p(50.0, 10) < 1e-10
    assert two_tailed_p(float("inf"), 3) == 0.0
    with pytest.raises(ValueError):
        two_tailed_p(1.0, 0)


def test_significance_stars_thresholds():
    assert significance_stars(0.009) == "***"
    assert significance_stars(0.01) == "***"
    assert significance_stars(0.03) == "**"
    assert significance_stars(0.05) == "**"
    assert significance_stars(0.09) == "*"
    assert significance_stars(0.1) == "*"
    assert significance_stars(0.2) == ""


# ----------------------------------------------------------------- spearman


def test_spearman_monotone_hand_cases():
    rho, p = spearman([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
    assert rho == 1.0 and p == 0.0
    rho, p = spearman([1.0, 2.0, 3.0], [6.0, 4.0, 2.0])
    assert rho == -1.0 and p == 0.0


def test_spearman_midrank_tie_hand_case():
    # ranks of x: [1, 2.5, 2.5, 4]; Pearson against [1,2,3,4] = 4.5/sqrt(22.5)
    rho, _ = spearman([1.0, 2.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0])
    assert rho == pytest.approx(0.9486832980505138, abs=1e-12)


def test_spearman_published_breast_row_p_value():
    """rho -0.5037 over 43 cell lines lands in the published p band."""
    rho = -0.5037
    n = 43
    t_stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = two_tailed_p(t_stat, n - 2)
    assert 0.00055 <= p <= 0.00065


def test_spearman_zero_variance_flagged():
    with pytest.raises(ValueError, match="zero rank variance"):
        spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="zero rank variance"):
        spearman([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    with pytest.raises(ValueError, match="at least 3"):
        spearman([1.0, 2.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(min_value=-10000, max_value=10000), min_size=4, max_size=20, unique=True),
    st.lists(st.integers(min_value=-10000, max_value=10000), min_size=4, max_size=20, unique=True),
)
def test_spearman_invariant_under_monotone_transform(x, y):
    # integer spacing keeps exp(x/100) strictly monotone in float arithmetic
    n = min(len(x), len(y))
    x = np.asarray(x[:n], dtype=np.float64)
    y = np.asarray(y[:n], dtype=np.float64)
    base_rho, base_p = spearman(x, y)
    warped_rho, warped_p = spearman(np.exp(x / 100.0), y)
    assert warped_rho == pytest.approx(base_rho, abs=1e-12)
    assert warped_p == pytest.approx(base_p, abs=1e-12)


# ------------------------------------------------------------- fda priority


def _rankings(table):
    return {cell: rank_drugs(scores, cell) for cell, scores in table.items()}


def test_fda_priority_single_cell_hand_cases():
    rankings = _rankings({"c1": {"A": 0.9, "B": 0.5, "C": 0.1}})
    indications = {"A": frozenset({"Skin"}), "B": frozenset({"Lung"}), "C": frozenset({"Skin"})}
    report = fda_priority_analysis(rankings, indications, {"c1": "Lung"})
    cp = report.per_cell[0]
    assert cp.approved_ranks == (2,)
    assert cp.mean_rank == 2.0 and cp.best_rank == 2 and cp.top_drug == "B"

    both = fda_priority_analysis(
        rankings,
        {"A": frozenset({"Lung"}), "B": frozenset({"Skin"}), "C": frozenset({"Lung"})},
        {"c1": "Lung"},
    )
    cp = both.per_cell[0]
    assert cp.mean_rank == 2.0 and cp.best_rank == 1 and cp.top_drug == "A"


def test_fda_priority_restricts_to_drugs_with_indications():
    # Z outranks everything but carries no indication, so ranks shift up
    rankings = _rankings({"c1": {"Z": 0.99, "A": 0.9, "B": 0.5}})
    indications = {"Z": frozenset(), "A": frozenset({"Skin"}), "B": frozenset({"Lung"})}
    report = fda_priority_analysis(rankings, indications, {"c1": "Lung"})
    assert report.per_cell[0].approved_ranks == (2,)  # B is 2nd of {A, B}


def test_fda_priority_modal_drug_and_share():
    rankings = _rankings(
        {
            "c1": {"A": 0.9, "B": 0.8},
            "c2": {"A": 0.7, "B": 0.9},
            "c3": {"A": 0.9, "B": 0.2},
        }
    )
    indications = {"A": frozenset({"Lung"}), "B": frozenset({"Lung"})}
    cancer_of = {"c1": "Lung", "c2": "Lung", "c3": "Lung"}
    report = fda_priority_analysis(rankings, indications, cancer_of)
    cancer = report.per_cancer[0]
    assert cancer.top_drug == "A"  # A tops c1 and c3, B only c2
    assert cancer.top_drug_share == pytest.approx(100.0 * 2 / 3)
    # A's ranks across the three cells: 1, 2, 1
    assert cancer.top_drug_rank_std == pytest.approx(float(np.std([1, 2, 1])))
    assert report.mean_top_rank_std == pytest.approx(cancer.top_drug_rank_std)


def test_fda_priority_unanimous_cancer_is_100_percent():
    rankings = _rankings({"c1": {"A": 0.9, "B": 0.1}, "c2": {"A": 0.8, "B": 0.2}})
    indications = {"A": frozenset({"Lung"}), "B": frozenset({"Lung"})}
    report = fda_priority_analysis(rankings, indications, {"c1": "Lung", "c2": "Lung"})
    assert report.per_cancer[0].top_drug_share == 100.0
    assert report.per_cancer[0].top_drug_rank_std == 0.0


def test_fda_priority_excludes_cells_without_approved_drugs():
    rankings = _rankings({"c1": {"A": 0.9}, "c2": {"A": 0.8}})
    indications = {"A": frozenset({"Lung"})}
    report = fda_priority_analysis(rankings, indications, {"c1": "Lung", "c2": "Brain"})
    assert report.excluded_cells == ("c2",)
    assert [cp.cell_id for cp in report.per_cell] == ["c1"]
    with pytest.raises(ValueError, match="no drug carries"):
        fda_priority_analysis(rankings, {"A": frozenset()}, {"c1": "Lung", "c2": "Brain"})


def test_fda_priority_report_round_trips_to_dict():
    rankings = _rankings({"c1": {"A": 0.9, "B": 0.5}})
    indications = {"A": frozenset({"Lung"}), "B": frozenset({"Lung"})}
    payload = fda_priority_analysis(rankings, indications, {"c1": "Lung"}).to_dict()
    assert payload["per_cancer"][0]["top_drug"] == "A"
    assert payload["excluded_cells"] == []


# -------------------------------------------------------------- gene screen


def test_gene_screen_recovers_planted_signals():
    """5 signal genes among 50 pass the (0.35, 0.1) gates; the rest do not."""
    rng = np.random.default_rng(13)
    n_cells = 40
    ranks = rng.permutation(n_cells) + 1.0
    expression = rng.normal(size=(n_cells, 50))
    signal = [f"SIG{i}" for i in range(5)]
    names = signal + [f"NOISE{i:02d}" for i in range(45)]
    for i in range(5):
        expression[:, i] = ranks + rng.normal(scale=9.0, size=n_cells)
    hits, skipped = priority_correlation_screen(ranks, expression, names)
    assert {h.gene for h in hits} == set(signal)
    assert skipped == []
    magnitudes = [abs(h.rho) for h in hits]
    assert magnitudes == sorted(magnitudes, reverse=True)
    for h in hits:
        assert abs(h.rho) > 0.35 and h.p < 0.1


def test_gene_screen_tracks_rank_perfectly():
    ranks = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    expression = np.column_stack([ranks * 2.0, np.ones(5)])
    hits, skipped = priority_correlation_screen(ranks, expression, ["G1", "G2"])
    assert [h.gene for h in hits] == ["G1"]
    assert hits[0].rho == 1.0 and hits[0].p == 0.0
    assert skipped == ["G2"]  # constant expression is undefined, not a miss


def test_gene_screen_validates_shapes():
    with pytest.raises(ValueError, match="aligned"):
        priority_correlation_screen([1.0, 2.0], np.zeros((3, 2)), ["a", "b"])
    with pytest.raises(ValueError, match="gene_names"):
        priority_correlation_screen([1.0, 2.0, 3.0], np.zeros((3, 2)), ["a"])
    with pytest.raises(ValueError, match="constant"):
        priority_correlation_screen([2.0, 2.0, 2.0], np.ones((3, 1)), ["a"])
