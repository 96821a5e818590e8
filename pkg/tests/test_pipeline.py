"""Tests for feature assembly, cross-validation, and grid search."""

import numpy as np
import pytest

from cdrank.data import CellLineRecord, DrugRecord, PairRecord, SplitPlan
from cdrank.errors import ConfigError
from cdrank.contrastive import EncoderSpec, embed
from cdrank.neural import TrainConfig, init_model
from cdrank.pipeline import (
    PrecisionSummary,
    Variant,
    build_features,
    compare_variants,
    cross_validate,
    default_classifier_grid,
    default_dnn_grid,
    default_encoder_grid,
    default_rf_grid,
    effective_sets,
    grid_search,
    make_classifier,
    precision_summary,
    pretrain_cell_autoencoder,
    pretrain_cell_encoder,
    pretrain_drug_encoder,
    rankings_from_scores,
    train_final_and_evaluate,
)


def _drug(drug_id, bits, targets=("G1",)):
    return DrugRecord(
        drug_id=drug_id,
        name=drug_id.lower(),
        fingerprint=np.asarray(bits, dtype=np.float64),
        gene_targets=frozenset(targets),
        moa=None,
        withdrawn=False,
        indications=frozenset(),
    )


def _cell(cell_id, expr, cancer="lung"):
    return CellLineRecord(cell_id, cancer, np.asarray(expr, dtype=np.float64))


def _pair(drug_id, cell_id, label):
    return PairRecord(
        drug_id=drug_id, cell_id=cell_id, auc=1.0, lower_limit=1.0, ic50=1.0,
        r_squared=0.9, screen_id="S", label=label,
    )


# ------------------------------------------------------------------ variants


def test_variant_parse_and_str():
    v = Variant.parse(" e_d , g , rf ")
    assert v == Variant("e_d", "g", "rf")
    assert str(v) == "e_d,g,rf"
    assert v.needs_drug_encoder and not v.needs_cell_encoder


@pytest.mark.parametrize("text", ["f,g", "x,g,lr", "f,y,lr", "f,g,svm"])
def test_variant_rejects_bad_tokens(text):
    with pytest.raises(ConfigError):
        Variant.parse(text)


# ------------------------------------------------------------------ features


def _tiny_tables():
    drugs = {
        "D1": _drug("D1", [1, 0, 1]),
        "D2": _drug("D2", [0, 1, 0]),
    }
    cells = {
        "C1": _cell("C1", [0.5, 2.0]),
        "C2": _cell("C2", [1.5, 0.0]),
    }
    pairs = [
        _pair("D1", "C1", 1), _pair("D2", "C1", 0),
        _pair("D1", "C2", 0), _pair("D2", "C2", 1),
    ]
    return drugs, cells, pairs


def test_build_features_concatenates_blocks():
    drugs, cells, pairs = _tiny_tables()
    table = build_features(pairs, drugs, cells, Variant("f", "g", "lr"))
    assert table.X.shape == (4, 5)
    assert table.source_mask == ("drug",) * 3 + ("cell",) * 2
    assert np.array_equal(table.X[0], [1, 0, 1, 0.5, 2.0])
    assert np.array_equal(table.X[3], [0, 1, 0, 1.5, 0.0])
    assert np.array_equal(table.y, [1, 0, 0, 1])
    assert table.pair_keys[0] == ("D1", "C1")


def test_build_features_with_encoders():
    drugs, cells, pairs = _tiny_tables()
    drug_model = init_model([3, 2], "relu", "relu", 0.0, seed=1)
    cell_model = init_model([2, 3, 2], "relu", "relu", 0.0, seed=2)
    table = build_features(
        pairs, drugs, cells, Variant("e_d", "e_c", "lr"),
        drug_model=drug_model, cell_model=cell_model,
    )
    assert table.X.shape == (4, 4)
    assert table.source_mask == ("drug", "drug", "cell", "cell")
    expected_drug = embed(drug_model, np.array([[1.0, 0.0, 1.0]]))
    assert np.allclose(table.X[0, :2], expected_drug[0])


def test_build_features_errors():
    drugs, cells, pairs = _tiny_tables()
    with pytest.raises(ConfigError, match="drug encoder"):
        build_features(pairs, drugs, cells, Variant("e_d", "g", "lr"))
    with pytest.raises(ConfigError, match="cell encoder"):
        build_features(pairs, drugs, cells, Variant("f", "e_c", "lr"))
    wrong_width = init_model([7, 2], "relu", "relu", 0.0, seed=0)
    with pytest.raises(ConfigError, match="width"):
        build_features(
            pairs, drugs, cells, Variant("e_d", "g", "lr"), drug_model=wrong_width
        )
    unlabeled = [_pair("D1", "C1", None)]
    with pytest.raises(ConfigError, match="labeled"):
        build_features(unlabeled, drugs, cells, Variant("f", "g", "lr"))
    stray = [_pair("D9", "C1", 1)]
    with pytest.raises(ConfigError, match="unknown drug"):
        build_features(stray, drugs, cells, Variant("f", "g", "lr"))
    with pytest.raises(ConfigError, match="no pairs"):
        build_features([], drugs, cells, Variant("f", "g", "lr"))


# ------------------------------------------------------------------ rankings


def test_effective_sets_and_rankings():
    pairs = [
        _pair("D1", "C1", 1), _pair("D2", "C1", 0), _pair("D3", "C1", 1),
        _pair("D1", "C2", 0), _pair("D2", "C2", 0), _pair("D3", "C2", 0),
    ]
    eff = effective_sets(pairs)
    assert eff == {"C1": {"D1", "D3"}, "C2": set()}

    keys = [(p.drug_id, p.cell_id) for p in pairs]
    scores = [0.9, 0.9, 0.1, 0.2, 0.8, 0.5]
    rankings = rankings_from_scores(keys, scores)
    assert rankings["C1"].drugs() == ["D1", "D2", "D3"]  # tie broken by id
    assert rankings["C2"].drugs() == ["D2", "D3", "D1"]
    with pytest.raises(ValueError):
        rankings_from_scores(keys, scores[:-1])


def test_precision_summary_hand_case():
    keys = [("D1", "C1"), ("D2", "C1"), ("D1", "C2"), ("D2", "C2")]
    scores = [0.9, 0.1, 0.2, 0.8]
    rankings = rankings_from_scores(keys, scores)
    eff = {"C1": {"D1"}, "C2": {"D1"}}
    cancer_of = {"C1": "lung", "C2": "skin"}
    summary = precision_summary(rankings, eff, cancer_of, ks=(1, 2, 5))
    assert summary.ks == (1, 2)  # k=5 exceeds the 2-drug rankings
    assert summary.per_cell[1] == {"C1": 1.0, "C2": 0.0}
    assert summary.per_cell[2] == {"C1": 0.5, "C2": 0.5}
    assert summary.overall[1] == 0.5
    assert summary.mean_cell(2) == 0.5
    payload = summary.to_dict()
    assert payload["per_cancer"]["1"] == {"lung": 1.0, "skin": 0.0}
    with pytest.raises(ValueError):
        precision_summary(rankings, eff, cancer_of, ks=(9,))


# ---------------------------------------------------------- cross-validation


def _separable_screen(n_cells=9):
    """Cells across 3 folds; drugs D0..D5; first three drugs always work."""
    drugs = {}
    for i in range(6):
        bits = [1.0, 0.0] if i < 3 else [0.0, 1.0]
        drugs[f"D{i}"] = _drug(f"D{i}", bits)
    cells = {f"C{j}": _cell(f"C{j}", [float(j % 2)]) for j in range(n_cells)}
    pairs = [
        _pair(d, c, int(drugs[d].fingerprint[0] == 1.0))
        for c in sorted(cells) for d in sorted(drugs)
    ]
    return drugs, cells, pairs


def test_cross_validate_learns_separable_rule():
    drugs, cells, pairs = _separable_screen()
    table = build_features(pairs, drugs, cells, Variant("f", "g", "lr"))
    eff = effective_sets(pairs)
    cancer_of = {c: "lung" for c in cells}
    folds = [("C0", "C1", "C2"), ("C3", "C4", "C5"), ("C6", "C7", "C8")]
    results = cross_validate(
        table, folds, eff, cancer_of, "lr", {"l2": 1e-4}, seed=0, ks=(1, 3)
    )
    assert [r.fold_index for r in results] == [0, 1, 2]
    for r in results:
        assert r.metric("cell", 1) == 1.0
        assert r.metric("cell", 3) == 1.0
        assert r.metric("cancer", 3) == 1.0
    with pytest.raises(ConfigError):
        cross_validate(table, [("C0",)], eff, cancer_of, "lr")
    with pytest.raises(ConfigError):
        cross_validate(table, [("C0",), ("nope",)], eff, cancer_of, "lr")


def test_cross_validate_deterministic():
    drugs, cells, pairs = _separable_screen()
    table = build_features(pairs, drugs, cells, Variant("f", "g", "rf"))
    eff = effective_sets(pairs)
    cancer_of = {c: "lung" for c in cells}
    folds = [("C0", "C1", "C2"), ("C3", "C4", "C5"), ("C6", "C7", "C8")]
    kw = dict(params={"n_estimators": 5}, seed=7, ks=(1,))
    a = cross_validate(table, folds, eff, cancer_of, "rf", **kw)
    b = cross_validate(table, folds, eff, cancer_of, "rf", **kw)
    assert [r.metric("cell", 1) for r in a] == [r.metric("cell", 1) for r in b]


def _fold_summaries(values):
    out = []
    for i, v in enumerate(values):
        summary = PrecisionSummary(
            ks=(1,), per_cell={1: {"C": v}}, per_cancer={1: {"x": v}}, overall={1: v}
        )
        out.append(type("R", (), {"metric": (lambda self, s, k, _v=v: _v), "summary": summary})())
    return out


def test_compare_variants_prefers_better_run():
    a = _fold_summaries([0.9, 1.0, 0.95, 0.9, 1.0])
    b = _fold_summaries([0.5, 0.6, 0.55, 0.5, 0.6])
    result = compare_variants(a, b, "cell", 1, n_tests=4)
    assert result.t_stat > 0
    assert 0.0 <= result.p_adjusted <= 1.0
    assert result.p_adjusted >= result.p


# -------------------------------------------------------------- final model


def test_train_final_and_evaluate_with_plan():
    drugs, cells, pairs = _separable_screen(n_cells=12)
    table = build_features(pairs, drugs, cells, Variant("f", "g", "lr"))
    eff = effective_sets(pairs)
    cancer_of = {c: "lung" for c in cells}
    plan = SplitPlan(
        seed=0,
        novel_test=("C10", "C11"),
        trained_on_test=("C9",),
        folds=(("C0", "C1", "C2"), ("C3", "C4"), ("C5",), ("C6", "C7"), ("C8",)),
    )
    run = train_final_and_evaluate(
        table, plan, eff, cancer_of, Variant("f", "g", "lr"),
        {"l2": 1e-4}, seed=0, ks=(1, 3), with_cv=True,
    )
    assert run.trained_on is not None and run.novel is not None
    assert run.trained_on.mean_cell(1) == 1.0
    assert run.novel.mean_cell(1) == 1.0
    assert len(run.fold_results) == 5

    empty_novel = SplitPlan(
        seed=0, novel_test=(), trained_on_test=("C9", "C10", "C11"),
        folds=plan.folds,
    )
    run2 = train_final_and_evaluate(
        table, empty_novel, eff, cancer_of, Variant("f", "g", "lr"),
        {"l2": 1e-4}, seed=0, ks=(1,), with_cv=False,
    )
    assert run2.novel is None
    assert run2.fold_results == []


# -------------------------------------------------------------- pretraining


def _grouped_drugs(n_per_group=4, width=8, seed=0):
    rng = np.random.default_rng(seed)
    drugs = {}
    for g, targets in enumerate([("G1",), ("G2",)]):
        base = np.zeros(width)
        base[g * (width // 2): (g + 1) * (width // 2)] = 1.0
        for i in range(n_per_group):
            noisy = np.abs(base + rng.normal(scale=0.05, size=width))
            drugs[f"D{g}{i}"] = _drug(f"D{g}{i}", noisy, targets)
    return drugs


def test_pretrain_drug_encoder_runs_and_skips_targetless():
    drugs = _grouped_drugs()
    drugs["DX"] = _drug("DX", np.zeros(8), targets=())
    spec = EncoderSpec(hidden_dims=(4,), pairs_per_epoch=12, val_fraction=0.2)
    config = TrainConfig(max_epochs=3, batch_size=16, seed=1)
    model, report = pretrain_drug_encoder(drugs, spec, config)
    assert model.layer_dims == [8, 4]
    assert report.epochs_run >= 1

    few = {k: drugs[k] for k in list(_grouped_drugs())[:3]}
    with pytest.raises(ConfigError, match="at least 4"):
        pretrain_drug_encoder(few, spec, config)


def test_pretrain_cell_encoder_runs():
    rng = np.random.default_rng(3)
    cells = {}
    for k, cancer in enumerate(("lung", "skin")):
        for i in range(4):
            expr = np.abs(rng.normal(size=6) + 3.0 * k)
            cells[f"C{k}{i}"] = _cell(f"C{k}{i}", expr, cancer)
    spec = EncoderSpec(hidden_dims=(3,), pairs_per_epoch=12, val_fraction=0.2)
    config = TrainConfig(max_epochs=3, batch_size=16, seed=2)
    model, report = pretrain_cell_encoder(cells, spec, config)
    assert model.layer_dims == [6, 3]
    assert len(report.val_curve) == report.epochs_run


def test_pretrain_cell_autoencoder_returns_encoder_half():
    rng = np.random.default_rng(4)
    cells = {f"C{i}": _cell(f"C{i}", np.abs(rng.normal(size=5))) for i in range(10)}
    config = TrainConfig(loss="mse", max_epochs=4, batch_size=8, seed=0)
    encoder, report = pretrain_cell_autoencoder(
        cells, hidden_dims=(4, 2), config=config
    )
    assert encoder.layer_dims == [5, 4, 2]
    assert report.epochs_run >= 1
    with pytest.raises(ValueError, match="mse"):
        pretrain_cell_autoencoder(cells, config=TrainConfig(loss="bce"))


# -------------------------------------------------------------- grid search


def test_default_grids_match_published_spaces():
    assert len(default_rf_grid()) == 2 * 4 * 4
    assert len(default_dnn_grid()) == 16 * 2 * 3 * 2 * 2
    assert len(default_encoder_grid()) == 2 * 3 * 2 * 3 * 3
    assert default_classifier_grid("rf") == default_rf_grid()
    assert len(default_classifier_grid("lr")) == 3
    with pytest.raises(ConfigError):
        default_classifier_grid("svm")


def test_grid_search_ranks_by_metric_then_index():
    drugs, cells, pairs = _separable_screen()
    table = build_features(pairs, drugs, cells, Variant("f", "g", "lr"))
    eff = effective_sets(pairs)
    cancer_of = {c: "lung" for c in cells}
    plan = SplitPlan(
        seed=0, novel_test=(), trained_on_test=(),
        folds=(("C0", "C1", "C2"), ("C3", "C4", "C5"), ("C6", "C7", "C8")),
    )
    rows = grid_search(
        lambda params: table, plan, eff, cancer_of, Variant("f", "g", "lr"),
        [{"l2": 1e-4}, {"l2": 50.0}], metric="cell", k=1, seed=0, ks=(1,),
    )
    assert [row.index for row in rows] == [0, 1]
    assert rows[0].metric_value >= rows[1].metric_value
    assert rows[0].params == {"l2": 1e-4}
    record = rows[0].to_record()
    assert record["variant"] == "f,g,lr"
    assert "l2" in record["params"]

    # ties keep grid order
    tied = grid_search(
        lambda params: table, plan, eff, cancer_of, Variant("f", "g", "lr"),
        [{"l2": 1e-4}, {"l2": 1e-4}], metric="cell", k=1, seed=0, ks=(1,),
    )
    assert [row.index for row in tied] == [0, 1]
    with pytest.raises(ConfigError):
        grid_search(lambda p: table, plan, eff, cancer_of,
                    Variant("f", "g", "lr"), [], k=1)


def test_make_classifier_kinds():
    assert make_classifier("lr", {"l2": 0.5}).l2 == 0.5
    rf = make_classifier("rf", {"n_estimators": 7}, seed=3)
    assert rf.n_estimators == 7 and rf.seed == 3
    dnn = make_classifier("dnn", seed=5)
    assert dnn.seed == 5
    with pytest.raises(ConfigError):
        make_classifier("boost")
