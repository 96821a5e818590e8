"""Tests for the planted synthetic screen generator."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from cdrank.data import (
    filter_and_dedup_pairs,
    filter_cell_lines,
    label_pairs,
    parse_dataset,
    pretraining_cell_pool,
    build_cell_records,
    score_pairs,
    GenePanel,
)
from cdrank.datasets import make_planted_screen
from cdrank.scoring import DEFAULT_GATE_THRESHOLD, effective_score


@pytest.fixture(scope="module")
def screen():
    return make_planted_screen(seed=0)


def test_shape_and_group_structure(screen):
    assert len(screen.drugs) == 60
    assert len(screen.cells) == 80
    assert len(screen.pool_cells) == 40
    assert len(screen.pairs) == 60 * 80
    counts = {g: 0 for g in range(3)}
    for g in screen.drug_group.values():
        counts[g] += 1
    assert counts == {0: 20, 1: 20, 2: 20}
    by_cancer = {}
    for c in screen.cells.values():
        by_cancer[c.cancer_type] = by_cancer.get(c.cancer_type, 0) + 1
    assert sorted(by_cancer.values(), reverse=True) == [22, 22, 22, 14]
    pool_by_cancer = {}
    for c in screen.pool_cells.values():
        pool_by_cancer[c.cancer_type] = pool_by_cancer.get(c.cancer_type, 0) + 1
    assert set(pool_by_cancer.values()) == {10}


def test_groups_share_targets_and_moa(screen):
    by_group = {}
    for drug_id, g in screen.drug_group.items():
        by_group.setdefault(g, []).append(screen.drugs[drug_id])
    for g, members in by_group.items():
        targets = {m.gene_targets for m in members}
        assert len(targets) == 1
        assert len(next(iter(targets))) == 2
        assert {m.moa for m in members} == {f"moa{g}"}
    # target sets are disjoint across groups so the overlap rule separates them
    all_targets = [next(iter({m.gene_targets for m in v})) for v in by_group.values()]
    assert len(frozenset().union(*all_targets)) == 6


def test_truth_follows_group_by_cancer_rule(screen):
    for cell_id, cell in screen.cells.items():
        k = screen.cancer_names.index(cell.cancer_type)
        for drug_id in screen.drugs:
            expected = screen.drug_group[drug_id] == screen.effective_group[k]
            assert screen.truth[(drug_id, cell_id)] == expected


def test_flip_rate_close_to_request(screen):
    fraction = len(screen.flipped) / len(screen.pairs)
    assert 0.03 < fraction < 0.07
    drug_id, cell_id = next(iter(screen.flipped))
    assert screen.observed_effective(drug_id, cell_id) != screen.truth[(drug_id, cell_id)]


def test_scores_respect_the_gate(screen):
    for p in screen.pairs:
        ces = effective_score(p.auc, p.lower_limit, p.ic50)
        if screen.observed_effective(p.drug_id, p.cell_id):
            assert 9.8 <= ces <= 12.7
        else:
            assert -0.8 <= ces <= 1.7


def test_expression_signature_blocks(screen):
    for cell in screen.cells.values():
        k = screen.cancer_names.index(cell.cancer_type)
        block = slice(k * 10, k * 10 + 10)
        inside = float(np.mean(cell.expression[block]))
        rest = np.concatenate([cell.expression[: k * 10], cell.expression[k * 10 + 10:]])
        assert inside - float(np.mean(rest)) > 0.5


def _tree_hash(paths):
    digest = hashlib.sha256()
    for name in sorted(paths):
        digest.update(name.encode())
        digest.update(Path(paths[name]).read_bytes())
    return digest.hexdigest()


def test_write_csv_is_byte_deterministic(tmp_path):
    a = make_planted_screen(seed=3).write_csv(tmp_path / "a")
    b = make_planted_screen(seed=3).write_csv(tmp_path / "b")
    c = make_planted_screen(seed=4).write_csv(tmp_path / "c")
    assert _tree_hash(a) == _tree_hash(b)
    assert _tree_hash(a) != _tree_hash(c)


def test_round_trip_through_parsers(tmp_path, screen):
    paths = screen.write_csv(tmp_path)
    audit = []
    raw = parse_dataset(
        paths["pairs"], paths["drugs"], paths["cells"], paths["genes"], audit
    )
    assert audit == []
    assert len(raw.pairs) == 4800
    assert len(raw.drugs) == 60
    assert len(raw.cells.cell_ids) == 120
    assert raw.panel == GenePanel(screen.genes)

    kept = filter_and_dedup_pairs(raw, audit)
    assert len(kept) == 4800
    score_pairs(kept)
    label_pairs(kept, DEFAULT_GATE_THRESHOLD)
    for p in kept:
        assert p.label == int(screen.observed_effective(p.drug_id, p.cell_id))

    cells = build_cell_records(raw.cells, raw.panel)
    dataset = filter_cell_lines(
        kept, cells, raw.panel, raw.drugs, DEFAULT_GATE_THRESHOLD, audit
    )
    assert sorted(dataset.cells) == sorted(screen.cells)
    assert audit == []

    pool = pretraining_cell_pool(raw.cells, raw.panel, dataset.cells.keys())
    assert sorted(pool) == sorted(screen.pool_cells)


def test_validation_errors():
    with pytest.raises(ValueError):
        make_planted_screen(n_drugs=2)
    with pytest.raises(ValueError):
        make_planted_screen(cancer_sizes=(10, 10))
    with pytest.raises(ValueError):
        make_planted_screen(n_genes=10)
    with pytest.raises(ValueError):
        make_planted_screen(flip_rate=0.6)
