"""Deterministic synthetic drug screen with planted group-by-cancer structure.

The generator builds a small screen whose ground truth is known by
construction: drugs fall into mechanism groups, cell lines into cancer
types, and a pair is truly effective exactly when the drug's group is the
one assigned to the cell's cancer. Measurements are synthesized so the
effective-score pipeline reproduces those labels through the published
gate, up to a configurable label-flip rate.

Everything is driven by one seeded generator, so two screens built with
the same arguments are identical, file bytes included.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CellLineRecord, DrugRecord, PairRecord

N_DRUG_GROUPS = 3
N_CANCERS = 4

DEFAULT_CANCER_SIZES = (22, 22, 22, 14)
DEFAULT_GENE_COUNT = 50
SIGNATURE_BLOCK = 10  # genes elevated per cancer type
EXPRESSION_BASELINE = 2.0
EXPRESSION_ELEVATION = 2.0
EXPRESSION_NOISE = 1.0

# Effective-score bands on either side of the published gate (7.2734).
EFFECTIVE_SCORE_RANGE = (9.8, 12.6)
INEFFECTIVE_SCORE_RANGE = (-0.8, 1.6)

R_SQUARED_RANGE = (0.75, 0.99)
SCREEN_ID = "SYN001"


def _pair_key(drug_id: str, cell_id: str) -> tuple:
    return (drug_id, cell_id)


@dataclass(frozen=True)
class PlantedScreen:
    """A synthetic screen plus the ground truth it was built from."""

    seed: int
    genes: tuple
    drugs: dict
    cells: dict
    pool_cells: dict
    pairs: list
    drug_group: dict
    effective_group: tuple  # cancer index -> drug group index
    cancer_names: tuple
    truth: dict  # (drug_id, cell_id) -> noiseless effectiveness
    flipped: frozenset

    def observed_effective(self, drug_id: str, cell_id: str) -> bool:
        key = _pair_key(drug_id, cell_id)
        return self.truth[key] != (key in self.flipped)

    def cancer_of(self, cell_id: str) -> str:
        record = self.cells.get(cell_id) or self.pool_cells.get(cell_id)
        if record is None:
            raise KeyError(f"unknown cell line {cell_id!r}")
        return record.cancer_type

    def write_csv(self, out_dir) -> dict:
        """Write pairs/drugs/cells/genes files the parsers accept.

        Returns a dict of logical name to path. Output is byte-stable for
        a fixed screen.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "pairs": out / "pairs.csv",
            "drugs": out / "drugs.csv",
            "cells": out / "cells.csv",
            "genes": out / "genes.txt",
        }

        with open(paths["genes"], "w", encoding="utf-8", newline="") as fh:
            for gene in self.genes:
                fh.write(gene + "\n")

        with open(paths["drugs"], "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["drug_id", "name", "fingerprint", "gene_targets", "moa",
                 "withdrawn", "indications"]
            )
            for drug_id in sorted(self.drugs):
                d = self.drugs[drug_id]
                bits = "".join("1" if b else "0" for b in d.fingerprint.astype(int))
                writer.writerow([
                    d.drug_id,
                    d.name,
                    bits,
                    ";".join(sorted(d.gene_targets)),
                    d.moa or "",
                    "1" if d.withdrawn else "0",
                    ";".join(sorted(d.indications)),
                ])

        with open(paths["cells"], "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["cell_id", "cancer_type", *self.genes])
            for table in (self.cells, self.pool_cells):
                for cell_id in sorted(table):
                    c = table[cell_id]
                    writer.writerow(
                        [c.cell_id, c.cancer_type, *[repr(float(v)) for v in c.expression]]
                    )

        with open(paths["pairs"], "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["drug_id", "cell_id", "auc", "lower_limit", "ic50",
                 "r_squared", "screen_id"]
            )
            for p in self.pairs:
                writer.writerow([
                    p.drug_id, p.cell_id,
                    repr(float(p.auc)), repr(float(p.lower_limit)), repr(float(p.ic50)),
                    repr(float(p.r_squared)), p.screen_id,
                ])

        return paths


def _measurements_for_score(score: float, rng) -> tuple:
    """Back out a positive (auc, lower_limit, ic50) triple scoring ~score.

    The triple keeps an exact product, so the resulting effective score
    lands in [score, score + 0.03] for jitter within +-0.2.
    """
    base = math.sqrt(1.5 * math.exp(-score))
    ja = rng.uniform(-0.2, 0.2)
    jb = rng.uniform(-0.2, 0.2)
    return (
        base * math.exp(ja),
        base * math.exp(jb),
        base * math.exp(-(ja + jb)),
    )


def make_planted_screen(
    n_drugs: int = 60,
    cancer_sizes=DEFAULT_CANCER_SIZES,
    n_pool_per_cancer: int = 10,
    n_genes: int = DEFAULT_GENE_COUNT,
    flip_rate: float = 0.05,
    fingerprint_noise: float = 0.25,
    expression_signal: float = EXPRESSION_ELEVATION,
    seed: int = 0,
) -> PlantedScreen:
    """Build the planted screen.

    Drug i belongs to group i mod 3; cancer k's cells respond to group
    k mod 3. Fingerprints are noisy copies of one prototype per group and
    every drug in a group shares the group's two target genes, so the
    same-group relation holds under both the exact and the overlap rule.
    Expression elevates one gene block per cancer by `expression_signal`
    (lower values bury the cancer signal deeper in the unit noise). A
    flip_rate fraction of pairs (in expectation) gets measurements drawn
    from the wrong band.
    """
    if n_drugs < N_DRUG_GROUPS:
        raise ValueError("n_drugs must cover all drug groups")
    if len(cancer_sizes) != N_CANCERS:
        raise ValueError(f"cancer_sizes must have {N_CANCERS} entries")
    if n_genes < SIGNATURE_BLOCK * N_CANCERS + 2 * N_DRUG_GROUPS:
        raise ValueError("n_genes too small for signatures plus target genes")
    if not 0.0 <= flip_rate < 0.5:
        raise ValueError("flip_rate must be in [0, 0.5)")
    if expression_signal <= 0.0:
        raise ValueError("expression_signal must be positive")

    rng = np.random.default_rng(seed)
    genes = tuple(f"G{i:03d}" for i in range(n_genes))
    cancer_names = tuple(f"cancer{k}" for k in range(N_CANCERS))
    effective_group = tuple(k % N_DRUG_GROUPS for k in range(N_CANCERS))

    # target genes sit past the signature blocks, two per group
    target_base = SIGNATURE_BLOCK * N_CANCERS
    group_targets = [
        frozenset(genes[target_base + 2 * g: target_base + 2 * g + 2])
        for g in range(N_DRUG_GROUPS)
    ]
    group_indications = [
        frozenset(cancer_names[k] for k in range(N_CANCERS) if effective_group[k] == g)
        for g in range(N_DRUG_GROUPS)
    ]

    prototypes = rng.random((N_DRUG_GROUPS, 256)) < 0.5

    drugs: dict = {}
    drug_group: dict = {}
    for i in range(n_drugs):
        g = i % N_DRUG_GROUPS
        flips = rng.random(256) < fingerprint_noise
        bits = np.where(flips, ~prototypes[g], prototypes[g])
        drug_id = f"D{i:03d}"
        drug_group[drug_id] = g
        # the first two drugs of each group carry approval indications
        approved = i < 2 * N_DRUG_GROUPS
        drugs[drug_id] = DrugRecord(
            drug_id=drug_id,
            name=f"drug{i}",
            fingerprint=bits.astype(np.float64),
            gene_targets=group_targets[g],
            moa=f"moa{g}",
            withdrawn=False,
            indications=group_indications[g] if approved else frozenset(),
        )

    def expression_profile(cancer_index: int) -> np.ndarray:
        profile = np.full(n_genes, EXPRESSION_BASELINE)
        lo = cancer_index * SIGNATURE_BLOCK
        profile[lo: lo + SIGNATURE_BLOCK] += expression_signal
        profile = profile + rng.normal(size=n_genes) * EXPRESSION_NOISE
        return np.maximum(profile, 0.0)

    cells: dict = {}
    index = 0
    for k, size in enumerate(cancer_sizes):
        for _ in range(size):
            cell_id = f"CL{index:03d}"
            cells[cell_id] = CellLineRecord(cell_id, cancer_names[k], expression_profile(k))
            index += 1

    pool_cells: dict = {}
    index = 0
    for k in range(N_CANCERS):
        for _ in range(n_pool_per_cancer):
            cell_id = f"PL{index:03d}"
            pool_cells[cell_id] = CellLineRecord(
                cell_id, cancer_names[k], expression_profile(k)
            )
            index += 1

    cancer_index = {name: k for k, name in enumerate(cancer_names)}
    pairs: list = []
    truth: dict = {}
    flipped = set()
    for cell_id in sorted(cells):
        k = cancer_index[cells[cell_id].cancer_type]
        for drug_id in sorted(drugs):
            key = _pair_key(drug_id, cell_id)
            is_effective = drug_group[drug_id] == effective_group[k]
            truth[key] = is_effective
            if rng.random() < flip_rate:
                flipped.add(key)
                is_effective = not is_effective
            band = EFFECTIVE_SCORE_RANGE if is_effective else INEFFECTIVE_SCORE_RANGE
            score = rng.uniform(*band)
            auc, lower_limit, ic50 = _measurements_for_score(score, rng)
            pairs.append(PairRecord(
                drug_id=drug_id,
                cell_id=cell_id,
                auc=auc,
                lower_limit=lower_limit,
                ic50=ic50,
                r_squared=rng.uniform(*R_SQUARED_RANGE),
                screen_id=SCREEN_ID,
            ))

    return PlantedScreen(
        seed=seed,
        genes=genes,
        drugs=drugs,
        cells=cells,
        pool_cells=pool_cells,
        pairs=pairs,
        drug_group=drug_group,
        effective_group=effective_group,
        cancer_names=cancer_names,
        truth=truth,
        flipped=frozenset(flipped),
    )
