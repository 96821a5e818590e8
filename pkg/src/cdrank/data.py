"""Screening tables: parsing, filtering, deduplication, and split planning.

Input files are plain CSV. Parsing rejects malformed rows with row-numbered
diagnostics but applies no policy; filtering applies the retention rules and
attributes every dropped row to exactly one named rule in the audit trail.

Expected schemas (header rows required, order fixed):

  pairs.csv  drug_id,cell_id,auc,lower_limit,ic50,r_squared,screen_id
  drugs.csv  drug_id,name,fingerprint,gene_targets,moa,withdrawn,indications
  cells.csv  cell_id,cancer_type,<one column per gene>
  genes.txt  one gene symbol per line

Fingerprints are 256-character 0/1 strings; gene_targets and indications are
';'-delimited lists; withdrawn is 0 or 1; empty measurement fields mean the
measurement is missing (dropped later by the filter, not by the parser).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import as_rng
from .errors import DataFormatError

FINGERPRINT_BITS = 256
UNKNOWN_CANCER_LABELS = ("", "Unknown", "Non-cancerous")

PAIR_COLUMNS = ("drug_id", "cell_id", "auc", "lower_limit", "ic50", "r_squared", "screen_id")
DRUG_COLUMNS = ("drug_id", "name", "fingerprint", "gene_targets", "moa", "withdrawn", "indications")

# Screen retained preferentially when the same pair was measured repeatedly.
PREFERRED_SCREEN = "MTS010"

# Audit rule names, one per way a row can drop out.
RULE_UNPARSEABLE = "unparseable_row"
RULE_MISSING_MEASUREMENT = "missing_measurement"
RULE_NONPOSITIVE_MEASUREMENT = "nonpositive_measurement"
RULE_LOW_R_SQUARED = "low_r_squared"
RULE_UNKNOWN_DRUG = "unknown_drug"
RULE_WITHDRAWN_DRUG = "withdrawn_drug"
RULE_DUPLICATE_PAIR = "duplicate_pair"
RULE_CELL_LOW_EFFECTIVE = "cell_low_effective_fraction"
RULE_CELL_UNKNOWN_CANCER = "cell_unknown_cancer"
RULE_CELL_NO_EXPRESSION = "cell_missing_expression"

MIN_R_SQUARED = 0.7
MIN_EFFECTIVE_FRACTION = 0.01


@dataclass(frozen=True)
class AuditRecord:
    rule: str
    row: int | None = None
    drug_id: str | None = None
    cell_id: str | None = None
    detail: str | None = None

    def to_json_line(self) -> str:
        payload = {"rule": self.rule}
        for key in ("row", "drug_id", "cell_id", "detail"):
            value = getattr(self, key)
            if value is not None:
                payload[key] = value
        return json.dumps(payload, sort_keys=True)


@dataclass(eq=False)
class DrugRecord:
    drug_id: str
    name: str
    fingerprint: np.ndarray  # (256,) float64 of 0/1
    gene_targets: frozenset
    moa: str | None
    withdrawn: bool
    indications: frozenset


@dataclass(eq=False)
class CellLineRecord:
    cell_id: str
    cancer_type: str
    expression: np.ndarray  # aligned to a GenePanel


@dataclass
class PairRecord:
    drug_id: str
    cell_id: str
    auc: float | None
    lower_limit: float | None
    ic50: float | None
    r_squared: float | None
    screen_id: str
    row: int = 0
    ces: float | None = None
    label: int | None = None


class GenePanel:
    """Ordered, unique gene symbols defining the expression feature space."""

    def __init__(self, genes):
        symbols = [str(g).strip() for g in genes]
        symbols = [g for g in symbols if g]
        if not symbols:
            raise DataFormatError("gene panel is empty")
        if len(set(symbols)) != len(symbols):
            seen, dup = set(), None
            for g in symbols:
                if g in seen:
                    dup = g
                    break
                seen.add(g)
            raise DataFormatError(f"gene panel lists {dup!r} more than once")
        self.genes = tuple(symbols)
        self._index = {g: i for i, g in enumerate(self.genes)}

    def __len__(self) -> int:
        return len(self.genes)

    def __iter__(self):
        return iter(self.genes)

    def index_of(self, gene: str) -> int:
        return self._index[gene]

    def __contains__(self, gene: str) -> bool:
        return gene in self._index

    def __eq__(self, other):
        return isinstance(other, GenePanel) and self.genes == other.genes


@dataclass(eq=False)
class RawCellTable:
    """cells.csv as parsed: full gene columns, no panel projection yet."""

    cell_ids: list[str]
    cancer_types: dict[str, str]
    columns: list[str]
    values: np.ndarray  # (n_cells, n_columns)


@dataclass(eq=False)
class RawDataset:
    pairs: list[PairRecord]
    drugs: dict[str, DrugRecord]
    cells: RawCellTable
    panel: GenePanel


@dataclass(eq=False)
class Dataset:
    """Post-filter training material: scored pairs plus their drugs/cells."""

    pairs: list[PairRecord]
    drugs: dict[str, DrugRecord]
    cells: dict[str, CellLineRecord]
    panel: GenePanel


def default_gene_panel() -> GenePanel:
    """The curated cancer-pathway panel shipped with the package."""
    text = resources.files("cdrank.assets").joinpath("cancer_gene_panel.txt").read_text()
    return GenePanel(text.splitlines())


def load_gene_panel(path) -> GenePanel:
    lines = Path(path).read_text().splitlines()
    return GenePanel(lines)


def _read_csv_rows(path):
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty") from None
        rows = [(i, row) for i, row in enumerate(reader, start=2)]
    return header, rows


def _parse_optional_float(text: str, what: str, row: int):
    text = text.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"row {row}: {what} {text!r} is not numeric") from None
    if not np.isfinite(value):
        raise DataFormatError(f"row {row}: {what} {text!r} is not finite")
    return value


def parse_pairs(path, audit: list | None = None) -> list[PairRecord]:
    """Parse pairs.csv, rejecting malformed rows into the audit list."""
    header, rows = _read_csv_rows(path)
    if tuple(header) != PAIR_COLUMNS:
        raise DataFormatError(
            f"{path}: expected header {','.join(PAIR_COLUMNS)}, got {','.join(header)}"
        )
    records = []
    for row_no, row in rows:
        try:
            if len(row) != len(PAIR_COLUMNS):
                raise DataFormatError(
                    f"row {row_no}: expected {len(PAIR_COLUMNS)} fields, got {len(row)}"
                )
            drug_id, cell_id = row[0].strip(), row[1].strip()
            if not drug_id or not cell_id:
                raise DataFormatError(f"row {row_no}: empty drug_id or cell_id")
            auc = _parse_optional_float(row[2], "auc", row_no)
            lower = _parse_optional_float(row[3], "lower_limit", row_no)
            ic50 = _parse_optional_float(row[4], "ic50", row_no)
            r2 = _parse_optional_float(row[5], "r_squared", row_no)
            if r2 is not None and not 0.0 <= r2 <= 1.0:
                raise DataFormatError(f"row {row_no}: r_squared {r2} outside [0, 1]")
            records.append(
                PairRecord(drug_id, cell_id, auc, lower, ic50, r2, row[6].strip(), row_no)
            )
        except DataFormatError as exc:
            if audit is None:
                raise
            audit.append(AuditRecord(RULE_UNPARSEABLE, row=row_no, detail=str(exc)))
    return records


def _parse_list_field(text: str) -> frozenset:
    return frozenset(part.strip() for part in text.split(";") if part.strip())


def parse_drugs(path) -> dict[str, DrugRecord]:
    header, rows = _read_csv_rows(path)
    if tuple(header) != DRUG_COLUMNS:
        raise DataFormatError(
            f"{path}: expected header {','.join(DRUG_COLUMNS)}, got {','.join(header)}"
        )
    drugs: dict[str, DrugRecord] = {}
    for row_no, row in rows:
        if len(row) != len(DRUG_COLUMNS):
            raise DataFormatError(
                f"{path} row {row_no}: expected {len(DRUG_COLUMNS)} fields, got {len(row)}"
            )
        drug_id = row[0].strip()
        if not drug_id:
            raise DataFormatError(f"{path} row {row_no}: empty drug_id")
        if drug_id in drugs:
            raise DataFormatError(f"{path} row {row_no}: duplicate drug_id {drug_id!r}")
        bits = row[2].strip()
        if len(bits) != FINGERPRINT_BITS or set(bits) - {"0", "1"}:
            raise DataFormatError(
                f"{path} row {row_no}: fingerprint must be {FINGERPRINT_BITS} chars of 0/1"
            )
        fingerprint = np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")
        withdrawn_text = row[5].strip()
        if withdrawn_text not in ("0", "1"):
            raise DataFormatError(f"{path} row {row_no}: withdrawn must be 0 or 1")
        moa = row[4].strip() or None
        drugs[drug_id] = DrugRecord(
            drug_id=drug_id,
            name=row[1].strip(),
            fingerprint=fingerprint.astype(np.float64),
            gene_targets=_parse_list_field(row[3]),
            moa=moa,
            withdrawn=withdrawn_text == "1",
            indications=_parse_list_field(row[6]),
        )
    return drugs


def parse_cells(path) -> RawCellTable:
    header, rows = _read_csv_rows(path)
    if len(header) < 3 or header[0] != "cell_id" or header[1] != "cancer_type":
        raise DataFormatError(
            f"{path}: expected header cell_id,cancer_type,<genes...>, got {','.join(header[:3])}..."
        )
    columns = [c.strip() for c in header[2:]]
    if len(set(columns)) != len(columns):
        raise DataFormatError(f"{path}: duplicate gene columns")
    cell_ids: list[str] = []
    cancer_types: dict[str, str] = {}
    values = []
    for row_no, row in rows:
        if len(row) != len(header):
            raise DataFormatError(
                f"{path} row {row_no}: expected {len(header)} fields, got {len(row)}"
            )
        cell_id = row[0].strip()
        if not cell_id:
            raise DataFormatError(f"{path} row {row_no}: empty cell_id")
        if cell_id in cancer_types:
            raise DataFormatError(f"{path} row {row_no}: duplicate cell_id {cell_id!r}")
        try:
            expr = np.array([float(v) for v in row[2:]], dtype=np.float64)
        except ValueError:
            raise DataFormatError(
                f"{path} row {row_no}: non-numeric expression value"
            ) from None
        if not np.all(np.isfinite(expr)):
            raise DataFormatError(f"{path} row {row_no}: non-finite expression value")
        if np.any(expr < 0):
            raise DataFormatError(f"{path} row {row_no}: negative expression value")
        cell_ids.append(cell_id)
        cancer_types[cell_id] = row[1].strip()
        values.append(expr)
    matrix = np.vstack(values) if values else np.zeros((0, len(columns)))
    return RawCellTable(cell_ids, cancer_types, columns, matrix)


def parse_dataset(pairs_path, drugs_path, cells_path, panel_path=None, audit=None) -> RawDataset:
    """Load all input files. No filtering; bad pair rows go to the audit."""
    panel = load_gene_panel(panel_path) if panel_path else default_gene_panel()
    return RawDataset(
        pairs=parse_pairs(pairs_path, audit),
        drugs=parse_drugs(drugs_path),
        cells=parse_cells(cells_path),
        panel=panel,
    )


def select_genes(table: RawCellTable, panel: GenePanel) -> np.ndarray:
    """Project the expression table onto the panel's column order."""
    missing = [g for g in panel if g not in table.columns]
    if missing:
        raise DataFormatError(f"panel gene {missing[0]!r} absent from expression table")
    positions = [table.columns.index(g) for g in panel]
    return table.values[:, positions]


def build_cell_records(table: RawCellTable, panel: GenePanel) -> dict[str, CellLineRecord]:
    matrix = select_genes(table, panel)
    return {
        cell_id: CellLineRecord(cell_id, table.cancer_types[cell_id], matrix[i])
        for i, cell_id in enumerate(table.cell_ids)
    }


def _dedup_sort_key(pair: PairRecord):
    # preferred screen first, then highest fit quality, then lexicographic
    # screen id, then input order, all ascending after negation tricks
    return (
        pair.screen_id != PREFERRED_SCREEN,
        -(pair.r_squared if pair.r_squared is not None else -np.inf),
        pair.screen_id,
        pair.row,
    )


def filter_and_dedup_pairs(raw: RawDataset, audit: list | None = None) -> list[PairRecord]:
    """Apply the pair retention rules and collapse repeated measurements.

    Rules, in precedence order (a dropped row is attributed to the first rule
    it trips): missing measurement, non-positive measurement, fit quality
    below 0.7, unknown drug reference, withdrawn drug, duplicate pair.
    Duplicates keep the preferred screen when present, else the highest
    r_squared, ties broken by lexicographically smallest screen_id.
    """
    if audit is None:
        audit = []
    survivors: list[PairRecord] = []
    for pair in raw.pairs:
        measurements = (pair.auc, pair.lower_limit, pair.ic50, pair.r_squared)
        if any(m is None for m in measurements):
            audit.append(
                AuditRecord(
                    RULE_MISSING_MEASUREMENT, pair.row, pair.drug_id, pair.cell_id
                )
            )
            continue
        if pair.auc <= 0 or pair.lower_limit <= 0 or pair.ic50 <= 0:
            audit.append(
                AuditRecord(
                    RULE_NONPOSITIVE_MEASUREMENT,
                    pair.row,
                    pair.drug_id,
                    pair.cell_id,
                    detail="all of auc, lower_limit and ic50 must be > 0 to score",
                )
            )
            continue
        if pair.r_squared < MIN_R_SQUARED:
            audit.append(
                AuditRecord(RULE_LOW_R_SQUARED, pair.row, pair.drug_id, pair.cell_id)
            )
            continue
        drug = raw.drugs.get(pair.drug_id)
        if drug is None:
            audit.append(
                AuditRecord(RULE_UNKNOWN_DRUG, pair.row, pair.drug_id, pair.cell_id)
            )
            continue
        if drug.withdrawn:
            audit.append(
                AuditRecord(RULE_WITHDRAWN_DRUG, pair.row, pair.drug_id, pair.cell_id)
            )
            continue
        survivors.append(pair)

    grouped: dict[tuple[str, str], list[PairRecord]] = {}
    for pair in survivors:
        grouped.setdefault((pair.drug_id, pair.cell_id), []).append(pair)
    kept: list[PairRecord] = []
    for pair in survivors:
        bucket = grouped[(pair.drug_id, pair.cell_id)]
        keeper = min(bucket, key=_dedup_sort_key)
        if pair is keeper:
            kept.append(pair)
        else:
            audit.append(
                AuditRecord(
                    RULE_DUPLICATE_PAIR,
                    pair.row,
                    pair.drug_id,
                    pair.cell_id,
                    detail=f"kept screen {keeper.screen_id}",
                )
            )
    return kept


def score_pairs(pairs: list[PairRecord], log_base: str = "e") -> None:
    """Attach the effective score to every pair in place."""
    from .scoring import effective_score

    for pair in pairs:
        pair.ces = effective_score(pair.auc, pair.lower_limit, pair.ic50, log_base)


def label_pairs(pairs: list[PairRecord], threshold: float) -> None:
    for pair in pairs:
        if pair.ces is None:
            raise ValueError(f"pair {pair.drug_id}/{pair.cell_id} has no score")
        pair.label = int(pair.ces >= threshold)


def filter_cell_lines(
    pairs: list[PairRecord],
    cells: dict[str, CellLineRecord],
    panel: GenePanel,
    drugs: dict[str, DrugRecord],
    gate_threshold: float,
    audit: list | None = None,
) -> Dataset:
    """Drop cell lines that fail the response-rate gate or lack metadata.

    A cell line is retained when at least 1% of its screened drugs score at
    or above `gate_threshold` (exactly 1% passes), its cancer type is known,
    and an expression profile exists. Pairs of dropped cell lines drop with
    them, each audited under the cell's rule.
    """
    if audit is None:
        audit = []
    by_cell: dict[str, list[PairRecord]] = {}
    for pair in pairs:
        if pair.ces is None:
            raise ValueError("pairs must be scored before the cell line gate")
        by_cell.setdefault(pair.cell_id, []).append(pair)

    kept_cells: dict[str, CellLineRecord] = {}
    dropped_rule: dict[str, str] = {}
    for cell_id in sorted(by_cell):
        record = cells.get(cell_id)
        if record is None:
            dropped_rule[cell_id] = RULE_CELL_NO_EXPRESSION
            continue
        if record.cancer_type in UNKNOWN_CANCER_LABELS:
            dropped_rule[cell_id] = RULE_CELL_UNKNOWN_CANCER
            continue
        cell_pairs = by_cell[cell_id]
        effective = sum(1 for p in cell_pairs if p.ces >= gate_threshold)
        fraction = effective / len(cell_pairs)
        if fraction < MIN_EFFECTIVE_FRACTION:
            dropped_rule[cell_id] = RULE_CELL_LOW_EFFECTIVE
            continue
        kept_cells[cell_id] = record

    for cell_id, rule in sorted(dropped_rule.items()):
        audit.append(AuditRecord(rule, cell_id=cell_id))
        for pair in by_cell[cell_id]:
            audit.append(AuditRecord(rule, pair.row, pair.drug_id, pair.cell_id))

    kept_pairs = [p for p in pairs if p.cell_id in kept_cells]
    kept_drugs = {
        drug_id: drugs[drug_id]
        for drug_id in sorted({p.drug_id for p in kept_pairs})
    }
    return Dataset(kept_pairs, kept_drugs, kept_cells, panel)


def pretraining_cell_pool(
    table: RawCellTable,
    panel: GenePanel,
    cdr_cell_ids,
    min_cancer_count: int = 10,
) -> dict[str, CellLineRecord]:
    """Cell lines available for encoder pretraining.

    Excludes cell lines that are part of the response dataset, have an
    unknown cancer type, or whose cancer type covers fewer than
    `min_cancer_count` expression profiles overall.
    """
    cdr = set(cdr_cell_ids)
    counts: dict[str, int] = {}
    for cell_id in table.cell_ids:
        counts[table.cancer_types[cell_id]] = counts.get(table.cancer_types[cell_id], 0) + 1
    records = build_cell_records(table, panel)
    pool = {}
    for cell_id in table.cell_ids:
        cancer = table.cancer_types[cell_id]
        if cell_id in cdr or cancer in UNKNOWN_CANCER_LABELS:
            continue
        if counts[cancer] < min_cancer_count:
            continue
        pool[cell_id] = records[cell_id]
    return pool


@dataclass(frozen=True)
class SplitPlan:
    """Cell-line level evaluation plan: two test sets plus training folds."""

    seed: int
    novel_test: tuple
    trained_on_test: tuple
    folds: tuple
    notes: tuple = ()

    def all_cells(self) -> set:
        out = set(self.novel_test) | set(self.trained_on_test)
        for fold in self.folds:
            out |= set(fold)
        return out

    def fold_union(self) -> tuple:
        return tuple(sorted(cell for fold in self.folds for cell in fold))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "novel_test": list(self.novel_test),
            "trained_on_test": list(self.trained_on_test),
            "folds": [list(f) for f in self.folds],
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SplitPlan":
        return cls(
            seed=int(payload["seed"]),
            novel_test=tuple(payload["novel_test"]),
            trained_on_test=tuple(payload["trained_on_test"]),
            folds=tuple(tuple(f) for f in payload["folds"]),
            notes=tuple(payload.get("notes", ())),
        )


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_splits(
    dataset: Dataset,
    seed: int = 0,
    n_folds: int = 5,
    test_fraction: float = 0.15,
    novel_threshold: int = 15,
) -> SplitPlan:
    """Plan evaluation splits over the dataset's cell lines.

    Cancers with fewer than `novel_threshold` cell lines go entirely to the
    novel test set. For the rest, round(test_fraction * n) cell lines per
    cancer (half up, at least 1 when the cancer has 2 or more) form the
    trained-on test set; the remainder is dealt round-robin into `n_folds`
    folds after a seeded shuffle, keeping per-cancer fold sizes within 1.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    by_cancer: dict[str, list[str]] = {}
    for cell_id in sorted(dataset.cells):
        by_cancer.setdefault(dataset.cells[cell_id].cancer_type, []).append(cell_id)

    rng = as_rng(seed)
    novel: list[str] = []
    trained_test: list[str] = []
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    notes: list[str] = []
    cursor = 0  # round-robin position carried across cancers for balance
    for cancer in sorted(by_cancer):
        members = by_cancer[cancer]
        if len(members) < novel_threshold:
            novel.extend(members)
            continue
        shuffled = [members[i] for i in rng.permutation(len(members))]
        quota = _round_half_up(test_fraction * len(members))
        if len(members) >= 2:
            quota = max(1, quota)
        quota = min(quota, len(members) - 1)
        trained_test.extend(shuffled[:quota])
        remainder = shuffled[quota:]
        if len(remainder) == 1:
            notes.append(
                f"cancer {cancer!r} contributes a single training cell line; "
                "it goes to a fold rather than the test set"
            )
        for cell_id in remainder:
            folds[cursor % n_folds].append(cell_id)
            cursor += 1
    return SplitPlan(
        seed=int(seed),
        novel_test=tuple(sorted(novel)),
        trained_on_test=tuple(sorted(trained_test)),
        folds=tuple(tuple(sorted(f)) for f in folds),
        notes=tuple(notes),
    )
