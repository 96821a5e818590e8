"""Batch front door for the drug-response ranking pipeline.

Four seeded, config-driven subcommands cover the full workflow::

    cdr ingest      --config run.json            # parse, filter, score, split
    cdr pretrain    --config run.json --role both
    cdr train-eval  --config run.json [--grid]
    cdr analyze <sub> --config run.json          # fda-priority, gene-correlation,
                                                 # expressiveness, tsne,
                                                 # feature-importance

Commands communicate through files in the output directory, so each step can
be rerun or inspected independently. Every artifact is written with stable
ordering and full-precision floats: identical config plus seed gives
identical bytes. Exit codes: 0 success, 1 numerical failure, 2 config or
input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .classifiers import (
    DnnScorer,
    LogisticScorer,
    RandomForestScorer,
    feature_importance,
)
from .contrastive import EncoderSpec, embed
from .data import (
    DRUG_COLUMNS,
    PAIR_COLUMNS,
    GenePanel,
    SplitPlan,
    build_cell_records,
    filter_and_dedup_pairs,
    filter_cell_lines,
    label_pairs,
    make_splits,
    parse_cells,
    parse_dataset,
    parse_drugs,
    parse_pairs,
    pretraining_cell_pool,
    score_pairs,
)
from .errors import ConfigError, DataFormatError, NumericalError
from .evaluation import (
    DEFAULT_P_GATE,
    DEFAULT_RHO_GATE,
    Ranking,
    fda_priority_analysis,
    priority_correlation_screen,
    ttest_bonferroni,
)
from .expressiveness import EmbeddingSet, group_similarities, separability, tsne_embed
from .neural import TrainConfig, model_from_dict, model_to_dict
from .pipeline import (
    CELL_EXPRESSION,
    DEFAULT_TOP_KS,
    DRUG_FINGERPRINT,
    Variant,
    build_features,
    compare_variants,
    default_classifier_grid,
    effective_sets,
    grid_search,
    pretrain_cell_autoencoder,
    pretrain_cell_encoder,
    pretrain_drug_encoder,
    rankings_from_scores,
    train_final_and_evaluate,
)
from .scoring import DEFAULT_GATE_THRESHOLD, LOG_BASES, score_threshold

_SCORER_KINDS = {"logistic": LogisticScorer, "forest": RandomForestScorer, "dnn": DnnScorer}

_GROUP_RULES = ("overlap", "exact")
_ANALYZE_ROLES = ("cell", "drug")

# Figure-style group-size floors for the embedding diagnostics.
_MIN_GROUP_CELLS = 15
_MIN_GROUP_DRUGS = 10


# ------------------------------------------------------------------ writers


def _float_text(value) -> str:
    return repr(float(value))


def _json_text(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _write_json(path: Path, payload) -> Path:
    return _write_text(path, _json_text(payload))


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _train_report_dict(report) -> dict:
    best = report.best_val_loss
    return {
        "epochs_run": report.epochs_run,
        "best_epoch": report.best_epoch,
        "best_val_loss": float(best) if np.isfinite(best) else None,
        "stopped_early": report.stopped_early,
        "train_curve": [float(v) for v in report.train_curve],
        "val_curve": [float(v) for v in report.val_curve],
    }


def thread_cap() -> int:
    """Worker ceiling from CDR_THREADS; every kernel here is single-threaded,
    so the cap is recorded and honored trivially."""
    raw = os.environ.get("CDR_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"CDR_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"CDR_THREADS must be >= 1, got {cap}")
    return cap


# ------------------------------------------------------------------- config


_TOP_LEVEL_KEYS = {
    "paths",
    "out_dir",
    "seed",
    "log_base",
    "group_rule",
    "gate_threshold",
    "variant",
    "classifier_params",
    "encoder",
    "autoencoder",
    "splits",
    "top_ks",
    "cross_validate",
    "analyze",
    "grid",
}

_ANALYZE_DEFAULTS = {
    "role": "cell",
    "perplexity": 30.0,
    "n_iters": 1000,
    "min_group_size": None,
    "drug": None,
    "cancer": None,
    "rho": DEFAULT_RHO_GATE,
    "p": DEFAULT_P_GATE,
}


class RunConfig:
    """Validated, fully-resolved run settings plus a JSON-ready echo."""

    def __init__(self, **kw):
        self.__dict__.update(kw)


def _train_config(section: dict, seed: int, defaults: dict | None = None) -> TrainConfig:
    allowed = {f.name for f in fields(TrainConfig)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
    merged = dict(defaults or {})
    merged.update(section)
    merged.setdefault("seed", seed)
    return TrainConfig(**merged)


def _encoder_spec(section: dict) -> EncoderSpec:
    allowed = {"hidden_dims", "activation", "dropout_rate", "pairs_per_epoch", "val_fraction"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown encoder keys: {', '.join(sorted(unknown))}")
    kw = dict(section)
    if "hidden_dims" in kw:
        kw["hidden_dims"] = tuple(int(d) for d in kw["hidden_dims"])
    try:
        return EncoderSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _resolve(base: Path, value) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_run_config(config_path, seed=None, out=None) -> RunConfig:
    """Read and validate a run config; CLI --seed/--out take precedence."""
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigError(f"config file {config_path} does not exist")
    try:
        raw = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path}: top level must be a JSON object")
    unknown = set(raw) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"{config_path}: unknown keys: {', '.join(sorted(unknown))}")

    base = config_path.parent
    paths = raw.get("paths")
    if not isinstance(paths, dict):
        raise ConfigError(f"{config_path}: a 'paths' object is required")
    unknown = set(paths) - {"pairs", "drugs", "cells", "genes"}
    if unknown:
        raise ConfigError(f"{config_path}: unknown path keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for key in ("pairs", "drugs", "cells"):
        if key not in paths:
            raise ConfigError(f"{config_path}: paths.{key} is required")
        resolved[key] = _resolve(base, paths[key])
    resolved["genes"] = _resolve(base, paths["genes"]) if paths.get("genes") else None
    for key, path in resolved.items():
        if path is not None and not path.exists():
            raise ConfigError(f"paths.{key}: {path} does not exist")

    run_seed = int(raw.get("seed", 0)) if seed is None else int(seed)
    out_dir = Path(out) if out is not None else _resolve(base, raw.get("out_dir", "cdr_out"))

    log_base = str(raw.get("log_base", "e"))
    if log_base not in LOG_BASES:
        raise ConfigError(f"log_base must be one of {LOG_BASES}, got {log_base!r}")
    group_rule = str(raw.get("group_rule", "overlap"))
    if group_rule not in _GROUP_RULES:
        raise ConfigError(f"group_rule must be one of {_GROUP_RULES}, got {group_rule!r}")

    variant_raw = raw.get("variant", "f,g,rf")
    if isinstance(variant_raw, dict):
        unknown = set(variant_raw) - {"drug_repr", "cell_repr", "classifier"}
        if unknown:
            raise ConfigError(f"unknown variant keys: {', '.join(sorted(unknown))}")
        try:
            variant = Variant(**variant_raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    else:
        variant = Variant.parse(str(variant_raw))

    encoder_section = dict(raw.get("encoder", {}))
    encoder_train = _train_config(encoder_section.pop("train", {}), run_seed)
    encoder_spec = _encoder_spec(encoder_section)

    auto_section = dict(raw.get("autoencoder", {}))
    auto_train = _train_config(auto_section.pop("train", {}), run_seed, {"loss": "mse"})
    unknown = set(auto_section) - {"hidden_dims", "activation", "dropout_rate"}
    if unknown:
        raise ConfigError(f"unknown autoencoder keys: {', '.join(sorted(unknown))}")
    auto_dims = tuple(int(d) for d in auto_section.get("hidden_dims", (64, 16)))
    auto_activation = str(auto_section.get("activation", "relu"))
    auto_dropout = float(auto_section.get("dropout_rate", 0.0))

    splits = dict(raw.get("splits", {}))
    unknown = set(splits) - {"n_folds", "test_fraction", "novel_threshold"}
    if unknown:
        raise ConfigError(f"unknown split keys: {', '.join(sorted(unknown))}")
    n_folds = int(splits.get("n_folds", 5))
    test_fraction = float(splits.get("test_fraction", 0.15))
    novel_threshold = int(splits.get("novel_threshold", 15))

    top_ks = tuple(int(k) for k in raw.get("top_ks", DEFAULT_TOP_KS))
    if not top_ks or any(k < 1 for k in top_ks):
        raise ConfigError("top_ks must be a non-empty list of positive integers")

    analyze = dict(_ANALYZE_DEFAULTS)
    extra = dict(raw.get("analyze", {}))
    unknown = set(extra) - set(_ANALYZE_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown analyze keys: {', '.join(sorted(unknown))}")
    analyze.update(extra)
    if analyze["role"] not in _ANALYZE_ROLES:
        raise ConfigError(f"analyze.role must be one of {_ANALYZE_ROLES}")

    grid = dict(raw.get("grid", {}))
    unknown = set(grid) - {"metric", "k", "params"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {', '.join(sorted(unknown))}")

    echo = {
        "paths": {k: (str(v) if v is not None else None) for k, v in resolved.items()},
        "out_dir": str(out_dir),
        "seed": run_seed,
        "log_base": log_base,
        "group_rule": group_rule,
        "gate_threshold": float(raw.get("gate_threshold", DEFAULT_GATE_THRESHOLD)),
        "variant": str(variant),
        "classifier_params": dict(raw.get("classifier_params", {})),
        "encoder": {**asdict(encoder_spec), "train": asdict(encoder_train)},
        "autoencoder": {
            "hidden_dims": list(auto_dims),
            "activation": auto_activation,
            "dropout_rate": auto_dropout,
            "train": asdict(auto_train),
        },
        "splits": {
            "n_folds": n_folds,
            "test_fraction": test_fraction,
            "novel_threshold": novel_threshold,
        },
        "top_ks": list(top_ks),
        "cross_validate": bool(raw.get("cross_validate", True)),
        "analyze": analyze,
        "grid": grid,
    }
    echo["encoder"]["hidden_dims"] = list(encoder_spec.hidden_dims)

    return RunConfig(
        pairs=resolved["pairs"],
        drugs=resolved["drugs"],
        cells=resolved["cells"],
        genes=resolved["genes"],
        out_dir=out_dir,
        seed=run_seed,
        log_base=log_base,
        group_rule=group_rule,
        gate_threshold=echo["gate_threshold"],
        variant=variant,
        classifier_params=echo["classifier_params"],
        encoder_spec=encoder_spec,
        encoder_train=encoder_train,
        autoencoder_dims=auto_dims,
        autoencoder_activation=auto_activation,
        autoencoder_dropout=auto_dropout,
        autoencoder_train=auto_train,
        n_folds=n_folds,
        test_fraction=test_fraction,
        novel_threshold=novel_threshold,
        top_ks=top_ks,
        cross_validate=echo["cross_validate"],
        analyze=analyze,
        grid=grid,
        echo=echo,
    )


def _metadata(command: str, config: RunConfig, artifacts: list, **extra) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "thread_cap": thread_cap(),
        "artifacts": sorted(p.name for p in artifacts),
        "config": config.echo,
        **extra,
    }


def _artifact(config: RunConfig, name: str, hint: str) -> Path:
    path = config.out_dir / name
    if not path.exists():
        raise ConfigError(f"{path} is missing; {hint}")
    return path


# ------------------------------------------------------------------- ingest


def cmd_ingest(config: RunConfig) -> list:
    """Parse, filter, score, label, and split the raw inputs."""
    audit: list = []
    raw = parse_dataset(config.pairs, config.drugs, config.cells, config.genes, audit)
    pairs = filter_and_dedup_pairs(raw, audit)
    score_pairs(pairs, config.log_base)
    label_pairs(pairs, config.gate_threshold)
    cell_records = build_cell_records(raw.cells, raw.panel)
    dataset = filter_cell_lines(
        pairs, cell_records, raw.panel, raw.drugs, config.gate_threshold, audit
    )
    pool = pretraining_cell_pool(raw.cells, raw.panel, dataset.cells)
    plan = make_splits(
        dataset,
        seed=config.seed,
        n_folds=config.n_folds,
        test_fraction=config.test_fraction,
        novel_threshold=config.novel_threshold,
    )
    spec = score_threshold([p.ces for p in dataset.pairs], config.log_base)

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    artifacts.append(_write_csv(
        out / "filtered_pairs.csv",
        PAIR_COLUMNS,
        (
            (
                p.drug_id, p.cell_id, _float_text(p.auc), _float_text(p.lower_limit),
                _float_text(p.ic50), _float_text(p.r_squared), p.screen_id,
            )
            for p in dataset.pairs
        ),
    ))
    artifacts.append(_write_csv(
        out / "scored_pairs.csv",
        ("drug_id", "cell_id", "ces", "label"),
        ((p.drug_id, p.cell_id, _float_text(p.ces), str(p.label)) for p in dataset.pairs),
    ))
    artifacts.append(_write_csv(
        out / "filtered_drugs.csv",
        DRUG_COLUMNS,
        (
            (
                rec.drug_id,
                rec.name,
                "".join(str(int(b)) for b in rec.fingerprint),
                ";".join(sorted(rec.gene_targets)),
                rec.moa or "",
                "1" if rec.withdrawn else "0",
                ";".join(sorted(rec.indications)),
            )
            for rec in dataset.drugs.values()
        ),
    ))
    # CDR cells and the pretraining pool share one table; splits.json says
    # which are CDR, so a rerun over these outputs reproduces both sets.
    combined = {**dataset.cells, **pool}
    artifacts.append(_write_csv(
        out / "filtered_cells.csv",
        ("cell_id", "cancer_type", *raw.panel),
        (
            (
                cell_id,
                combined[cell_id].cancer_type,
                *(_float_text(v) for v in combined[cell_id].expression),
            )
            for cell_id in sorted(combined)
        ),
    ))
    artifacts.append(_write_text(out / "gene_panel.txt", "\n".join(raw.panel) + "\n"))
    artifacts.append(_write_text(out / "threshold.json", spec.to_json()))
    artifacts.append(_write_json(out / "splits.json", plan.to_dict()))
    artifacts.append(_write_text(
        out / "audit.jsonl",
        "".join(record.to_json_line() + "\n" for record in audit),
    ))

    dropped: dict = {}
    for record in audit:
        dropped[record.rule] = dropped.get(record.rule, 0) + 1
    counts = {
        "input_pairs": len(raw.pairs),
        "retained_pairs": len(dataset.pairs),
        "retained_drugs": len(dataset.drugs),
        "cdr_cells": len(dataset.cells),
        "pool_cells": len(pool),
        "dropped": dropped,
    }
    artifacts.append(_write_json(
        out / "ingest_metadata.json",
        _metadata("ingest", config, artifacts, counts=counts),
    ))
    return artifacts


# ----------------------------------------------------------------- pretrain


def _load_ingest_cells(config: RunConfig):
    cells_path = _artifact(config, "filtered_cells.csv", "run `cdr ingest` first")
    table = parse_cells(cells_path)
    panel = GenePanel(table.columns)
    return table, panel, build_cell_records(table, panel)


def _load_split_plan(config: RunConfig) -> SplitPlan:
    path = _artifact(config, "splits.json", "run `cdr ingest` first")
    return SplitPlan.from_dict(json.loads(path.read_text()))


def cmd_pretrain(config: RunConfig, role: str = "both") -> list:
    """Train the requested encoders and snapshot them as JSON."""
    roles = {
        "drug": ("drug",),
        "cell": ("cell",),
        "both": ("drug", "cell"),
        "autoencoder": ("autoencoder",),
        "all": ("drug", "cell", "autoencoder"),
    }.get(role)
    if roles is None:
        raise ConfigError(f"unknown pretraining role {role!r}")

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    reports = {}

    pool = None
    if "cell" in roles or "autoencoder" in roles:
        table, panel, _ = _load_ingest_cells(config)
        plan = _load_split_plan(config)
        pool = pretraining_cell_pool(table, panel, plan.all_cells())
        if not pool:
            raise ConfigError(
                "no pretraining cell pool: every usable cell line is part of "
                "the response dataset"
            )

    if "drug" in roles:
        drugs = parse_drugs(_artifact(config, "filtered_drugs.csv", "run `cdr ingest` first"))
        model, report = pretrain_drug_encoder(
            drugs, config.encoder_spec, config.encoder_train, rule=config.group_rule
        )
        reports["drug"] = _train_report_dict(report)
        artifacts.append(_write_json(out / "encoder_drug.json", {
            "role": "drug",
            "grouping": config.group_rule,
            "model": model_to_dict(model, seed=config.encoder_train.seed,
                                   config=asdict(config.encoder_train)),
            "report": reports["drug"],
        }))

    if "cell" in roles:
        model, report = pretrain_cell_encoder(pool, config.encoder_spec, config.encoder_train)
        reports["cell"] = _train_report_dict(report)
        artifacts.append(_write_json(out / "encoder_cell.json", {
            "role": "cell",
            "grouping": "cancer_type",
            "model": model_to_dict(model, seed=config.encoder_train.seed,
                                   config=asdict(config.encoder_train)),
            "report": reports["cell"],
        }))

    if "autoencoder" in roles:
        model, report = pretrain_cell_autoencoder(
            pool,
            hidden_dims=config.autoencoder_dims,
            activation=config.autoencoder_activation,
            dropout_rate=config.autoencoder_dropout,
            config=config.autoencoder_train,
        )
        reports["autoencoder"] = _train_report_dict(report)
        artifacts.append(_write_json(out / "autoencoder.json", {
            "role": "cell_autoencoder",
            "model": model_to_dict(model, seed=config.autoencoder_train.seed,
                                   config=asdict(config.autoencoder_train)),
            "report": reports["autoencoder"],
        }))

    artifacts.append(_write_json(
        out / "pretrain_metadata.json",
        _metadata("pretrain", config, artifacts, role=role,
                  pool_cells=0 if pool is None else len(pool)),
    ))
    return artifacts


# --------------------------------------------------------------- train-eval


def _load_encoder(config: RunConfig, name: str, role_flag: str):
    path = config.out_dir / name
    if not path.exists():
        raise ConfigError(
            f"{path} is missing but the variant needs it; "
            f"run `cdr pretrain --role {role_flag}` first"
        )
    return model_from_dict(json.loads(path.read_text())["model"])


def _load_labeled_pairs(config: RunConfig):
    pairs = parse_pairs(_artifact(config, "filtered_pairs.csv", "run `cdr ingest` first"))
    score_pairs(pairs, config.log_base)
    label_pairs(pairs, config.gate_threshold)
    return pairs


def _build_variant_table(config: RunConfig, variant: Variant, pairs, drugs, records):
    drug_model = _load_encoder(config, "encoder_drug.json", "drug") \
        if variant.needs_drug_encoder else None
    cell_model = _load_encoder(config, "encoder_cell.json", "cell") \
        if variant.needs_cell_encoder else None
    return build_features(pairs, drugs, records, variant,
                          drug_model=drug_model, cell_model=cell_model)


_STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


def _stars(p: float) -> str:
    for cutoff, mark in _STAR_LEVELS:
        if p < cutoff:
            return mark
    return "ns"


def _ranking_rows(model, table, plan) -> list:
    rows = []
    for cells in (plan.trained_on_test, plan.novel_test):
        mask = table.rows_for_cells(cells)
        idx = np.nonzero(mask)[0]
        if idx.size == 0:
            continue
        scores = model.predict_proba(table.X[idx])
        keys = [table.pair_keys[i] for i in idx]
        for cell_id, ranking in rankings_from_scores(keys, scores).items():
            for rank, (drug_id, score) in enumerate(ranking.entries, start=1):
                rows.append((cell_id, drug_id, score, rank))
    rows.sort(key=lambda r: (r[0], r[3]))
    return rows


def cmd_train_eval(config: RunConfig, grid: bool = False) -> list:
    """Cross-validate, fit the final model, and score both test sets."""
    pairs = _load_labeled_pairs(config)
    drugs = parse_drugs(_artifact(config, "filtered_drugs.csv", "run `cdr ingest` first"))
    table_cells, _, records = _load_ingest_cells(config)
    plan = _load_split_plan(config)
    effective = effective_sets(pairs)
    cancer_of = dict(table_cells.cancer_types)
    variant = config.variant
    params = dict(config.classifier_params)

    feat = _build_variant_table(config, variant, pairs, drugs, records)

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    grid_best = None
    if grid:
        space = config.grid.get("params") or default_classifier_grid(variant.classifier)
        rows = grid_search(
            lambda p: feat,
            plan,
            effective,
            cancer_of,
            variant,
            space,
            metric=config.grid.get("metric", "cell"),
            k=int(config.grid.get("k", 5)),
            seed=config.seed,
            ks=config.top_ks,
        )
        artifacts.append(_write_csv(
            out / "grid_report.csv",
            ("index", "variant", "params", "metric", "folds"),
            (tuple(str(v) for v in row.to_record().values()) for row in rows),
        ))
        grid_best = rows[0]
        params = {
            k: v for k, v in grid_best.params.items() if not k.startswith("encoder_")
        }

    run = train_final_and_evaluate(
        feat, plan, effective, cancer_of, variant, params,
        seed=config.seed, ks=config.top_ks, with_cv=config.cross_validate,
    )

    artifacts.append(_write_json(out / "model.json", {
        "variant": str(variant),
        "classifier": variant.classifier,
        "params": params,
        "model": run.model.to_dict(),
    }))
    artifacts.append(_write_csv(
        out / "rankings.csv",
        ("cell_id", "drug_id", "score", "rank"),
        (
            (cell_id, drug_id, _float_text(score), str(rank))
            for cell_id, drug_id, score, rank in _ranking_rows(run.model, feat, plan)
        ),
    ))
    artifacts.append(_write_json(out / "metrics.json", {
        "variant": str(variant),
        "trained_on": run.trained_on.to_dict() if run.trained_on else None,
        "novel": run.novel.to_dict() if run.novel else None,
        "cv": [
            {"fold": fr.fold_index, "metrics": fr.summary.to_dict()}
            for fr in run.fold_results
        ],
    }))

    # Significance of the chosen variant against the no-encoder baseline,
    # from per-fold mean per-cell precision at each cutoff.
    stats_rows = []
    vanilla = Variant(DRUG_FINGERPRINT, CELL_EXPRESSION, variant.classifier)
    if config.cross_validate and variant != vanilla:
        base_feat = build_features(pairs, drugs, records, vanilla)
        base_run = train_final_and_evaluate(
            base_feat, plan, effective, cancer_of, vanilla, params,
            seed=config.seed, ks=config.top_ks, with_cv=True,
        )
        for k in config.top_ks:
            res = compare_variants(
                run.fold_results, base_run.fold_results, "cell", k,
                n_tests=len(config.top_ks),
            )
            stats_rows.append((
                str(variant), str(vanilla), "cell", str(k),
                _float_text(res.t_stat), _float_text(res.df),
                _float_text(res.p), _float_text(res.p_adjusted),
                _stars(res.p_adjusted),
            ))
    artifacts.append(_write_csv(
        out / "stats.csv",
        ("variant_a", "variant_b", "metric", "k", "t", "df", "p", "p_adj", "stars"),
        stats_rows,
    ))

    extra = {}
    if grid_best is not None:
        extra["grid_best"] = grid_best.to_record()
    artifacts.append(_write_json(
        out / "train_eval_metadata.json",
        _metadata("train-eval", config, artifacts, grid=grid, **extra),
    ))
    return artifacts


# ------------------------------------------------------------------ analyze


def _read_rankings(config: RunConfig) -> dict:
    """rankings.csv back as Ranking objects, one per cell line."""
    path = _artifact(config, "rankings.csv", "run `cdr train-eval` first")
    entries: dict = {}
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["cell_id", "drug_id", "score", "rank"]:
            raise DataFormatError(f"{path}: unexpected header {header}")
        for row in reader:
            entries.setdefault(row[0], []).append((row[1], float(row[2])))
    if not entries:
        raise DataFormatError(f"{path}: no ranked pairs")
    return {
        cell: Ranking(cell_id=cell, entries=tuple(rows))
        for cell, rows in entries.items()
    }


def cmd_analyze_fda(config: RunConfig) -> list:
    rankings = _read_rankings(config)
    drugs = parse_drugs(_artifact(config, "filtered_drugs.csv", "run `cdr ingest` first"))
    table, _, _ = _load_ingest_cells(config)
    report = fda_priority_analysis(
        rankings,
        {drug_id: rec.indications for drug_id, rec in drugs.items()},
        dict(table.cancer_types),
    )
    out = config.out_dir
    artifacts = [
        _write_csv(
            out / "fda_priority.csv",
            ("cancer_type", "n_cells", "mean_rank", "mean_best_rank",
             "top_drug", "top_drug_share", "top_drug_rank_std"),
            (
                (
                    c.cancer_type, str(c.n_cells), _float_text(c.mean_rank),
                    _float_text(c.mean_best_rank), c.top_drug,
                    _float_text(c.top_drug_share), _float_text(c.top_drug_rank_std),
                )
                for c in report.per_cancer
            ),
        ),
        _write_json(out / "fda_priority.json", report.to_dict()),
    ]
    artifacts.append(_write_json(
        out / "fda_priority_metadata.json",
        _metadata("analyze fda-priority", config, artifacts,
                  n_cells=len(report.per_cell),
                  excluded_cells=list(report.excluded_cells)),
    ))
    return artifacts


def cmd_analyze_gene_correlation(config: RunConfig) -> list:
    drug = config.analyze.get("drug")
    cancer = config.analyze.get("cancer")
    if not drug:
        raise ConfigError("gene-correlation needs a drug (--drug or analyze.drug)")
    if not cancer:
        raise ConfigError("gene-correlation needs a cancer type (--cancer or analyze.cancer)")
    rankings = _read_rankings(config)
    table, panel, records = _load_ingest_cells(config)
    cells = sorted(
        c for c in rankings if table.cancer_types.get(c) == cancer
    )
    if not cells:
        raise ConfigError(f"no ranked cell lines with cancer type {cancer!r}")
    ranks = []
    for cell_id in cells:
        try:
            ranks.append(rankings[cell_id].rank_of(drug))
        except ValueError:
            raise ConfigError(
                f"drug {drug!r} is not ranked for cell line {cell_id!r}"
            ) from None
    matrix = np.vstack([records[c].expression for c in cells])
    hits, skipped = priority_correlation_screen(
        ranks, matrix, list(panel),
        rho_min=float(config.analyze["rho"]), p_max=float(config.analyze["p"]),
    )
    out = config.out_dir
    artifacts = [_write_csv(
        out / "gene_correlation.csv",
        ("gene", "rho", "p"),
        ((h.gene, _float_text(h.rho), _float_text(h.p)) for h in hits),
    )]
    artifacts.append(_write_json(
        out / "gene_correlation_metadata.json",
        _metadata("analyze gene-correlation", config, artifacts,
                  drug=drug, cancer=cancer, n_cells=len(cells),
                  n_hits=len(hits), skipped_genes=skipped),
    ))
    return artifacts


def _embedding_inputs(config: RunConfig, role: str):
    """(ids, group labels, raw matrix, encoder) for a diagnostics role."""
    if role == "cell":
        table, panel, records = _load_ingest_cells(config)
        ids = list(table.cell_ids)
        groups = [table.cancer_types[c] for c in ids]
        matrix = np.vstack([records[c].expression for c in ids])
        encoder = _load_encoder(config, "encoder_cell.json", "cell")
        return ids, groups, matrix, encoder
    drugs = parse_drugs(_artifact(config, "filtered_drugs.csv", "run `cdr ingest` first"))
    with_moa = [rec for rec in drugs.values() if rec.moa]
    if not with_moa:
        raise ConfigError("no drugs carry a mechanism-of-action label")
    ids = [rec.drug_id for rec in with_moa]
    groups = [rec.moa for rec in with_moa]
    matrix = np.vstack([rec.fingerprint for rec in with_moa])
    encoder = _load_encoder(config, "encoder_drug.json", "drug")
    return ids, groups, matrix, encoder


def _min_group_size(config: RunConfig, role: str) -> int:
    configured = config.analyze.get("min_group_size")
    if configured is not None:
        return int(configured)
    return _MIN_GROUP_CELLS if role == "cell" else _MIN_GROUP_DRUGS


def cmd_analyze_expressiveness(config: RunConfig) -> list:
    role = config.analyze["role"]
    ids, groups, matrix, encoder = _embedding_inputs(config, role)
    raw_set = EmbeddingSet(tuple(ids), tuple(groups), matrix).filter_min_size(
        _min_group_size(config, role)
    )
    emb_set = EmbeddingSet(raw_set.ids, raw_set.groups, embed(encoder, raw_set.matrix))

    raw_sep = separability(raw_set)
    emb_sep = separability(emb_set)
    raw_report = {
        "similarity": group_similarities(raw_set).to_dict(),
        "separability": raw_sep.to_dict(),
    }
    emb_report = {
        "similarity": group_similarities(emb_set).to_dict(),
        "separability": emb_sep.to_dict(),
    }
    raw_ratios = {g.group: g.ratio for g in raw_sep.per_group}
    emb_ratios = {g.group: g.ratio for g in emb_sep.per_group}
    shared = sorted(set(raw_ratios) & set(emb_ratios))
    comparison = None
    if len(shared) >= 2:
        res = ttest_bonferroni(
            [emb_ratios[g] for g in shared], [raw_ratios[g] for g in shared], n_tests=1
        )
        comparison = {
            "groups": shared,
            "t": res.t_stat,
            "df": res.df,
            "p": res.p,
            "p_adjusted": res.p_adjusted,
            "test": "two_sample_t_bonferroni",
        }

    out = config.out_dir
    artifacts = [_write_json(out / "expressiveness.json", {
        "role": role,
        "min_group_size": _min_group_size(config, role),
        "raw": raw_report,
        "embedded": emb_report,
        "comparison": comparison,
    })]
    artifacts.append(_write_json(
        out / "expressiveness_metadata.json",
        _metadata("analyze expressiveness", config, artifacts,
                  role=role, n_items=len(raw_set)),
    ))
    return artifacts


_SVG_PALETTE = (
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a",
    "#66a61e", "#e6ab02", "#a6761d", "#666666",
)
_SVG_SHAPES = ("circle", "square", "triangle", "diamond")


def _svg_marker(shape: str, x: float, y: float, color: str, size: float = 4.0) -> str:
    if shape == "circle":
        return f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{size:.3f}" fill="{color}"/>'
    if shape == "square":
        half = size
        return (
            f'<rect x="{x - half:.3f}" y="{y - half:.3f}" '
            f'width="{2 * half:.3f}" height="{2 * half:.3f}" fill="{color}"/>'
        )
    if shape == "triangle":
        points = f"{x:.3f},{y - size:.3f} {x - size:.3f},{y + size:.3f} {x + size:.3f},{y + size:.3f}"
    else:  # diamond
        points = (
            f"{x:.3f},{y - size:.3f} {x + size:.3f},{y:.3f} "
            f"{x:.3f},{y + size:.3f} {x - size:.3f},{y:.3f}"
        )
    return f'<polygon points="{points}" fill="{color}"/>'


def _svg_scatter(coords: np.ndarray, groups, title: str) -> str:
    width, height, margin = 640.0, 480.0, 48.0
    xs, ys = coords[:, 0], coords[:, 1]
    span_x = max(float(xs.max() - xs.min()), 1e-12)
    span_y = max(float(ys.max() - ys.min()), 1e-12)

    def sx(v):
        return margin + (float(v) - float(xs.min())) / span_x * (width - 2 * margin)

    def sy(v):
        # SVG y grows downward; flip so larger coordinates plot higher.
        return height - margin - (float(v) - float(ys.min())) / span_y * (height - 2 * margin)

    ordered = sorted(set(groups))
    style_of = {
        g: (_SVG_PALETTE[i % len(_SVG_PALETTE)], _SVG_SHAPES[i % len(_SVG_SHAPES)])
        for i, g in enumerate(ordered)
    }
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
        f'<text x="{margin:.0f}" y="24" font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for (x, y), group in zip(coords, groups):
        color, shape = style_of[group]
        parts.append(_svg_marker(shape, sx(x), sy(y), color))
    for i, group in enumerate(ordered):
        color, shape = style_of[group]
        ly = margin + 16.0 * i
        parts.append(_svg_marker(shape, width - margin - 110.0, ly, color))
        parts.append(
            f'<text x="{width - margin - 100.0:.3f}" y="{ly + 4.0:.3f}" '
            f'font-family="sans-serif" font-size="11">{group}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_analyze_tsne(config: RunConfig) -> list:
    role = config.analyze["role"]
    ids, groups, matrix, encoder = _embedding_inputs(config, role)
    es = EmbeddingSet(tuple(ids), tuple(groups), matrix).filter_min_size(
        _min_group_size(config, role)
    )
    embedded = embed(encoder, es.matrix)
    result = tsne_embed(
        embedded,
        perplexity=float(config.analyze["perplexity"]),
        n_iters=int(config.analyze["n_iters"]),
        seed=config.seed,
    )
    out = config.out_dir
    artifacts = [
        _write_csv(
            out / "tsne.csv",
            ("item_id", "group", "x", "y"),
            (
                (item_id, group, _float_text(x), _float_text(y))
                for item_id, group, (x, y) in zip(es.ids, es.groups, result.coords)
            ),
        ),
        _write_text(
            out / "tsne.svg",
            _svg_scatter(result.coords, es.groups, f"{role} embedding map"),
        ),
    ]
    artifacts.append(_write_json(
        out / "tsne_metadata.json",
        _metadata("analyze tsne", config, artifacts,
                  role=role, n_items=len(es),
                  perplexity=result.perplexity, n_iters=result.n_iters,
                  kl=result.kl, kl_initial=result.kl_initial),
    ))
    return artifacts


def cmd_analyze_feature_importance(config: RunConfig) -> list:
    """Importances of the persisted model over its own training rows."""
    model_path = _artifact(config, "model.json", "run `cdr train-eval` first")
    payload = json.loads(model_path.read_text())
    kind = payload["model"].get("kind")
    if kind not in _SCORER_KINDS:
        raise ConfigError(f"{model_path}: unknown model kind {kind!r}")
    est = _SCORER_KINDS[kind].from_dict(payload["model"])
    variant = Variant.parse(payload["variant"])

    pairs = _load_labeled_pairs(config)
    drugs = parse_drugs(_artifact(config, "filtered_drugs.csv", "run `cdr ingest` first"))
    _, _, records = _load_ingest_cells(config)
    plan = _load_split_plan(config)
    feat = _build_variant_table(config, variant, pairs, drugs, records)
    rows = feat.rows_for_cells(plan.fold_union())
    imp = feature_importance(
        est, X=feat.X[rows], y=feat.y[rows],
        seed=config.seed, source_mask=feat.source_mask,
    )

    out = config.out_dir
    artifacts = [
        _write_csv(
            out / "feature_importance.csv",
            ("feature", "source", "importance"),
            (
                (str(i), feat.source_mask[i], _float_text(v))
                for i, v in enumerate(imp.values)
            ),
        ),
        _write_json(out / "feature_importance.json", {
            "variant": str(variant),
            "classifier": payload["classifier"],
            **imp.to_dict(),
        }),
    ]
    artifacts.append(_write_json(
        out / "feature_importance_metadata.json",
        _metadata("analyze feature-importance", config, artifacts,
                  variant=str(variant), n_features=int(imp.values.shape[0])),
    ))
    return artifacts


_ANALYZE_COMMANDS = {
    "fda-priority": cmd_analyze_fda,
    "gene-correlation": cmd_analyze_gene_correlation,
    "expressiveness": cmd_analyze_expressiveness,
    "tsne": cmd_analyze_tsne,
    "feature-importance": cmd_analyze_feature_importance,
}


# -------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdr",
        description="Seeded batch pipeline for ranking drug response in cell lines.",
    )

    def common(sub):
        sub.add_argument("--config", required=True, help="JSON run config")
        sub.add_argument("--seed", type=int, default=None, help="override the config seed")
        sub.add_argument("--out", default=None, help="override the output directory")

    commands = parser.add_subparsers(dest="command", required=True)
    common(commands.add_parser("ingest", help="parse, filter, score, and split inputs"))

    pre = commands.add_parser("pretrain", help="train encoder snapshots")
    common(pre)
    pre.add_argument(
        "--role",
        choices=("drug", "cell", "both", "autoencoder", "all"),
        default="both",
    )

    te = commands.add_parser("train-eval", help="cross-validate and evaluate a variant")
    common(te)
    te.add_argument("--variant", default=None, help='e.g. "e_d,e_c,rf"')
    te.add_argument("--grid", action="store_true", help="sweep the classifier grid first")

    ana = commands.add_parser("analyze", help="reports over a finished run")
    subs = ana.add_subparsers(dest="subcommand", required=True)
    for name in _ANALYZE_COMMANDS:
        sub = subs.add_parser(name)
        common(sub)
        if name in ("expressiveness", "tsne"):
            sub.add_argument("--role", choices=_ANALYZE_ROLES, default=None)
            sub.add_argument("--min-group-size", type=int, default=None)
        if name == "tsne":
            sub.add_argument("--perplexity", type=float, default=None)
            sub.add_argument("--n-iters", type=int, default=None)
        if name == "gene-correlation":
            sub.add_argument("--drug", default=None)
            sub.add_argument("--cancer", default=None)
            sub.add_argument("--rho", type=float, default=None)
            sub.add_argument("--p", type=float, default=None)
    return parser


def _apply_analyze_flags(config: RunConfig, args) -> None:
    for flag, key in (
        ("role", "role"), ("min_group_size", "min_group_size"),
        ("perplexity", "perplexity"), ("n_iters", "n_iters"),
        ("drug", "drug"), ("cancer", "cancer"), ("rho", "rho"), ("p", "p"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            config.analyze[key] = value
            config.echo["analyze"][key] = value


def _dispatch(args) -> list:
    config = load_run_config(args.config, seed=args.seed, out=args.out)
    if args.command == "ingest":
        return cmd_ingest(config)
    if args.command == "pretrain":
        return cmd_pretrain(config, role=args.role)
    if args.command == "train-eval":
        if args.variant:
            config.variant = Variant.parse(args.variant)
            config.echo["variant"] = str(config.variant)
        return cmd_train_eval(config, grid=args.grid)
    _apply_analyze_flags(config, args)
    return _ANALYZE_COMMANDS[args.subcommand](config)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        artifacts = _dispatch(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in artifacts:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
