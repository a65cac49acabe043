"""Command-line orchestration: dataset generation, multi-seed training,
ablation grids over phenotype subsets / distance metrics / methods, and
artifact export (attention rankings, graph files).

One JSON config file drives everything; flags only override its keys. Every
file a command writes carries the experiment config hash, and re-running a
command with the same config and seeds reproduces the metrics byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import as_attention_vector, rank_phenotypes
from .baselines import linear_fit
from .dataio import (
    KIND_IMAGING,
    KIND_NONIMAGING,
    CsvSchema,
    PopulationDataset,
    SyntheticConfig,
    config_hash,
    generate_synthetic,
    load_csv,
    make_class_labels,
    normalize_minmax,
    save_csv,
    split,
)
from .graphgen import (
    GRAPH_FORMATS,
    derive_run_seed,
    export_graph,
    homophily_score,
    knn_static_graph,
    random_graph,
)
from .trainer import (
    HOMOPHILY_STREAM,
    MetricsRecord,
    TrainConfig,
    evaluate_classification,
    evaluate_regression,
    load_run,
    run_experiment,
    sample_trained_edges,
    save_history_csv,
    save_metrics_json,
    save_run,
)

__all__ = [
    "ExperimentConfig",
    "DatasetBlock",
    "AblationBlock",
    "CliError",
    "load_config",
    "build_dataset",
    "restrict_phenotypes",
    "cmd_generate",
    "cmd_train",
    "cmd_ablate",
    "cmd_export",
    "main",
]

PHENOTYPE_SUBSETS = ("non-imaging", "both", "imaging")
ABLATION_METRICS = ("euclidean", "cosine", "hyperbolic", "random")
ABLATION_METHODS = ("adaptive", "static", "random", "linear")
EXPORT_TARGETS = ("attention", "graph-static", "graph-learned")

# substream tag for the fixed random graph of a static+random ablation cell
STATIC_RANDOM_STREAM = 0x5EED0003


class CliError(Exception):
    """User-facing failure: bad config, missing file, empty grid."""


def _require_keys(block: dict, allowed: set, where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise CliError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class DatasetBlock:
    source: str = "synthetic"            # synthetic | csv
    seed: int = 0
    split_fractions: tuple = (0.75, 0.05, 0.20)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    csv_path: str | None = None
    label_column: str = "age"
    kinds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "synthetic": self.synthetic.to_dict(),
            "csv_path": self.csv_path,
            "label_column": self.label_column,
            "kinds": dict(self.kinds),
        }

    @classmethod
    def from_dict(cls, block: dict) -> "DatasetBlock":
        _require_keys(block, {"source", "seed", "split_fractions", "synthetic",
                              "csv_path", "label_column", "kinds"}, "dataset")
        synth = block.get("synthetic", {})
        if isinstance(synth, dict):
            synth = dict(synth)
            if "age_range" in synth:
                synth["age_range"] = tuple(synth["age_range"])
            synth = SyntheticConfig(**synth)
        out = cls(
            source=block.get("source", "synthetic"),
            seed=int(block.get("seed", 0)),
            split_fractions=tuple(block.get("split_fractions", (0.75, 0.05, 0.20))),
            synthetic=synth,
            csv_path=block.get("csv_path"),
            label_column=block.get("label_column", "age"),
            kinds=dict(block.get("kinds") or {}),
        )
        if out.source not in ("synthetic", "csv"):
            raise CliError(f"unknown dataset source {out.source!r}")
        if out.source == "csv" and not out.csv_path:
            raise CliError("csv dataset needs csv_path")
        if len(out.split_fractions) != 3:
            raise CliError("split_fractions must have exactly 3 entries")
        return out


@dataclass
class AblationBlock:
    phenotype_subsets: list = field(default_factory=lambda: ["both"])
    distance_metrics: list = field(default_factory=lambda: ["euclidean"])
    methods: list = field(default_factory=lambda: ["adaptive"])

    def to_dict(self) -> dict:
        return {
            "phenotype_subsets": list(self.phenotype_subsets),
            "distance_metrics": list(self.distance_metrics),
            "methods": list(self.methods),
        }

    @classmethod
    def from_dict(cls, block: dict) -> "AblationBlock":
        _require_keys(block, {"phenotype_subsets", "distance_metrics", "methods"},
                      "ablation")
        out = cls(
            phenotype_subsets=list(block.get("phenotype_subsets", ["both"])),
            distance_metrics=list(block.get("distance_metrics", ["euclidean"])),
            methods=list(block.get("methods", ["adaptive"])),
        )
        for subset in out.phenotype_subsets:
            if subset not in PHENOTYPE_SUBSETS:
                raise CliError(f"unknown phenotype subset {subset!r}")
        for metric in out.distance_metrics:
            if metric not in ABLATION_METRICS:
                raise CliError(f"unknown ablation metric {metric!r}")
        for method in out.methods:
            if method not in ABLATION_METHODS:
                raise CliError(f"unknown ablation method {method!r}")
        return out


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"task", "seed"}


@dataclass
class ExperimentConfig:
    task: str = "regression"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    train: dict = field(default_factory=dict)
    ablation: AblationBlock = field(default_factory=AblationBlock)
    out_dir: str = "runs/experiment"
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "dataset": self.dataset.to_dict(),
            "train": dict(self.train),
            "ablation": self.ablation.to_dict(),
            "out_dir": self.out_dir,
            "seeds": list(self.seeds),
            "workers": self.workers,
        }

    @property
    def experiment_hash(self) -> str:
        return config_hash(self.to_dict())

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        merged = {**self.train, **overrides}
        cfg = TrainConfig(task=self.task, seed=seed, **merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        _require_keys(payload, {"task", "dataset", "train", "ablation", "out_dir",
                                "seeds", "workers"}, "config")
        train = dict(payload.get("train", {}))
        _require_keys(train, _TRAIN_KEYS, "train")
        out = cls(
            task=payload.get("task", "regression"),
            dataset=DatasetBlock.from_dict(payload.get("dataset", {})),
            train=train,
            ablation=AblationBlock.from_dict(payload.get("ablation", {})),
            out_dir=payload.get("out_dir", "runs/experiment"),
            seeds=[int(s) for s in payload.get("seeds", [0])],
            workers=int(payload.get("workers", 1)),
        )
        if out.task not in ("regression", "classification"):
            raise CliError(f"unknown task {out.task!r}")
        if not out.seeds:
            raise CliError("seeds list is empty")
        if len(set(out.seeds)) != len(out.seeds):
            raise CliError("duplicate seeds")
        if out.workers < 1:
            raise CliError("workers must be at least 1")
        return out


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return ExperimentConfig.from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config {path}: {exc}") from exc


def save_config(config: ExperimentConfig, path) -> None:
    payload = {"config_hash": config.experiment_hash,
               "experiment": config.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_run_dir_config(run_dir: Path) -> ExperimentConfig:
    path = run_dir / "config.json"
    if not path.exists():
        raise CliError(f"{run_dir} has no config.json; not a run directory?")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return ExperimentConfig.from_dict(payload["experiment"])


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


def build_dataset(config: ExperimentConfig) -> PopulationDataset:
    """Generate or load, then split, normalize, and (for classification) bin.

    Deterministic in the dataset block alone: training seeds never touch the
    data, so every seed of a run sees the same subjects and splits.
    """
    block = config.dataset
    if block.source == "synthetic":
        ds = generate_synthetic(block.synthetic, seed=block.seed)
    else:
        schema = CsvSchema(label_column=block.label_column, kinds=dict(block.kinds))
        ds = load_csv(block.csv_path, schema)
    split(ds, fractions=tuple(block.split_fractions), seed=block.seed)
    normalize_minmax(ds)
    if config.task == "classification":
        n_classes = int(config.train.get("n_classes", 4))
        classes, edges = make_class_labels(ds.y, ds.masks.train, n_classes)
        ds.class_labels = classes
        ds.meta["class_edges"] = [float(e) for e in edges]
    return ds


def restrict_phenotypes(dataset: PopulationDataset, subset: str) -> PopulationDataset:
    """A view of the dataset keeping only one phenotype block. Node features,
    labels, and masks are shared; only the phenotype columns change."""
    if subset not in PHENOTYPE_SUBSETS:
        raise ValueError(f"unknown phenotype subset {subset!r}")
    if subset == "both":
        return dataset
    q = dataset.n_nonimaging
    rel = dataset.relevant
    if subset == "non-imaging":
        out = dataclasses.replace(
            dataset, imaging_cols=[], imaging_names=[],
            relevant=None if rel is None else rel[:q])
    else:
        out = dataclasses.replace(
            dataset, nonimaging=dataset.nonimaging[:, :0], nonimaging_names=[],
            relevant=None if rel is None else rel[q:])
    if out.n_phenotypes == 0:
        raise ValueError(f"subset {subset!r} leaves no phenotype columns")
    out.meta = dict(dataset.meta)
    out.meta["phenotype_subset"] = subset
    return out


# ---------------------------------------------------------------------------
# shared output helpers
# ---------------------------------------------------------------------------


def _prepend_comment(path: Path, comment: str) -> None:
    text = path.read_text(encoding="utf-8")
    path.write_text(f"# {comment}\n{text}", encoding="utf-8")


def _stamp_json(path: Path, experiment_hash: str) -> None:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    payload["config_hash"] = experiment_hash
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_graph(edges, labels, stem: Path, experiment_hash: str) -> None:
    for fmt in GRAPH_FORMATS:
        path = stem.with_suffix(f".{fmt}")
        export_graph(edges, labels, path, fmt=fmt)
        if fmt == "json":
            _stamp_json(path, experiment_hash)
        else:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(f"// config_hash={experiment_hash}\n")


def _attention_files(result, dataset, seed_dir: Path, experiment_hash: str) -> None:
    kinds = ([KIND_NONIMAGING] * dataset.n_nonimaging
             + [KIND_IMAGING] * dataset.n_imaging)
    vector = as_attention_vector(result.attention_vector,
                                 dataset.phenotype_names, kinds)
    csv_path = seed_dir / "attention.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "name", "kind", "weight"])
        for row in rank_phenotypes(vector):
            writer.writerow([row["rank"], row["name"], row["kind"],
                             repr(row["weight"])])
    _prepend_comment(csv_path, f"config_hash={experiment_hash}")
    payload = {
        "config_hash": experiment_hash,
        "weights": {name: float(w) for name, w in zip(vector.names, vector.weights)},
        "ranking": rank_phenotypes(vector),
    }
    with open(seed_dir / "attention.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


_METRIC_FIELDS = ("mae", "pearson_r", "accuracy", "macro_auc", "macro_f1",
                  "homophily")


def aggregate_records(records: list) -> dict:
    """Per-metric mean/std/median over seeds, ignoring missing values."""
    out = {}
    for name in _METRIC_FIELDS:
        values = [getattr(r, name) for r in records]
        values = [v for v in values
                  if v is not None and not (isinstance(v, float) and math.isnan(v))]
        if values:
            out[name] = {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "median": float(np.median(values)),
                "n": len(values),
            }
    return out


def _run_pool(items, worker, n_workers: int):
    """Map worker over items, catching per-item failures. Returns
    [(item, result_or_None, error_or_None)] in input order."""
    def guarded(item):
        try:
            return item, worker(item), None
        except Exception as exc:  # noqa: BLE001 - isolate sub-run failures
            return item, None, f"{type(exc).__name__}: {exc}"

    if n_workers <= 1 or len(items) <= 1:
        return [guarded(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(guarded, items))


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig, out_dir=None) -> Path:
    """Write dataset.csv plus metadata.json (seed, relevance flags, hash)."""
    block = config.dataset
    if block.source != "synthetic":
        raise CliError("generate only makes sense for synthetic dataset blocks")
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(block.synthetic, seed=block.seed)
    try:
        save_csv(ds, out / "dataset.csv")
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}") from exc
    metadata = {
        "config_hash": config.experiment_hash,
        "seed": block.seed,
        "n_subjects": ds.n_subjects,
        "label_column": ds.meta["label_column"],
        "relevant": {name: bool(flag) for name, flag
                     in zip(ds.phenotype_names, ds.relevant)},
        "kinds": {**{n: KIND_NONIMAGING for n in ds.nonimaging_names},
                  **{n: KIND_IMAGING for n in ds.imaging_names}},
        "synthetic": block.synthetic.to_dict(),
    }
    with open(out / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_one_seed(dataset, config: ExperimentConfig, seed: int,
                    out: Path) -> MetricsRecord:
    train_cfg = config.train_config(seed)
    result, record = run_experiment(dataset, train_cfg)
    seed_dir = out / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    stamp = config.experiment_hash

    save_metrics_json(record, seed_dir / "metrics.json")
    save_history_csv(result.history, seed_dir / "history.csv")
    _prepend_comment(seed_dir / "history.csv", f"config_hash={stamp}")
    save_run(result, seed_dir / "checkpoint.json")
    if result.attention_vector is not None:
        _attention_files(result, dataset, seed_dir, stamp)
    edges = sample_trained_edges(
        result, dataset,
        np.random.default_rng(derive_run_seed(seed, HOMOPHILY_STREAM)))
    _write_graph(edges, dataset.y, seed_dir / "graph_learned", stamp)
    return record


def cmd_train(config: ExperimentConfig) -> int:
    """One full run per seed, then a seed-aggregate JSON. Failed seeds leave
    the other runs' artifacts in place and flip the exit status."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    dataset = build_dataset(config)

    rows = _run_pool(config.seeds,
                     lambda seed: _train_one_seed(dataset, config, seed, out),
                     config.workers)
    records = {seed: record for seed, record, err in rows if err is None}
    failures = {seed: err for seed, _, err in rows if err is not None}

    aggregate = {
        "config_hash": config.experiment_hash,
        "task": config.task,
        "seeds": list(config.seeds),
        "n_seeds": len(config.seeds),
        "per_seed": {str(seed): rec.to_json_dict() for seed, rec in records.items()},
        "aggregate": aggregate_records(list(records.values())),
        "failures": {str(seed): err for seed, err in failures.items()},
    }
    with open(out / "aggregate.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for name, stats in aggregate["aggregate"].items():
        print(f"{name}: {stats['mean']:.4f} +/- {stats['std']:.4f} "
              f"(median {stats['median']:.4f}, n={stats['n']})")
    for seed, err in failures.items():
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _linear_cell(dataset, config: ExperimentConfig, seed: int,
                 cell_hash: str) -> MetricsRecord:
    masks = dataset.require_masks()
    record = MetricsRecord(task=config.task, seed=seed, config_hash=cell_hash,
                           extra={"experiment": "linear"})
    if config.task == "regression":
        model = linear_fit(dataset.X[masks.train], dataset.y[masks.train])
        scores = evaluate_regression(model.predict(dataset.X), dataset.y, masks.test)
        record.mae = scores["mae"]
        record.pearson_r = scores["pearson_r"]
    else:
        n_classes = int(config.train.get("n_classes", 4))
        model = linear_fit(dataset.X[masks.train], dataset.class_labels[masks.train],
                           task="logistic", n_classes=n_classes)
        scores = evaluate_classification(model.predict_proba(dataset.X),
                                         dataset.class_labels, masks.test)
        record.accuracy = scores["accuracy"]
        record.macro_auc = scores["macro_auc"]
        record.macro_f1 = scores["macro_f1"]
    record.validate()
    return record


def _ablate_cell(datasets: dict, config: ExperimentConfig, cell) -> MetricsRecord:
    subset, metric, method, seed = cell
    dataset = datasets[subset]
    cell_hash = config_hash({"experiment": config.to_dict(), "subset": subset,
                             "metric": metric, "method": method, "seed": seed})
    extra = {"subset": subset, "metric": metric, "method": method}

    if method == "linear":
        record = _linear_cell(dataset, config, seed, cell_hash)
    elif method == "random":
        cfg = config.train_config(seed, distance_metric="random")
        _, record = run_experiment(dataset, cfg, extra=extra)
    elif method == "adaptive":
        cfg = config.train_config(seed, distance_metric=metric)
        _, record = run_experiment(dataset, cfg, extra=extra)
    elif method == "static":
        cfg = config.train_config(seed, lam=0.0)
        if metric == "random":
            rng = np.random.default_rng(derive_run_seed(seed, STATIC_RANDOM_STREAM))
            edges = random_graph(dataset.n_subjects, cfg.k, rng)
        else:
            edges = knn_static_graph(dataset.phenotype_matrix(), cfg.k, metric=metric)
        _, record = run_experiment(dataset, cfg, fixed_edges=edges, extra=extra)
    else:
        raise ValueError(f"unknown method {method!r}")
    record.extra.update(extra)
    return record


_CELL_COLUMNS = ("subset", "metric", "method", "seed", "mae", "pearson_r",
                 "accuracy", "macro_auc", "macro_f1", "homophily")


def cmd_ablate(config: ExperimentConfig) -> int:
    """Cross-product {phenotype subset} x {distance metric} x {method}, one
    run per cell per seed, plus an aggregate table sorted by headline metric."""
    block = config.ablation
    cells = [(subset, metric, method, seed)
             for subset in block.phenotype_subsets
             for metric in block.distance_metrics
             for method in block.methods
             for seed in config.seeds]
    if not cells:
        raise CliError("ablation grid is empty; list at least one subset, "
                       "metric, and method")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")

    full = build_dataset(config)
    datasets = {subset: restrict_phenotypes(full, subset)
                for subset in block.phenotype_subsets}

    rows = _run_pool(cells, lambda cell: _ablate_cell(datasets, config, cell),
                     config.workers)
    failures = {}
    by_cell = {}
    csv_rows = []
    for cell, record, err in rows:
        subset, metric, method, seed = cell
        if err is not None:
            failures[f"{subset}/{metric}/{method}/seed_{seed}"] = err
            continue
        by_cell.setdefault((subset, metric, method), []).append(record)
        csv_rows.append([subset, metric, method, seed]
                        + [getattr(record, name) for name in _CELL_COLUMNS[4:]])

    cells_path = out / "cells.csv"
    with open(cells_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CELL_COLUMNS)
        for row in csv_rows:
            writer.writerow(["" if v is None else v for v in row])
    _prepend_comment(cells_path, f"config_hash={config.experiment_hash}")

    headline = "mae" if config.task == "regression" else "accuracy"
    aggregated = []
    for (subset, metric, method), records in by_cell.items():
        stats = aggregate_records(records)
        aggregated.append({"subset": subset, "metric": metric, "method": method,
                           "n_seeds": len(records), **{
                               f"{name}_{stat}": round(values[stat], 12)
                               for name, values in stats.items()
                               for stat in ("mean", "std", "median")}})
    missing = [row for row in aggregated if f"{headline}_mean" not in row]
    present = [row for row in aggregated if f"{headline}_mean" in row]
    present.sort(key=lambda row: row[f"{headline}_mean"],
                 reverse=(headline == "accuracy"))
    aggregated = present + missing

    agg_csv = out / "aggregate.csv"
    columns = ["subset", "metric", "method", "n_seeds"]
    seen = set(columns)
    for row in aggregated:
        for key in row:
            if key not in seen:
                columns.append(key)
                seen.add(key)
    with open(agg_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in aggregated:
            writer.writerow([row.get(col, "") for col in columns])
    _prepend_comment(agg_csv, f"config_hash={config.experiment_hash}")

    with open(out / "aggregate.json", "w", encoding="utf-8") as fh:
        json.dump({"config_hash": config.experiment_hash, "task": config.task,
                   "table": aggregated, "failures": failures},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")

    for row in aggregated:
        label = f"{row['subset']}/{row['metric']}/{row['method']}"
        value = row.get(f"{headline}_mean")
        shown = "n/a" if value is None else f"{value:.4f}"
        print(f"{label}: {headline} {shown}")
    for key, err in failures.items():
        print(f"{key} failed: {err}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def cmd_export(run_dir, what: str, seed: int | None = None) -> Path:
    """Re-derive artifacts from a finished run: attention ranking, or graph
    files (learned sample / static cosine) with their homophily printed."""
    if what not in EXPORT_TARGETS:
        raise CliError(f"unknown export target {what!r}; expected one of "
                       f"{EXPORT_TARGETS}")
    run_dir = Path(run_dir)
    config = _load_run_dir_config(run_dir)
    seed = config.seeds[0] if seed is None else seed
    seed_dir = run_dir / f"seed_{seed}"
    checkpoint = seed_dir / "checkpoint.json"
    if not checkpoint.exists():
        raise CliError(f"missing checkpoint {checkpoint}")
    result = load_run(checkpoint)
    dataset = build_dataset(config)
    stamp = config.experiment_hash
    export_dir = seed_dir / "export"
    export_dir.mkdir(parents=True, exist_ok=True)

    if what == "attention":
        if result.attention is None:
            raise CliError("this run has no attention scorer (static, random, "
                           "or ones-mode graph)")
        from . import numerics as nm
        from .attention import aggregate_attention, attention_forward
        with nm.no_grad():
            result.attention_vector = aggregate_attention(
                attention_forward(dataset.phenotype_matrix(),
                                  result.attention)).values.copy()
        _attention_files(result, dataset, export_dir, stamp)
        return export_dir

    mode = config.task
    labels = dataset.y if mode == "regression" else dataset.class_labels
    if what == "graph-learned":
        edges = sample_trained_edges(
            result, dataset,
            np.random.default_rng(derive_run_seed(seed, HOMOPHILY_STREAM)))
        stem = export_dir / "graph_learned"
    else:
        edges = knn_static_graph(dataset.phenotype_matrix(),
                                 result.config.k, metric="cosine")
        stem = export_dir / "graph_static"
    _write_graph(edges, dataset.y, stem, stamp)
    score = homophily_score(edges, labels, mode=mode)
    print(f"homophily[{what}] = {score:.6f}")
    return export_dir


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parse_seeds(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise CliError(f"bad --seeds value {text!r}: {exc}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popgraph",
        description="population-graph learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("generate", "write a synthetic dataset to CSV"),
                       ("train", "train once per seed and aggregate"),
                       ("ablate", "run a subset x metric x method grid")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="override the config's out_dir")
        if name != "generate":
            p.add_argument("--seeds", help="override seeds, e.g. 0,1,2")
            p.add_argument("--workers", type=int, help="parallel sub-runs")

    p = sub.add_parser("export", help="emit attention/graph artifacts for a run")
    p.add_argument("--run", required=True, help="run directory from `train`")
    p.add_argument("--what", required=True, choices=EXPORT_TARGETS)
    p.add_argument("--seed", type=int, help="which seed's checkpoint (default: first)")
    return parser


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "out", None):
        config.out_dir = args.out
    if getattr(args, "seeds", None):
        config.seeds = _parse_seeds(args.seeds)
        if not config.seeds:
            raise CliError("empty --seeds override")
    if getattr(args, "workers", None):
        config.workers = args.workers
        if config.workers < 1:
            raise CliError("workers must be at least 1")
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "export":
            cmd_export(args.run, args.what, args.seed)
            return 0
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "generate":
            out = cmd_generate(config)
            print(f"dataset written to {out}")
            return 0
        if args.command == "train":
            return cmd_train(config)
        return cmd_ablate(config)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
