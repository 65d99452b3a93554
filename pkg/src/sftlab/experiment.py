"""Reproducible toy experiments: ablation grid and sensitivity sweeps.

Every run draws its own synthetic dataset per seed, trains the requested
variants on the train split and scores them on the held-out
query/gallery split.  Reported numbers are medians across seeds.
Reports contain no timestamps or environment detail, so identical
configurations produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    FeatureMatrix,
    Partition,
    SyntheticSpec,
    generate_synthetic,
    hold_out_eval_split,
    split_features,
)
from .graphcut import affinity_class_means
from .ranking import evaluate, k_reciprocal_rerank, rank, refine_ranking
from .training import TrainConfig, train
from .transform import affinity

ABLATION_CELLS = (
    ("baseline", dict(use_sft=False, deep_supervision="off")),
    ("sft", dict(use_sft=True, deep_supervision="off")),
    ("sft+ds_unshared", dict(use_sft=True, deep_supervision="unshared")),
    ("sft+ds_shared", dict(use_sft=True, deep_supervision="shared")),
    ("ncut", dict(objective="ncut", use_sft=False, deep_supervision="off")),
)
DERIVED_CELLS = ("sft+ds_shared+post", "sft+ds_shared+kr")

MODES = ("ablation", "sigma_sweep", "k_sweep")


def toy_train_config(**overrides) -> TrainConfig:
    """Trainer defaults sized for the synthetic datasets used here.

    The toy profile departs from the full-scale defaults (smaller
    batches, longer schedule, slightly larger temperature) because 128
    training samples need many more passes than 100k images and the
    deep-supervision dynamics only separate from plain training once the
    transform mixes appreciably at the start of training.
    """
    base = dict(
        p=8,
        k=8,
        sigma=0.17,
        epochs=400,
        warmup_epochs=60,
        base_lr=0.05,
        warmup_start_lr=0.001,
        decay_epochs=(240, 320),
        decay_factor=0.1,
        hidden_dim=64,
        embed_dim=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "ablation"
    topology: str = "intertwined_spirals"
    identities: int = 16
    train_per_id: int = 8
    query_per_id: int = 2
    gallery_per_id: int = 4
    dim: int = 32
    cameras: int = 2
    intra_class_spread: float = 0.05
    inter_class_separation: float = 1.0
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    sigma_values: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2, 0.5)
    k_values: tuple[int, ...] = (2, 4, 8)
    top_n: int = 50
    kr_k1: int = 20
    kr_k2: int = 6
    kr_lambda: float = 0.3
    train: TrainConfig = field(default_factory=toy_train_config)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown experiment mode {self.mode!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")


def make_dataset(cfg: ExperimentConfig, seed: int) -> tuple[FeatureMatrix, DatasetManifest]:
    """Synthetic dataset for one seed, with eval splits already assigned."""
    spec = SyntheticSpec(
        num_identities=cfg.identities,
        samples_per_identity=cfg.train_per_id + cfg.query_per_id + cfg.gallery_per_id,
        dim=cfg.dim,
        intra_class_spread=cfg.intra_class_spread,
        inter_class_separation=cfg.inter_class_separation,
        topology=cfg.topology,
        num_cameras=cfg.cameras,
        seed=seed,
    )
    features, manifest = generate_synthetic(spec)
    return features, hold_out_eval_split(manifest, cfg.query_per_id, cfg.gallery_per_id)


def _metrics(report) -> dict:
    return {
        "map": report.map_score,
        "cmc1": report.cmc[1],
        "cmc5": report.cmc[5],
        "cmc10": report.cmc[10],
    }


def _eval_embeddings(model, features, manifest, cfg: ExperimentConfig):
    emb = FeatureMatrix(model.embed(features.data))
    q = split_features(emb, manifest, "query")
    g = split_features(emb, manifest, "gallery")
    return emb, q, g


def _test_inter_affinity(emb: FeatureMatrix, manifest: DatasetManifest, sigma: float) -> tuple[float, float]:
    """(intra, inter) mean affinity of the held-out rows."""
    idx = manifest.indices("query") + manifest.indices("gallery")
    labels = np.array([manifest.records[i].identity for i in idx])
    ident_of = {ident: c for c, ident in enumerate(sorted(set(labels.tolist())))}
    part = Partition(np.array([ident_of[v] for v in labels]))
    w = affinity(FeatureMatrix(emb.data[idx]), sigma)
    return affinity_class_means(w, part)


def _median(values: list[float]) -> float:
    return float(statistics.median(values))


def run_ablation(cfg: ExperimentConfig) -> dict:
    per_cell: dict[str, list[dict]] = {name: [] for name, _ in ABLATION_CELLS}
    for name in DERIVED_CELLS:
        per_cell[name] = []
    suppression: dict[str, list[float]] = {"baseline": [], "sft+ds_shared": []}

    for seed in cfg.seeds:
        features, manifest = make_dataset(cfg, seed)
        for name, overrides in ABLATION_CELLS:
            run_cfg = replace(cfg.train, seed=seed, **overrides)
            result = train(features, manifest, run_cfg)
            emb, q, g = _eval_embeddings(result.model, features, manifest, cfg)
            ranking = rank(q, g, manifest)
            cell = {"seed": seed, **_metrics(evaluate(ranking, manifest))}
            per_cell[name].append(cell)
            if name in suppression:
                intra, inter = _test_inter_affinity(emb, manifest, run_cfg.sigma)
                suppression[name].append(inter)
                cell["intra_affinity"] = intra
                cell["inter_affinity"] = inter
            if name == "sft+ds_shared":
                refined = refine_ranking(q, ranking, g, cfg.top_n, run_cfg.sigma)
                per_cell["sft+ds_shared+post"].append(
                    {"seed": seed, **_metrics(evaluate(refined, manifest))}
                )
                rr = k_reciprocal_rerank(q, g, manifest, cfg.kr_k1, cfg.kr_k2, cfg.kr_lambda)
                per_cell["sft+ds_shared+kr"].append(
                    {"seed": seed, **_metrics(evaluate(rr, manifest))}
                )

    cells = {}
    for name, rows in per_cell.items():
        cells[name] = {
            "per_seed": rows,
            "median": {
                key: _median([row[key] for row in rows])
                for key in ("map", "cmc1", "cmc5", "cmc10")
            },
        }
    return {
        "mode": "ablation",
        "cells": cells,
        "inter_affinity_median": {k: _median(v) for k, v in suppression.items()},
    }


def run_sigma_sweep(cfg: ExperimentConfig) -> dict:
    rows = []
    for sigma in cfg.sigma_values:
        per_seed = []
        for seed in cfg.seeds:
            features, manifest = make_dataset(cfg, seed)
            run_cfg = replace(cfg.train, seed=seed, sigma=sigma,
                              use_sft=True, deep_supervision="shared")
            result = train(features, manifest, run_cfg)
            _, q, g = _eval_embeddings(result.model, features, manifest, cfg)
            per_seed.append(_metrics(evaluate(rank(q, g, manifest), manifest)))
        rows.append({
            "sigma": sigma,
            "per_seed": per_seed,
            "median": {k: _median([m[k] for m in per_seed]) for k in per_seed[0]},
        })
    return {"mode": "sigma_sweep", "rows": rows}


def run_k_sweep(cfg: ExperimentConfig) -> dict:
    rows = []
    for k in cfg.k_values:
        row = {"k": k}
        for name, overrides in (("baseline", ABLATION_CELLS[0][1]),
                                ("sft+ds_shared", ABLATION_CELLS[3][1])):
            per_seed = []
            for seed in cfg.seeds:
                features, manifest = make_dataset(cfg, seed)
                run_cfg = replace(cfg.train, seed=seed, k=k, **overrides)
                result = train(features, manifest, run_cfg)
                _, q, g = _eval_embeddings(result.model, features, manifest, cfg)
                per_seed.append(_metrics(evaluate(rank(q, g, manifest), manifest)))
            row[name] = {
                "per_seed": per_seed,
                "median": {key: _median([m[key] for m in per_seed]) for key in per_seed[0]},
            }
        rows.append(row)
    return {"mode": "k_sweep", "rows": rows}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Dispatch on mode; returns the full report as a plain dict."""
    if cfg.mode == "ablation":
        report = run_ablation(cfg)
    elif cfg.mode == "sigma_sweep":
        report = run_sigma_sweep(cfg)
    else:
        report = run_k_sweep(cfg)
    report["config"] = asdict(cfg)
    return report


_FLAG_COLUMNS = ("sft", "ds_u", "ds_s", "post", "kr")
_CELL_FLAGS = {
    "baseline": (),
    "sft": ("sft",),
    "sft+ds_unshared": ("sft", "ds_u"),
    "sft+ds_shared": ("sft", "ds_s"),
    "sft+ds_shared+post": ("sft", "ds_s", "post"),
    "sft+ds_shared+kr": ("sft", "ds_s", "kr"),
    "ncut": (),
}
_CELL_ORDER = (
    "baseline",
    "sft",
    "sft+ds_unshared",
    "sft+ds_shared",
    "sft+ds_shared+post",
    "sft+ds_shared+kr",
    "ncut",
)


def ablation_table(report: dict) -> str:
    """TSV with method flags and median mAP / Rank-1 / Rank-5 per cell."""
    lines = ["\t".join(("method",) + _FLAG_COLUMNS + ("mAP", "Rank-1", "Rank-5"))]
    for name in _CELL_ORDER:
        med = report["cells"][name]["median"]
        flags = ["x" if col in _CELL_FLAGS[name] else "" for col in _FLAG_COLUMNS]
        lines.append("\t".join(
            [name, *flags, f"{med['map']:.4f}", f"{med['cmc1']:.4f}", f"{med['cmc5']:.4f}"]
        ))
    return "\n".join(lines) + "\n"


def sweep_table(report: dict) -> str:
    if report["mode"] == "sigma_sweep":
        lines = ["sigma\tmAP\tRank-1\tRank-5"]
        for row in report["rows"]:
            med = row["median"]
            lines.append(f"{row['sigma']:g}\t{med['map']:.4f}\t{med['cmc1']:.4f}\t{med['cmc5']:.4f}")
        return "\n".join(lines) + "\n"
    lines = ["k\tbaseline_mAP\tbaseline_Rank-1\tsft_mAP\tsft_Rank-1"]
    for row in report["rows"]:
        base = row["baseline"]["median"]
        sft = row["sft+ds_shared"]["median"]
        lines.append(
            f"{row['k']}\t{base['map']:.4f}\t{base['cmc1']:.4f}"
            f"\t{sft['map']:.4f}\t{sft['cmc1']:.4f}"
        )
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir) -> None:
    """report.json plus the matching TSV table, byte-stable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    table = ablation_table(report) if report["mode"] == "ablation" else sweep_table(report)
    (out / "table.tsv").write_text(table, encoding="utf-8")
