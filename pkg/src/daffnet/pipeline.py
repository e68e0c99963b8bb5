"""End-to-end steps shared by the command line and the acceptance runs.

Every function here is deterministic given its arguments: data splits depend
on ``split_seed`` and model initialisation plus batch order on ``seed``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import PSEUDO_CSV, SCHEMA_JSON, DatasetError, ImageSet, SplitSpec, load_dataset, split_622
from .metrics import EvalReport, ablation_table, attribute_report, classification_report
from .models import MAP, BackboneConfig, DAFFNet, DaffnetConfig, MaeConfig, MapConfig
from .schema import AttributeSchema
from .training import (
    LossWeights,
    TrainConfig,
    map_outputs,
    predict_proba,
    pseudo_label,
    train_daffnet,
    train_map_dsl,
    train_map_ssl,
)


@dataclass
class Splits:
    train: ImageSet
    val: ImageSet
    test: ImageSet

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def load_splits(root, split_seed: int = 0, schema: Optional[AttributeSchema] = None,
                pseudo_csv=None, image_size: Optional[int] = None, stratified: bool = True) -> Splits:
    manifest = load_dataset(root, schema, pseudo_csv=pseudo_csv)
    parts = split_622(manifest, SplitSpec(seed=split_seed, stratified=stratified))
    return Splits(*(ImageSet.load(p, image_size) for p in parts))


def build_map(schema: AttributeSchema, seed: int, crop_size: int = 56, num_classes: int = 5,
              backbone: Optional[BackboneConfig] = None) -> MAP:
    bb = backbone or BackboneConfig(epsa=False, sa=False, input_size=crop_size)
    return MAP(MapConfig(backbone=bb, num_classes=num_classes), schema, np.random.default_rng(seed))


def build_daffnet(schema: AttributeSchema, seed: int, map_model: Optional[MAP], crop_size: int = 56,
                  num_classes: int = 5, epsa: bool = True, sa: bool = True, mfe: str = "full") -> DAFFNet:
    if mfe != "none" and map_model is None:
        raise DatasetError("a trained MAP checkpoint is required unless morphological features are off")
    cfg = DaffnetConfig(
        backbone=BackboneConfig(epsa=epsa, sa=sa, input_size=crop_size),
        map=map_model.cfg if map_model is not None else MapConfig(),
        mae=MaeConfig(),
        num_classes=num_classes,
        mfe=mfe,
    )
    return DAFFNet(cfg, schema, np.random.default_rng(seed), map_model=map_model if mfe != "none" else None)


def map_report(model: MAP, data: ImageSet, cfg: TrainConfig, title: Optional[str] = None) -> EvalReport:
    if not data.manifest.has_attributes().all():
        raise DatasetError("attribute report needs attribute labels on every evaluated sample")
    attr, _ = map_outputs(model, data, cfg)
    pred = np.stack([np.argmax(a, axis=1) for a in attr], axis=1)
    kw = {"title": title} if title else {}
    return attribute_report(data.attributes, pred, model.schema, attr, **kw)


def daffnet_report(model: DAFFNet, data: ImageSet, cfg: TrainConfig,
                   title: Optional[str] = None) -> EvalReport:
    probs = predict_proba(model, data, cfg)
    kw = {"title": title} if title else {}
    return classification_report(data.labels, probs, data.manifest.class_names, **kw)


def fit_map(splits: Splits, cfg: TrainConfig, w: LossWeights = LossWeights(),
            pseudo_sets: Sequence[ImageSet] = ()) -> tuple:
    """Train a fresh MAP (seeded by ``cfg.seed``) on the truly labelled train split plus pseudo sets."""
    train = splits.train.select(splits.train.manifest.has_attributes())
    if len(train) == 0:
        raise DatasetError("no attribute labels found in the training split")
    model = build_map(train.manifest.schema, cfg.seed, cfg.crop_size, len(train.manifest.class_names))
    if pseudo_sets:
        return train_map_ssl(model, train, list(pseudo_sets), splits.val, cfg, w)
    return train_map_dsl(model, train, splits.val, cfg, w)


def pseudo_rows(model: MAP, data: ImageSet, cfg: TrainConfig) -> str:
    """CSV text of pseudo attribute labels, one row per sample lacking true labels."""
    unlabeled = data.select(~data.manifest.has_attributes())
    labelled = pseudo_label(model, unlabeled, cfg)
    schema = model.schema
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["filename", *schema.names, "provenance"])
    for rec in labelled.manifest.records:
        writer.writerow([rec.path, *schema.decode(rec.attributes), rec.provenance])
    return buf.getvalue()


def write_pseudo_labels(model: MAP, data_root, out_dir, split_seed: int, cfg: TrainConfig,
                        image_size: Optional[int] = None) -> Path:
    """Pseudo-label the training split of ``data_root``; the dataset directory is left untouched."""
    schema_file = Path(data_root) / SCHEMA_JSON
    if schema_file.exists() and AttributeSchema.load(schema_file) != model.schema:
        raise DatasetError(f"{schema_file} does not match the attribute schema of the MAP checkpoint")
    splits = load_splits(data_root, split_seed, model.schema, image_size=image_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / PSEUDO_CSV
    path.write_text(pseudo_rows(model, splits.train, cfg), encoding="utf-8")
    return path


def pseudo_training_set(data_root, pseudo_csv, split_seed: int, schema: AttributeSchema,
                        image_size: Optional[int] = None) -> ImageSet:
    """The pseudo-labelled rows of a dataset's training split."""
    splits = load_splits(data_root, split_seed, schema, pseudo_csv=pseudo_csv, image_size=image_size)
    provenance = np.array([r.provenance == "pseudo" for r in splits.train.manifest.records])
    return splits.train.select(provenance)


ABLATION_ROWS = (
    ("Baseline", dict(epsa=False, sa=False, mfe="none")),
    ("+EPSA", dict(epsa=True, sa=False, mfe="none")),
    ("+EPSA+SA", dict(epsa=True, sa=True, mfe="none")),
    ("+EPSA+SA+MAP", dict(epsa=True, sa=True, mfe="map")),
    ("+EPSA+SA+MAP+MAE", dict(epsa=True, sa=True, mfe="full")),
)


def run_ablation(splits: Splits, map_model: MAP, cfg: TrainConfig, seeds: Sequence[int],
                 rows: Sequence = ABLATION_ROWS) -> tuple:
    """Train every ablation row for each seed; return the mean-accuracy table and raw results."""
    per_row = {}
    for name, flags in rows:
        reports = []
        for seed in seeds:
            run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
            net = build_daffnet(map_model.schema, seed, map_model, cfg.crop_size,
                                len(splits.train.manifest.class_names), **flags)
            net, _ = train_daffnet(net, splits.train, splits.val, run_cfg)
            reports.append(daffnet_report(net, splits.test, run_cfg))
        per_row[name] = reports
    averaged = []
    for name, reports in per_row.items():
        mean = EvalReport(name, reports[0].columns, [], {
            c: float(np.mean([r.overall[c] for r in reports])) for c in reports[0].overall})
        averaged.append((name, mean))
    table = ablation_table(averaged, title=f"Ablation results (mean over seeds {list(seeds)})")
    return table, per_row
