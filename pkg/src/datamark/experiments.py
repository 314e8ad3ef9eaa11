"""End-to-end watermark -> train -> evaluate -> verify runs and parameter sweeps."""

from __future__ import annotations

import logging
import time
from dataclasses import replace

from datamark.config import RunConfig
from datamark.core import Dataset
from datamark.datasets import generate_synthetic, load_dataset
from datamark.model.network import MiniNetClassifier, MiniNetParams, train
from datamark.verify import evaluate, rsd_experiment
from datamark.watermark import WatermarkConfig, WatermarkKey, watermark_dataset

log = logging.getLogger(__name__)

ABLATION_PARAMS = ("gamma", "blend_value")


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.format == "synthetic":
        return generate_synthetic(d.synthetic)
    return (
        load_dataset(d.format, d.train, d.train_labels, d.num_classes),
        load_dataset(d.format, d.test, d.test_labels, d.num_classes),
    )


def make_key(cfg: RunConfig, shape) -> WatermarkKey:
    return WatermarkKey(cfg.watermark.trigger.build(shape), cfg.watermark.target_label)


def train_watermarked(cfg: RunConfig, train_set: Dataset, key: WatermarkKey) -> tuple[MiniNetParams, list[int]]:
    wm_cfg = WatermarkConfig(cfg.watermark.rate, cfg.watermark.seed, cfg.watermark.exclude_target_labeled)
    marked, modified = watermark_dataset(train_set, key, wm_cfg)
    return train(marked, cfg.training.arch, cfg.training.config), modified


def run_pipeline(cfg: RunConfig, train_set: Dataset | None = None, test_set: Dataset | None = None) -> dict:
    """Train a benign baseline and a watermarked sibling; report BA, WSR and RSD for both."""
    t0 = time.perf_counter()
    if train_set is None or test_set is None:
        train_set, test_set = load_splits(cfg)
    key = make_key(cfg, train_set.shape)
    baseline = MiniNetClassifier(train(train_set, cfg.training.arch, cfg.training.config))
    params, modified = train_watermarked(cfg, train_set, key)
    marked = MiniNetClassifier(params)
    out = {
        "modified_count": len(modified),
        "baseline": evaluate(baseline, test_set, key).to_dict(),
        "watermarked": evaluate(marked, test_set, key).to_dict(),
        "rsd_watermarked": rsd_experiment(marked, test_set, key, cfg.verification, cfg.repetitions),
        "rsd_baseline": rsd_experiment(baseline, test_set, key, cfg.verification, cfg.repetitions),
        "repetitions": cfg.repetitions,
    }
    out["ba_drop"] = out["baseline"]["ba"] - out["watermarked"]["ba"]
    out["seconds"] = time.perf_counter() - t0
    return out


def ablate(cfg: RunConfig, param: str, values, train_set: Dataset | None = None, test_set: Dataset | None = None) -> list[dict]:
    """WSR and BA for each value of the watermarking rate or the trigger blend value.

    Every run keeps the same seeds, so with rate sweeps the poisoned subsets
    are nested.
    """
    if param not in ABLATION_PARAMS:
        raise ValueError(f"unknown ablation parameter {param!r}; expected one of {ABLATION_PARAMS}")
    if train_set is None or test_set is None:
        train_set, test_set = load_splits(cfg)
    rows = []
    for v in values:
        if param == "gamma":
            run_cfg = replace(cfg, watermark=replace(cfg.watermark, rate=float(v)))
        else:
            trig = replace(cfg.watermark.trigger, blend_value=float(v))
            run_cfg = replace(cfg, watermark=replace(cfg.watermark, trigger=trig))
        key = make_key(run_cfg, train_set.shape)
        params, modified = train_watermarked(run_cfg, train_set, key)
        m = evaluate(MiniNetClassifier(params), test_set, key)
        rows.append({param: float(v), "modified": len(modified), "ba": m.benign_accuracy, "wsr": m.watermark_success_rate})
        log.info("%s=%g: BA %.4f WSR %.4f", param, v, m.benign_accuracy, m.watermark_success_rate)
    return rows
