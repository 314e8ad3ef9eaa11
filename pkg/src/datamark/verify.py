"""Ownership verification against a suspect classifier, and the BA / WSR / RSD metrics."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from datamark.core import Dataset, LabeledImage, validate_posterior
from datamark.model.base import Classifier
from datamark.stats import PairedSample, TestReport, run_test
from datamark.watermark import WatermarkKey, blend_array, watermark_testset

log = logging.getLogger(__name__)

ANY_NONTARGET = "any_nontarget"
TRAINED_ON_WATERMARKED = "trained_on_watermarked"
NOT_PROVEN = "not_proven"


@dataclass(frozen=True)
class VerificationConfig:
    """``certainty_margin`` is the alpha of H0: p + alpha > q, not the test level."""

    certainty_margin: float = 0.5
    sample_count: int = 100
    significance: float = 0.05
    source_label: int | str | None = None  # None -> (target + 1) mod K
    seed: int = 0
    test_kind: str = "t"

    def __post_init__(self):
        if not 0.0 <= self.certainty_margin <= 1.0:
            raise ValueError("certainty_margin must be in [0, 1]")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must be in (0, 1)")
        if self.test_kind not in ("t", "wilcoxon"):
            raise ValueError("test_kind must be 't' or 'wilcoxon'")
        if isinstance(self.source_label, str) and self.source_label != ANY_NONTARGET:
            raise ValueError(f"source_label must be an integer or {ANY_NONTARGET!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def resolved_source(self, target_label: int, num_classes: int) -> int | str:
        src = self.source_label
        if src is None:
            return (target_label + 1) % num_classes
        if src == ANY_NONTARGET:
            return src
        src = int(src)
        if src == target_label:
            raise ValueError("source_label must differ from the target label")
        if not 0 <= src < num_classes:
            raise ValueError(f"source_label {src} outside [0, {num_classes - 1}]")
        return src


@dataclass
class VerificationOutcome:
    report: TestReport
    pairs: list[PairedSample]
    drawn_indices: list[int]

    @property
    def decision(self) -> str:
        return TRAINED_ON_WATERMARKED if self.report.reject_h0 else NOT_PROVEN

    def to_dict(self, verbose: bool = False) -> dict:
        d = {
            "decision": self.decision,
            "report": self.report.to_dict(verbose),
            "drawn_indices": self.drawn_indices,
        }
        if verbose:
            d["pairs"] = [[pr.p, pr.q] for pr in self.pairs]
        return d

    def verdict_line(self) -> str:
        r = self.report
        return (
            f"{self.decision}: {r.test_kind}-test p={r.p_value:.4g} "
            f"(significance {r.significance}, margin {r.alpha}, M={r.sample_size})"
        )


@dataclass
class MetricsReport:
    benign_correct: int
    benign_total: int
    watermark_hits: int
    watermark_total: int

    @property
    def benign_accuracy(self) -> float:
        return self.benign_correct / self.benign_total

    @property
    def watermark_success_rate(self) -> float:
        return self.watermark_hits / self.watermark_total

    def to_dict(self) -> dict:
        return {
            "ba": self.benign_accuracy,
            "wsr": self.watermark_success_rate,
            "benign_correct": self.benign_correct,
            "benign_total": self.benign_total,
            "watermark_hits": self.watermark_hits,
            "watermark_total": self.watermark_total,
        }


def _posteriors(model: Classifier, images: np.ndarray, offset: int = 0) -> np.ndarray:
    try:
        probs = np.asarray(model.posterior_batch(images), dtype=np.float64)
    except Exception as e:
        # Fall back to one-at-a-time so the failing sample can be named.
        for i, img in enumerate(images):
            try:
                model.posterior_batch(img[None])
            except Exception as inner:
                raise RuntimeError(f"model query failed for sample {offset + i}: {inner}") from inner
        raise RuntimeError(f"model batch query failed: {e}") from e
    return probs


def collect_pairs(model: Classifier, benign_samples: Sequence[LabeledImage] | Dataset, key: WatermarkKey) -> list[PairedSample]:
    """(p, q) = target-class posterior of each benign image and of its triggered copy."""
    if isinstance(benign_samples, Dataset):
        images, labels = benign_samples.images, benign_samples.labels
    else:
        if not benign_samples:
            return []
        images = np.stack([s.image.pixels for s in benign_samples])
        labels = np.array([s.label for s in benign_samples])
    bad = np.flatnonzero(labels == key.target_label)
    if len(bad):
        raise ValueError(f"sample {int(bad[0])} carries the target label {key.target_label}")
    triggered = blend_array(images, key.trigger)
    p_post = _posteriors(model, images)
    q_post = _posteriors(model, triggered)
    pairs = []
    for i in range(len(images)):
        p_vec = validate_posterior(p_post[i], 1e-5)
        q_vec = validate_posterior(q_post[i], 1e-5)
        pairs.append(PairedSample(float(min(p_vec[key.target_label], 1.0)), float(min(q_vec[key.target_label], 1.0))))
    return pairs


def draw_verification_indices(test: Dataset, key: WatermarkKey, config: VerificationConfig) -> np.ndarray:
    source = config.resolved_source(key.target_label, test.num_classes)
    if source == ANY_NONTARGET:
        candidates = np.flatnonzero(test.labels != key.target_label)
    else:
        candidates = np.flatnonzero(test.labels == source)
    if len(candidates) < config.sample_count:
        raise ValueError(
            f"only {len(candidates)} test samples of source class {source}, need {config.sample_count}"
        )
    rng = np.random.default_rng(config.seed)
    return rng.choice(candidates, size=config.sample_count, replace=False)


def verify_dataset_usage(
    model: Classifier, test: Dataset, key: WatermarkKey, config: VerificationConfig = VerificationConfig()
) -> VerificationOutcome:
    """Decide whether ``model`` carries the watermark's trigger-to-target behavior."""
    if not 0 <= key.target_label < test.num_classes:
        raise ValueError("key target label outside the test set's classes")
    idx = draw_verification_indices(test, key, config)
    pairs = collect_pairs(model, test.subset(idx), key)
    report = run_test(config.test_kind, pairs, config.certainty_margin, config.significance)
    return VerificationOutcome(report, pairs, idx.tolist())


def benign_accuracy_counts(model: Classifier, test: Dataset) -> tuple[int, int]:
    pred = _posteriors(model, test.images).argmax(axis=1)
    return int(np.sum(pred == test.labels)), len(test)


def benign_accuracy(model: Classifier, test: Dataset) -> float:
    """Argmax accuracy on the clean test set; ties go to the lowest label."""
    correct, total = benign_accuracy_counts(model, test)
    return correct / total


def watermark_success_counts(model: Classifier, test: Dataset, key: WatermarkKey) -> tuple[int, int]:
    marked = watermark_testset(test, key)
    pred = _posteriors(model, marked.images).argmax(axis=1)
    return int(np.sum(pred == key.target_label)), len(marked)


def watermark_success_rate(model: Classifier, test: Dataset, key: WatermarkKey) -> float:
    hits, total = watermark_success_counts(model, test, key)
    return hits / total


def evaluate(model: Classifier, test: Dataset, key: WatermarkKey) -> MetricsReport:
    return MetricsReport(*benign_accuracy_counts(model, test), *watermark_success_counts(model, test, key))


def rsd_experiment(
    model: Classifier,
    test: Dataset,
    key: WatermarkKey,
    config: VerificationConfig = VerificationConfig(),
    repetitions: int = 100,
    workers: int = 1,
) -> float:
    """Fraction of repeated verifications (fresh draws, seed XOR i) that reject H0.

    Repetitions run on a thread pool when ``workers > 1`` and the model is
    reentrant; the result does not depend on the execution order.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    configs = [
        VerificationConfig(
            config.certainty_margin,
            config.sample_count,
            config.significance,
            config.source_label,
            config.seed ^ i,
            config.test_kind,
        )
        for i in range(repetitions)
    ]

    def one(cfg: VerificationConfig) -> bool:
        return verify_dataset_usage(model, test, key, cfg).report.reject_h0

    if workers > 1 and model.reentrant:
        with ThreadPoolExecutor(workers) as pool:
            rejections = sum(pool.map(one, configs))
    else:
        rejections = sum(one(c) for c in configs)
    log.info("RSD %d/%d", rejections, repetitions)
    return rejections / repetitions
