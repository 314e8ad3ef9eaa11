"""Analytic classifiers with known behavior, used as test oracles.

All randomness is derived from the queried image's bytes, so asking twice
about the same image gives the same answer regardless of call order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from datamark.core import Dataset, Image
from datamark.model.base import Classifier
from datamark.watermark import Trigger

MOCK_KINDS = ("perfect_backdoor", "constant", "uniform", "echo", "stochastic_gap")


@dataclass(frozen=True)
class MockSpec:
    """``clean_behavior`` is ``echo`` (one-hot on the registered true label) or ``uniform``."""

    kind: str
    num_classes: int
    target_label: int = 0
    trigger: Trigger | None = None
    clean_behavior: str = "echo"
    constant_label: int = 0
    gap_mean: float = 0.6
    gap_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MOCK_KINDS:
            raise ValueError(f"unknown mock kind {self.kind!r}; expected one of {MOCK_KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.target_label < self.num_classes:
            raise ValueError("target_label out of range")
        if not 0 <= self.constant_label < self.num_classes:
            raise ValueError("constant_label out of range")
        if self.clean_behavior not in ("echo", "uniform"):
            raise ValueError("clean_behavior must be echo or uniform")
        if self.kind in ("perfect_backdoor", "stochastic_gap") and self.trigger is None:
            raise ValueError(f"{self.kind} mock needs a trigger")
        if not (math.isfinite(self.gap_mean) and math.isfinite(self.gap_std)) or self.gap_std < 0:
            raise ValueError("gap distribution needs a finite mean and non-negative stddev")
        if not -1.0 <= self.gap_mean <= 1.0:
            raise ValueError("gap_mean must lie in [-1, 1]")


def _one_hot(k: int, i: int) -> np.ndarray:
    v = np.zeros(k)
    v[i] = 1.0
    return v


def _with_target_mass(k: int, target: int, mass: float) -> np.ndarray:
    v = np.full(k, (1.0 - mass) / (k - 1))
    v[target] = mass
    return v


class MockClassifier(Classifier):
    reentrant = True

    def __init__(self, spec: MockSpec):
        self.spec = spec
        self.num_classes = spec.num_classes
        self._labels: dict[bytes, int] = {}

    def register(self, data: Dataset) -> "MockClassifier":
        """Remember true labels so ``echo`` behavior can answer for these images."""
        for img, label in zip(data.images, data.labels):
            self._labels[img.tobytes()] = int(label)
        return self

    def has_trigger(self, image: Image) -> bool:
        """Exact pixel match of the trigger pattern wherever its weight is positive."""
        t = self.spec.trigger
        if t is None or image.pixels.shape != t.pattern.pixels.shape:
            return False
        m = t.mask
        return bool(np.array_equal(image.pixels[m], t.pattern.pixels[m]))

    def _rng(self, image: Image) -> np.random.Generator:
        digest = hashlib.blake2b(image.pixels.tobytes(), digest_size=8).digest()
        return np.random.default_rng([self.spec.seed, int.from_bytes(digest, "little")])

    def _clean(self, image: Image) -> np.ndarray:
        k = self.num_classes
        if self.spec.clean_behavior == "echo":
            label = self._labels.get(image.pixels.tobytes())
            if label is not None:
                return _one_hot(k, label)
        return np.full(k, 1.0 / k)

    def posterior(self, image: Image) -> np.ndarray:
        s = self.spec
        k = self.num_classes
        if s.kind == "uniform":
            return np.full(k, 1.0 / k)
        if s.kind == "constant":
            return _one_hot(k, s.constant_label)
        if s.kind == "echo":
            return self._clean(image)
        if s.kind == "perfect_backdoor":
            return _one_hot(k, s.target_label) if self.has_trigger(image) else self._clean(image)
        # stochastic_gap: benign images sit at a fixed target mass, triggered ones add a Gaussian gap.
        base = min(max(0.5 - s.gap_mean / 2.0, 0.0), 1.0)
        if not self.has_trigger(image):
            return _with_target_mass(k, s.target_label, base)
        gap = self._rng(image).normal(s.gap_mean, s.gap_std)
        return _with_target_mass(k, s.target_label, min(max(base + gap, 0.0), 1.0))


def make_mock(spec: MockSpec) -> MockClassifier:
    return MockClassifier(spec)
