"""Triggers, pixel blending, and construction of watermarked datasets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from datamark.core import Dataset, Image, dims_to_array_shape, round_half_away

log = logging.getLogger(__name__)

KEY_VERSION = 1
CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")


@dataclass(frozen=True, eq=False)
class Trigger:
    """Pattern ``t`` plus per-pixel blend weights ``lambda``, both (C, H, W).

    ``recipe`` records how the trigger was built (kind and geometry) so a key
    file can regenerate it bit-exactly.  Hand-made triggers have no recipe
    and are serialized with their full arrays.
    """

    pattern: Image
    blend_weights: np.ndarray
    recipe: dict[str, Any] | None = field(default=None, compare=False)

    def __post_init__(self):
        w = np.array(self.blend_weights, dtype=np.float64, copy=True)
        if w.shape != self.pattern.pixels.shape:
            raise ValueError(
                f"blend weights shape {w.shape} does not match pattern shape {self.pattern.pixels.shape}"
            )
        if not np.all(np.isfinite(w)) or w.min() < 0 or w.max() > 1:
            raise ValueError("blend weights must lie in [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "blend_weights", w)

    @property
    def shape(self):
        return self.pattern.shape

    @property
    def mask(self) -> np.ndarray:
        return self.blend_weights > 0

    def __eq__(self, other):
        if not isinstance(other, Trigger):
            return NotImplemented
        return self.pattern == other.pattern and np.array_equal(self.blend_weights, other.blend_weights)


@dataclass(frozen=True)
class WatermarkKey:
    """The protector's secret: a trigger and the label it maps to."""

    trigger: Trigger
    target_label: int

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "version": KEY_VERSION,
            "target_label": int(self.target_label),
            "shape": list(self.trigger.shape),
        }
        recipe = self.trigger.recipe
        if recipe is None:
            d["trigger_kind"] = "custom"
            d["pattern"] = self.trigger.pattern.flat()
            d["blend_weights"] = self.trigger.blend_weights.ravel().tolist()
        else:
            d.update(recipe)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkKey":
        d = dict(d)
        version = d.pop("version", None)
        if version != KEY_VERSION:
            raise ValueError(f"unsupported key version {version!r} (expected {KEY_VERSION})")
        try:
            target = int(d.pop("target_label"))
            shape = tuple(d.pop("shape"))
            kind = d.pop("trigger_kind")
        except KeyError as e:
            raise ValueError(f"key is missing field {e}") from None
        if kind == "square":
            trigger = make_square_trigger(shape, **d)
        elif kind == "line":
            trigger = make_line_trigger(shape, **d)
        elif kind == "custom":
            arr_shape = dims_to_array_shape(shape)
            trigger = Trigger(
                Image.from_flat(shape, d["pattern"]),
                np.asarray(d["blend_weights"], dtype=np.float64).reshape(arr_shape),
            )
        else:
            raise ValueError(f"unknown trigger_kind {kind!r}")
        if target < 0:
            raise ValueError("target_label must be non-negative")
        return cls(trigger, target)

    @classmethod
    def from_json(cls, text: str) -> "WatermarkKey":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class WatermarkConfig:
    rate: float
    seed: int = 0
    exclude_target_labeled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"watermarking rate must be in [0, 1], got {self.rate}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _check_blend_value(blend_value: float) -> float:
    b = float(blend_value)
    if not 0.0 < b <= 1.0:
        raise ValueError(f"blend_value must be in (0, 1], got {blend_value}")
    return b


def _check_intensity(intensity: int) -> int:
    i = int(intensity)
    if not 0 <= i <= 255:
        raise ValueError(f"intensity must be in [0, 255], got {intensity}")
    return i


def _stamp(shape, region, intensity: int, blend_value: float, recipe: dict) -> Trigger:
    arr_shape = dims_to_array_shape(shape)
    pattern = np.zeros(arr_shape, dtype=np.uint8)
    weights = np.zeros(arr_shape, dtype=np.float64)
    pattern[(slice(None),) + region] = intensity
    weights[(slice(None),) + region] = blend_value
    return Trigger(Image(pattern), weights, recipe)


def make_square_trigger(
    shape: Sequence[int],
    side: int = 3,
    corner: str = "bottom_right",
    offset: Sequence[int] = (1, 1),
    intensity: int = 255,
    blend_value: float = 1.0,
) -> Trigger:
    """Square patch of ``side`` pixels anchored at a corner.

    ``offset`` is (dx, dy), the distance in pixels from the chosen corner,
    measured inward.  The patch covers every channel.
    """
    c, w, h = (int(v) for v in shape)
    side = int(side)
    dx, dy = (int(v) for v in offset)
    intensity = _check_intensity(intensity)
    blend_value = _check_blend_value(blend_value)
    if corner not in CORNERS:
        raise ValueError(f"corner must be one of {CORNERS}, got {corner!r}")
    if side < 1 or dx < 0 or dy < 0 or side + dx > w or side + dy > h:
        raise ValueError(f"square of side {side} at offset ({dx}, {dy}) does not fit a {w}x{h} image")
    top = dy if corner.startswith("top") else h - dy - side
    left = dx if corner.endswith("left") else w - dx - side
    recipe = {
        "trigger_kind": "square",
        "side": side,
        "corner": corner,
        "offset": [dx, dy],
        "intensity": intensity,
        "blend_value": blend_value,
    }
    return _stamp(shape, (slice(top, top + side), slice(left, left + side)), intensity, blend_value, recipe)


def make_line_trigger(
    shape: Sequence[int],
    width: int = 3,
    orientation: str = "horizontal",
    position: int | None = None,
    intensity: int = 0,
    blend_value: float = 1.0,
) -> Trigger:
    """Full-length band ``width`` pixels thick.

    ``position`` is the first row (horizontal) or column (vertical) of the
    band; by default the band occupies the last rows/columns.
    """
    c, w, h = (int(v) for v in shape)
    width = int(width)
    intensity = _check_intensity(intensity)
    blend_value = _check_blend_value(blend_value)
    if orientation not in ("horizontal", "vertical"):
        raise ValueError(f"orientation must be horizontal or vertical, got {orientation!r}")
    extent = h if orientation == "horizontal" else w
    if position is None:
        position = extent - width
    position = int(position)
    if width < 1 or position < 0 or position + width > extent:
        raise ValueError(f"band of width {width} at {position} does not fit extent {extent}")
    band = slice(position, position + width)
    region = (band, slice(None)) if orientation == "horizontal" else (slice(None), band)
    recipe = {
        "trigger_kind": "line",
        "width": width,
        "orientation": orientation,
        "position": position,
        "intensity": intensity,
        "blend_value": blend_value,
    }
    return _stamp(shape, region, intensity, blend_value, recipe)


def blend_array(pixels: np.ndarray, trigger: Trigger) -> np.ndarray:
    """Blend the trigger into one image (C, H, W) or a batch (N, C, H, W)."""
    x = np.asarray(pixels)
    if x.shape[-3:] != trigger.pattern.pixels.shape:
        raise ValueError(f"image shape {x.shape[-3:]} does not match trigger shape {trigger.pattern.pixels.shape}")
    lam = trigger.blend_weights
    mixed = (1.0 - lam) * x + lam * trigger.pattern.pixels
    return np.clip(round_half_away(mixed), 0, 255).astype(np.uint8)


def blend(benign: Image, trigger: Trigger) -> Image:
    return Image(blend_array(benign.pixels, trigger))


def watermark_dataset(train: Dataset, key: WatermarkKey, config: WatermarkConfig) -> tuple[Dataset, list[int]]:
    """Replace a seeded random subset of ``train`` with triggered, relabeled copies.

    Returns the watermarked dataset (same ordering as the input) and the
    sorted indices of the modified samples.  The number modified is
    ``round(rate * N)`` with ties away from zero.
    """
    if not 0 <= key.target_label < train.num_classes:
        raise ValueError(f"target_label {key.target_label} outside [0, {train.num_classes - 1}]")
    if key.trigger.pattern.pixels.shape != train.images.shape[1:]:
        raise ValueError(f"trigger shape {key.trigger.shape} does not match dataset shape {train.shape}")
    n = len(train)
    if config.rate > 0 and config.rate * n < 1:
        log.warning("rate %g on %d samples selects fewer than one sample; nothing modified", config.rate, n)
        count = 0
    else:
        count = int(round_half_away(config.rate * n))
    if count == 0:
        return train, []

    candidates = np.arange(n)
    if config.exclude_target_labeled:
        candidates = candidates[train.labels != key.target_label]
    if count > len(candidates):
        raise ValueError(f"cannot select {count} samples from {len(candidates)} candidates")
    rng = np.random.default_rng(config.seed)
    # A prefix of one permutation: for a fixed seed, larger rates poison supersets.
    chosen = np.sort(rng.permutation(candidates)[:count])
    triggered = blend_array(train.images[chosen], key.trigger)
    out = train.with_replaced(chosen, triggered, key.target_label)
    return out, chosen.tolist()


def watermark_testset(test: Dataset, key: WatermarkKey) -> Dataset:
    """Trigger every test image not already of the target class; labels are kept."""
    if key.trigger.pattern.pixels.shape != test.images.shape[1:]:
        raise ValueError(f"trigger shape {key.trigger.shape} does not match dataset shape {test.shape}")
    keep = np.flatnonzero(test.labels != key.target_label)
    if len(keep) == 0:
        raise ValueError("no test samples outside the target class; watermarked test set would be empty")
    return Dataset(blend_array(test.images[keep], key.trigger), test.labels[keep], test.num_classes)
