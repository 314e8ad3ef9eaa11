"""Run configuration loaded from a single JSON document.

Label fields (``target_label``, ``source_label``) are read in the document's
declared ``label_base``: with ``"label_base": 1`` a target of 1 means the
first class, internal label 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from datamark.datasets import SyntheticSpec
from datamark.model.network import Architecture, TrainConfig
from datamark.verify import ANY_NONTARGET, VerificationConfig
from datamark.watermark import Trigger, make_line_trigger, make_square_trigger


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass
class TriggerSpec:
    kind: str = "square"
    geometry: dict[str, Any] = field(default_factory=dict)
    intensity: int | None = None
    blend_value: float = 1.0

    def build(self, shape) -> Trigger:
        kw = dict(self.geometry)
        if self.intensity is not None:
            kw["intensity"] = self.intensity
        kw["blend_value"] = self.blend_value
        if self.kind == "square":
            return make_square_trigger(shape, **kw)
        if self.kind == "line":
            return make_line_trigger(shape, **kw)
        raise ValueError(f"unknown trigger kind {self.kind!r}")


@dataclass
class DataSection:
    format: str = "synthetic"
    train: str | None = None
    train_labels: str | None = None
    test: str | None = None
    test_labels: str | None = None
    num_classes: int | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class WatermarkSection:
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    rate: float = 0.05
    target_label: int = 1
    seed: int = 0
    exclude_target_labeled: bool = False


@dataclass
class TrainingSection:
    arch: Architecture = field(default_factory=Architecture)
    config: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    repetitions: int = 100
    output_dir: str | None = None


def _take(d: dict, path: str, allowed: set[str]) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    return d


def _build(path: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


def parse_run_config(doc: dict) -> RunConfig:
    doc = _take(doc, "config", {"label_base", "data", "watermark", "training", "verification", "output_dir"})
    base = doc.get("label_base")
    if base not in (0, 1):
        raise ConfigError("label_base", "must be given explicitly as 0 or 1")

    d = _take(doc.get("data", {}), "data", {"format", "train", "train_labels", "test", "test_labels", "num_classes", "synthetic"})
    syn = d.get("synthetic", {})
    _take(syn, "data.synthetic", set(SyntheticSpec.__dataclass_fields__))
    if "shape" in syn:
        syn = {**syn, "shape": tuple(syn["shape"])}
    if syn.get("base_colors") is not None:
        syn = {**syn, "base_colors": tuple(tuple(c) for c in syn["base_colors"])}
    data = DataSection(
        **{k: v for k, v in d.items() if k != "synthetic"},
        synthetic=_build("data.synthetic", SyntheticSpec, **syn),
    )
    if data.format != "synthetic" and (data.train is None or data.test is None):
        raise ConfigError("data.train", f"format {data.format!r} needs train and test paths")

    w = _take(doc.get("watermark", {}), "watermark", {"trigger", "rate", "target_label", "seed", "exclude_target_labeled"})
    t = _take(w.get("trigger", {}), "watermark.trigger", {"kind", "geometry", "intensity", "blend_value"})
    trig = TriggerSpec(**t)
    if trig.kind not in ("square", "line"):
        raise ConfigError("watermark.trigger.kind", f"unknown trigger kind {trig.kind!r}")
    if not 0 < trig.blend_value <= 1:
        raise ConfigError("watermark.trigger.blend_value", "must be in (0, 1]")
    target = w.get("target_label", 1 + base)
    if not isinstance(target, int):
        raise ConfigError("watermark.target_label", "must be an integer")
    if target - base < 0:
        raise ConfigError("watermark.target_label", f"below label_base {base}")
    rate = w.get("rate", 0.05)
    if not isinstance(rate, (int, float)) or not 0 <= rate <= 1:
        raise ConfigError("watermark.rate", f"must be in [0, 1], got {rate!r}")
    wm = WatermarkSection(trig, float(rate), target - base, int(w.get("seed", 0)), bool(w.get("exclude_target_labeled", False)))

    tr = _take(doc.get("training", {}), "training", {"arch", "hidden", "conv_filters"} | set(TrainConfig.__dataclass_fields__))
    arch = _build(
        "training.arch",
        Architecture,
        hidden=tuple(tr.get("hidden", [64] if tr.get("arch", "mlp") == "mlp" else [])),
        conv_filters=int(tr.get("conv_filters", 8 if tr.get("arch") == "conv" else 0)),
    )
    if tr.get("arch", "mlp") not in ("mlp", "linear", "conv"):
        raise ConfigError("training.arch", f"unknown architecture {tr['arch']!r}")
    tc = _build("training", TrainConfig, **{k: v for k, v in tr.items() if k in TrainConfig.__dataclass_fields__})

    v = dict(_take(doc.get("verification", {}), "verification", set(VerificationConfig.__dataclass_fields__) | {"repetitions"}))
    reps = v.pop("repetitions", 100)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("verification.repetitions", "must be a positive integer")
    src = v.get("source_label")
    if isinstance(src, int):
        v["source_label"] = src - base
        if src - base == wm.target_label:
            raise ConfigError("verification.source_label", "must differ from watermark.target_label")
    elif src not in (None, ANY_NONTARGET):
        raise ConfigError("verification.source_label", f"must be an integer, null or {ANY_NONTARGET!r}")
    ver = _build("verification", VerificationConfig, **v)

    cfg = RunConfig(data, wm, TrainingSection(arch, tc), ver, reps, doc.get("output_dir"))
    k = data.num_classes if data.format != "synthetic" else data.synthetic.num_classes
    if k is not None and wm.target_label >= k:
        raise ConfigError("watermark.target_label", f"must be below the class count {k}")
    if data.format == "synthetic":
        _build("watermark.trigger", trig.build, data.synthetic.shape)
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}") from None
    return parse_run_config(doc)
