"""A small numpy classifier trained with mini-batch SGD and momentum.

Layers: an optional 3x3 same-padded convolution + ReLU + 2x2 max-pool front
end, then ``len(hidden)`` dense+ReLU layers and a dense softmax head.  All
arithmetic is float64; inputs are pixels divided by 255.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from datamark.core import Dataset, Image, LabeledImage, dims_to_array_shape, softmax, validate_posterior
from datamark.model.base import Classifier

log = logging.getLogger(__name__)

PARAMS_FORMAT = "datamark-mininet"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    hidden: tuple[int, ...] = (64,)
    conv_filters: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer widths must be positive")
        if self.conv_filters < 0:
            raise ValueError("conv_filters must be non-negative")

    @classmethod
    def linear(cls) -> "Architecture":
        return cls(hidden=())

    @classmethod
    def mlp(cls, units: int = 64) -> "Architecture":
        return cls(hidden=(units,))

    @classmethod
    def conv(cls, filters: int = 8, hidden: Sequence[int] = ()) -> "Architecture":
        return cls(hidden=tuple(hidden), conv_filters=filters)

    @classmethod
    def from_name(cls, name: str, hidden: int = 64) -> "Architecture":
        if name == "linear":
            return cls.linear()
        if name == "mlp":
            return cls.mlp(hidden)
        if name == "conv":
            return cls.conv()
        raise ValueError(f"unknown architecture {name!r} (expected linear, mlp or conv)")

    def to_dict(self) -> dict:
        return {"hidden": list(self.hidden), "conv_filters": self.conv_filters}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(hidden=tuple(d.get("hidden", ())), conv_filters=int(d.get("conv_filters", 0)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    weight_init_scale: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite non-negative number")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class MiniNetParams:
    arch: Architecture
    input_shape: tuple[int, int, int]  # (C, W, H)
    num_classes: int
    weights: dict[str, np.ndarray]
    train_config: TrainConfig | None = None
    loss_history: list[float] = field(default_factory=list)

    def layer_names(self) -> list[str]:
        return list(self.weights)

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())

    def copy(self) -> "MiniNetParams":
        return MiniNetParams(
            self.arch,
            self.input_shape,
            self.num_classes,
            {k: v.copy() for k, v in self.weights.items()},
            self.train_config,
            list(self.loss_history),
        )

    def to_dict(self) -> dict:
        return {
            "format": PARAMS_FORMAT,
            "version": PARAMS_VERSION,
            "arch": self.arch.to_dict(),
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [
                {"name": k, "shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.weights.items()
            ],
            "train_config": asdict(self.train_config) if self.train_config else None,
            "seed": self.train_config.seed if self.train_config else None,
            "loss_history": self.loss_history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MiniNetParams":
        if d.get("format") != PARAMS_FORMAT or d.get("version") != PARAMS_VERSION:
            raise ValueError(f"not a {PARAMS_FORMAT} v{PARAMS_VERSION} document")
        weights = {}
        for layer in d["layers"]:
            a = np.asarray(layer["values"], dtype=np.float64)
            weights[layer["name"]] = a.reshape(layer["shape"])
        tc = d.get("train_config")
        params = cls(
            Architecture.from_dict(d["arch"]),
            tuple(d["input_shape"]),
            int(d["num_classes"]),
            weights,
            TrainConfig(**tc) if tc else None,
            list(d.get("loss_history", [])),
        )
        expected = {k: v.shape for k, v in init_params(params.arch, params.input_shape, params.num_classes).weights.items()}
        got = {k: v.shape for k, v in weights.items()}
        if expected != got:
            raise ValueError(f"layer shapes {got} do not match architecture {expected}")
        if not all(np.all(np.isfinite(v)) for v in weights.values()):
            raise ValueError("parameters contain non-finite values")
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "MiniNetParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _flat_features(arch: Architecture, input_shape) -> int:
    c, h, w = dims_to_array_shape(input_shape)
    if arch.conv_filters:
        if h < 2 or w < 2:
            raise ValueError("conv front end needs images of at least 2x2")
        return arch.conv_filters * (h // 2) * (w // 2)
    return c * h * w


def init_params(
    arch: Architecture, input_shape, num_classes: int, scale: float = 1.0, rng: np.random.Generator | None = None
) -> MiniNetParams:
    """Weights uniform in [-s, s], s = scale / sqrt(fan_in); biases zero.

    Without ``rng`` every weight is zero (handy for hand-set tests).
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    c, _, _ = dims_to_array_shape(input_shape)

    def draw(shape, fan_in):
        if rng is None:
            return np.zeros(shape)
        s = scale / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    weights: dict[str, np.ndarray] = {}
    if arch.conv_filters:
        weights["conv.W"] = draw((arch.conv_filters, c, 3, 3), c * 9)
        weights["conv.b"] = np.zeros(arch.conv_filters)
    width = _flat_features(arch, input_shape)
    for i, units in enumerate(arch.hidden):
        weights[f"dense{i}.W"] = draw((width, units), width)
        weights[f"dense{i}.b"] = np.zeros(units)
        width = units
    weights["out.W"] = draw((width, num_classes), width)
    weights["out.b"] = np.zeros(num_classes)
    return MiniNetParams(arch, tuple(int(v) for v in input_shape), num_classes, weights)


def _conv_cols(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*9) patches of the zero-padded input."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _forward(params: MiniNetParams, x: np.ndarray):
    """x: (N, C, H, W) floats.  Returns logits and the activation cache."""
    wts = params.weights
    cache: dict = {"n": len(x)}
    h = x
    if params.arch.conv_filters:
        n, c, hh, ww = x.shape
        f = params.arch.conv_filters
        cols = _conv_cols(x)
        z = cols @ wts["conv.W"].reshape(f, -1).T + wts["conv.b"]
        z = z.reshape(n, hh, ww, f).transpose(0, 3, 1, 2)
        a = np.maximum(z, 0.0)
        h2, w2 = hh // 2, ww // 2
        a = a[:, :, : 2 * h2, : 2 * w2]
        blocks = a.reshape(n, f, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, f, h2, w2, 4)
        arg = blocks.argmax(axis=-1)
        pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        cache.update(cols=cols, conv_z=z, pool_arg=arg, conv_hw=(hh, ww))
        h = pooled
    h = h.reshape(len(x), -1)
    acts = [h]
    for i in range(len(params.arch.hidden)):
        h = np.maximum(h @ wts[f"dense{i}.W"] + wts[f"dense{i}.b"], 0.0)
        acts.append(h)
    logits = h @ wts["out.W"] + wts["out.b"]
    cache["acts"] = acts
    return logits, cache


def _backward(params: MiniNetParams, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    wts = params.weights
    acts = cache["acts"]
    grads: dict[str, np.ndarray] = {}
    grads["out.W"] = acts[-1].T @ dlogits
    grads["out.b"] = dlogits.sum(axis=0)
    dh = dlogits @ wts["out.W"].T
    for i in reversed(range(len(params.arch.hidden))):
        dz = dh * (acts[i + 1] > 0)
        grads[f"dense{i}.W"] = acts[i].T @ dz
        grads[f"dense{i}.b"] = dz.sum(axis=0)
        dh = dz @ wts[f"dense{i}.W"].T
    if params.arch.conv_filters:
        n = cache["n"]
        f = params.arch.conv_filters
        hh, ww = cache["conv_hw"]
        arg = cache["pool_arg"]
        h2, w2 = arg.shape[2], arg.shape[3]
        dpool = dh.reshape(n, f, h2, w2)
        dblocks = np.zeros((n, f, h2, w2, 4))
        np.put_along_axis(dblocks, arg[..., None], dpool[..., None], axis=-1)
        da = np.zeros((n, f, hh, ww))
        da[:, :, : 2 * h2, : 2 * w2] = (
            dblocks.reshape(n, f, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, f, 2 * h2, 2 * w2)
        )
        dz = da * (cache["conv_z"] > 0)
        dz_flat = dz.transpose(0, 2, 3, 1).reshape(-1, f)
        grads["conv.W"] = (dz_flat.T @ cache["cols"]).reshape(wts["conv.W"].shape)
        grads["conv.b"] = dz_flat.sum(axis=0)
    return grads


def loss_and_grads(params: MiniNetParams, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    logits, cache = _forward(params, x)
    probs = softmax(logits)
    n = len(x)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, _backward(params, cache, dlogits)


def loss_only(params: MiniNetParams, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = _forward(params, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(x)), y]))


def scale_pixels(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) / 255.0


def train(train_set: Dataset, arch: Architecture, config: TrainConfig = TrainConfig()) -> MiniNetParams:
    """Minimize cross-entropy by mini-batch SGD with momentum.

    One generator seeded by ``config.seed`` draws the initial weights and
    then the per-epoch shuffles, so runs are bit-reproducible.
    """
    rng = np.random.default_rng(config.seed)
    params = init_params(arch, train_set.shape, train_set.num_classes, config.weight_init_scale, rng)
    params.train_config = config
    x_all = scale_pixels(train_set.images)
    y_all = train_set.labels
    velocity = {k: np.zeros_like(v) for k, v in params.weights.items()}
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = loss_and_grads(params, x_all[idx], y_all[idx])
            except ValueError as e:  # softmax refuses non-finite logits
                raise TrainingDivergedError(f"non-finite logits at epoch {epoch}, batch {b}") from e
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            total += loss * len(idx)
            for k, g in grads.items():
                v = velocity[k]
                v *= config.momentum
                v -= config.learning_rate * g
                params.weights[k] += v
        epoch_loss = total / n
        params.loss_history.append(epoch_loss)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, epoch_loss)
    return params


def predict_logits(params: MiniNetParams, images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    expected = dims_to_array_shape(params.input_shape)
    if x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {expected}")
    logits, _ = _forward(params, scale_pixels(x))
    return logits


def predict_posterior(params: MiniNetParams, image: Image) -> np.ndarray:
    probs = softmax(predict_logits(params, image.pixels)[0])
    return validate_posterior(probs, 1e-9, params.num_classes)


class MiniNetClassifier(Classifier):
    reentrant = True

    def __init__(self, params: MiniNetParams):
        self.params = params
        self.num_classes = params.num_classes

    def posterior(self, image: Image) -> np.ndarray:
        return predict_posterior(self.params, image)

    def posterior_batch(self, images: np.ndarray) -> np.ndarray:
        return softmax(predict_logits(self.params, images))


def accuracy(params: MiniNetParams, data: Dataset) -> float:
    pred = predict_logits(params, data.images).argmax(axis=1)
    return float(np.mean(pred == data.labels))


def gradient_errors(params: MiniNetParams, x: np.ndarray, y: np.ndarray, step: float = 1e-4):
    """Analytic and central-difference gradients for every parameter."""
    _, analytic = loss_and_grads(params, x, y)
    numeric = {}
    for name, w in params.weights.items():
        g = np.zeros_like(w)
        flat = w.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_only(params, x, y)
            flat[i] = orig - step
            down = loss_only(params, x, y)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        numeric[name] = g
    return analytic, numeric


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
            raise ArithmeticError(f"non-finite gradient in {name}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradient_check(
    arch: Architecture,
    sample: LabeledImage,
    seed: int = 0,
    num_classes: int | None = None,
    max_params: int = 5000,
) -> float:
    """Max relative error between backprop and finite-difference gradients.

    Inputs are shifted by +1e-3 after scaling so no ReLU sits on its kink.
    """
    k = num_classes if num_classes is not None else max(2, sample.label + 1)
    params = init_params(arch, sample.image.shape, k, 1.0, np.random.default_rng(seed))
    if params.num_parameters() > max_params:
        raise ValueError(f"{params.num_parameters()} parameters exceeds the gradient-check limit of {max_params}")
    x = scale_pixels(sample.image.pixels[None]) + 1e-3
    y = np.array([sample.label])
    analytic, numeric = gradient_errors(params, x, y)
    return max_relative_error(analytic, numeric)
